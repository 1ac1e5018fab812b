"""Compound loss values/gradients and the nested-region label algebra."""
import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xdseg.errors import ValidationError
from xdseg.labels import (RegionChannels, binarize, reconstruct_labels,
                          region_remap)
from xdseg.losses import LossConfig, compound_loss, dice_score_term

from conftest import fd_gradient, rel_err


# ------------------------------------------------------------------- loss

def test_loss_on_perfect_prediction_is_tiny():
    target = np.zeros((1, 1, 4, 4))
    target[0, 0, 1:3, 1:3] = 1.0
    cfg = LossConfig(log_floor=1e-12)
    loss, _ = compound_loss(target.copy(), target, cfg)
    assert 0.0 <= loss <= 1e-4


def test_loss_hand_value_uniform_half():
    # pred = 0.5 everywhere, target half-ones over 4 voxels, one class:
    # dice term: 1 - 2*(2*0.5)/(2 + 2) = 0.5; bce term: -log(0.5) = ln 2
    pred = np.full((1, 1, 2, 2), 0.5)
    target = np.zeros_like(pred)
    target[0, 0, 0] = 1.0
    loss, _ = compound_loss(pred, target, LossConfig(epsilon=1e-12))
    assert abs(loss - (0.5 + math.log(2))) < 1e-9


def test_loss_gradient_matches_fd(rng):
    pred = rng.uniform(0.05, 0.95, size=(2, 2, 3, 3))
    target = (rng.random(pred.shape) > 0.5).astype(float)
    cfg = LossConfig()
    _, grad = compound_loss(pred, target, cfg)
    num = fd_gradient(lambda p: compound_loss(p, target, cfg)[0], pred)
    assert rel_err(grad, num) < 1e-6


def test_single_voxel_flip_strictly_increases_loss(rng):
    target = (rng.random((1, 1, 4, 4)) > 0.5).astype(float)
    pred = np.clip(target, 0.02, 0.98)
    base, _ = compound_loss(pred, target, LossConfig())
    for idx in np.ndindex(*target.shape):
        flipped = pred.copy()
        flipped[idx] = 1.0 - flipped[idx]
        worse, _ = compound_loss(flipped, target, LossConfig())
        assert worse > base


def test_loss_rejects_out_of_range_predictions():
    target = np.ones((1, 1, 2, 2))
    with pytest.raises(ValidationError):
        compound_loss(np.full_like(target, 1.5), target, LossConfig())


def test_dice_score_term_perfect_is_one():
    t = np.zeros((1, 1, 4, 4))
    t[0, 0, :2] = 1.0
    assert dice_score_term(t, t) > 0.999


# ------------------------------------------------------------------ labels

def test_region_remap_nesting():
    lab = np.array([[0, 1], [2, 4]], dtype=np.uint8)
    ch = region_remap(lab)
    assert np.array_equal(ch.wt, lab > 0)
    assert np.array_equal(ch.tc, np.isin(lab, (1, 4)))
    assert np.array_equal(ch.et, lab == 4)


def test_region_remap_rejects_unknown_label():
    with pytest.raises(ValidationError):
        region_remap(np.array([[3]]))


def test_reconstruct_repairs_non_nested_channels():
    # an ET voxel outside TC/WT must still come back as label 4 (OR-down)
    ch = RegionChannels(wt=np.zeros((2, 2), bool), tc=np.zeros((2, 2), bool),
                        et=np.eye(2, dtype=bool))
    out, info = reconstruct_labels(ch)
    assert out[0, 0] == 4 and out[1, 1] == 4
    assert out[0, 1] == 0
    assert not info.et_suppressed


def test_et_volume_suppression_to_label_one():
    et = np.zeros((3, 3), bool)
    et[1, 1] = True
    ch = RegionChannels(wt=np.ones((3, 3), bool), tc=np.ones((3, 3), bool),
                        et=et)
    out, info = reconstruct_labels(ch, et_min_volume=2)
    assert info.et_suppressed and info.et_voxels == 1
    assert not np.any(out == 4)
    assert out[1, 1] == 1  # suppressed ET joins the tumor core label


def test_et_volume_unit_mm3():
    et = np.zeros((2, 2), bool)
    et[0, 0] = True
    ch = RegionChannels(wt=np.ones((2, 2), bool), tc=np.ones((2, 2), bool),
                        et=et)
    # one voxel of 2x2 mm = 4 mm^3-equivalents: threshold 3 keeps it
    out, info = reconstruct_labels(ch, et_min_volume=3.0, spacing=(2.0, 2.0),
                                   volume_unit="mm3")
    assert not info.et_suppressed and out[0, 0] == 4


@pytest.mark.parametrize("k", [4, 8])
def test_roundtrip_exhaustive_small(k):
    # every {0,1,2,4}-valued map of k voxels survives remap -> reconstruct
    values = np.array([0, 1, 2, 4], dtype=np.uint8)
    for combo in itertools.product(range(4), repeat=k):
        lab = values[list(combo)].reshape(1, k)
        ch = region_remap(lab)
        out, _ = reconstruct_labels(ch)
        assert np.array_equal(out, lab)


@given(st.integers(0, 3), st.floats(0.05, 0.95))
@settings(max_examples=25, deadline=None)
def test_binarize_threshold_property(seed, thr):
    prob = np.random.default_rng(seed).random((4, 4))
    out = binarize(prob, thr)
    assert np.array_equal(out, prob >= thr)

"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Each criterion re-verifies its claim at the stated tolerance using
independent oracles where applicable; run with ``pytest -v -s`` to see the
summary lines.
"""
import csv
import filecmp
import itertools
import math
import time

import numpy as np
import pytest

import xdseg
from xdseg import data, metrics, ops, synthetic
from xdseg.cli import main as cli_main
from xdseg.graph import init_store, run_backward, run_graph
from xdseg.inflate import inflate_kernel
from xdseg.labels import reconstruct_labels, region_remap
from xdseg.losses import LossConfig, compound_loss
from xdseg.optim import ExpDecaySchedule, LookAhead, Nadam, lr_at
from xdseg.pipeline import train_loop
from xdseg.store import load_checkpoint
from xdseg.tensor import ConvParams, NormParams

from conftest import (allpairs_distances_oracle, fd_gradient, rel_err,
                      surface_oracle)


def _report(name, passed, detail=""):
    status = "PASS" if passed else "FAIL"
    print(f"\n[{status}] {name}" + (f" — {detail}" if detail else ""))
    assert passed, f"{name}: {detail}"


def _tiny(build, **kw):
    base = dict(in_channels=1, n_classes=1, stem_filters=2,
                encoder_widths=(2, 3), output_activation="sigmoid")
    base.update(kw)
    return build(xdseg.ArchConfig(**base))


# ------------------------------------------------------- 1. gradient suite

def test_criterion_1_gradient_suite():
    t0 = time.time()
    rng = np.random.default_rng(0)
    worst_prim = 0.0

    def fd_vs(got, f, x):
        return rel_err(got, fd_gradient(f, x))

    # conv 2D/3D, tconv, norms, activations on random data
    x = rng.standard_normal((1, 2, 6, 6))
    k = rng.standard_normal((2, 2, 3, 3))
    p = ConvParams(kernel=k, stride=2, padding=1)
    out, ctx = ops.conv_forward(x, p)
    w = rng.standard_normal(out.shape)
    gx, gk, _ = ops.conv_backward(ctx, w)
    worst_prim = max(worst_prim, fd_vs(
        gx, lambda v: float((ops.conv_forward(v, p)[0] * w).sum()), x))
    worst_prim = max(worst_prim, fd_vs(
        gk, lambda v: float((ops.conv_forward(
            x, ConvParams(kernel=v, stride=2, padding=1))[0] * w).sum()), k))

    x3 = rng.standard_normal((1, 1, 4, 5, 4))
    k3 = rng.standard_normal((2, 1, 3, 3, 3))
    p3 = ConvParams(kernel=k3, padding=1)
    out3, ctx3 = ops.conv_forward(x3, p3)
    w3 = rng.standard_normal(out3.shape)
    gx3, gk3, _ = ops.conv_backward(ctx3, w3)
    worst_prim = max(worst_prim, fd_vs(
        gx3, lambda v: float((ops.conv_forward(v, p3)[0] * w3).sum()), x3))
    worst_prim = max(worst_prim, fd_vs(
        gk3, lambda v: float((ops.conv_forward(
            x3, ConvParams(kernel=v, padding=1))[0] * w3).sum()), k3))

    kt = rng.standard_normal((2, 3, 2, 2))
    xt = rng.standard_normal((1, 2, 4, 4))
    pt = ConvParams(kernel=kt, stride=2)
    outt, ctxt = ops.transposed_conv_forward(xt, pt)
    wt = rng.standard_normal(outt.shape)
    gxt, gkt, _ = ops.transposed_conv_backward(ctxt, wt)
    worst_prim = max(worst_prim, fd_vs(
        gxt, lambda v: float((ops.transposed_conv_forward(v, pt)[0] * wt).sum()),
        xt))
    worst_prim = max(worst_prim, fd_vs(
        gkt, lambda v: float((ops.transposed_conv_forward(
            xt, ConvParams(kernel=v, stride=2))[0] * wt).sum()), kt))

    for mode in ("batch", "instance"):
        xn = rng.standard_normal((3, 2, 5, 5))
        pn = NormParams(gamma=np.ones(2) + 0.3, beta=np.zeros(2), mode=mode)
        outn, ctxn = ops.normalize_forward(xn, pn)
        wn = rng.standard_normal(outn.shape)
        gxn, _, _ = ops.normalize_backward(ctxn, wn)
        worst_prim = max(worst_prim, fd_vs(
            gxn, lambda v: float((ops.normalize_forward(v, pn)[0] * wn).sum()),
            xn))

    for kind in ("relu", "silu", "sigmoid", "softmax"):
        xa = rng.standard_normal((2, 3, 4, 4))
        if kind == "relu":
            xa += 0.05 * np.sign(xa)
        outa, ctxa = ops.activation_forward(xa, kind)
        wa = rng.standard_normal(outa.shape)
        ga = ops.activation_backward(ctxa, wa)
        worst_prim = max(worst_prim, fd_vs(
            ga, lambda v: float((ops.activation_forward(v, kind)[0] * wa).sum()),
            xa))

    # end-to-end: each full toy architecture, <= 5k parameters
    worst_e2e = 0.0
    nets = [
        (xdseg.build_omnia_net, dict(input_extents=(8, 8)), (1, 1, 8, 8)),
        (xdseg.build_ds_net, dict(input_extents=(8, 8, 8), depth_fold=4,
                                  depth_widths=(3, 2), encoder_widths=(3, 4)),
         (1, 1, 8, 8, 8)),
        (xdseg.build_dx_net, dict(input_extents=(8, 8, 8)), (1, 1, 8, 8, 8)),
    ]
    for build, kw, shape in nets:
        g = _tiny(build, **kw)
        assert xdseg.count_params(g) <= 5000
        s = init_store(g, seed=0, dtype=np.float64)
        x = rng.standard_normal(shape)
        y = (rng.random(shape) > 0.5).astype(float)

        def loss_now():
            out, tape = run_graph(g, s, x, mode="train")
            loss, gp = compound_loss(out, y, LossConfig())
            return loss, tape, gp

        _, tape, gp = loss_now()
        grads, _ = run_backward(tape, gp)
        probe = np.random.default_rng(5)
        for name in sorted(grads):
            arr = s[name]
            for _ in range(2):
                idx = tuple(int(probe.integers(d)) for d in arr.shape)
                h = 1e-6 * max(1.0, abs(arr[idx]))
                u = arr.copy()
                u[idx] += h
                s[name] = u
                lp, _, _ = loss_now()
                d = arr.copy()
                d[idx] -= h
                s[name] = d
                lm, _, _ = loss_now()
                s[name] = arr
                num = (lp - lm) / (2 * h)
                denom = max(abs(num), abs(grads[name][idx]), 1e-6)
                worst_e2e = max(worst_e2e, abs(num - grads[name][idx]) / denom)

    elapsed = time.time() - t0
    ok = worst_prim <= 1e-6 and worst_e2e <= 1e-4 and elapsed <= 120
    _report("criterion 1: gradient suite", ok,
            f"primitives {worst_prim:.2e} (<=1e-6), end-to-end "
            f"{worst_e2e:.2e} (<=1e-4), {elapsed:.0f}s (<=120s)")


# ------------------------------------------- 2. inflation equivalence

def test_criterion_2_inflation_equivalence():
    t0 = time.time()
    rng = np.random.default_rng(1)
    worst = 0.0
    for trial in range(20):
        out_ch = int(rng.integers(1, 4))
        in_ch = int(rng.integers(1, 4))
        ksz = int(rng.choice([1, 3]))
        k2 = rng.standard_normal((out_ch, in_ch, ksz, ksz))
        for kd in (1, 2, 3, 5):
            for mode, factor in (("replicate", kd), ("replicate-scaled", 1.0)):
                k3 = inflate_kernel(k2, kd, mode)
                x2 = rng.standard_normal((1, in_ch, 7, 7))
                y2, _ = ops.conv_forward(x2, ConvParams(kernel=k2))
                x3 = np.repeat(x2[:, :, None], kd + 1, axis=2)
                y3, _ = ops.conv_forward(x3, ConvParams(kernel=k3))
                for d in range(y3.shape[2]):
                    worst = max(worst, rel_err(y3[:, :, d], factor * y2))
    elapsed = time.time() - t0
    ok = worst <= 1e-6 and elapsed <= 30
    _report("criterion 2: inflation equivalence", ok,
            f"max rel error {worst:.2e} (<=1e-6), kd in {{1,2,3,5}}, "
            f"{elapsed:.0f}s (<=30s)")


# --------------------------------------------- 3. metric oracle suite

def test_criterion_3_metric_oracles():
    t0 = time.time()
    rng = np.random.default_rng(2)
    worst_dist = 0.0
    exact = True
    n_surface_pairs = 0
    for trial in range(100):
        shape = tuple(int(rng.integers(4, 17)) for _ in range(3))
        a = rng.random(shape) > rng.uniform(0.3, 0.7)
        b = rng.random(shape) > rng.uniform(0.3, 0.7)
        # counting oracles: dice and ravd are exact arithmetic
        inter = int(np.logical_and(a, b).sum())
        na, nb = int(a.sum()), int(b.sum())
        if na + nb > 0:
            exact &= metrics.dice(a, b) == 2.0 * inter / (na + nb)
        if na > 0:
            exact &= metrics.ravd(a, b) == 100.0 * abs(nb - na) / na
        if not (a.any() and b.any()):
            continue
        spacing = tuple(float(rng.choice([0.5, 1.0, 2.0])) for _ in range(3))
        conn = int(rng.choice([6, 26]))
        sa = metrics.extract_surface(a, spacing, conn)
        sb = metrics.extract_surface(b, spacing, conn)
        d = metrics.surface_distances(sa, sb)
        oa = surface_oracle(a, spacing, conn)
        ob = surface_oracle(b, spacing, conn)
        assd, hd = allpairs_distances_oracle(oa, ob)
        worst_dist = max(worst_dist, abs(d["assd"] - assd), abs(d["hd"] - hd),
                         abs(d["mad"] - assd), abs(d["mssd"] - hd))
        n_surface_pairs += 1
    elapsed = time.time() - t0
    ok = exact and worst_dist <= 1e-9 and elapsed <= 120
    _report("criterion 3: metric oracle suite", ok,
            f"dice/ravd exact over 100 pairs, surface distances within "
            f"{worst_dist:.2e} mm (<=1e-9) over {n_surface_pairs} pairs, "
            f"{elapsed:.0f}s (<=120s)")


# -------------------------------------------- 4. loss / label algebra

def test_criterion_4_loss_label_algebra():
    t0 = time.time()
    # perfect prediction
    target = np.zeros((1, 1, 4, 4))
    target[0, 0, :2] = 1.0
    perfect, _ = compound_loss(target.copy(), target,
                               LossConfig(log_floor=1e-12))
    # single-voxel flips strictly increase loss
    pred = np.clip(target, 0.05, 0.95)
    base, _ = compound_loss(pred, target, LossConfig())
    flips_increase = True
    for idx in np.ndindex(*target.shape):
        f = pred.copy()
        f[idx] = 1.0 - f[idx]
        flips_increase &= compound_loss(f, target, LossConfig())[0] > base
    # exhaustive round trip over all 4^8 label maps
    values = np.array([0, 1, 2, 4], dtype=np.uint8)
    roundtrip = True
    for combo in itertools.product(range(4), repeat=8):
        lab = values[list(combo)].reshape(2, 4)
        out, _ = reconstruct_labels(region_remap(lab))
        if not np.array_equal(out, lab):
            roundtrip = False
            break
    elapsed = time.time() - t0
    ok = perfect <= 1e-4 and flips_increase and roundtrip and elapsed <= 60
    _report("criterion 4: loss/label algebra", ok,
            f"perfect-loss {perfect:.1e} (<=1e-4), flips increase: "
            f"{flips_increase}, 4^8 round trip: {roundtrip}, "
            f"{elapsed:.0f}s (<=60s)")


# ------------------------------------------------ 5. optimizer oracle

def test_criterion_5_optimizer_oracle():
    lr, (b1, b2), eps = 0.1, (0.95, 0.99), 1e-8
    theta, m, v = 1.0, 0.0, 0.0
    expected = []
    for t in (1, 2, 3):
        g = 1.0
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** (t + 1))
        direction = b1 * mhat + (1 - b1) * g / (1 - b1 ** t)
        theta -= lr * direction / (math.sqrt(v / (1 - b2 ** t)) + eps)
        expected.append(theta)
    opt = Nadam(lr=lr, betas=(b1, b2), epsilon=eps)
    params = {"w": np.array([1.0])}
    worst = 0.0
    for step in range(3):
        params = opt.step(params, {"w": np.array([1.0])})
        worst = max(worst, abs(params["w"][0] - expected[step]))

    la = LookAhead({"w": np.zeros(1)}, k=6, alpha=0.5)
    commits = []
    fast = {"w": np.zeros(1)}
    for step in range(1, 21):
        fast = {"w": fast["w"] + 1.0}
        before = fast["w"].copy()
        fast = la.step(fast)
        if not np.array_equal(fast["w"], before):
            commits.append(step)

    sched = ExpDecaySchedule(lr0=3e-4, factor=0.95, floor=1e-5)
    lrs = (lr_at(sched, 0), lr_at(sched, 1), lr_at(sched, 67))
    lr_ok = (lrs[0] == 3e-4 and abs(lrs[1] - 2.85e-4) < 1e-19
             and lrs[2] == 1e-5)

    ok = worst <= 1e-12 and commits == [6, 12, 18] and lr_ok
    _report("criterion 5: optimizer oracle", ok,
            f"3-step trace error {worst:.1e} (<=1e-12), commits {commits} "
            f"(expect [6, 12, 18]), lr(0,1,67) = {lrs}")


# -------------------------------------------- 6. overfit smoke tests

def _overfit(build, extents, seed=0, lr=1e-2, max_steps=300, **kw):
    cfg = xdseg.ArchConfig(in_channels=1, n_classes=1, input_extents=extents,
                           output_activation="sigmoid", **kw)
    g = build(cfg)
    s = init_store(g, seed=seed, dtype=np.float32)
    img, mask = synthetic.sphere_case(extents, seed=seed)
    x = img[None].astype(np.float32)
    y = mask[None, None].astype(np.float32)

    class Reached(Exception):
        pass

    state = {"steps": 0, "best": 0.0}

    def cb(step, loss, dice):
        state["steps"] = step
        state["best"] = max(state["best"], dice)
        if dice >= 0.95:
            raise Reached

    try:
        train_loop(g, s, lambda e: [(x, y)] * max_steps, epochs=1,
                   schedule=ExpDecaySchedule(lr0=lr, factor=1.0, floor=1e-8),
                   step_callback=cb)
    except Reached:
        return True, state["steps"]
    return False, state["best"]


def test_criterion_6_overfit_smoke():
    t0 = time.time()
    results = {}
    ok_all = True
    for name, build, extents, kw in [
        ("omnia 64x64", xdseg.build_omnia_net, (64, 64),
         dict(stem_filters=8, encoder_widths=(8, 16))),
        ("ds 32^3", xdseg.build_ds_net, (32, 32, 32),
         dict(stem_filters=8, encoder_widths=(8, 16), depth_fold=8,
              depth_widths=(4, 4, 3))),
        ("dx 32^3", xdseg.build_dx_net, (32, 32, 32),
         dict(stem_filters=4, encoder_widths=(8, 16))),
    ]:
        reached, info = _overfit(build, extents, **kw)
        ok_all &= reached
        results[name] = f"step {info}" if reached else f"best {info:.3f}"
    elapsed = time.time() - t0
    _report("criterion 6: overfit smoke tests", ok_all,
            f"dice>=0.95 within 300 steps — {results}, {elapsed:.0f}s")


# --------------------------------------- 7. transfer-benefit experiment

def test_criterion_7_transfer_benefit(tmp_path):
    from xdseg.experiments import ExperimentConfig, run_transfer_benefit
    t0 = time.time()
    cfg = ExperimentConfig(extents_2d=(16, 16), extents_3d=(16, 16, 16),
                           encoder_widths=(4, 8), stem_filters=4,
                           pretrain_steps=60, max_steps=250, target_dice=0.90,
                           lr=1e-2, seeds=(0, 1, 2), n_cases=2)
    out_csv = tmp_path / "transfer.csv"
    report = run_transfer_benefit(cfg, out_csv=str(out_csv))
    with open(out_csv, newline="") as f:
        rows = list(csv.reader(f))
    header_ok = rows[0] == ["seed", "arm", "steps_to_target", "final_dice"]
    n_arm_rows = sum(1 for r in rows[1:] if len(r) == 4 and r[1] in
                     ("random", "replicate", "replicate-scaled"))
    summary = {r[0]: r[1] for r in rows if len(r) == 2
               and r[0] in ("random", "replicate", "replicate-scaled")}
    means = {arm: report.mean_steps(arm, cfg.max_steps)
             for arm in ("random", "replicate", "replicate-scaled")}
    elapsed = time.time() - t0
    ok = (header_ok and n_arm_rows == 9 and len(report.rows) == 9
          and set(summary) == {"random", "replicate", "replicate-scaled"})
    _report("criterion 7: transfer-benefit experiment", ok,
            f"3 seeds x 3 arms, well-formed CSV; mean steps-to-0.90 "
            f"(direction reported, not asserted): {means}, {elapsed:.0f}s")


# ------------------------------------------------------ 8. determinism

TRAIN_INI = """
[arch]
net = omnia
in_channels = 1
n_classes = 1
input_extents = 32 32
stem_filters = 4
encoder_widths = 4 8
output_activation = sigmoid

[schedule]
policy = exp-decay
lr0 = 0.01

[data]
synthetic = sphere2d
extents = 32 32
n_cases = 2

[run]
epochs = 2
seed = 11
out_dir = {out}
"""


def test_criterion_8_determinism(tmp_path):
    checks = {}
    # training: bitwise-identical checkpoints and logs
    dirs = []
    for tag in ("a", "b"):
        cfg_path = tmp_path / f"{tag}.ini"
        out_dir = tmp_path / tag
        cfg_path.write_text(TRAIN_INI.format(out=out_dir))
        assert cli_main(["train", "--config", str(cfg_path)]) == 0
        dirs.append(out_dir)
    sa = load_checkpoint(dirs[0] / "final.ckpt")
    sb = load_checkpoint(dirs[1] / "final.ckpt")
    checks["checkpoints"] = all(
        np.array_equal(sa[n], sb[n]) for n in sa.names())
    checks["logs"] = filecmp.cmp(dirs[0] / "log.csv", dirs[1] / "log.csv",
                                 shallow=False)
    # fold splits
    ids = [f"c{i}" for i in range(50)]
    checks["folds"] = (data.kfold_split(ids, 5, seed=4)
                       == data.kfold_split(ids, 5, seed=4))
    # augmentations
    rng = np.random.default_rng(0)
    vol = data.LabeledVolume(
        image=rng.standard_normal((1, 16, 16)).astype(np.float32),
        spacing=(1, 1))
    acfg = data.AugmentConfig(p=1.0)
    checks["augment"] = np.array_equal(
        data.augment(vol, acfg, seed=5).image,
        data.augment(vol, acfg, seed=5).image)
    # inference masks (byte-identical output files)
    from xdseg.io import write_nifti
    img, _ = synthetic.sphere_case((32, 32), seed=11000)
    write_nifti(tmp_path / "case.nii", img[0].astype(np.float32))
    data.write_manifest(tmp_path / "m.csv",
                        [data.ManifestRow("c0", [str(tmp_path / "case.nii")])])
    for tag in ("m1", "m2"):
        assert cli_main(["infer", "--config", str(tmp_path / "a.ini"),
                         "--checkpoint", str(dirs[0] / "final.ckpt"),
                         "--manifest", str(tmp_path / "m.csv"),
                         "--out", str(tmp_path / tag)]) == 0
    checks["masks"] = ((tmp_path / "m1" / "c0.nii.gz").read_bytes()
                       == (tmp_path / "m2" / "c0.nii.gz").read_bytes())
    ok = all(checks.values())
    _report("criterion 8: determinism", ok, f"{checks}")


# ---------------------------------------------------- 9. I/O round trips

def test_criterion_9_io_round_trips(tmp_path):
    import gzip
    import struct
    from xdseg.io import read_mhd, read_nifti, write_nifti
    from xdseg.store import save_checkpoint
    checks = {}
    # checkpoint save/load bitwise lossless (dir and tar)
    rng = np.random.default_rng(3)
    store = xdseg.WeightStore()
    store.add("k", "conv-kernel", rng.standard_normal((2, 1, 3, 3))
              .astype(np.float32), 2)
    store.add("g", "norm-gamma", rng.standard_normal(2).astype(np.float64), 2)
    for tag, path in (("dir", tmp_path / "ck"), ("tar", tmp_path / "ck.tar")):
        save_checkpoint(store, path)
        back = load_checkpoint(path)
        checks[f"ckpt-{tag}"] = all(
            np.array_equal(back[n], store[n])
            and back[n].dtype == store[n].dtype for n in store.names())
    # hand-authored NIfTI fixture: exact values and spacing
    hdr = bytearray(348)
    struct.pack_into("<i", hdr, 0, 348)
    struct.pack_into("<8h", hdr, 40, 3, 2, 2, 2, 1, 1, 1, 1)
    struct.pack_into("<h", hdr, 70, 16)
    struct.pack_into("<8f", hdr, 76, 1.0, 1.5, 2.0, 2.5, 1.0, 1.0, 1.0, 1.0)
    struct.pack_into("<f", hdr, 108, 352.0)
    struct.pack_into("<f", hdr, 112, 1.0)
    hdr[344:348] = b"n+1\x00"
    blob = bytes(hdr) + b"\x00" * 4 + np.arange(8, dtype="<f4").tobytes()
    (tmp_path / "v.nii").write_bytes(blob)
    (tmp_path / "v.nii.gz").write_bytes(gzip.compress(blob))
    for suffix in ("v.nii", "v.nii.gz"):
        vol, spacing = read_nifti(tmp_path / suffix)
        checks[suffix] = (np.array_equal(vol.ravel(), np.arange(8))
                          and spacing == (2.5, 2.0, 1.5))
    # writer -> reader round trip
    arr = np.arange(12, dtype=np.float32).reshape(3, 4)
    write_nifti(tmp_path / "w.nii", arr, spacing=(2.0, 3.0))
    back, sp = read_nifti(tmp_path / "w.nii")
    checks["write-read"] = np.array_equal(back, arr) and sp == (2.0, 3.0)
    # hand-authored MHD fixture
    (tmp_path / "m.raw").write_bytes(np.arange(6, dtype="<i2").tobytes())
    (tmp_path / "m.mhd").write_text(
        "NDims = 2\nDimSize = 3 2\nElementSpacing = 1.0 2.0\n"
        "ElementType = MET_SHORT\nElementDataFile = m.raw\n")
    vol, spacing = read_mhd(tmp_path / "m.mhd")
    checks["mhd"] = (np.array_equal(vol, np.arange(6).reshape(2, 3))
                     and spacing == (2.0, 1.0))
    ok = all(checks.values())
    _report("criterion 9: I/O round trips", ok, f"{checks}")

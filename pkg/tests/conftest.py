"""Shared oracles and helpers.

Oracle functions here re-derive results by independent (slow, obvious)
routes — triple loops, all-pairs scans, counting — and never call the
implementation under test.
"""
import numpy as np
import pytest


def conv2d_oracle(x, kernel, bias=None, stride=(1, 1), padding=(0, 0)):
    """Direct quadruple-loop 2D cross-correlation."""
    b, cin, h, w = x.shape
    cout, cin_k, kh, kw = kernel.shape
    assert cin == cin_k
    sh, sw = stride
    ph, pw = padding
    xp = np.pad(x, [(0, 0), (0, 0), (ph, ph), (pw, pw)])
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (w + 2 * pw - kw) // sw + 1
    out = np.zeros((b, cout, oh, ow), dtype=x.dtype)
    for n in range(b):
        for o in range(cout):
            for i in range(oh):
                for j in range(ow):
                    patch = xp[n, :, i * sh:i * sh + kh, j * sw:j * sw + kw]
                    out[n, o, i, j] = np.sum(patch * kernel[o])
            if bias is not None:
                out[n, o] += bias[o]
    return out


def conv3d_oracle(x, kernel, stride=(1, 1, 1), padding=(0, 0, 0)):
    """Direct loop 3D cross-correlation."""
    b, cin, d, h, w = x.shape
    cout, cin_k, kd, kh, kw = kernel.shape
    assert cin == cin_k
    sd, sh, sw = stride
    pd, ph, pw = padding
    xp = np.pad(x, [(0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)])
    od = (d + 2 * pd - kd) // sd + 1
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (w + 2 * pw - kw) // sw + 1
    out = np.zeros((b, cout, od, oh, ow), dtype=x.dtype)
    for n in range(b):
        for o in range(cout):
            for zi in range(od):
                for i in range(oh):
                    for j in range(ow):
                        patch = xp[n, :,
                                   zi * sd:zi * sd + kd,
                                   i * sh:i * sh + kh,
                                   j * sw:j * sw + kw]
                        out[n, o, zi, i, j] = np.sum(patch * kernel[o])
    return out


def fd_gradient(f, x, eps=1e-6):
    """Central finite differences of a scalar function at every element."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        h = eps * max(1.0, abs(x[idx]))
        xp = x.copy()
        xp[idx] += h
        xm = x.copy()
        xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2 * h)
        it.iternext()
    return g


def rel_err(a, b, floor=1e-8):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), floor)
    return float(np.abs(a - b).max(initial=0.0) / denom)


def surface_oracle(mask, spacing, connectivity):
    """All-neighbor scan surface extraction: a foreground voxel is on the
    surface when any neighbor (out-of-bounds counts as background) is
    background."""
    mask = np.asarray(mask, dtype=bool)
    rank = mask.ndim
    if connectivity in (6, 4):
        offs = []
        for ax in range(rank):
            for d in (-1, 1):
                o = [0] * rank
                o[ax] = d
                offs.append(tuple(o))
    else:
        offs = [o for o in np.ndindex(*(3,) * rank)
                if any(v != 1 for v in o)]
        offs = [tuple(v - 1 for v in o) for o in offs]
    pts = []
    for idx in np.argwhere(mask):
        for off in offs:
            nb = tuple(i + d for i, d in zip(idx, off))
            if any(n < 0 or n >= mask.shape[a] for a, n in enumerate(nb)) \
                    or not mask[nb]:
                pts.append(idx)
                break
    pts = np.array(pts, dtype=np.float64).reshape(-1, rank)
    return pts * np.asarray(spacing, dtype=np.float64)


def allpairs_distances_oracle(pa, pb):
    """All-pairs symmetric surface distances: (mad/assd, mssd/hd)."""
    if len(pa) == 0 or len(pb) == 0:
        return float("nan"), float("nan")
    d = np.sqrt(((pa[:, None, :] - pb[None, :, :]) ** 2).sum(-1))
    a2b = d.min(axis=1)
    b2a = d.min(axis=0)
    assd = (a2b.sum() + b2a.sum()) / (len(pa) + len(pb))
    hd = max(a2b.max(), b2a.max())
    return float(assd), float(hd)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

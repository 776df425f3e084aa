"""Independent oracles and fixtures shared by the test modules."""

import itertools

import numpy as np

from edgesegnet.config import (
    BottleneckReductionSpec,
    Edge,
    HeadSpec,
    NetworkConfig,
    RefineSpec,
    ResidualBottleneckSpec,
    StemSpec,
    reference_config,
)
from edgesegnet.explorer import propose


def conv_oracle(x, w, b, stride, pad):
    """Direct summation, one output position at a time, in float64."""
    x = np.asarray(x, np.float64)
    w = np.asarray(w, np.float64)
    n, c, h, wd = x.shape
    co, _, kh, kw = w.shape
    xp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad : pad + h, pad : pad + wd] = x
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, co, ho, wo))
    for i in range(ho):
        for j in range(wo):
            patch = xp[:, :, i * stride : i * stride + kh, j * stride : j * stride + kw]
            out[:, :, i, j] = np.einsum("ncuv,ocuv->no", patch, w)
    if b is not None:
        out += np.asarray(b, np.float64)[None, :, None, None]
    return out


def bilinear_oracle_1d(src, dst):
    """Half-pixel-center interpolation weights, computed per output sample."""
    m = np.zeros((dst, src))
    for i in range(dst):
        pos = (i + 0.5) * src / dst - 0.5
        pos = min(max(pos, 0.0), src - 1)
        lo = int(np.floor(pos))
        hi = min(lo + 1, src - 1)
        t = pos - lo
        m[i, lo] += 1 - t
        m[i, hi] += t
    return m


def bilinear_oracle(x, out_hw):
    mh = bilinear_oracle_1d(x.shape[2], out_hw[0])
    mw = bilinear_oracle_1d(x.shape[3], out_hw[1])
    n, c = x.shape[:2]
    out = np.zeros((n, c) + tuple(out_hw))
    for a, b, i, j in itertools.product(range(n), range(c), range(out_hw[0]), range(out_hw[1])):
        out[a, b, i, j] = sum(
            mh[i, p] * mw[j, q] * x[a, b, p, q]
            for p in np.flatnonzero(mh[i])
            for q in np.flatnonzero(mw[j])
        )
    return out


def brute_confusion(pred, gt, k, ignore=None):
    cm = [[0] * k for _ in range(k)]
    for p, g in zip(np.ravel(pred).tolist(), np.ravel(gt).tolist()):
        if ignore is not None and g == ignore:
            continue
        cm[g][p] += 1
    return cm


def tiny_config(num_classes=3, size=(32, 32)) -> NetworkConfig:
    """Reference topology with every width cut down to a handful of channels."""
    nodes = [
        StemSpec("stem", 8),
        ResidualBottleneckSpec("rb_a1", 8, 2),
        BottleneckReductionSpec("reduce", 8, 4, 16),
        ResidualBottleneckSpec("rb_b1", 16, 2),
        RefineSpec("refine", 16, 8, 8, 8),
        HeadSpec("head", 8, num_classes),
    ]
    edges = [
        Edge("input", "stem"),
        Edge("stem", "rb_a1"),
        Edge("rb_a1", "reduce"),
        Edge("reduce", "rb_b1"),
        Edge("rb_b1", "refine", "deep"),
        Edge("rb_a1", "refine", "skip"),
        Edge("refine", "head"),
    ]
    return NetworkConfig(nodes, edges, [("rb_a1", "refine")], num_classes, input_size=size, name="tiny")


def random_configs(count, seed, start=None, steps=(1, 6)):
    """Configs reached by random mutation walks from ``start``."""
    rng = np.random.default_rng(seed)
    base = start if start is not None else reference_config(3)
    out = []
    for _ in range(count):
        cfg = base.copy()
        for _ in range(int(rng.integers(steps[0], steps[1] + 1))):
            cfg, _ = propose(cfg, rng)
        out.append(cfg)
    return out

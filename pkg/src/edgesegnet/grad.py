"""Reverse-mode rules, per-pixel cross-entropy, momentum SGD and a
finite-difference gradient checker."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Dict, List, Optional

import numpy as np

from .errors import ArgumentError, DataError, ShapeError, UsageError
from .tensor import ConvParams, col2im, conv2d_output_shape, interp_matrices

if TYPE_CHECKING:
    from .network import NetworkGraph

ParamGrads = Dict[str, np.ndarray]


# -- vector-Jacobian products -------------------------------------------------


def conv2d_vjp(x_shape, cols: np.ndarray, p: ConvParams, dy: np.ndarray, need_dx: bool = True):
    """Gradients of :func:`conv2d` given the forward im2col lowering ``cols``.

    Returns ``(dx, dweight, dbias)``; ``dbias`` is None without a bias and
    ``dx`` is None when ``need_dx`` is false.
    """
    co, ci, kh, kw = p.weight.shape
    n = dy.shape[0]
    dy2 = dy.reshape(n, co, -1)
    dw = np.tensordot(dy2, cols, axes=([0, 2], [0, 2])).reshape(p.weight.shape)
    db = dy2.sum(axis=(0, 2)) if p.bias is not None else None
    dx = None
    if need_dx:
        dcols = np.matmul(p.weight.reshape(co, -1).T, dy2)
        dx = col2im(dcols, x_shape, kh, kw, p.stride, p.padding)
    return dx, dw, db


def relu_vjp(out: np.ndarray, dy: np.ndarray) -> np.ndarray:
    return dy * (out > 0)


def resize_bilinear_vjp(dy: np.ndarray, in_hw) -> np.ndarray:
    """Transpose of the separable interpolation operator."""
    mh, mw = interp_matrices(tuple(in_hw), dy.shape[2:], dy.dtype)
    return np.matmul(mh.T, np.matmul(dy, mw))


bilinear_upsample_vjp = resize_bilinear_vjp


def batch_norm_train(x, gamma, beta, eps):
    """Normalize with the batch's own per-channel statistics.

    Returns ``(out, mean, var, cache)`` where ``var`` is the biased
    batch variance.
    """
    mean = x.mean(axis=(0, 2, 3))
    xc = x - mean.reshape(1, -1, 1, 1)
    var = np.mean(xc * xc, axis=(0, 2, 3))
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std.reshape(1, -1, 1, 1)
    out = xhat * gamma.reshape(1, -1, 1, 1) + beta.reshape(1, -1, 1, 1)
    return out, mean, var, (xhat, inv_std)


def batch_norm_train_vjp(cache, gamma, dy):
    xhat, inv_std = cache
    m = dy.shape[0] * dy.shape[2] * dy.shape[3]
    dbeta = dy.sum(axis=(0, 2, 3))
    dgamma = np.sum(dy * xhat, axis=(0, 2, 3))
    scale = (gamma * inv_std / m).reshape(1, -1, 1, 1)
    dx = scale * (m * dy - dbeta.reshape(1, -1, 1, 1) - xhat * dgamma.reshape(1, -1, 1, 1))
    return dx, dgamma, dbeta


def batch_norm_eval_vjp(xhat, gamma, inv_std, dy):
    dbeta = dy.sum(axis=(0, 2, 3))
    dgamma = np.sum(dy * xhat, axis=(0, 2, 3))
    dx = dy * (gamma * inv_std).reshape(1, -1, 1, 1)
    return dx, dgamma, dbeta


# -- loss -----------------------------------------------------------------------


def cross_entropy_loss(logits: np.ndarray, labels: np.ndarray, ignore_label: Optional[int] = None):
    """Mean per-pixel softmax cross-entropy over non-ignored pixels.

    Returns ``(loss, dloss_dlogits)``.
    """
    n, c, h, w = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n, h, w):
        raise ShapeError(f"labels shape {labels.shape} does not match logits {(n, h, w)}")
    valid = np.ones(labels.shape, dtype=bool) if ignore_label is None else labels != ignore_label
    count = int(valid.sum())
    if count == 0:
        raise DataError("every pixel is ignored; loss is undefined")
    if np.any(labels[valid] >= c) or np.any(labels[valid] < 0):
        raise DataError(f"labels must lie in [0, {c}) or equal ignore_label")

    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    denom = exp.sum(axis=1, keepdims=True)
    log_prob = shifted - np.log(denom)
    safe = np.where(valid, labels, 0)
    picked = np.take_along_axis(log_prob, safe[:, None], axis=1)[:, 0]
    loss = float(-(picked * valid).sum() / count)

    grad = exp / denom
    onehot = np.zeros_like(grad)
    np.put_along_axis(onehot, safe[:, None], 1.0, axis=1)
    grad -= onehot
    grad *= (valid / count)[:, None].astype(grad.dtype)
    return loss, grad


# -- graph-level backward and optimizer ---------------------------------------------


def backward(graph: "NetworkGraph", dlogits: np.ndarray) -> ParamGrads:
    """Gradients of every trainable parameter from the upstream logit gradient.

    Requires a preceding training-mode forward pass on ``graph``.
    """
    return graph.backward(dlogits)


@dataclass
class OptimState:
    lr: float
    momentum: float = 0.9
    velocity: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.lr < 0:
            raise ArgumentError(f"learning rate must be non-negative, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ArgumentError(f"momentum must lie in [0, 1), got {self.momentum}")


def sgd_step(graph: "NetworkGraph", grads: ParamGrads, state: OptimState):
    """In-place heavy-ball update ``v = m*v + g; theta -= lr*v``."""
    params = graph.trainable_parameters()
    if set(grads) != set(params):
        missing = sorted(set(params) - set(grads))
        extra = sorted(set(grads) - set(params))
        raise UsageError(f"gradient keys do not match parameters (missing={missing}, extra={extra})")
    for key, theta in params.items():
        g = grads[key]
        if g.shape != theta.shape:
            raise UsageError(f"gradient for {key} has shape {g.shape}, parameter {theta.shape}")
        v = state.velocity.get(key)
        if v is None or v.shape != theta.shape or v.dtype != theta.dtype:
            v = np.zeros_like(theta)
        v *= state.momentum
        v += g
        state.velocity[key] = v
        theta -= theta.dtype.type(state.lr) * v
    return graph, state


# -- finite-difference verification ------------------------------------------------


@dataclass
class FDEntry:
    path: str
    max_rel_error: float
    checked: int
    passed: bool


@dataclass
class FDReport:
    tolerance: float
    entries: List[FDEntry]

    @property
    def all_passed(self) -> bool:
        return all(e.passed for e in self.entries)

    def to_dict(self):
        return {
            "tolerance": self.tolerance,
            "all_passed": self.all_passed,
            "entries": [e.__dict__ for e in self.entries],
        }


def _rel_error(analytic: float, numeric: float, scale: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), scale)


def finite_diff_check(
    graph: "NetworkGraph",
    x: np.ndarray,
    labels: np.ndarray,
    tolerance: float,
    samples_per_tensor: int = 6,
    seed: int = 0,
    training: bool = False,
    floor: float = 1e-6,
    step: float = 1e-4,
) -> FDReport:
    """Compare analytic gradients with central differences for every trainable tensor.

    Each tensor gets one random-direction probe, whose perturbation touches
    every element at once, plus ``samples_per_tensor`` single-coordinate
    probes, with step ``step * (1 + |theta|)``.  Relative errors are floored
    at ``floor``.

    The loss is piecewise smooth: every ReLU contributes a kink, and with
    hundreds of thousands of units some kink usually lies within any
    practical step.  Probes therefore evaluate the network with each ReLU's
    on/off pattern frozen at the base point.  That function coincides with
    the true loss on the linear piece containing the base point, so it has
    the same gradient there, and it is smooth, so central differences
    converge to it.

    By default batch norm uses its running statistics.  With ``training``
    it uses batch statistics instead (running statistics are never
    updated); on small inputs those make the loss so strongly curved that
    the default step is too coarse.
    """
    if graph.dtype != np.float64:
        raise UsageError("finite_diff_check requires a double-precision graph")
    x = np.asarray(x, dtype=np.float64)
    rng = np.random.default_rng(seed)

    gates = []
    logits = graph.forward(x, training=training, update_stats=False, retain=True, masks=gates)
    _, dlogits = cross_entropy_loss(logits, labels)
    grads = graph.backward(dlogits)

    def loss_at():
        logits = graph.forward(x, training=training, update_stats=False, retain=False, gates=gates)
        return cross_entropy_loss(logits, labels)[0]

    def probe(theta, direction, h):
        orig = theta.copy()
        theta[...] = orig + h * direction
        lp = loss_at()
        theta[...] = orig - h * direction
        lm = loss_at()
        theta[...] = orig
        return (lp - lm) / (2 * h)

    entries = []
    for path, theta in graph.trainable_parameters().items():
        g = grads[path]
        d = rng.choice([-1.0, 1.0], size=theta.shape)
        h = step * (1.0 + float(np.abs(theta).max()))
        # A random-sign sum can cancel far below its typical size ||g||_2,
        # so that is the scale the directional error is measured against.
        typical = max(float(np.linalg.norm(g)), floor)
        errs = [_rel_error(float(np.sum(g * d)), probe(theta, d, h), typical)]
        k = min(samples_per_tensor, theta.size)
        for idx in rng.choice(theta.size, size=k, replace=False):
            unit = np.zeros(theta.shape)
            unit.flat[idx] = 1.0
            h = step * (1.0 + abs(float(theta.flat[idx])))
            errs.append(_rel_error(float(g.flat[idx]), probe(theta, unit, h), floor))
        worst = max(errs)
        entries.append(FDEntry(path, worst, len(errs), worst < tolerance))
    return FDReport(tolerance, entries)

"""Complexity accounting, the NetScore-style performance function, and
segmentation metrics."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .config import (
    BottleneckReductionSpec,
    HeadSpec,
    ModuleSpec,
    NetworkConfig,
    RefineSpec,
    ResidualBottleneckSpec,
    StemSpec,
    check_config,
    infer_shapes,
    topo_order,
)
from .errors import ArgumentError, DataError, ShapeError

BYTES_PER_ELEMENT = 4


# -- per-layer primitives ----------------------------------------------------


def conv_params(c_in: int, c_out: int, k: int, bias: bool = False) -> int:
    return c_out * c_in * k * k + (c_out if bias else 0)


def conv_macs(c_in: int, c_out: int, k: int, h_out: int, w_out: int) -> int:
    return c_out * c_in * k * k * h_out * w_out


def bn_params(c: int) -> int:
    """Learnable gamma and beta."""
    return 2 * c


def bn_buffers(c: int) -> int:
    """Running mean and variance."""
    return 2 * c


def _layers(spec: ModuleSpec, c_in: Optional[int] = None):
    """(kind, c_in, c_out, kernel, stride, bias) for every layer of a node."""
    if isinstance(spec, StemSpec):
        return [("conv", c_in, spec.c_out, spec.kernel, spec.stride, False), ("bn", spec.c_out)]
    if isinstance(spec, ResidualBottleneckSpec):
        c, m = spec.c, spec.c_mid
        return [
            ("conv", c, m, 1, 1, False), ("bn", m),
            ("conv", m, m, 3, 1, False), ("bn", m),
            ("conv", m, c, 1, 1, False), ("bn", c),
        ]
    if isinstance(spec, BottleneckReductionSpec):
        return [
            ("conv", spec.c_in, spec.c_mid, 1, 1, False), ("bn", spec.c_mid),
            ("conv", spec.c_mid, spec.c_out, spec.kernel, spec.stride, False), ("bn", spec.c_out),
        ]
    if isinstance(spec, RefineSpec):
        return [
            ("conv", spec.c_deep, spec.c_out, 1, 1, False), ("bn", spec.c_out),
            ("conv", spec.c_skip, spec.c_out, 1, 1, False), ("bn", spec.c_out),
            ("conv", spec.c_out, spec.c_out, 3, 1, False), ("bn", spec.c_out),
        ]
    if isinstance(spec, HeadSpec):
        return [
            ("conv", spec.c_in, spec.c_in, 3, 1, False), ("bn", spec.c_in),
            ("conv", spec.c_in, spec.num_classes, 1, 1, True),
        ]
    raise TypeError(f"unsupported spec {spec!r}")


def node_param_counts(spec: ModuleSpec, input_channels: int = 3):
    """``(learnable, buffers)`` element counts of one node."""
    learn = buf = 0
    for layer in _layers(spec, input_channels):
        if layer[0] == "conv":
            learn += conv_params(layer[1], layer[2], layer[3], layer[5])
        else:
            learn += bn_params(layer[1])
            buf += bn_buffers(layer[1])
    return learn, buf


# -- reports -----------------------------------------------------------------


@dataclass
class NodeComplexity:
    name: str
    type: str
    params: int
    buffers: int
    macs: Optional[int] = None
    elementwise_ops: Optional[int] = None
    output_shape: Optional[tuple] = None


@dataclass
class ComplexityReport:
    nodes: List[NodeComplexity]
    input_shape: Optional[tuple] = None
    bytes_per_element: int = BYTES_PER_ELEMENT

    @property
    def total_params(self) -> int:
        return sum(n.params for n in self.nodes)

    @property
    def total_buffers(self) -> int:
        return sum(n.buffers for n in self.nodes)

    @property
    def model_bytes(self) -> int:
        return (self.total_params + self.total_buffers) * self.bytes_per_element

    @property
    def model_mb(self) -> float:
        return self.model_bytes / 1e6

    @property
    def total_macs(self) -> Optional[int]:
        if any(n.macs is None for n in self.nodes):
            return None
        return sum(n.macs for n in self.nodes)

    @property
    def total_elementwise_ops(self) -> Optional[int]:
        if any(n.elementwise_ops is None for n in self.nodes):
            return None
        return sum(n.elementwise_ops for n in self.nodes)

    def to_dict(self) -> dict:
        return {
            "kind": "complexity_report",
            "input_shape": list(self.input_shape) if self.input_shape else None,
            "total_params": self.total_params,
            "total_buffers": self.total_buffers,
            "model_bytes": self.model_bytes,
            "model_mb": self.model_mb,
            "total_macs": self.total_macs,
            "total_elementwise_ops": self.total_elementwise_ops,
            "nodes": [
                {**asdict(n), "output_shape": list(n.output_shape) if n.output_shape else None}
                for n in self.nodes
            ],
        }

    def table(self) -> str:
        rows = [("node", "type", "output", "params", "buffers", "MACs")]
        for n in self.nodes:
            shape = "x".join(map(str, n.output_shape)) if n.output_shape else "-"
            macs = f"{n.macs:,}" if n.macs is not None else "-"
            rows.append((n.name, n.type, shape, f"{n.params:,}", f"{n.buffers:,}", macs))
        widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
        lines = [
            "  ".join(c.ljust(w) if i < 3 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
            for r in rows
        ]
        lines.insert(1, "-" * len(lines[0]))
        lines.append("")
        lines.append(f"parameters  {self.total_params:,} learnable + {self.total_buffers:,} buffers")
        if self.total_macs is not None:
            lines.append(f"MACs        {self.total_macs:,}  ({self.total_macs / 1e9:.3f} G)")
        lines.append(f"model size  {self.model_mb:.2f} MB ({self.model_bytes:,} bytes at "
                     f"{self.bytes_per_element} bytes/element)")
        return "\n".join(lines)


def count_params(obj) -> ComplexityReport:
    """Exact parameter and buffer counts from a config (or a graph's config)."""
    config = getattr(obj, "config", obj)
    check_config(config)
    nodes = []
    specs = config.node_map()
    for name in topo_order(config):
        learn, buf = node_param_counts(specs[name], config.input_channels)
        nodes.append(NodeComplexity(name, specs[name].type, learn, buf))
    return ComplexityReport(nodes)


def _node_flops(spec: ModuleSpec, in_shapes: Dict[str, tuple], out_shape: tuple, c_in: int):
    """(MACs, elementwise ops) for a node; elementwise = BN + ReLU + add + upsample outputs."""
    n = out_shape[0]
    macs = 0
    elem = 0
    if isinstance(spec, RefineSpec):
        _, _, h, w = out_shape
        hw = h * w
        c = spec.c_out
        macs += conv_macs(spec.c_deep, c, 1, h, w) + conv_macs(spec.c_skip, c, 1, h, w)
        macs += conv_macs(c, c, 3, h, w)
        if spec.upscale > 1:
            elem += spec.c_deep * hw
        elem += 3 * c * hw  # three BN
        elem += 2 * c * hw  # add, ReLU
        elem += c * hw      # fuse ReLU
        return n * macs, n * elem
    _, _, h, w = in_shapes["in"]
    if isinstance(spec, StemSpec):
        ho, wo = out_shape[2:]
        macs = conv_macs(c_in, spec.c_out, spec.kernel, ho, wo)
        elem = 2 * spec.c_out * ho * wo
    elif isinstance(spec, ResidualBottleneckSpec):
        c, m = spec.c, spec.c_mid
        macs = conv_macs(c, m, 1, h, w) + conv_macs(m, m, 3, h, w) + conv_macs(m, c, 1, h, w)
        elem = (2 * m + 2 * m + c + 2 * c) * h * w
    elif isinstance(spec, BottleneckReductionSpec):
        ho, wo = out_shape[2:]
        macs = conv_macs(spec.c_in, spec.c_mid, 1, h, w)
        macs += conv_macs(spec.c_mid, spec.c_out, spec.kernel, ho, wo)
        elem = 2 * spec.c_mid * h * w + 2 * spec.c_out * ho * wo
    elif isinstance(spec, HeadSpec):
        macs = conv_macs(spec.c_in, spec.c_in, 3, h, w) + conv_macs(spec.c_in, spec.num_classes, 1, h, w)
        elem = 2 * spec.c_in * h * w
        if spec.final_upscale > 1:
            elem += spec.num_classes * out_shape[2] * out_shape[3]
    return n * macs, n * elem


def count_flops(config: NetworkConfig, input_shape) -> ComplexityReport:
    """Parameter counts plus per-node multiply-accumulates for ``input_shape``.

    MACs count only convolutions; batch norm, ReLU, additions and upsampling
    are reported separately as elementwise operations (one per output
    element).  Counts cover the whole batch in ``input_shape``.
    """
    shapes = infer_shapes(config, input_shape)
    report = count_params(config)
    specs = config.node_map()
    for node in report.nodes:
        ins = {
            e.port: (tuple(input_shape) if e.src == "input" else shapes[e.src])
            for e in config.inbound(node.name)
        }
        node.macs, node.elementwise_ops = _node_flops(
            specs[node.name], ins, shapes[node.name], config.input_channels
        )
        node.output_shape = shapes[node.name]
    report.input_shape = tuple(input_shape)
    return report


# -- universal performance function -------------------------------------------------


def netscore_u(a: float, p: float, f: float) -> float:
    """``20 log10(a^2 / (sqrt(p) sqrt(f)))``.

    ``a`` is accuracy in percent, ``p`` parameters in millions and ``f``
    multiply-accumulates in billions.
    """
    if not (0 < a <= 100):
        raise ArgumentError(f"accuracy must lie in (0, 100], got {a}")
    if p <= 0 or f <= 0:
        raise ArgumentError(f"params and MACs must be positive, got p={p}, f={f}")
    return 20.0 * math.log10(a * a / (math.sqrt(p) * math.sqrt(f)))


@dataclass(frozen=True)
class PerfRecord:
    a: float
    p: float
    f: float
    u: float

    @classmethod
    def score(cls, a: float, p: float, f: float) -> "PerfRecord":
        """Build a record; ``a <= 0`` marks a failed evaluation with ``u = -inf``."""
        if a <= 0:
            return cls(0.0, p, f, -math.inf)
        return cls(a, p, f, netscore_u(a, p, f))

    def to_dict(self):
        return asdict(self)


# -- segmentation metrics -------------------------------------------------------


@dataclass
class SegMetrics:
    confusion: np.ndarray  # rows: ground truth, cols: prediction
    num_classes: int

    @property
    def total(self) -> int:
        return int(self.confusion.sum())

    @property
    def pixel_accuracy(self) -> float:
        t = self.total
        return float(np.trace(self.confusion) / t) if t else 0.0

    @property
    def iou(self) -> np.ndarray:
        tp = np.diag(self.confusion).astype(np.float64)
        denom = self.confusion.sum(axis=0) + self.confusion.sum(axis=1) - tp
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(denom > 0, tp / np.maximum(denom, 1), np.nan)

    @property
    def present(self) -> np.ndarray:
        return self.confusion.sum(axis=1) > 0

    @property
    def mean_iou(self) -> float:
        present = self.present
        return float(np.mean(self.iou[present])) if present.any() else 0.0

    def merge(self, other: "SegMetrics") -> "SegMetrics":
        return SegMetrics(self.confusion + other.confusion, self.num_classes)

    def to_dict(self):
        return {
            "kind": "seg_metrics",
            "num_classes": self.num_classes,
            "pixels": self.total,
            "pixel_accuracy": self.pixel_accuracy,
            "mean_iou": self.mean_iou,
            "iou": [None if math.isnan(v) else float(v) for v in self.iou],
            "confusion": self.confusion.tolist(),
        }

    def table(self, names=None) -> str:
        lines = [f"pixel accuracy  {self.pixel_accuracy:.4f}", f"mean IoU        {self.mean_iou:.4f}"]
        for k in np.flatnonzero(self.present):
            label = names[k] if names else str(k)
            lines.append(f"  {label:<20} IoU {self.iou[k]:.4f}")
        return "\n".join(lines)


def seg_metrics(pred, gt, num_classes: int, ignore_label: Optional[int] = None) -> SegMetrics:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction shape {pred.shape} differs from ground truth {gt.shape}")
    keep = np.ones(gt.shape, dtype=bool) if ignore_label is None else gt != ignore_label
    p, g = pred[keep].astype(np.int64), gt[keep].astype(np.int64)
    for name, arr in (("prediction", p), ("ground truth", g)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise DataError(f"{name} labels must lie in [0, {num_classes})")
    cm = np.bincount(g * num_classes + p, minlength=num_classes * num_classes)
    return SegMetrics(cm.reshape(num_classes, num_classes), num_classes)

"""Declarative network descriptions: module specs, edges, the shortcut mask,
validation and static shape inference.

A config is stored as JSON::

    {
      "name": "...", "input_channels": 3, "num_classes": 32,
      "reduction_factor": 16, "input_size": [352, 480], "seed": 0,
      "nodes": [{"name": "stem", "type": "stem", "c_out": 32}, ...],
      "edges": [{"from": "input", "to": "stem", "port": "in"}, ...],
      "shortcut_mask": [{"from": "rb_a2", "to": "refine"}]
    }

``input`` is the reserved name of the network input.  Refine nodes take a
``deep`` and a ``skip`` port; every other node takes a single ``in`` port.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

from .errors import ConfigError, ShapeError

INPUT = "input"


@dataclass
class StemSpec:
    name: str
    c_out: int
    kernel: int = 3
    stride: int = 2
    type: str = field(default="stem", init=False)


@dataclass
class ResidualBottleneckSpec:
    name: str
    c: int
    compression_ratio: int = 4
    type: str = field(default="residual_bottleneck", init=False)

    @property
    def c_mid(self) -> int:
        return self.c // self.compression_ratio


@dataclass
class BottleneckReductionSpec:
    name: str
    c_in: int
    c_mid: int
    c_out: int
    kernel: int = 8
    stride: int = 8
    type: str = field(default="bottleneck_reduction", init=False)


@dataclass
class RefineSpec:
    name: str
    c_deep: int
    c_skip: int
    c_out: int
    upscale: int
    type: str = field(default="refine", init=False)

    @property
    def optional(self) -> bool:
        # Same-resolution refines with pass-through width can be removed
        # without disturbing any shape downstream.
        return self.upscale == 1 and self.c_out == self.c_deep


@dataclass
class HeadSpec:
    name: str
    c_in: int
    num_classes: int
    final_upscale: int = 2
    type: str = field(default="head", init=False)


ModuleSpec = Union[StemSpec, ResidualBottleneckSpec, BottleneckReductionSpec, RefineSpec, HeadSpec]

SPEC_TYPES = {
    "stem": StemSpec,
    "residual_bottleneck": ResidualBottleneckSpec,
    "bottleneck_reduction": BottleneckReductionSpec,
    "refine": RefineSpec,
    "head": HeadSpec,
}

PORTS = {
    "stem": ("in",),
    "residual_bottleneck": ("in",),
    "bottleneck_reduction": ("in",),
    "refine": ("deep", "skip"),
    "head": ("in",),
}


def spec_from_dict(d: dict) -> ModuleSpec:
    d = dict(d)
    kind = d.pop("type", None)
    if kind not in SPEC_TYPES:
        raise ConfigError(f"node {d.get('name')!r}: unknown type {kind!r}")
    cls = SPEC_TYPES[kind]
    allowed = {f.name for f in fields(cls) if f.init}
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"node {d.get('name')!r}: unknown fields {sorted(unknown)}")
    try:
        return cls(**d)
    except TypeError as exc:
        raise ConfigError(f"node {d.get('name')!r}: {exc}") from None


def spec_to_dict(spec: ModuleSpec) -> dict:
    d = asdict(spec)
    kind = d.pop("type")
    return {"name": d.pop("name"), "type": kind, **d}


@dataclass(frozen=True)
class Edge:
    src: str
    dst: str
    port: str = "in"


@dataclass
class NetworkConfig:
    nodes: List[ModuleSpec]
    edges: List[Edge]
    shortcut_mask: List[Tuple[str, str]]
    num_classes: int
    input_channels: int = 3
    reduction_factor: int = 16
    input_size: Tuple[int, int] = (352, 480)
    seed: int = 0
    name: str = "edgesegnet"

    # -- lookup helpers --------------------------------------------------------

    def node(self, name: str) -> ModuleSpec:
        for n in self.nodes:
            if n.name == name:
                return n
        raise KeyError(name)

    def node_map(self) -> Dict[str, ModuleSpec]:
        return {n.name: n for n in self.nodes}

    def inbound(self, name: str) -> List[Edge]:
        return [e for e in self.edges if e.dst == name]

    def outbound(self, name: str) -> List[Edge]:
        return [e for e in self.edges if e.src == name]

    def copy(self) -> "NetworkConfig":
        return copy.deepcopy(self)

    # -- serialization ---------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "input_channels": self.input_channels,
            "num_classes": self.num_classes,
            "reduction_factor": self.reduction_factor,
            "input_size": list(self.input_size),
            "seed": self.seed,
            "nodes": [spec_to_dict(n) for n in self.nodes],
            "edges": [{"from": e.src, "to": e.dst, "port": e.port} for e in self.edges],
            "shortcut_mask": [{"from": s, "to": d} for s, d in self.shortcut_mask],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        try:
            nodes = [spec_from_dict(n) for n in d["nodes"]]
            edges = [Edge(e["from"], e["to"], e.get("port", "in")) for e in d["edges"]]
            mask = [(m["from"], m["to"]) for m in d.get("shortcut_mask", [])]
            return cls(
                nodes=nodes,
                edges=edges,
                shortcut_mask=mask,
                num_classes=int(d["num_classes"]),
                input_channels=int(d.get("input_channels", 3)),
                reduction_factor=int(d.get("reduction_factor", 16)),
                input_size=tuple(d.get("input_size", (352, 480))),
                seed=int(d.get("seed", 0)),
                name=d.get("name", "edgesegnet"),
            )
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed config: missing or invalid field {exc}") from None

    @classmethod
    def from_json(cls, text: str) -> "NetworkConfig":
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]

    def with_num_classes(self, num_classes: int) -> "NetworkConfig":
        cfg = self.copy()
        cfg.num_classes = num_classes
        for n in cfg.nodes:
            if isinstance(n, HeadSpec):
                n.num_classes = num_classes
        return cfg


def load_config(path) -> NetworkConfig:
    return NetworkConfig.from_json(Path(path).read_text())


def save_config(config: NetworkConfig, path) -> None:
    Path(path).write_text(config.to_json())


def data_path(filename: str) -> Path:
    """Path of a file shipped in the package's ``configs`` directory."""
    return Path(str(resources.files("edgesegnet") / "configs" / filename))


def reference_config(num_classes: Optional[int] = None) -> NetworkConfig:
    cfg = load_config(data_path("edgesegnet-ref.json"))
    return cfg if num_classes is None else cfg.with_num_classes(num_classes)


# -- validation ---------------------------------------------------------------------


def _spec_errors(spec: ModuleSpec, num_classes: int) -> List[str]:
    errs = []
    name = spec.name
    ints = [f.name for f in fields(spec) if f.name not in ("name", "type")]
    for f in ints:
        v = getattr(spec, f)
        if not isinstance(v, int) or isinstance(v, bool) or v < 1:
            errs.append(f"node {name!r}: {f} must be a positive integer, got {v!r}")
    if errs:
        return errs
    if isinstance(spec, ResidualBottleneckSpec):
        r = spec.compression_ratio
        if r < 2 or spec.c % r:
            errs.append(f"node {name!r}: compression_ratio {r} must be >= 2 and divide c={spec.c}")
    elif isinstance(spec, BottleneckReductionSpec):
        if spec.c_mid >= spec.c_in:
            errs.append(f"node {name!r}: c_mid={spec.c_mid} must be < c_in={spec.c_in}")
        if spec.kernel != spec.stride:
            errs.append(f"node {name!r}: kernel {spec.kernel} must equal stride {spec.stride}")
    elif isinstance(spec, StemSpec):
        if spec.kernel % 2 == 0:
            errs.append(f"node {name!r}: stem kernel must be odd, got {spec.kernel}")
    elif isinstance(spec, HeadSpec):
        if spec.num_classes != num_classes:
            errs.append(
                f"node {name!r}: num_classes {spec.num_classes} differs from config {num_classes}"
            )
    return errs


def topo_order(config: NetworkConfig) -> List[str]:
    """Kahn ordering of node names, stable with respect to declaration order."""
    names = [n.name for n in config.nodes]
    indeg = {n: 0 for n in names}
    for e in config.edges:
        if e.dst in indeg and e.src in indeg:
            indeg[e.dst] += 1
    ready = [n for n in names if indeg[n] == 0]
    order = []
    while ready:
        cur = ready.pop(0)
        order.append(cur)
        for e in config.edges:
            if e.src == cur and e.dst in indeg:
                indeg[e.dst] -= 1
                if indeg[e.dst] == 0:
                    ready.append(e.dst)
        ready.sort(key=names.index)
    if len(order) != len(names):
        cyclic = sorted(set(names) - set(order))
        raise ConfigError([f"node {n!r}: part of a cycle" for n in cyclic])
    return order


def validate(config: NetworkConfig) -> List[str]:
    """Every structural invariant violation in ``config``; empty when valid."""
    errs: List[str] = []
    names = [n.name for n in config.nodes]
    seen = set()
    for n in names:
        if n == INPUT:
            errs.append(f"node name {INPUT!r} is reserved for the network input")
        if n in seen:
            errs.append(f"node {n!r}: duplicate name")
        seen.add(n)
    if config.num_classes < 2:
        errs.append(f"num_classes must be >= 2, got {config.num_classes}")
    for spec in config.nodes:
        errs += _spec_errors(spec, config.num_classes)

    nodes = config.node_map()
    for e in config.edges:
        if e.src != INPUT and e.src not in nodes:
            errs.append(f"edge {e.src}->{e.dst}: unknown producer {e.src!r}")
        if e.dst not in nodes:
            errs.append(f"edge {e.src}->{e.dst}: unknown consumer {e.dst!r}")
        elif e.port not in PORTS[nodes[e.dst].type]:
            errs.append(f"edge {e.src}->{e.dst}: node {e.dst!r} has no port {e.port!r}")
    if len(set(config.edges)) != len(config.edges):
        errs.append("duplicate edges")

    mask = set(config.shortcut_mask)
    for spec in config.nodes:
        inbound = config.inbound(spec.name)
        ports = sorted(e.port for e in inbound)
        if ports != sorted(PORTS[spec.type]):
            errs.append(
                f"node {spec.name!r}: expects inputs on ports {list(PORTS[spec.type])}, got {ports}"
            )
        if isinstance(spec, RefineSpec):
            for e in inbound:
                if e.port == "skip" and (e.src, e.dst) not in mask:
                    errs.append(
                        f"node {spec.name!r}: skip edge from {e.src!r} is absent from shortcut_mask"
                    )
    for src, dst in config.shortcut_mask:
        if Edge(src, dst, "skip") not in config.edges:
            errs.append(f"shortcut_mask entry {src}->{dst} has no matching skip edge")
    if len(mask) != len(config.shortcut_mask):
        errs.append("duplicate shortcut_mask entries")

    inputs = [e for e in config.edges if e.src == INPUT]
    if len(inputs) != 1:
        errs.append(f"network must consume {INPUT!r} exactly once, found {len(inputs)} edges")
    sinks = [n for n in names if not config.outbound(n)]
    if len(sinks) != 1:
        errs.append(f"network must have exactly one output node, found {sinks}")
    if errs:
        return errs

    try:
        topo_order(config)
    except ConfigError as exc:
        return exc.errors
    reach = {INPUT}
    frontier = [INPUT]
    while frontier:
        cur = frontier.pop()
        for e in config.outbound(cur):
            if e.dst not in reach:
                reach.add(e.dst)
                frontier.append(e.dst)
    for n in names:
        if n not in reach:
            errs.append(f"node {n!r}: not reachable from the network input")
    return errs


def check_config(config: NetworkConfig) -> None:
    errs = validate(config)
    if errs:
        raise ConfigError(errs)


# -- shape inference -----------------------------------------------------------------


def node_output_shape(spec: ModuleSpec, inputs: Dict[str, Tuple[int, int, int, int]]):
    """Output shape of one node given its port → input-shape mapping."""
    if isinstance(spec, RefineSpec):
        deep, skip = inputs["deep"], inputs["skip"]
        if deep[1] != spec.c_deep:
            raise ShapeError(f"deep input has {deep[1]} channels, expected c_deep={spec.c_deep}")
        if skip[1] != spec.c_skip:
            raise ShapeError(f"skip input has {skip[1]} channels, expected c_skip={spec.c_skip}")
        up = (deep[2] * spec.upscale, deep[3] * spec.upscale)
        if up != skip[2:] or deep[0] != skip[0]:
            raise ShapeError(
                f"deep {deep[2]}x{deep[3]} upscaled x{spec.upscale} gives {up[0]}x{up[1]}, "
                f"skip is {skip[2]}x{skip[3]}"
            )
        return (skip[0], spec.c_out, skip[2], skip[3])

    n, c, h, w = inputs["in"]
    if isinstance(spec, StemSpec):
        if h % spec.stride or w % spec.stride:
            raise ShapeError(f"extents {h}x{w} not divisible by stem stride {spec.stride}")
        return (n, spec.c_out, h // spec.stride, w // spec.stride)
    if isinstance(spec, ResidualBottleneckSpec):
        if c != spec.c:
            raise ShapeError(f"input has {c} channels, expected c={spec.c}")
        return (n, c, h, w)
    if isinstance(spec, BottleneckReductionSpec):
        if c != spec.c_in:
            raise ShapeError(f"input has {c} channels, expected c_in={spec.c_in}")
        if h % spec.stride or w % spec.stride:
            raise ShapeError(f"extents {h}x{w} not divisible by {spec.stride}")
        return (n, spec.c_out, h // spec.stride, w // spec.stride)
    if isinstance(spec, HeadSpec):
        if c != spec.c_in:
            raise ShapeError(f"input has {c} channels, expected c_in={spec.c_in}")
        return (n, spec.num_classes, h * spec.final_upscale, w * spec.final_upscale)
    raise TypeError(f"unsupported spec {spec!r}")


def infer_shapes(config: NetworkConfig, input_shape) -> Dict[str, Tuple[int, int, int, int]]:
    """Per-node output shapes computed without allocating tensors.

    Raises ShapeError listing every node whose shape rule fails; nodes
    downstream of a failure are skipped rather than reported.
    """
    check_config(config)
    input_shape = tuple(int(v) for v in input_shape)
    if len(input_shape) != 4:
        raise ShapeError(f"input shape must be (n, c, h, w), got {input_shape}")
    failures = []
    if input_shape[1] != config.input_channels:
        failures.append((INPUT, f"expected {config.input_channels} channels, got {input_shape[1]}"))
    shapes: Dict[str, Optional[tuple]] = {INPUT: input_shape}
    nodes = config.node_map()
    for name in topo_order(config):
        ins = {e.port: shapes.get(e.src) for e in config.inbound(name)}
        if any(v is None for v in ins.values()):
            shapes[name] = None
            continue
        try:
            shapes[name] = node_output_shape(nodes[name], ins)
        except ShapeError as exc:
            failures.append((name, str(exc)))
            shapes[name] = None
    if failures:
        lines = [f"node {n!r}: {m}" for n, m in failures]
        h, w = input_shape[2:]
        rf = config.reduction_factor
        if h % rf or w % rf:
            lines.append(f"input {h}x{w} is not divisible by reduction factor {rf}")
        raise ShapeError("shape inference failed:\n  " + "\n  ".join(lines), failures)
    del shapes[INPUT]
    return shapes


def output_node(config: NetworkConfig) -> str:
    return next(n.name for n in config.nodes if not config.outbound(n.name))

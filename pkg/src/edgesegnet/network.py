"""EdgeSegNet building blocks and the instantiated network graph."""

from __future__ import annotations

import copy
from typing import Dict, Iterable, List, Optional

import numpy as np

from . import grad as G
from .config import (
    INPUT,
    BottleneckReductionSpec,
    HeadSpec,
    NetworkConfig,
    RefineSpec,
    ResidualBottleneckSpec,
    StemSpec,
    check_config,
    infer_shapes,
    output_node,
    topo_order,
)
from .errors import ConfigError, ShapeError, UsageError
from .layers import Conv2d, ConvBN, ForwardContext, relu_ctx
from .tensor import bilinear_upsample


class Block:
    """One network node: a fixed sub-graph of layers with its own backward."""

    ports = ("in",)

    def __init__(self, spec):
        self.spec = spec
        self.name = spec.name

    def units(self) -> Iterable:
        return ()

    def layers(self):
        out = {}
        for u in self.units():
            if isinstance(u, ConvBN):
                out.update(u.layers())
            else:
                out[u[0]] = u[1]
        return out

    def forward(self, inputs: Dict[str, np.ndarray], ctx: ForwardContext) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dy: np.ndarray, need_input_grad: bool = True) -> Dict[str, np.ndarray]:
        raise NotImplementedError


class StemBlock(Block):
    def __init__(self, spec: StemSpec, c_in: int):
        super().__init__(spec)
        self.body = ConvBN(("conv", "bn"), c_in, spec.c_out, spec.kernel, spec.stride, spec.kernel // 2)

    def units(self):
        return (self.body,)

    def forward(self, inputs, ctx):
        return self.body.forward(inputs["in"], ctx)

    def backward(self, dy, need_input_grad=True):
        return {"in": self.body.backward(dy, need_dx=need_input_grad)}


class ResidualBottleneckBlock(Block):
    """1x1 compress → 3x3 → 1x1 restore, identity shortcut, ReLU after the add."""

    def __init__(self, spec: ResidualBottleneckSpec):
        super().__init__(spec)
        c, m = spec.c, spec.c_mid
        self.compress = ConvBN(("conv1", "bn1"), c, m, 1)
        self.spatial = ConvBN(("conv2", "bn2"), m, m, 3, padding=1)
        self.restore = ConvBN(("conv3", "bn3"), m, c, 1, act=False)
        self._out = None

    def units(self):
        return (self.compress, self.spatial, self.restore)

    def forward(self, inputs, ctx):
        x = inputs["in"]
        y = self.restore.forward(self.spatial.forward(self.compress.forward(x, ctx), ctx), ctx)
        out = relu_ctx(y + x, ctx)
        if ctx.retain:
            self._out = out
        return out

    def backward(self, dy, need_input_grad=True):
        d = G.relu_vjp(self._out, dy)
        self._out = None
        dbody = self.compress.backward(self.spatial.backward(self.restore.backward(d)))
        return {"in": d + dbody}


class BottleneckReductionBlock(Block):
    """1x1 compress → k x k convolution with stride k; no shortcut."""

    def __init__(self, spec: BottleneckReductionSpec):
        super().__init__(spec)
        self.compress = ConvBN(("conv1", "bn1"), spec.c_in, spec.c_mid, 1)
        self.reduce = ConvBN(("conv2", "bn2"), spec.c_mid, spec.c_out, spec.kernel, spec.stride)

    def units(self):
        return (self.compress, self.reduce)

    def forward(self, inputs, ctx):
        return self.reduce.forward(self.compress.forward(inputs["in"], ctx), ctx)

    def backward(self, dy, need_input_grad=True):
        return {"in": self.compress.backward(self.reduce.backward(dy))}


class RefineBlock(Block):
    """Upsample the deep branch, project both branches to c_out, add, fuse with a 3x3."""

    ports = ("deep", "skip")

    def __init__(self, spec: RefineSpec):
        super().__init__(spec)
        self.deep_proj = ConvBN(("deep_conv", "deep_bn"), spec.c_deep, spec.c_out, 1, act=False)
        self.skip_proj = ConvBN(("skip_conv", "skip_bn"), spec.c_skip, spec.c_out, 1, act=False)
        self.fuse = ConvBN(("fuse_conv", "fuse_bn"), spec.c_out, spec.c_out, 3, padding=1)
        self._sum = None
        self._deep_hw = None

    def units(self):
        return (self.deep_proj, self.skip_proj, self.fuse)

    def forward(self, inputs, ctx):
        deep, skip = inputs["deep"], inputs["skip"]
        if self.spec.upscale > 1:
            up = bilinear_upsample(deep, self.spec.upscale)
        else:
            up = deep
        d = self.deep_proj.forward(up, ctx)
        s = self.skip_proj.forward(skip, ctx)
        if d.shape != s.shape:
            raise ShapeError(f"node {self.name!r}: upsampled deep {d.shape} vs skip {s.shape}")
        merged = relu_ctx(d + s, ctx)
        if ctx.retain:
            self._sum = merged
            self._deep_hw = deep.shape[2:]
        return self.fuse.forward(merged, ctx)

    def backward(self, dy, need_input_grad=True):
        d = G.relu_vjp(self._sum, self.fuse.backward(dy))
        self._sum = None
        dup = self.deep_proj.backward(d)
        if self.spec.upscale > 1:
            dup = G.bilinear_upsample_vjp(dup, self._deep_hw)
        return {"deep": dup, "skip": self.skip_proj.backward(d)}


class HeadBlock(Block):
    """3x3 conv + BN + ReLU, 1x1 classifier with bias, bilinear upsampling."""

    def __init__(self, spec: HeadSpec):
        super().__init__(spec)
        self.body = ConvBN(("conv1", "bn1"), spec.c_in, spec.c_in, 3, padding=1)
        self.classifier = Conv2d(spec.c_in, spec.num_classes, 1, bias=True)
        self._hw = None

    def units(self):
        return (self.body, ("classifier", self.classifier))

    def forward(self, inputs, ctx):
        y = self.classifier.forward(self.body.forward(inputs["in"], ctx), retain=ctx.retain)
        if ctx.retain:
            self._hw = y.shape[2:]
        if self.spec.final_upscale > 1:
            y = bilinear_upsample(y, self.spec.final_upscale)
        return y

    def backward(self, dy, need_input_grad=True):
        if self.spec.final_upscale > 1:
            dy = G.bilinear_upsample_vjp(dy, self._hw)
        return {"in": self.body.backward(self.classifier.backward(dy))}


def build_stem(spec: StemSpec, c_in: int = 3) -> StemBlock:
    return StemBlock(spec, c_in)


def build_residual_bottleneck(spec: ResidualBottleneckSpec) -> ResidualBottleneckBlock:
    if spec.compression_ratio < 2 or spec.c % spec.compression_ratio:
        raise ConfigError(
            f"node {spec.name!r}: compression_ratio {spec.compression_ratio} must be >= 2 and divide c={spec.c}"
        )
    return ResidualBottleneckBlock(spec)


def build_bottleneck_reduction(spec: BottleneckReductionSpec) -> BottleneckReductionBlock:
    if spec.c_mid >= spec.c_in:
        raise ConfigError(f"node {spec.name!r}: c_mid={spec.c_mid} must be < c_in={spec.c_in}")
    return BottleneckReductionBlock(spec)


def build_refine(spec: RefineSpec) -> RefineBlock:
    return RefineBlock(spec)


def build_head(spec: HeadSpec) -> HeadBlock:
    return HeadBlock(spec)


def build_block(spec, input_channels: int = 3) -> Block:
    if isinstance(spec, StemSpec):
        return build_stem(spec, input_channels)
    if isinstance(spec, ResidualBottleneckSpec):
        return build_residual_bottleneck(spec)
    if isinstance(spec, BottleneckReductionSpec):
        return build_bottleneck_reduction(spec)
    if isinstance(spec, RefineSpec):
        return build_refine(spec)
    if isinstance(spec, HeadSpec):
        return build_head(spec)
    raise TypeError(f"unsupported spec {spec!r}")


class NetworkGraph:
    """An instantiated network: blocks in topological order with bound parameters.

    Parameter paths are ``"<node>.<layer>.<role>"``, e.g. ``"rb_b1.conv2.weight"``.
    In inference mode a graph is immutable; training mode retains activations
    for :meth:`backward` and must not be shared between threads.
    """

    def __init__(self, config: NetworkConfig, dtype=np.float32):
        self.config = config
        self.order: List[str] = topo_order(config)
        specs = config.node_map()
        self.blocks: Dict[str, Block] = {
            name: build_block(specs[name], config.input_channels) for name in self.order
        }
        self.output = output_node(config)
        self.inbound = {name: config.inbound(name) for name in self.order}
        self.frozen: set = set()
        self.dtype = np.dtype(np.float32)
        self._shape_cache: Dict[tuple, dict] = {}
        self._retained = False
        self.astype_(dtype)

    # -- parameters --------------------------------------------------------------

    def _layer_items(self):
        for name in self.order:
            for lname, layer in self.blocks[name].layers().items():
                yield f"{name}.{lname}", layer

    def parameters(self) -> Dict[str, np.ndarray]:
        return {f"{p}.{k}": v for p, layer in self._layer_items() for k, v in layer.params().items()}

    def buffers(self) -> Dict[str, np.ndarray]:
        return {f"{p}.{k}": v for p, layer in self._layer_items() for k, v in layer.buffers().items()}

    def trainable_parameters(self) -> Dict[str, np.ndarray]:
        return {k: v for k, v in self.parameters().items() if k not in self.frozen}

    def state_dict(self) -> Dict[str, np.ndarray]:
        """All serialized tensors (parameters then buffers, per layer) in a stable order."""
        out = {}
        for p, layer in self._layer_items():
            for k, v in layer.params().items():
                out[f"{p}.{k}"] = v
            for k, v in layer.buffers().items():
                out[f"{p}.{k}"] = v
        return out

    def freeze(self, paths: Iterable[str]) -> None:
        known = self.parameters()
        for p in paths:
            if p not in known:
                raise KeyError(p)
            self.frozen.add(p)

    def astype_(self, dtype) -> "NetworkGraph":
        """Convert every parameter and buffer to ``dtype`` in place."""
        self.dtype = np.dtype(dtype)
        for _, layer in self._layer_items():
            layer.cast(self.dtype)
        return self

    def astype(self, dtype) -> "NetworkGraph":
        clone = copy.deepcopy(self)
        clone.clear()
        return clone.astype_(dtype)

    def initialize(self, seed: int) -> None:
        rng = np.random.default_rng(seed)
        for _, layer in self._layer_items():
            layer.init(rng)

    def clear(self) -> None:
        for _, layer in self._layer_items():
            layer.clear()
        for b in self.blocks.values():
            for attr in ("_out", "_sum", "_hw", "_deep_hw"):
                if hasattr(b, attr):
                    setattr(b, attr, None)
        self._retained = False

    # -- execution -----------------------------------------------------------------

    def shapes(self, input_shape) -> dict:
        key = tuple(input_shape)
        if key not in self._shape_cache:
            self._shape_cache[key] = infer_shapes(self.config, key)
        return self._shape_cache[key]

    def forward(
        self,
        x: np.ndarray,
        training: bool = False,
        update_stats: Optional[bool] = None,
        retain: Optional[bool] = None,
        masks: Optional[list] = None,
        gates: Optional[list] = None,
    ) -> np.ndarray:
        """Logits of shape (n, num_classes, h, w).

        ``training`` selects batch statistics in batch norm; by default a
        training pass also updates the running statistics and retains
        activations for :meth:`backward`.
        """
        x = np.ascontiguousarray(x, dtype=self.dtype)
        if x.ndim != 4:
            raise ShapeError(f"input must be rank 4, got shape {x.shape}")
        self.shapes(x.shape)
        ctx = ForwardContext(
            training=training,
            update_stats=training if update_stats is None else update_stats,
            retain=training if retain is None else retain,
            masks=masks,
            gates=gates,
        )
        values = {INPUT: x}
        consumers = {}
        for name in self.order:
            for e in self.inbound[name]:
                consumers[e.src] = consumers.get(e.src, 0) + 1
        for name in self.order:
            ins = {e.port: values[e.src] for e in self.inbound[name]}
            values[name] = self.blocks[name].forward(ins, ctx)
            if not ctx.retain:
                # Free activations once their last consumer has run.
                for e in self.inbound[name]:
                    consumers[e.src] -= 1
                    if consumers[e.src] == 0 and e.src != INPUT:
                        del values[e.src]
        self._retained = ctx.retain
        return values[self.output]

    def backward(self, dlogits: np.ndarray) -> G.ParamGrads:
        if not self._retained:
            raise UsageError("backward requires a preceding forward pass with retained activations")
        dlogits = np.asarray(dlogits, dtype=self.dtype)
        pending: Dict[str, np.ndarray] = {self.output: dlogits}
        for name in reversed(self.order):
            dy = pending.pop(name)
            need = any(e.src != INPUT for e in self.inbound[name])
            dins = self.blocks[name].backward(dy, need_input_grad=need)
            for e in self.inbound[name]:
                if e.src == INPUT:
                    continue
                g = dins[e.port]
                pending[e.src] = pending[e.src] + g if e.src in pending else g
        self._retained = False
        grads = {}
        for p, layer in self._layer_items():
            for k, v in layer.grads.items():
                key = f"{p}.{k}"
                if key not in self.frozen:
                    grads[key] = v
            layer.grads = {}
        return grads


def assemble_network(config: NetworkConfig, seed: Optional[int] = None, dtype=np.float32) -> NetworkGraph:
    """Validate ``config``, allocate parameters and initialize them.

    Conv weights are zero-mean normal with variance 2/fan_in; batch norm
    starts at gamma=1, beta=0, running mean 0, running var 1.  ``seed``
    defaults to ``config.seed``.
    """
    check_config(config)
    n_in = config.input_channels
    h, w = config.input_size
    try:
        infer_shapes(config, (1, n_in, h, w))
    except ShapeError as exc:
        raise ConfigError([f"node {n!r}: {m}" for n, m in exc.failures]) from None
    graph = NetworkGraph(config, dtype=np.float32)
    graph.initialize(config.seed if seed is None else seed)
    return graph.astype_(dtype)

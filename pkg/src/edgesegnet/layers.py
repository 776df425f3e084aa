"""Stateful layers with cached activations for the backward pass."""

from __future__ import annotations

import numpy as np

from dataclasses import dataclass
from typing import List, Optional

from . import grad as G
from .tensor import ConvParams, batch_norm, conv2d, im2col, relu

BN_EPS = 1e-5
BN_DECAY = 0.9


@dataclass
class ForwardContext:
    training: bool
    update_stats: bool
    retain: bool
    # When set, every ReLU appends its boolean on/off pattern here.
    masks: Optional[List[np.ndarray]] = None
    # When set, the ReLUs replay these patterns instead of thresholding, in
    # call order.  The network is then smooth in its parameters and agrees
    # with the true one wherever no unit switches.
    gates: Optional[List[np.ndarray]] = None
    _gate_pos: int = 0

    def next_gate(self):
        g = self.gates[self._gate_pos]
        self._gate_pos += 1
        return g


def relu_ctx(y, ctx: ForwardContext):
    if ctx.gates is not None:
        out = y * ctx.next_gate()
    else:
        out = relu(y)
    if ctx.masks is not None:
        ctx.masks.append(out > 0)
    return out


class Layer:
    param_names: tuple = ()
    buffer_names: tuple = ()

    def __init__(self):
        self.grads = {}
        self._cache = None

    def params(self):
        return {k: getattr(self, k) for k in self.param_names if getattr(self, k) is not None}

    def buffers(self):
        return {k: getattr(self, k) for k in self.buffer_names}

    def cast(self, dtype):
        for k in self.param_names + self.buffer_names:
            v = getattr(self, k)
            if v is not None:
                setattr(self, k, np.ascontiguousarray(v, dtype=dtype))

    def clear(self):
        self._cache = None
        self.grads = {}


class Conv2d(Layer):
    param_names = ("weight", "bias")

    def __init__(self, c_in, c_out, kernel, stride=1, padding=0, bias=False):
        super().__init__()
        self.stride = (stride, stride)
        self.padding = (padding, padding)
        self.weight = np.zeros((c_out, c_in, kernel, kernel), dtype=np.float32)
        self.bias = np.zeros(c_out, dtype=np.float32) if bias else None

    @property
    def conv_params(self) -> ConvParams:
        return ConvParams(self.weight, self.bias, self.stride, self.padding)

    def init(self, rng):
        co, ci, kh, kw = self.weight.shape
        std = np.sqrt(2.0 / (ci * kh * kw))
        self.weight[...] = rng.normal(0.0, std, size=self.weight.shape)
        if self.bias is not None:
            self.bias[...] = 0

    def forward(self, x, retain=False):
        kh, kw = self.weight.shape[2:]
        cols = im2col(x, kh, kw, self.stride, self.padding)
        if retain:
            self._cache = (x.shape, cols)
        return conv2d(x, self.conv_params, cols=cols)

    def backward(self, dy, need_dx=True):
        x_shape, cols = self._cache
        dx, dw, db = G.conv2d_vjp(x_shape, cols, self.conv_params, dy, need_dx=need_dx)
        self.grads = {"weight": dw}
        if db is not None:
            self.grads["bias"] = db
        self._cache = None
        return dx


class BatchNorm2d(Layer):
    param_names = ("gamma", "beta")
    buffer_names = ("running_mean", "running_var")

    def __init__(self, c):
        super().__init__()
        self.gamma = np.ones(c, dtype=np.float32)
        self.beta = np.zeros(c, dtype=np.float32)
        self.running_mean = np.zeros(c, dtype=np.float32)
        self.running_var = np.ones(c, dtype=np.float32)

    def init(self, rng):
        self.gamma[...] = 1
        self.beta[...] = 0
        self.running_mean[...] = 0
        self.running_var[...] = 1

    def forward(self, x, training=False, update_stats=False, retain=False):
        eps = x.dtype.type(BN_EPS)
        if training:
            out, mean, var, cache = G.batch_norm_train(x, self.gamma, self.beta, eps)
            if update_stats:
                self.running_mean *= BN_DECAY
                self.running_mean += (1 - BN_DECAY) * mean
                self.running_var *= BN_DECAY
                self.running_var += (1 - BN_DECAY) * var
            if retain:
                self._cache = ("train", cache)
            return out
        out = batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var, eps)
        if retain:
            inv_std = 1.0 / np.sqrt(self.running_var + eps)
            xhat = (x - self.running_mean.reshape(1, -1, 1, 1)) * inv_std.reshape(1, -1, 1, 1)
            self._cache = ("eval", (xhat, inv_std))
        return out

    def backward(self, dy):
        mode, cache = self._cache
        if mode == "train":
            dx, dg, db = G.batch_norm_train_vjp(cache, self.gamma, dy)
        else:
            dx, dg, db = G.batch_norm_eval_vjp(cache[0], self.gamma, cache[1], dy)
        self.grads = {"gamma": dg, "beta": db}
        self._cache = None
        return dx


class ConvBN:
    """conv → batch norm → optional ReLU."""

    def __init__(self, names, c_in, c_out, kernel, stride=1, padding=0, act=True):
        self.conv = Conv2d(c_in, c_out, kernel, stride, padding)
        self.bn = BatchNorm2d(c_out)
        self.act = act
        self.names = tuple(names)
        self._out = None

    def layers(self):
        return {self.names[0]: self.conv, self.names[1]: self.bn}

    def forward(self, x, ctx):
        y = self.conv.forward(x, retain=ctx.retain)
        y = self.bn.forward(y, ctx.training, ctx.update_stats, ctx.retain)
        if self.act:
            y = relu_ctx(y, ctx)
            if ctx.retain:
                self._out = y
        return y

    def backward(self, dy, need_dx=True):
        if self.act:
            dy = G.relu_vjp(self._out, dy)
            self._out = None
        return self.conv.backward(self.bn.backward(dy), need_dx=need_dx)

"""Small NCHW tensor engine with forward/backward passes.

Convolution and dense layers are lowered to GEMMs that run through the
emulated MAC array (``Context.gemm``); everything else (batch norm, ReLU,
pooling, softmax, the SGD step) is plain binary32 numpy, as on the SIMD side.

Layer weights are the FP32 master copy. They are rounded to the device
format whenever they enter the array, and every GEMM result is rounded to the
storage format when it is written back.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from .arith import FP32, MultiplierSpec, mac_matmul, round_to_format
from .trace import LayerOp, TrainStepTrace


class ShapeError(ValueError):
    pass


class EmptyShard(Exception):
    """Raised by local_train when a client has no data; the client is skipped."""


class Context:
    """Arithmetic used for the SA-mapped GEMMs of one device.

    ``reference=True`` switches the whole engine to float64 with exact
    products. It exists for finite-difference gradient checks, which are not
    meaningful in binary32.
    """

    def __init__(self, spec: MultiplierSpec | None = None, reference: bool = False):
        self.spec = spec or MultiplierSpec.exact()
        self.reference = reference
        if reference and self.spec != MultiplierSpec.exact():
            raise ValueError("reference mode only supports the exact FP32 multiplier")

    @property
    def dtype(self):
        return np.float64 if self.reference else np.float32

    @property
    def storage(self):
        return self.spec.format

    def gemm(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        if self.reference:
            return np.matmul(a.astype(np.float64), b.astype(np.float64))
        out = mac_matmul(a, b, self.spec)
        if self.storage != FP32:
            out = round_to_format(out, self.storage)
        return out


# ---------------------------------------------------------------------------
# layers

class Layer:
    kind = "layer"

    def __init__(self, name: str = ""):
        self.name = name
        self.cache = None
        self.grads: dict[str, np.ndarray] = {}

    # parameters ----------------------------------------------------------
    def params(self) -> dict[str, np.ndarray]:
        return {}

    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    def spaces(self) -> dict[str, tuple]:
        """Channel space of every axis of every parameter/buffer (None = not masked)."""
        return {}

    def children(self) -> list["Layer"]:
        return []

    def resized(self, sizes: dict[str, int]) -> "Layer":
        out = copy.copy(self)
        out.cache = None
        out.grads = {}
        return out

    # compute -------------------------------------------------------------
    def output_shape(self, shape: tuple) -> tuple:
        return shape

    def forward(self, x, ctx: Context, train: bool = True):
        raise NotImplementedError

    def backward(self, dy, ctx: Context, need_dx: bool = True):
        raise NotImplementedError

    def ops(self, shape: tuple, batch: int, need_dx: bool) -> list[LayerOp]:
        return []

    def zero_grads(self):
        self.grads = {k: np.zeros_like(v) for k, v in self.params().items()}


def _he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(np.float32)


def _im2col(x: np.ndarray, k: int, stride: int, pad: int):
    """(B,P,H,W) -> (B*OH*OW, k*k*P) with tap-major, channel-minor columns."""
    b, p, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    oh, ow = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 4, 5, 1).reshape(b * oh * ow, k * k * p)
    return np.ascontiguousarray(cols), oh, ow


def _col2im(dcols: np.ndarray, shape, k: int, stride: int, pad: int, oh: int, ow: int):
    b, p, h, w = shape
    dc = dcols.reshape(b, oh, ow, k, k, p)
    dxp = np.zeros((b, p, h + 2 * pad, w + 2 * pad), dtype=dcols.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += dc[:, :, :, i, j, :].transpose(0, 3, 1, 2)
    if pad:
        dxp = dxp[:, :, pad:pad + h, pad:pad + w]
    return np.ascontiguousarray(dxp)


class Conv2D(Layer):
    kind = "conv"

    def __init__(self, name, in_ch, out_ch, kernel=3, stride=1, pad=None, bias=False,
                 in_space=None, out_space=None, rng=None):
        super().__init__(name)
        self.in_ch, self.out_ch, self.k, self.stride = in_ch, out_ch, kernel, stride
        self.pad = kernel // 2 if pad is None else pad
        self.in_space, self.out_space = in_space, out_space
        self.has_bias = bias
        rng = rng or np.random.default_rng(0)
        self.weight = _he_uniform(rng, (out_ch, in_ch, kernel, kernel), in_ch * kernel * kernel)
        self.bias = np.zeros(out_ch, np.float32) if bias else None

    def params(self):
        p = {"weight": self.weight}
        if self.has_bias:
            p["bias"] = self.bias
        return p

    def spaces(self):
        s = {"weight": (self.out_space, self.in_space, None, None)}
        if self.has_bias:
            s["bias"] = (self.out_space,)
        return s

    def resized(self, sizes):
        p = sizes.get(self.in_space, self.in_ch)
        q = sizes.get(self.out_space, self.out_ch)
        return Conv2D(self.name, p, q, self.k, self.stride, self.pad, self.has_bias,
                      self.in_space, self.out_space)

    def output_shape(self, shape):
        c, h, w = shape
        if c != self.in_ch:
            raise ShapeError(f"{self.name}: expected {self.in_ch} input channels, got {c}")
        oh = (h + 2 * self.pad - self.k) // self.stride + 1
        ow = (w + 2 * self.pad - self.k) // self.stride + 1
        return (self.out_ch, oh, ow)

    def _wmat(self, dtype):
        # (Q, k*k*P) matching the tap-major im2col column order
        return self.weight.transpose(0, 2, 3, 1).reshape(self.out_ch, -1).astype(dtype, copy=False)

    def forward(self, x, ctx, train=True):
        self.output_shape(x.shape[1:])
        cols, oh, ow = _im2col(x, self.k, self.stride, self.pad)
        y = ctx.gemm(cols, self._wmat(ctx.dtype).T)
        if self.has_bias:
            y = y + self.bias.astype(ctx.dtype)
        b = x.shape[0]
        self.cache = (cols, x.shape, oh, ow)
        return np.ascontiguousarray(y.reshape(b, oh, ow, self.out_ch).transpose(0, 3, 1, 2))

    def backward(self, dy, ctx, need_dx=True):
        if self.cache is None:
            raise RuntimeError(f"{self.name}: backward called without a forward cache")
        cols, xshape, oh, ow = self.cache
        dym = dy.transpose(0, 2, 3, 1).reshape(-1, self.out_ch)
        dw = ctx.gemm(np.ascontiguousarray(dym.T), cols)
        self.grads["weight"] = dw.reshape(self.out_ch, self.k, self.k, self.in_ch).transpose(0, 3, 1, 2).copy()
        if self.has_bias:
            self.grads["bias"] = dym.sum(axis=0)
        self.cache = None
        if not need_dx:
            return None
        dcols = ctx.gemm(dym, self._wmat(ctx.dtype))
        return _col2im(dcols, xshape, self.k, self.stride, self.pad, oh, ow)

    def ops(self, shape, batch, need_dx):
        c, h, w = shape
        _, oh, ow = self.output_shape(shape)
        nparams = self.weight.size + (self.out_ch if self.has_bias else 0)
        base = dict(layer=self.name, kind=self.kind, batch=batch, in_ch=self.in_ch,
                    out_ch=self.out_ch, kernel=self.k, stride=self.stride,
                    in_hw=(h, w), out_hw=(oh, ow), params=nparams)
        out = [LayerOp(phase="forward", saved=batch * c * h * w, **base)]
        if need_dx:
            out.append(LayerOp(phase="grad", **base))
        out.append(LayerOp(phase="update", **base))
        return out


class Dense(Layer):
    kind = "dense"

    def __init__(self, name, in_features, out_features, bias=True, in_space=None,
                 out_space=None, rng=None):
        super().__init__(name)
        self.in_f, self.out_f = in_features, out_features
        self.in_space, self.out_space = in_space, out_space
        self.has_bias = bias
        rng = rng or np.random.default_rng(0)
        self.weight = _he_uniform(rng, (out_features, in_features), in_features)
        self.bias = np.zeros(out_features, np.float32) if bias else None

    def params(self):
        p = {"weight": self.weight}
        if self.has_bias:
            p["bias"] = self.bias
        return p

    def spaces(self):
        s = {"weight": (self.out_space, self.in_space)}
        if self.has_bias:
            s["bias"] = (self.out_space,)
        return s

    def resized(self, sizes):
        return Dense(self.name, sizes.get(self.in_space, self.in_f), sizes.get(self.out_space, self.out_f),
                     self.has_bias, self.in_space, self.out_space)

    def output_shape(self, shape):
        if tuple(shape) != (self.in_f,):
            raise ShapeError(f"{self.name}: expected input ({self.in_f},), got {tuple(shape)}")
        return (self.out_f,)

    def forward(self, x, ctx, train=True):
        self.output_shape(x.shape[1:])
        y = ctx.gemm(x, self.weight.T.astype(ctx.dtype))
        if self.has_bias:
            y = y + self.bias.astype(ctx.dtype)
        self.cache = x
        return y

    def backward(self, dy, ctx, need_dx=True):
        if self.cache is None:
            raise RuntimeError(f"{self.name}: backward called without a forward cache")
        x = self.cache
        self.grads["weight"] = ctx.gemm(np.ascontiguousarray(dy.T), x)
        if self.has_bias:
            self.grads["bias"] = dy.sum(axis=0)
        self.cache = None
        if not need_dx:
            return None
        return ctx.gemm(dy, self.weight.astype(ctx.dtype))

    def ops(self, shape, batch, need_dx):
        nparams = self.weight.size + (self.out_f if self.has_bias else 0)
        base = dict(layer=self.name, kind=self.kind, batch=batch, in_ch=self.in_f,
                    out_ch=self.out_f, params=nparams)
        out = [LayerOp(phase="forward", saved=batch * self.in_f, **base)]
        if need_dx:
            out.append(LayerOp(phase="grad", **base))
        out.append(LayerOp(phase="update", **base))
        return out


class BatchNorm(Layer):
    """Batch norm over NCHW (or NC) inputs using batch statistics in training."""

    kind = "bn"

    def __init__(self, name, channels, space=None, eps=1e-5, momentum=0.1):
        super().__init__(name)
        self.channels, self.space, self.eps, self.momentum = channels, space, eps, momentum
        self.gamma = np.ones(channels, np.float32)
        self.beta = np.zeros(channels, np.float32)
        self.running_mean = np.zeros(channels, np.float32)
        self.running_var = np.ones(channels, np.float32)

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def spaces(self):
        return {k: (self.space,) for k in ("gamma", "beta", "running_mean", "running_var")}

    def resized(self, sizes):
        return BatchNorm(self.name, sizes.get(self.space, self.channels), self.space, self.eps, self.momentum)

    def output_shape(self, shape):
        if shape[0] != self.channels:
            raise ShapeError(f"{self.name}: expected {self.channels} channels, got {shape[0]}")
        return shape

    @staticmethod
    def _axes(x):
        return (0,) if x.ndim == 2 else (0, 2, 3)

    def _bcast(self, v, x):
        return v.reshape((1, -1) + (1,) * (x.ndim - 2)).astype(x.dtype, copy=False)

    def forward(self, x, ctx, train=True):
        self.output_shape(x.shape[1:])
        axes = self._axes(x)
        if train:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            m = np.float32(self.momentum)
            n = x.size // self.channels
            unbiased = var * (n / max(n - 1, 1))
            self.running_mean[:] = (1 - m) * self.running_mean + m * mean.astype(np.float32)
            self.running_var[:] = (1 - m) * self.running_var + m * unbiased.astype(np.float32)
        else:
            mean = self.running_mean.astype(x.dtype)
            var = self.running_var.astype(x.dtype)
        inv = 1.0 / np.sqrt(var + x.dtype.type(self.eps))
        xhat = (x - self._bcast(mean, x)) * self._bcast(inv, x)
        if train:
            self.cache = (xhat, inv)
        return xhat * self._bcast(self.gamma, x) + self._bcast(self.beta, x)

    def backward(self, dy, ctx, need_dx=True):
        if self.cache is None:
            raise RuntimeError(f"{self.name}: backward called without a forward cache")
        xhat, inv = self.cache
        axes = self._axes(dy)
        n = dy.size // self.channels
        self.grads["gamma"] = (dy * xhat).sum(axis=axes)
        self.grads["beta"] = dy.sum(axis=axes)
        self.cache = None
        g = self._bcast(self.gamma.astype(dy.dtype) * inv.astype(dy.dtype), dy)
        dsum = self._bcast(self.grads["beta"], dy)
        dxs = self._bcast(self.grads["gamma"], dy)
        return g * (dy - dsum / n - xhat * dxs / n)

    def ops(self, shape, batch, need_dx):
        el = batch * int(np.prod(shape))
        base = dict(layer=self.name, kind=self.kind, batch=batch, elements=el, params=2 * self.channels)
        return [LayerOp(phase="forward", saved=el, **base), LayerOp(phase="grad", **base)]


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, ctx, train=True):
        mask = x > 0
        self.cache = mask
        return np.where(mask, x, x.dtype.type(0))

    def backward(self, dy, ctx, need_dx=True):
        if self.cache is None:
            raise RuntimeError(f"{self.name}: backward called without a forward cache")
        out = np.where(self.cache, dy, dy.dtype.type(0))
        self.cache = None
        return out

    def ops(self, shape, batch, need_dx):
        el = batch * int(np.prod(shape))
        return [LayerOp(self.name, self.kind, "forward", batch, elements=el),
                LayerOp(self.name, self.kind, "grad", batch, elements=el)]


class GlobalAvgPool(Layer):
    kind = "pool"

    def output_shape(self, shape):
        return (shape[0],)

    def forward(self, x, ctx, train=True):
        self.cache = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, dy, ctx, need_dx=True):
        b, c, h, w = self.cache
        self.cache = None
        return np.broadcast_to((dy / dy.dtype.type(h * w))[:, :, None, None], (b, c, h, w)).copy()

    def ops(self, shape, batch, need_dx):
        el = batch * int(np.prod(shape))
        return [LayerOp(self.name, self.kind, "forward", batch, elements=el),
                LayerOp(self.name, self.kind, "grad", batch, elements=el)]


class AvgPool(Layer):
    """Non-overlapping k x k average pooling."""

    kind = "pool"

    def __init__(self, name="", k=2):
        super().__init__(name)
        self.k = k

    def output_shape(self, shape):
        c, h, w = shape
        return (c, h // self.k, w // self.k)

    def forward(self, x, ctx, train=True):
        b, c, h, w = x.shape
        k = self.k
        self.cache = x.shape
        xc = x[:, :, :h // k * k, :w // k * k]
        return xc.reshape(b, c, h // k, k, w // k, k).mean(axis=(3, 5))

    def backward(self, dy, ctx, need_dx=True):
        b, c, h, w = self.cache
        k = self.k
        self.cache = None
        dx = np.zeros((b, c, h, w), dtype=dy.dtype)
        g = np.repeat(np.repeat(dy / dy.dtype.type(k * k), k, axis=2), k, axis=3)
        dx[:, :, :g.shape[2], :g.shape[3]] = g
        return dx

    def ops(self, shape, batch, need_dx):
        el = batch * int(np.prod(shape))
        return [LayerOp(self.name, self.kind, "forward", batch, elements=el),
                LayerOp(self.name, self.kind, "grad", batch, elements=el)]


class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, shape):
        return (int(np.prod(shape)),)

    def forward(self, x, ctx, train=True):
        self.cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dy, ctx, need_dx=True):
        shape = self.cache
        self.cache = None
        return dy.reshape(shape)


class ResidualBlock(Layer):
    """conv-BN-ReLU-conv-BN plus identity or 1x1 projection shortcut, then ReLU.

    The skip addition runs on the SIMD array.
    """

    kind = "block"

    def __init__(self, name, in_ch, out_ch, stride, in_space, mid_space, out_space, rng=None):
        super().__init__(name)
        self.conv1 = Conv2D(f"{name}.conv1", in_ch, out_ch, 3, stride, in_space=in_space, out_space=mid_space, rng=rng)
        self.bn1 = BatchNorm(f"{name}.bn1", out_ch, mid_space)
        self.relu1 = ReLU(f"{name}.relu1")
        self.conv2 = Conv2D(f"{name}.conv2", out_ch, out_ch, 3, 1, in_space=mid_space, out_space=out_space, rng=rng)
        self.bn2 = BatchNorm(f"{name}.bn2", out_ch, out_space)
        self.projection = stride != 1 or in_ch != out_ch or in_space != out_space
        if self.projection:
            self.sc_conv = Conv2D(f"{name}.shortcut", in_ch, out_ch, 1, stride, pad=0,
                                  in_space=in_space, out_space=out_space, rng=rng)
            self.sc_bn = BatchNorm(f"{name}.shortcut_bn", out_ch, out_space)
        self.relu2 = ReLU(f"{name}.relu2")

    def children(self):
        main = [self.conv1, self.bn1, self.relu1, self.conv2, self.bn2]
        if self.projection:
            main += [self.sc_conv, self.sc_bn]
        return main + [self.relu2]

    def resized(self, sizes):
        out = copy.copy(self)
        out.cache = None
        out.grads = {}
        for attr in ("conv1", "bn1", "relu1", "conv2", "bn2", "relu2") + (("sc_conv", "sc_bn") if self.projection else ()):
            setattr(out, attr, getattr(self, attr).resized(sizes))
        return out

    def output_shape(self, shape):
        s = self.bn2.output_shape(self.conv2.output_shape(self.conv1.output_shape(shape)))
        if self.projection:
            self.sc_conv.output_shape(shape)
        elif tuple(shape) != tuple(s):
            raise ShapeError(f"{self.name}: identity shortcut shape mismatch {shape} vs {s}")
        return s

    def forward(self, x, ctx, train=True):
        h = self.relu1.forward(self.bn1.forward(self.conv1.forward(x, ctx, train), ctx, train), ctx, train)
        h = self.bn2.forward(self.conv2.forward(h, ctx, train), ctx, train)
        s = self.sc_bn.forward(self.sc_conv.forward(x, ctx, train), ctx, train) if self.projection else x
        return self.relu2.forward(h + s, ctx, train)

    def backward(self, dy, ctx, need_dx=True):
        dz = self.relu2.backward(dy, ctx)
        dh = self.bn2.backward(dz, ctx)
        dh = self.conv2.backward(dh, ctx)
        dh = self.relu1.backward(dh, ctx)
        dh = self.bn1.backward(dh, ctx)
        dx = self.conv1.backward(dh, ctx, need_dx)
        if self.projection:
            ds = self.sc_conv.backward(self.sc_bn.backward(dz, ctx), ctx, need_dx)
        else:
            ds = dz
        return dx + ds if need_dx else None

    def ops(self, shape, batch, need_dx):
        out = []
        s = shape
        for layer in (self.conv1, self.bn1, self.relu1, self.conv2, self.bn2):
            out += layer.ops(s, batch, True if layer is not self.conv1 else need_dx)
            s = layer.output_shape(s)
        if self.projection:
            out += self.sc_conv.ops(shape, batch, need_dx)
            out += self.sc_bn.ops(self.sc_conv.output_shape(shape), batch, True)
        el_out = batch * int(np.prod(s))
        out.append(LayerOp(f"{self.name}.add", "add", "forward", batch, elements=el_out))
        out += self.relu2.ops(s, batch, True)
        if need_dx:
            out.append(LayerOp(f"{self.name}.add", "add", "grad", batch, elements=batch * int(np.prod(shape))))
        return out


# ---------------------------------------------------------------------------
# model

def _leaves(layer: Layer):
    kids = layer.children()
    if not kids:
        yield layer
    for k in kids:
        yield from _leaves(k)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy and its gradient with respect to the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    b = logits.shape[0]
    idx = np.arange(b)
    loss = float(-np.log(np.maximum(p[idx, labels], np.finfo(p.dtype).tiny)).mean())
    d = p.copy()
    d[idx, labels] -= 1
    return loss, d / logits.dtype.type(b)


class Model:
    """Ordered layer list ending in logits; the loss is softmax cross-entropy."""

    def __init__(self, layers: list[Layer], in_shape: tuple, num_classes: int, arch: dict | None = None):
        self.layers = layers
        self.in_shape = tuple(in_shape)
        self.num_classes = num_classes
        self.arch = arch or {}
        shape = self.in_shape
        for layer in layers:
            shape = layer.output_shape(shape)
        if tuple(shape) != (num_classes,):
            raise ShapeError(f"model output shape {shape} does not match {num_classes} classes")

    # state ---------------------------------------------------------------
    def leaves(self):
        for layer in self.layers:
            yield from _leaves(layer)

    def params(self) -> dict[str, np.ndarray]:
        return {f"{l.name}.{k}": v for l in self.leaves() for k, v in l.params().items()}

    def grads(self) -> dict[str, np.ndarray]:
        out = {}
        for l in self.leaves():
            for k, v in l.params().items():
                out[f"{l.name}.{k}"] = l.grads.get(k, np.zeros_like(v))
        return out

    def state(self) -> dict[str, np.ndarray]:
        """Parameters and batch-norm running statistics (live references)."""
        out = {}
        for l in self.leaves():
            for k, v in {**l.params(), **l.buffers()}.items():
                out[f"{l.name}.{k}"] = v
        return out

    def state_copy(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.state().items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        mine = self.state()
        if set(mine) != set(state):
            raise ShapeError("state keys do not match the model")
        for k, v in mine.items():
            if v.shape != np.shape(state[k]):
                raise ShapeError(f"{k}: shape {np.shape(state[k])} != {v.shape}")
            np.copyto(v, state[k])

    def spaces(self) -> dict[str, tuple]:
        return {f"{l.name}.{k}": v for l in self.leaves() for k, v in l.spaces().items()}

    def space_sizes(self) -> dict[str, int]:
        sizes = {}
        st = self.state()
        for name, axes in self.spaces().items():
            for ax, sp in enumerate(axes):
                if sp is not None:
                    n = st[name].shape[ax]
                    if sizes.setdefault(sp, n) != n:
                        raise ShapeError(f"channel space {sp} has inconsistent sizes")
        return sizes

    def resized(self, sizes: dict[str, int]) -> "Model":
        return Model([l.resized(sizes) for l in self.layers], self.in_shape, self.num_classes, self.arch)

    def num_params(self) -> int:
        return sum(v.size for v in self.params().values())

    def copy(self) -> "Model":
        m = self.resized({})
        m.load_state(self.state())
        return m

    # compute -------------------------------------------------------------
    def _first_gemm(self):
        for i, l in enumerate(self.layers):
            if any(x.kind in ("conv", "dense") for x in _leaves(l)):
                return i
        return len(self.layers)

    def forward(self, x: np.ndarray, ctx: Context, train: bool = True) -> np.ndarray:
        if tuple(x.shape[1:]) != self.in_shape:
            raise ShapeError(f"batch shape {x.shape[1:]} does not match model input {self.in_shape}")
        h = x.astype(ctx.dtype, copy=False)
        for layer in self.layers:
            h = layer.forward(h, ctx, train)
        return h

    def backward(self, dlogits: np.ndarray, ctx: Context) -> dict[str, np.ndarray]:
        first = self._first_gemm()
        d = dlogits
        for i in range(len(self.layers) - 1, -1, -1):
            d = self.layers[i].backward(d, ctx, need_dx=i > first)
            if i <= first:
                break
        return self.grads()

    def loss_and_grads(self, x, labels, ctx: Context):
        logits = self.forward(x, ctx, train=True)
        loss, d = softmax_cross_entropy(logits, labels)
        return loss, self.backward(d, ctx)

    def predict(self, x: np.ndarray, ctx: Context | None = None, batch_size: int = 256) -> np.ndarray:
        ctx = ctx or Context()
        out = []
        for i in range(0, len(x), batch_size):
            out.append(self.forward(x[i:i + batch_size], ctx, train=False).argmax(axis=1))
        return np.concatenate(out) if out else np.zeros(0, np.int64)

    def step_ops(self, batch: int) -> list[LayerOp]:
        """Shape-only record of one training step (forward, backward, SGD)."""
        first = self._first_gemm()
        ops = []
        shape = self.in_shape
        for i, layer in enumerate(self.layers):
            ops += layer.ops(shape, batch, i > first)
            shape = layer.output_shape(shape)
        ops.append(LayerOp("loss", "softmax", "forward", batch, elements=batch * self.num_classes))
        ops.append(LayerOp("loss", "softmax", "grad", batch, elements=batch * self.num_classes))
        n = self.num_params()
        ops.append(LayerOp("sgd", "sgd", "update", batch, elements=n, params=n))
        return ops

    def trace_step(self, batch: int) -> TrainStepTrace:
        t = TrainStepTrace(batches=1)
        for op in self.step_ops(batch):
            t.add(op)
        return t


# ---------------------------------------------------------------------------
# training

def sgd_update(model: Model, grads: dict[str, np.ndarray], lr: float) -> Model:
    """In-place w <- w - lr * g on the binary32 master weights."""
    params = model.params()
    lr32 = np.float32(lr)
    for name, g in grads.items():
        w = params[name]
        if g.shape != w.shape:
            raise ShapeError(f"{name}: gradient shape {g.shape} != {w.shape}")
        w -= (lr32 * g.astype(np.float32)).astype(w.dtype)
    return model


@dataclass
class Proximal:
    mu: float
    anchor: dict[str, np.ndarray]


@dataclass
class LocalResult:
    trace: TrainStepTrace
    loss: float
    batches: int
    samples: int


def _augment(x: np.ndarray, rng: np.random.Generator, flip: bool, crop: int) -> np.ndarray:
    if flip:
        m = rng.random(len(x)) < 0.5
        x = x.copy()
        x[m] = x[m, :, :, ::-1]
    if crop:
        b, c, h, w = x.shape
        xp = np.pad(x, ((0, 0), (0, 0), (crop, crop), (crop, crop)))
        dy = rng.integers(0, 2 * crop + 1, b)
        dx = rng.integers(0, 2 * crop + 1, b)
        x = np.stack([xp[i, :, dy[i]:dy[i] + h, dx[i]:dx[i] + w] for i in range(b)])
    return x


def local_train(model: Model, x: np.ndarray, y: np.ndarray, *, epochs: int = 1, batch_size: int = 32,
                spec: MultiplierSpec | None = None, lr: float = 0.1, rng: np.random.Generator | None = None,
                proximal: Proximal | None = None, batch_fraction: float = 1.0,
                flip: bool = False, crop: int = 0) -> LocalResult:
    """Run local SGD on one shard, returning the trace for energy accounting.

    Each epoch shuffles the shard, splits it into ceil(n / batch_size)
    mini-batches and processes the first ceil(batch_fraction * count) of them.
    A proximal term adds mu * (w - anchor) to every parameter gradient.
    """
    n = len(x)
    if n == 0:
        raise EmptyShard("client shard is empty")
    if not 0 < batch_fraction <= 1:
        raise ValueError("batch_fraction must be in (0, 1]")
    ctx = Context(spec)
    rng = rng or np.random.default_rng(0)
    nb = -(-n // batch_size)
    keep = int(np.ceil(batch_fraction * nb - 1e-9))
    trace = TrainStepTrace()
    losses = []
    seen = 0
    mu = np.float32(proximal.mu) if proximal else None
    for _ in range(epochs):
        order = rng.permutation(n)
        for bi in range(keep):
            idx = order[bi * batch_size:(bi + 1) * batch_size]
            xb = x[idx]
            if flip or crop:
                xb = _augment(xb, rng, flip, crop)
            loss, grads = model.loss_and_grads(xb, y[idx], ctx)
            if proximal is not None:
                params = model.params()
                grads = {k: g + mu * (params[k] - proximal.anchor[k]) for k, g in grads.items()}
            sgd_update(model, grads, lr)
            trace.extend(model.trace_step(len(idx)))
            losses.append(loss)
            seen += len(idx)
    return LocalResult(trace, float(np.mean(losses)), len(losses), seen)

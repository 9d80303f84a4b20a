"""Neural primitives: convolutions, GLU/ELU, normalization, LSTM, attention.

Functional forms take explicit weights; the small ``Module`` wrappers own
named parameters so that blocks can be assembled with stable names for
checkpoints. Passing ``rng=None`` to a constructor builds a *shape-only*
module whose parameters are zero-stride views (used for counting the
large ``paper`` preset without allocating it).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

LN_EPS = 1e-5
BN_EPS = 1e-5


class ShapeError(ValueError):
    pass


# --- specs --------------------------------------------------------------------

def _pair(v, dims):
    if isinstance(v, int):
        return (v,) * dims
    v = tuple(int(i) for i in v)
    if len(v) != dims:
        raise ShapeError(f"expected {dims} values, got {v}")
    return v


@dataclass(frozen=True)
class ConvSpec:
    dims: int
    in_channels: int
    out_channels: int
    kernel: tuple[int, ...]
    stride: tuple[int, ...] = None
    dilation: tuple[int, ...] = None
    padding: tuple[int, ...] = None
    transposed: bool = False
    output_padding: tuple[int, ...] = None

    def __post_init__(self):
        if self.dims not in (1, 2):
            raise ShapeError("dims must be 1 or 2")
        d = self.dims
        object.__setattr__(self, "kernel", _pair(self.kernel, d))
        for name, default in (("stride", 1), ("dilation", 1), ("padding", 0),
                              ("output_padding", 0)):
            v = getattr(self, name)
            object.__setattr__(self, name, _pair(default if v is None else v, d))
        if min(self.in_channels, self.out_channels) <= 0:
            raise ShapeError("channel counts must be positive")
        if min(self.kernel + self.stride + self.dilation) <= 0:
            raise ShapeError("kernel/stride/dilation must be positive")
        if min(self.padding) < 0 or min(self.output_padding) < 0:
            raise ShapeError("padding must be non-negative")
        if not self.transposed and any(self.output_padding):
            raise ShapeError("output_padding only applies to transposed convs")

    def out_size(self, in_size) -> tuple[int, ...]:
        in_size = _pair(in_size, self.dims)
        out = []
        for n, k, s, p, dl, op in zip(in_size, self.kernel, self.stride, self.padding,
                                      self.dilation, self.output_padding):
            if self.transposed:
                m = ad.conv_transpose_out_size(n, k, s, p, dl, op)
            else:
                m = ad.conv_out_size(n, k, s, p, dl)
            if m <= 0:
                raise ShapeError(f"{self} gives empty output for input {in_size}")
            out.append(m)
        return tuple(out)

    def inverse(self, in_size) -> "ConvSpec":
        """Transposed spec mapping this conv's output size back to ``in_size``."""
        if self.transposed:
            raise ShapeError("inverse() is defined for forward convs")
        in_size = _pair(in_size, self.dims)
        fwd = self.out_size(in_size)
        ops = []
        for n, m, k, s, p, dl in zip(in_size, fwd, self.kernel, self.stride,
                                     self.padding, self.dilation):
            op = n - ad.conv_transpose_out_size(m, k, s, p, dl)
            if not 0 <= op < max(s, dl):
                raise ShapeError(f"no transposed conv inverts {self} at size {n}")
            ops.append(op)
        return replace(self, in_channels=self.out_channels, out_channels=self.in_channels,
                       transposed=True, output_padding=tuple(ops))

    @property
    def weight_shape(self) -> tuple[int, ...]:
        if self.transposed:
            return (self.in_channels, self.out_channels) + self.kernel
        return (self.out_channels, self.in_channels) + self.kernel

    @property
    def fan_in(self) -> int:
        return self.in_channels * math.prod(self.kernel)


def same_padding(kernel: int, dilation: int = 1) -> int:
    extent = dilation * (kernel - 1)
    if extent % 2:
        raise ShapeError("same padding needs an odd effective kernel")
    return extent // 2


# --- functional ---------------------------------------------------------------

def conv(x, spec: ConvSpec, weight, bias=None) -> Tensor:
    """Convolution (or its transpose) of (B, C, *spatial) input per ``spec``."""
    x = ad.as_tensor(x)
    if x.ndim != spec.dims + 2 or x.shape[1] != spec.in_channels:
        raise ShapeError(f"conv input {x.shape} does not match {spec}")
    spec.out_size(x.shape[2:])
    w = ad.as_tensor(weight)
    if w.shape != spec.weight_shape:
        raise ShapeError(f"weight {w.shape} != {spec.weight_shape}")
    if spec.dims == 1:
        x = x.reshape(x.shape[0], x.shape[1], 1, x.shape[2])
        w = w.reshape(w.shape[0], w.shape[1], 1, w.shape[2])
        k = dict(stride=(1,) + spec.stride, padding=(0,) + spec.padding,
                 dilation=(1,) + spec.dilation)
        op = (0,) + spec.output_padding
    else:
        k = dict(stride=spec.stride, padding=spec.padding, dilation=spec.dilation)
        op = spec.output_padding
    if spec.transposed:
        y = ad.conv_transpose2d(x, w, bias, output_padding=op, **k)
    else:
        y = ad.conv2d(x, w, bias, **k)
    if spec.dims == 1:
        y = y.reshape(y.shape[0], y.shape[1], y.shape[3])
    return y


def glu(x, axis: int = 1) -> Tensor:
    """Split channels into (a, b) halves and return a * sigmoid(b)."""
    x = ad.as_tensor(x)
    c = x.shape[axis]
    if c % 2:
        raise ShapeError(f"glu needs an even channel count, got {c}")
    lo = [slice(None)] * x.ndim
    hi = [slice(None)] * x.ndim
    lo[axis] = slice(0, c // 2)
    hi[axis] = slice(c // 2, c)
    return x[tuple(lo)] * ad.sigmoid(x[tuple(hi)])


elu = ad.elu


def layer_norm(x, gain=None, bias=None, axes=(-1,), eps: float = LN_EPS) -> Tensor:
    x = ad.as_tensor(x)
    mu = ad.mean(x, axes, keepdims=True)
    xc = x - mu
    var = ad.mean(ad.square(xc), axes, keepdims=True)
    y = xc / ad.sqrt(var + eps)
    if gain is not None:
        y = y * gain
    if bias is not None:
        y = y + bias
    return y


@dataclass
class BatchStats:
    mean: np.ndarray
    var: np.ndarray
    count: int = 0


def batch_norm(x, stats: BatchStats | None, gain=None, bias=None, training: bool = True,
               momentum: float = 0.1, eps: float = BN_EPS) -> Tensor:
    """Per-channel normalization of (B, C, ...) input.

    In training mode batch statistics are used and ``stats`` (if given) is
    updated in place with an exponential moving average; inference mode
    requires existing statistics.
    """
    x = ad.as_tensor(x)
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, x.shape[1]) + (1,) * (x.ndim - 2)
    if training:
        mu = ad.mean(x, axes, keepdims=True)
        xc = x - mu
        var = ad.mean(ad.square(xc), axes, keepdims=True)
        y = xc / ad.sqrt(var + eps)
        if stats is not None:
            n = x.size // x.shape[1]
            unbiased = var.data.reshape(-1) * (n / max(n - 1, 1))
            stats.mean[:] = (1 - momentum) * stats.mean + momentum * mu.data.reshape(-1)
            stats.var[:] = (1 - momentum) * stats.var + momentum * unbiased
            stats.count += 1
    else:
        if stats is None:
            raise ValueError("inference-mode batch_norm needs running statistics")
        y = (x - stats.mean.reshape(bshape)) / np.sqrt(stats.var.reshape(bshape) + eps)
    if gain is not None:
        y = y * ad.as_tensor(gain).reshape(bshape)
    if bias is not None:
        y = y + ad.as_tensor(bias).reshape(bshape)
    return y


def lstm(x, w_ih, w_hh, bias) -> Tensor:
    return ad.lstm(x, w_ih, w_hh, bias)


@dataclass(frozen=True)
class MHSAConfig:
    model_dim: int
    heads: int = 2
    axis: str = "time"
    scale: str = "head_dim"  # or "length" for the 1/sqrt(sequence length) variant

    def __post_init__(self):
        if self.model_dim % self.heads:
            raise ShapeError(f"model_dim {self.model_dim} not divisible by {self.heads} heads")
        if self.axis not in ("time", "frequency"):
            raise ShapeError(f"unknown attention axis {self.axis!r}")
        if self.scale not in ("head_dim", "length"):
            raise ShapeError(f"unknown attention scale {self.scale!r}")


def mhsa(x, cfg: MHSAConfig, wq, wk, wv, wo, return_weights: bool = False):
    """Multi-head self-attention over sequences x of shape (N, L, D).

    Projections are right-multiplied, ``x @ W``. Heads attend independently
    and are concatenated before the output projection.
    """
    x = ad.as_tensor(x)
    N, L, D = x.shape
    if D != cfg.model_dim:
        raise ShapeError(f"mhsa expects model_dim {cfg.model_dim}, got {D}")
    h = cfg.heads
    dk = D // h

    def split(t):
        return t.reshape(N, L, h, dk).transpose(0, 2, 1, 3).reshape(N * h, L, dk)

    q, k, v = split(x @ wq), split(x @ wk), split(x @ wv)
    scale = math.sqrt(dk if cfg.scale == "head_dim" else L)
    logits = ad.matmul(q, k.transpose(0, 2, 1)) * (1.0 / scale)
    weights = ad.softmax(logits, axis=-1)
    heads = ad.matmul(weights, v).reshape(N, h, L, dk).transpose(0, 2, 1, 3)
    out = heads.reshape(N, L, D) @ wo
    if return_weights:
        return out, weights.data.reshape(N, h, L, L)
    return out


# --- modules ------------------------------------------------------------------

class Module:
    """Minimal container of named parameters, buffers and child modules."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def add_module(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def param(self, name: str, shape, rng: np.random.Generator | None,
              init: str = "uniform", fan_in: int | None = None) -> Tensor:
        shape = tuple(int(s) for s in shape)
        if rng is None:
            data = np.broadcast_to(np.float64(0.0), shape)
        elif init == "uniform":
            bound = math.sqrt(1.0 / (fan_in or shape[-1]))
            data = rng.uniform(-bound, bound, size=shape)
        elif init == "zeros":
            data = np.zeros(shape)
        elif init == "ones":
            data = np.ones(shape)
        else:
            raise ValueError(f"unknown init {init!r}")
        t = Tensor(data, requires_grad=True, name=name)
        self._params[name] = t
        object.__setattr__(self, name, t)
        return t

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for n, p in self._params.items():
            yield prefix + n, p
        for cn, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{cn}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for n, b in self._buffers.items():
            yield prefix + n, b
        for cn, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{cn}.")

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix.rstrip("."), self
        for cn, child in self._children.items():
            yield from child.named_modules(f"{prefix}{cn}.")

    def train(self, mode: bool = True) -> "Module":
        for _, m in self.named_modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._items: list[Module] = []
        for m in modules:
            self.append(m)

    def append(self, m: Module) -> None:
        self.add_module(str(len(self._items)), m)
        self._items.append(m)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


class Conv(Module):
    def __init__(self, spec: ConvSpec, rng, bias: bool = True):
        super().__init__()
        self.spec = spec
        self.param("weight", spec.weight_shape, rng, fan_in=spec.fan_in)
        if bias:
            self.param("bias", (spec.out_channels,), rng, init="zeros")
        else:
            object.__setattr__(self, "bias", None)

    def forward(self, x):
        return conv(x, self.spec, self.weight, self.bias)

    def out_size(self, in_size):
        return self.spec.out_size(in_size)


class LayerNorm(Module):
    """Normalizes (B, C, T, F) maps over channels and frequency, per frame."""

    def __init__(self, channels: int, rng):
        super().__init__()
        self.param("gain", (1, channels, 1, 1), rng, init="ones")
        self.param("bias", (1, channels, 1, 1), rng, init="zeros")

    def forward(self, x):
        return layer_norm(x, self.gain, self.bias, axes=(1, 3))


class BatchNorm(Module):
    def __init__(self, channels: int, rng, momentum: float = 0.1):
        super().__init__()
        self.momentum = momentum
        self.param("gain", (channels,), rng, init="ones")
        self.param("bias", (channels,), rng, init="zeros")
        self.stats = BatchStats(np.zeros(channels), np.ones(channels))
        self._buffers["running_mean"] = self.stats.mean
        self._buffers["running_var"] = self.stats.var

    def forward(self, x):
        return batch_norm(x, self.stats, self.gain, self.bias, self.training, self.momentum)


class LSTM(Module):
    def __init__(self, input_dim: int, hidden_dim: int, rng):
        super().__init__()
        if input_dim <= 0 or hidden_dim <= 0:
            raise ShapeError("LSTM dims must be positive")
        self.hidden_dim = hidden_dim
        self.param("w_ih", (4 * hidden_dim, input_dim), rng, fan_in=hidden_dim)
        self.param("w_hh", (4 * hidden_dim, hidden_dim), rng, fan_in=hidden_dim)
        self.param("bias", (4 * hidden_dim,), rng, init="zeros")

    def forward(self, x):
        return lstm(x, self.w_ih, self.w_hh, self.bias)


class MHSA(Module):
    def __init__(self, cfg: MHSAConfig, rng):
        super().__init__()
        self.cfg = cfg
        d = cfg.model_dim
        for n in ("wq", "wk", "wv", "wo"):
            self.param(n, (d, d), rng, fan_in=d)

    def forward(self, x, return_weights: bool = False):
        return mhsa(x, self.cfg, self.wq, self.wk, self.wv, self.wo, return_weights)

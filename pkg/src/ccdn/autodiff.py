"""Small reverse-mode differentiation substrate.

Tensors wrap numpy arrays. Operations performed while a :class:`Tape` is
active are recorded together with their backward rules; :func:`backward`
replays the tape in reverse and returns a gradient map keyed by tensor id.
Outside a tape the same operations run as plain numpy (inference mode).

    >>> x = Tensor(3.0, requires_grad=True)
    >>> with Tape() as tape:
    ...     y = x * x
    >>> backward(y, tape)[x.id]
    array(6.)
"""
from __future__ import annotations

import contextvars
import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64
ORIGIN_TOL = 1e-12

_ids = itertools.count(1)
_active_tape: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "ccdn_active_tape", default=None
)
_debug = False


class AutodiffError(ValueError):
    pass


def set_debug(flag: bool) -> None:
    """Enable the finite-value guard on every recorded forward result."""
    global _debug
    _debug = bool(flag)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "id", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype != DTYPE and arr.dtype.kind != "f":
            arr = arr.astype(DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.id = next(_ids)
        self.name = name

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __neg__ = lambda self: neg(self)
    __matmul__ = lambda self, o: matmul(self, o)
    __getitem__ = lambda self, idx: getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


@dataclass
class Node:
    op: str
    inputs: tuple[int, ...]
    output: int
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of primitive operations.

    Usable as a context manager; nested tapes are not supported.
    """

    nodes: list[Node] = field(default_factory=list)
    leaves: dict[int, Tensor] = field(default_factory=dict)
    produced: dict[int, tuple[int, ...]] = field(default_factory=dict)
    _token: object = None

    def __enter__(self) -> "Tape":
        if _active_tape.get() is not None:
            raise AutodiffError("a tape is already active in this context")
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tape.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.nodes)

    def watch(self, t: Tensor) -> None:
        if t.requires_grad and t.id not in self.produced:
            self.leaves.setdefault(t.id, t)

    def record(self, op, inputs: Sequence[Tensor], out: Tensor, fn) -> None:
        for t in inputs:
            if t.requires_grad and t.id not in self.produced:
                self.leaves.setdefault(t.id, t)
        shape = out.shape
        self.produced[out.id] = shape
        self.nodes.append(Node(op, tuple(t.id for t in inputs), out.id, fn))


def current_tape() -> Tape | None:
    return _active_tape.get()


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=DTYPE))


def _make(op: str, data: np.ndarray, inputs: Sequence[Tensor], fn) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    tape = _active_tape.get()
    if needs and tape is not None:
        if _debug and not np.all(np.isfinite(data)):
            raise FloatingPointError(f"non-finite output from {op}")
        tape.record(op, inputs, out, fn)
    return out


def backward(loss: Tensor, tape: Tape, wrt: Sequence[Tensor] = ()) -> dict[int, np.ndarray]:
    """Reverse sweep over ``tape`` starting from a scalar ``loss``.

    Returns gradients for every requires-grad leaf seen by the tape (plus any
    tensors in ``wrt``); leaves the loss does not reach get zero arrays.
    Leaf ``.grad`` attributes are set as a side effect.
    """
    if loss.size != 1:
        raise AutodiffError(f"loss must be scalar, got shape {loss.shape}")
    if loss.id not in tape.produced and loss.id not in tape.leaves:
        raise AutodiffError(f"tensor {loss.id} was not produced on this tape")

    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data, dtype=DTYPE)}
    for node in reversed(tape.nodes):
        g = grads.pop(node.output, None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for tid, gi in zip(node.inputs, in_grads):
            if gi is None:
                continue
            if tid not in tape.produced and tid not in tape.leaves:
                continue
            prev = grads.get(tid)
            grads[tid] = gi if prev is None else prev + gi

    result: dict[int, np.ndarray] = {}
    targets = dict(tape.leaves)
    for t in wrt:
        targets.setdefault(t.id, t)
    for tid, t in targets.items():
        g = grads.get(tid)
        if g is None:
            g = np.zeros_like(t.data, dtype=DTYPE)
        elif g.shape != t.shape:
            raise AutodiffError(f"gradient shape {g.shape} != leaf shape {t.shape}")
        t.grad = g
        result[tid] = g
    return result


def grad_of(f: Callable[[Tensor], Tensor], x: Tensor) -> np.ndarray:
    with Tape() as tape:
        tape.watch(x)
        y = f(x)
    return backward(y, tape, wrt=[x])[x.id]


def finite_difference_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-6,
                            indices=None) -> float:
    """Max relative error between tape gradients and central differences.

    Per element: |analytic - cd| / max(|analytic|, |cd|, 1e-12), with
    cd = (f(x + eps e_i) - f(x - eps e_i)) / (2 eps).

    ``indices`` restricts the comparison to a subset of flat positions of
    ``x``; it may also be a callable mapping the flat analytic gradient to
    the positions to check.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise AutodiffError("eps must lie in [1e-7, 1e-3]")
    if not np.all(np.isfinite(x.data)):
        raise AutodiffError("x must be finite")
    was = x.requires_grad
    x.requires_grad = True
    try:
        with Tape() as tape:
            y = f(x)
        if y.size != 1:
            raise AutodiffError("f must return a scalar")
        analytic = backward(y, tape, wrt=[x])[x.id].ravel()
    finally:
        x.requires_grad = was

    flat = x.data.reshape(-1)
    if indices is None:
        indices = range(flat.size)
    elif callable(indices):
        indices = indices(analytic)
    worst = 0.0
    for i in indices:
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x).data)
        flat[i] = orig - eps
        fm = float(f(x).data)
        flat[i] = orig
        cd = (fp - fm) / (2 * eps)
        a = analytic[i]
        err = abs(a - cd) / max(abs(a), abs(cd), 1e-12)
        worst = max(worst, err)
    return worst


# --- shape helpers -----------------------------------------------------------

def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> tuple[int, ...]:
    # one-sided broadcasting only: the result must have one operand's shape
    if a.shape == b.shape:
        return a.shape
    out = np.broadcast_shapes(a.shape, b.shape)
    if out != a.shape and out != b.shape:
        raise AutodiffError(f"{op}: incompatible shapes {a.shape} and {b.shape}")
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# --- elementwise binary -------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "add")
    sa, sb = a.shape, b.shape
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "sub")
    sa, sb = a.shape, b.shape
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "mul")
    ad, bd = a.data, b.data

    def fn(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)
    return _make("mul", ad * bd, (a, b), fn)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def fn(g):
        return (_unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None)
    return _make("div", out, (a, b), fn)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make("neg", -a.data, (a,), lambda g: (-g,))


# --- elementwise unary --------------------------------------------------------

def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make("log", np.log(ad), (a,), lambda g: (g / ad,))


def log10(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make("log10", np.log10(ad), (a,), lambda g: (g / (ad * np.log(10.0)),))


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make("square", ad * ad, (a,), lambda g: (2.0 * g * ad,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)

    def fn(g):
        safe = np.where(out > ORIGIN_TOL, out, 1.0)
        return (np.where(out > ORIGIN_TOL, g / (2.0 * safe), 0.0),)
    return _make("sqrt", out, (a,), fn)


def tabs(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make("abs", np.abs(ad), (a,), lambda g: (g * np.sign(ad),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # split evaluation keeps exp() from overflowing for large |x|
    ex = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + ex), ex / (1.0 + ex))
    return _make("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def elu(a, alpha: float = 1.0) -> Tensor:
    a = as_tensor(a)
    x = a.data
    em1 = np.expm1(np.minimum(x, 0.0))
    out = np.where(x > 0, x, alpha * em1)
    deriv = np.where(x > 0, 1.0, alpha * (em1 + 1.0))
    return _make("elu", out, (a,), lambda g: (g * deriv,))


def cos(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make("cos", np.cos(ad), (a,), lambda g: (-g * np.sin(ad),))


def sin(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make("sin", np.sin(ad), (a,), lambda g: (g * np.cos(ad),))


def hypot(re, im) -> Tensor:
    """sqrt(re**2 + im**2) with a zero subgradient at the origin."""
    re, im = as_tensor(re), as_tensor(im)
    if re.shape != im.shape:
        raise AutodiffError(f"hypot: shapes {re.shape} and {im.shape} differ")
    r, i = re.data, im.data
    out = np.hypot(r, i)

    def fn(g):
        ok = out >= ORIGIN_TOL
        inv = np.where(ok, 1.0 / np.where(ok, out, 1.0), 0.0)
        return g * r * inv, g * i * inv
    return _make("hypot", out, (re, im), fn)


def atan2(im, re) -> Tensor:
    """Four-quadrant angle of re + j*im; 0 (value and gradient) at the origin."""
    im, re = as_tensor(im), as_tensor(re)
    if re.shape != im.shape:
        raise AutodiffError(f"atan2: shapes {im.shape} and {re.shape} differ")
    i, r = im.data, re.data
    mag2 = r * r + i * i
    ok = mag2 >= ORIGIN_TOL ** 2
    out = np.where(ok, np.arctan2(i, r), 0.0)

    def fn(g):
        inv = np.where(ok, 1.0 / np.where(ok, mag2, 1.0), 0.0)
        return g * r * inv, -g * i * inv
    return _make("atan2", out, (im, re), fn)


# --- reductions ---------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)
    return _make("sum", out, (a,), fn)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return tsum(a, axes, keepdims) * (1.0 / n)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    x = a.data
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def fn(g):
        # vector-Jacobian product: y * (g - <g, y>)
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)
    return _make("softmax", out, (a,), fn)


# --- shape ops ----------------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _make("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make("transpose", np.ascontiguousarray(a.data.transpose(axes)), (a,),
                 lambda g: (g.transpose(inv),))


def swapaxes(a, i: int, j: int) -> Tensor:
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, axes)


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def fn(g):
        out = np.zeros(shape, dtype=DTYPE)
        if _is_advanced(idx):
            np.add.at(out, idx, g)
        else:
            out[idx] = g
        return (out,)
    return _make("getitem", a.data[idx], (a,), fn)


def _is_advanced(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    axis = axis % ts[0].ndim
    sizes = [t.shape[axis] for t in ts]
    cuts = np.cumsum(sizes)[:-1]
    return _make("concat", np.concatenate([t.data for t in ts], axis=axis), ts,
                 lambda g: tuple(np.split(g, cuts, axis=axis)))


def pad(a, widths: Sequence[tuple[int, int]]) -> Tensor:
    """Zero padding; ``widths`` follows numpy.pad's per-axis (before, after)."""
    a = as_tensor(a)
    widths = tuple(tuple(w) for w in widths)
    sl = tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, a.shape))
    return _make("pad", np.pad(a.data, widths), (a,), lambda g: (g[sl],))


# --- linear algebra -----------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes.

    Leading batch axes must agree, or ``b`` may be a plain 2-D weight shared
    across the batch.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise AutodiffError("matmul operands need at least 2 dims")
    if b.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
        raise AutodiffError(f"matmul batch mismatch {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise AutodiffError(f"matmul inner mismatch {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def fn(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if bd.ndim == 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb
    return _make("matmul", ad @ bd, (a, b), fn)


# --- convolution --------------------------------------------------------------

def _gather(xp: np.ndarray, k, s, d, out_hw) -> np.ndarray:
    """(B, C, H, W) padded input -> (B, C, kh, kw, Ho, Wo) patch tensor."""
    kh, kw = k
    Ho, Wo = out_hw
    B, C = xp.shape[:2]
    cols = np.empty((B, C, kh, kw, Ho, Wo), dtype=xp.dtype)
    for i in range(kh):
        hi = i * d[0]
        for j in range(kw):
            wj = j * d[1]
            cols[:, :, i, j] = xp[:, :, hi:hi + s[0] * (Ho - 1) + 1:s[0],
                                  wj:wj + s[1] * (Wo - 1) + 1:s[1]]
    return cols


def _scatter(cols: np.ndarray, full_hw, s, d) -> np.ndarray:
    """Adjoint of :func:`_gather`: accumulate patches into a (B, C, H, W) map."""
    B, C, kh, kw, Ho, Wo = cols.shape
    out = np.zeros((B, C) + tuple(full_hw), dtype=cols.dtype)
    for i in range(kh):
        hi = i * d[0]
        for j in range(kw):
            wj = j * d[1]
            out[:, :, hi:hi + s[0] * (Ho - 1) + 1:s[0],
                wj:wj + s[1] * (Wo - 1) + 1:s[1]] += cols[:, :, i, j]
    return out


def conv_out_size(n: int, k: int, s: int, p: int, d: int) -> int:
    return (n + 2 * p - d * (k - 1) - 1) // s + 1


def conv_transpose_out_size(n: int, k: int, s: int, p: int, d: int, op: int = 0) -> int:
    return (n - 1) * s - 2 * p + d * (k - 1) + 1 + op


def conv2d(x, w, b=None, stride=(1, 1), padding=(0, 0), dilation=(1, 1)) -> Tensor:
    """Cross-correlation of (B, Cin, H, W) with weights (Cout, Cin, kh, kw)."""
    x, w = as_tensor(x), as_tensor(w)
    B, C, H, W = x.shape
    O, Ci, kh, kw = w.shape
    if C != Ci:
        raise AutodiffError(f"conv2d: input has {C} channels, weight expects {Ci}")
    s, p, d = tuple(stride), tuple(padding), tuple(dilation)
    Ho = conv_out_size(H, kh, s[0], p[0], d[0])
    Wo = conv_out_size(W, kw, s[1], p[1], d[1])
    if Ho <= 0 or Wo <= 0:
        raise AutodiffError(f"conv2d: empty output for input {x.shape}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (p[0], p[0]), (p[1], p[1]))) if any(p) else x.data
    cols = _gather(xp, (kh, kw), s, d, (Ho, Wo)).reshape(B, C * kh * kw, Ho * Wo)
    wm = w.data.reshape(O, -1)
    out = (wm @ cols).reshape(B, O, Ho, Wo)
    inputs = [x, w]
    if b is not None:
        b = as_tensor(b)
        out = out + b.data.reshape(1, O, 1, 1)
        inputs.append(b)
    padded_hw = xp.shape[2:]

    def fn(g):
        gm = g.reshape(B, O, Ho * Wo)
        gx = gw = gb = None
        if x.requires_grad:
            gcols = (wm.T @ gm).reshape(B, C, kh, kw, Ho, Wo)
            gxp = _scatter(gcols, padded_hw, s, d)
            gx = gxp[:, :, p[0]:p[0] + H, p[1]:p[1] + W]
        if w.requires_grad:
            gw = np.einsum("bon,bkn->ok", gm, cols).reshape(w.shape)
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw, gb)[:len(inputs)]
    return _make("conv2d", out, inputs, fn)


def conv_transpose2d(x, w, b=None, stride=(1, 1), padding=(0, 0), dilation=(1, 1),
                     output_padding=(0, 0)) -> Tensor:
    """Transposed convolution; weights laid out (Cin, Cout, kh, kw)."""
    x, w = as_tensor(x), as_tensor(w)
    B, C, H, W = x.shape
    Ci, O, kh, kw = w.shape
    if C != Ci:
        raise AutodiffError(f"conv_transpose2d: input has {C} channels, weight expects {Ci}")
    s, p, d, op = tuple(stride), tuple(padding), tuple(dilation), tuple(output_padding)
    Ho = conv_transpose_out_size(H, kh, s[0], p[0], d[0], op[0])
    Wo = conv_transpose_out_size(W, kw, s[1], p[1], d[1], op[1])
    if Ho <= 0 or Wo <= 0:
        raise AutodiffError(f"conv_transpose2d: empty output for input {x.shape}")
    full = (max((H - 1) * s[0] + d[0] * (kh - 1) + 1, p[0] + Ho),
            max((W - 1) * s[1] + d[1] * (kw - 1) + 1, p[1] + Wo))
    wm = w.data.reshape(C, O * kh * kw)
    xm = x.data.reshape(B, C, H * W)
    cols = (wm.T @ xm).reshape(B, O, kh, kw, H, W)
    out = _scatter(cols, full, s, d)[:, :, p[0]:p[0] + Ho, p[1]:p[1] + Wo]
    inputs = [x, w]
    if b is not None:
        b = as_tensor(b)
        out = out + b.data.reshape(1, O, 1, 1)
        inputs.append(b)

    def fn(g):
        gfull = np.zeros((B, O) + full, dtype=g.dtype)
        gfull[:, :, p[0]:p[0] + Ho, p[1]:p[1] + Wo] = g
        gcols = _gather(gfull, (kh, kw), s, d, (H, W)).reshape(B, O * kh * kw, H * W)
        gx = gw = gb = None
        if x.requires_grad:
            gx = (wm @ gcols).reshape(x.shape)
        if w.requires_grad:
            gw = np.einsum("bcn,bkn->ck", xm, gcols).reshape(w.shape)
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw, gb)[:len(inputs)]
    return _make("conv_transpose2d", np.ascontiguousarray(out), inputs, fn)


# --- recurrence ---------------------------------------------------------------

def _sig(x):
    ex = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + ex), ex / (1.0 + ex))


def lstm(x, w_ih, w_hh, bias) -> Tensor:
    """Unidirectional LSTM from zero state over x of shape (N, T, D).

    Gate order in the stacked weights is input, forget, candidate, output.
    Returns every hidden state, shape (N, T, H).
    """
    x, w_ih, w_hh, bias = (as_tensor(t) for t in (x, w_ih, w_hh, bias))
    N, T, D = x.shape
    H4, Dw = w_ih.shape
    H = H4 // 4
    if Dw != D or w_hh.shape != (H4, H) or bias.shape != (H4,) or H4 != 4 * H:
        raise AutodiffError("lstm: weight shapes do not match input/hidden dims")
    Wi, Wh, bb = w_ih.data, w_hh.data, bias.data
    xs = x.data @ Wi.T + bb  # (N, T, 4H)
    hs = np.zeros((N, T + 1, H))
    cs = np.zeros((N, T + 1, H))
    gates = np.empty((N, T, H4))
    for t in range(T):
        z = xs[:, t] + hs[:, t] @ Wh.T
        i, f, o = _sig(z[:, :H]), _sig(z[:, H:2 * H]), _sig(z[:, 3 * H:])
        gg = np.tanh(z[:, 2 * H:3 * H])
        cs[:, t + 1] = f * cs[:, t] + i * gg
        hs[:, t + 1] = o * np.tanh(cs[:, t + 1])
        gates[:, t, :H], gates[:, t, H:2 * H] = i, f
        gates[:, t, 2 * H:3 * H], gates[:, t, 3 * H:] = gg, o

    def fn(g):
        dz = np.empty((N, T, H4))
        dh_next = np.zeros((N, H))
        dc_next = np.zeros((N, H))
        for t in reversed(range(T)):
            i, f = gates[:, t, :H], gates[:, t, H:2 * H]
            gg, o = gates[:, t, 2 * H:3 * H], gates[:, t, 3 * H:]
            tc = np.tanh(cs[:, t + 1])
            dh = g[:, t] + dh_next
            dc = dc_next + dh * o * (1.0 - tc * tc)
            dz[:, t, :H] = dc * gg * i * (1.0 - i)
            dz[:, t, H:2 * H] = dc * cs[:, t] * f * (1.0 - f)
            dz[:, t, 2 * H:3 * H] = dc * i * (1.0 - gg * gg)
            dz[:, t, 3 * H:] = dh * tc * o * (1.0 - o)
            dh_next = dz[:, t] @ Wh
            dc_next = dc * f
        flat = dz.reshape(-1, H4)
        gx = (dz @ Wi) if x.requires_grad else None
        gwi = flat.T @ x.data.reshape(-1, D) if w_ih.requires_grad else None
        gwh = flat.T @ hs[:, :T].reshape(-1, H) if w_hh.requires_grad else None
        gb = flat.sum(axis=0) if bias.requires_grad else None
        return gx, gwi, gwh, gb
    return _make("lstm", hs[:, 1:].copy(), (x, w_ih, w_hh, bias), fn)


# --- framing ------------------------------------------------------------------

def overlap_add(frames, hop: int) -> Tensor:
    """Sum frames of shape (T, N) into a signal of length N + (T-1)*hop.

    ``hop`` must divide the frame length.
    """
    frames = as_tensor(frames)
    T, N = frames.shape
    if N % hop:
        raise AutodiffError("overlap_add: hop must divide the frame length")
    r = N // hop
    parts = frames.data.reshape(T, r, hop)
    seg = np.zeros((T + r - 1, hop))
    for q in range(r):
        seg[q:q + T] += parts[:, q]

    def fn(g):
        gs = g.reshape(T + r - 1, hop)
        out = np.empty((T, r, hop))
        for q in range(r):
            out[:, q] = gs[q:q + T]
        return (out.reshape(T, N),)
    return _make("overlap_add", seg.reshape(-1), (frames,), fn)

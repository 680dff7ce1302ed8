"""Dense float64 tensors with tape-based reverse-mode differentiation.

Tensors are immutable numpy-backed values. Operations record themselves on
the active :class:`GradTape` (entered with ``with GradTape() as tape:``)
whenever an input requires gradients; ``tape.backward(loss)`` then walks the
records in reverse creation order, which is a valid reverse topological order
because every record is appended after its inputs exist.

Shapes are 2-D matrices, optionally with one leading batch axis. Binary
elementwise ops accept operands of equal shape or a trailing-suffix shape
(row-vector affine terms, batch-shared parameters); nothing broader.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "GradTape",
    "GradMap",
    "ShapeError",
    "NumericError",
    "tensor",
    "constant",
    "matmul",
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "neg",
    "transpose",
    "relu",
    "sigmoid",
    "log",
    "abs_",
    "maximum",
    "minimum",
    "softmax_rows",
    "log_softmax_rows",
    "layer_norm",
    "sum_",
    "concat",
    "select_cols",
    "take_rows",
    "gather_last",
    "attention_heads",
    "reshape",
    "backward",
    "finite_diff_check",
]


class ShapeError(ValueError):
    """Operand shapes violate an op's contract."""


class NumericError(ArithmeticError):
    """A non-finite value appeared where finite input is required."""

    def __init__(self, message: str, stage: str | None = None):
        super().__init__(message if stage is None else f"{stage}: {message}")
        self.stage = stage


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        arr.setflags(write=False)
        t.data = arr
        t.requires_grad = requires_grad
        t.name = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, False)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return div(self, _as_tensor(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def constant(data) -> Tensor:
    return Tensor(data)


# ---------------------------------------------------------------------------
# tape

_local = threading.local()


def _active_tape() -> "GradTape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class GradMap:
    """Gradients keyed by tensor identity; tensors not reached map to zeros."""

    def __init__(self, grads: dict, tensors: dict):
        self._grads = grads
        self._tensors = tensors

    def __getitem__(self, t: Tensor) -> np.ndarray:
        g = self._grads.get(id(t))
        if g is None or self._tensors.get(id(t)) is not t:
            return np.zeros(t.shape)
        return g

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._grads and self._tensors.get(id(t)) is t


class GradTape:
    """Records differentiable ops in creation order for one forward/backward pass."""

    def __init__(self):
        self._nodes: list = []

    def __enter__(self) -> "GradTape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def __len__(self):
        return len(self._nodes)

    def record(self, out: Tensor, inputs: Sequence[Tensor], backward_fn: Callable):
        self._nodes.append((out, tuple(inputs), backward_fn))

    def backward(self, loss: Tensor) -> GradMap:
        return backward(loss, self)


def _record(out_arr: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    tape = _active_tape() if needs else None
    out = Tensor._wrap(out_arr, tape is not None)
    if tape is not None:
        tape.record(out, inputs, backward_fn)
    return out


def backward(loss: Tensor, tape: GradTape) -> GradMap:
    """Reverse sweep from a scalar ``loss`` over ``tape``.

    Each record is visited once, newest first. Contributions to a tensor used
    several times are summed.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad or not _on_tape(loss, tape):
        raise ValueError("loss was not produced on this tape")
    grads: dict = {id(loss): np.ones(loss.shape)}
    tensors: dict = {id(loss): loss}
    for out, inputs, fn in reversed(tape._nodes):
        g = grads.get(id(out))
        if g is None:
            continue
        in_grads = fn(g)
        for t, gi in zip(inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            gi = _unbroadcast(gi, t.shape)
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                tensors[key] = t
    return GradMap(grads, tensors)


def _on_tape(t: Tensor, tape: GradTape) -> bool:
    return any(n[0] is t for n in reversed(tape._nodes))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_binary(op: str, a: Tensor, b: Tensor):
    sa, sb = a.shape, b.shape
    if sa == sb:
        return
    short, long_ = (sb, sa) if len(sb) <= len(sa) else (sa, sb)
    if len(short) == 0 or long_[len(long_) - len(short):] == short:
        return
    raise ShapeError(f"{op}: incompatible shapes {sa} and {sb}")


def _require_finite(op: str, x: np.ndarray):
    if not np.all(np.isfinite(x)):
        raise NumericError(f"{op} received non-finite input", stage=op)


# ---------------------------------------------------------------------------
# ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    if b.data.ndim == 3 and a.data.ndim == 3 and a.shape[0] != b.shape[0]:
        raise ShapeError(f"matmul: batch sizes differ in {a.shape} and {b.shape}")
    A, B = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(B, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(A, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return _record(A @ B, (a, b), bw)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_binary("add", a, b)
    return _record(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_binary("sub", a, b)
    return _record(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_binary("mul", a, b)
    A, B = a.data, b.data
    return _record(A * B, (a, b), lambda g: (g * B, g * A))


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_binary("div", a, b)
    A, B = a.data, b.data
    out = A / B
    return _record(out, (a, b), lambda g: (g / B, -g * out / B))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _record(a.data * c, (a,), lambda g: (g * c,))


def neg(a: Tensor) -> Tensor:
    return scale(a, -1.0)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim < 2:
        raise ShapeError(f"transpose needs a matrix, got {a.shape}")
    out = np.ascontiguousarray(np.swapaxes(a.data, -1, -2))
    return _record(out, (a,), lambda g: (np.swapaxes(g, -1, -2),))


def reshape(a: Tensor, shape: tuple) -> Tensor:
    src = a.shape
    return _record(a.data.reshape(shape).copy(), (a,), lambda g: (g.reshape(src),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _record(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _record(out, (a,), lambda g: (g * out * (1.0 - out),))


def log(a: Tensor) -> Tensor:
    x = a.data
    if np.any(x <= 0):
        raise NumericError("log of non-positive value", stage="log")
    return _record(np.log(x), (a,), lambda g: (g / x,))


def abs_(a: Tensor) -> Tensor:
    s = np.sign(a.data)
    return _record(np.abs(a.data), (a,), lambda g: (g * s,))


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max; ties send the gradient to ``a``."""
    _check_binary("maximum", a, b)
    pick_a = a.data >= b.data
    return _record(
        np.where(pick_a, a.data, b.data), (a, b), lambda g: (g * pick_a, g * ~pick_a)
    )


def minimum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise min; ties send the gradient to ``a``."""
    _check_binary("minimum", a, b)
    pick_a = a.data <= b.data
    return _record(
        np.where(pick_a, a.data, b.data), (a, b), lambda g: (g * pick_a, g * ~pick_a)
    )


def softmax_rows(x: Tensor) -> Tensor:
    _require_finite("softmax_rows", x.data)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _record(out, (x,), bw)


def log_softmax_rows(x: Tensor) -> Tensor:
    _require_finite("log_softmax_rows", x.data)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _record(out, (x,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    n = x.shape[-1]
    if n < 2:
        raise ShapeError(f"layer_norm needs at least 2 features, got {n}")
    if gain.shape != (n,) or bias.shape != (n,):
        raise ShapeError(f"layer_norm: gain/bias must have shape ({n},), got {gain.shape}, {bias.shape}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    _require_finite("layer_norm", x.data)
    X = x.data
    mu = X.mean(axis=-1, keepdims=True)
    xc = X - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    G = gain.data
    out = xhat * G + bias.data

    def bw(g):
        gx = None
        if x.requires_grad:
            gh = g * G
            gx = inv * (
                gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
            )
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _record(out, (x, gain, bias), bw)


def sum_(a: Tensor) -> Tensor:
    shape = a.shape
    return _record(np.array(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape),))


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ShapeError("concat of nothing")
    sizes = [p.shape[axis] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record(out, parts, bw)


def select_cols(a: Tensor, start: int, stop: int) -> Tensor:
    """Columns ``start:stop`` of the last axis."""
    shape = a.shape

    def bw(g):
        full = np.zeros(shape)
        full[..., start:stop] = g
        return (full,)

    return _record(a.data[..., start:stop].copy(), (a,), bw)


def take_rows(a: Tensor, index) -> Tensor:
    """Rows of ``a`` viewed as ``(-1, last)`` picked by a flat ``index``."""
    shape = a.shape
    flat = a.data.reshape(-1, shape[-1])
    idx = np.asarray(index, dtype=np.intp)

    def bw(g):
        full = np.zeros_like(flat)
        np.add.at(full, idx, g)
        return (full.reshape(shape),)

    return _record(flat[idx].copy(), (a,), bw)


def gather_last(a: Tensor, index) -> Tensor:
    """``out[..., r] = a[..., r, index[..., r]]``: one entry per row."""
    idx = np.asarray(index, dtype=np.intp)
    if idx.shape != a.shape[:-1]:
        raise ShapeError(f"gather_last: index shape {idx.shape} vs rows {a.shape[:-1]}")
    out = np.take_along_axis(a.data, idx[..., None], axis=-1)[..., 0]
    shape = a.shape

    def bw(g):
        full = np.zeros(shape)
        np.put_along_axis(full, idx[..., None], g[..., None], axis=-1)
        return (full,)

    return _record(out, (a,), bw)


def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    *lead, n, width = x.shape
    return np.swapaxes(x.reshape(*lead, n, heads, width // heads), -3, -2)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    x = np.swapaxes(x, -3, -2)
    return x.reshape(*x.shape[:-2], x.shape[-2] * x.shape[-1])


def attention_heads(q: Tensor, k: Tensor, v: Tensor, heads: int) -> Tensor:
    """Scaled dot-product attention for ``heads`` equal-width column blocks.

    ``q`` is ``(..., n_q, heads*d_qk)``, ``k`` is ``(..., n_k, heads*d_qk)`` and
    ``v`` is ``(..., n_k, heads*d_v)``; head ``h`` uses the ``h``-th block of
    each. The result concatenates the head outputs along the last axis. Same
    values as running each head separately, with far fewer tape records.
    """
    if q.shape[-1] != k.shape[-1] or q.shape[-1] % heads or v.shape[-1] % heads:
        raise ShapeError(f"attention_heads: q {q.shape}, k {k.shape}, v {v.shape}, heads {heads}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention_heads: {k.shape[-2]} keys but {v.shape[-2]} values")
    scale_ = 1.0 / math.sqrt(q.shape[-1] // heads)
    Q, K, V = (_split_heads(t.data, heads) for t in (q, k, v))
    logits = (Q @ np.swapaxes(K, -1, -2)) * scale_
    _require_finite("attention_heads", logits)
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    P = e / e.sum(axis=-1, keepdims=True)
    out = _merge_heads(P @ V)

    def bw(g):
        G = _split_heads(g, heads)
        gP = G @ np.swapaxes(V, -1, -2)
        gS = P * (gP - (gP * P).sum(axis=-1, keepdims=True)) * scale_
        gq = _merge_heads(gS @ K) if q.requires_grad else None
        gk = _merge_heads(np.swapaxes(gS, -1, -2) @ Q) if k.requires_grad else None
        gv = _merge_heads(np.swapaxes(P, -1, -2) @ G) if v.requires_grad else None
        return gq, gk, gv

    return _record(out, (q, k, v), bw)


# ---------------------------------------------------------------------------
# verification


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor | np.ndarray,
    step: float = 1e-6,
    coords: Iterable[int] | None = None,
) -> float:
    """Max relative error between tape gradients and central differences.

    The error per coordinate is ``|analytic - fd| / max(1, |fd|)``. ``coords``
    restricts the check to some flat indices (all by default).
    """
    if not 1e-8 <= step <= 1e-4:
        raise ValueError(f"step must lie in [1e-8, 1e-4], got {step}")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(base, requires_grad=True)
    with GradTape() as tape:
        out = f(xt)
    analytic = tape.backward(out)[xt].reshape(-1)
    flat = base.reshape(-1)
    worst = 0.0
    for k in range(flat.size) if coords is None else coords:
        plus = flat.copy()
        plus[k] += step
        minus = flat.copy()
        minus[k] -= step
        fp = f(Tensor(plus.reshape(base.shape))).item()
        fm = f(Tensor(minus.reshape(base.shape))).item()
        fd = (fp - fm) / (2.0 * step)
        err = abs(analytic[k] - fd) / max(1.0, abs(fd))
        if not math.isfinite(err):
            return math.inf
        worst = max(worst, err)
    return worst

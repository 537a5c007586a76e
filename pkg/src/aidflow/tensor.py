"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable operation records a node ``(op, inputs, saved)`` on its
output.  ``Tensor.backward`` linearises the recorded graph into a tape (a
topological order), walks it in reverse and looks up each op's rule in
:data:`BACKWARD`.  Keeping the rules in a flat registry keeps them easy to
audit and lets tests swap a single rule out.

Binary ops follow numpy broadcasting; the backward pass sums gradients back
to the operand shape with :func:`unbroadcast`.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionError, NumericError

F32 = np.float32
F64 = np.float64

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording on the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_node", "_spent")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            dtype = arr.dtype if arr.dtype in (F32, F64) else F32
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._node = None
        self._spent = False

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise DimensionError("division is only defined by a scalar constant")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    # -- gradient tape ----------------------------------------------------
    def backward(self, grad=None) -> None:
        """Run reverse accumulation from this tensor.

        The recorded graph is released afterwards; a second call on the same
        output raises.
        """
        if self._spent:
            raise RuntimeError("gradient tape already consumed by a previous backward pass")
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.size != 1:
                raise DimensionError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones(self.shape, dtype=self.dtype)
        grad = np.asarray(grad, dtype=self.dtype)
        if grad.shape != self.shape:
            raise DimensionError(f"seed gradient shape {grad.shape} != output shape {self.shape}")

        tape = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(tape):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            if node._node is None:
                continue
            op, inputs, saved = node._node
            in_grads = BACKWARD[op](g, inputs, saved, node)
            for inp, ig in zip(inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                if ig.shape != inp.shape:
                    raise DimensionError(
                        f"backward rule '{op}' produced grad of shape {ig.shape} for input {inp.shape}"
                    )
                key = id(inp)
                grads[key] = ig if key not in grads else grads[key] + ig
        for node in tape:
            if node._node is not None:
                node._node = None
                node._spent = True


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t._node is not None:
            for inp in t._node[1]:
                if inp.requires_grad and id(inp) not in seen:
                    stack.append((inp, False))
    return order


# ---------------------------------------------------------------------------
# helpers

BACKWARD: dict[str, Callable] = {}


def _rule(name):
    def deco(fn):
        BACKWARD[name] = fn
        return fn

    return deco


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _make(op: str, data: np.ndarray, inputs: Sequence[Tensor], saved=None) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if grad_enabled() and any(i.requires_grad for i in inputs):
        out.requires_grad = True
        out._node = (op, tuple(inputs), saved)
    return out


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` over the axes that broadcasting expanded so it matches ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} cannot be combined") from None


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = _lift(b, a)
    _broadcast_shape(a, b, "add")
    return _make("add", a.data + b.data, (a, b))


@_rule("add")
def _add_bw(g, inputs, saved, out):
    a, b = inputs
    return unbroadcast(g, a.shape), unbroadcast(g, b.shape)


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    b = _lift(b, a)
    _broadcast_shape(a, b, "sub")
    return _make("sub", a.data - b.data, (a, b))


@_rule("sub")
def _sub_bw(g, inputs, saved, out):
    a, b = inputs
    return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = _lift(b, a)
    _broadcast_shape(a, b, "mul")
    return _make("mul", a.data * b.data, (a, b))


@_rule("mul")
def _mul_bw(g, inputs, saved, out):
    a, b = inputs
    ga = unbroadcast(g * b.data, a.shape) if a.requires_grad else None
    gb = unbroadcast(g * a.data, b.shape) if b.requires_grad else None
    return ga, gb


def square(a: Tensor) -> Tensor:
    return _make("square", a.data * a.data, (a,))


@_rule("square")
def _square_bw(g, inputs, saved, out):
    return (2.0 * g * inputs[0].data,)


# ---------------------------------------------------------------------------
# linear algebra and shape ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., m, k] @ b[..., k, n]``; ``b`` may be a plain 2-D weight shared over the batch."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    if b.ndim > 2:
        try:
            np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
        except ValueError:
            raise DimensionError(f"matmul: batch dims of {a.shape} and {b.shape} differ") from None
    return _make("matmul", a.data @ b.data, (a, b))


@_rule("matmul")
def _matmul_bw(g, inputs, saved, out):
    a, b = inputs
    ga = gb = None
    if a.requires_grad:
        ga = unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
    if b.requires_grad:
        if b.ndim == 2:
            k, n = b.shape
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
        else:
            gb = unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
    return ga, gb


def reshape(a: Tensor, shape) -> Tensor:
    return _make("reshape", a.data.reshape(shape), (a,))


@_rule("reshape")
def _reshape_bw(g, inputs, saved, out):
    return (g.reshape(inputs[0].shape),)


def transpose(a: Tensor, axes=()) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    return _make("transpose", a.data.transpose(axes), (a,), axes)


@_rule("transpose")
def _transpose_bw(g, inputs, axes, out):
    return (g.transpose(np.argsort(axes)),)


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = ", ".join(str(t.shape) for t in tensors)
        raise DimensionError(f"concat along axis {axis}: incompatible shapes {shapes}") from None
    sizes = [t.shape[axis] for t in tensors]
    return _make("concat", data, tensors, (axis, sizes))


@_rule("concat")
def _concat_bw(g, inputs, saved, out):
    axis, sizes = saved
    cuts = np.cumsum(sizes)[:-1]
    return tuple(np.split(g, cuts, axis=axis))


def getitem(a: Tensor, index) -> Tensor:
    return _make("getitem", a.data[index], (a,), index)


@_rule("getitem")
def _getitem_bw(g, inputs, index, out):
    full = np.zeros(inputs[0].shape, dtype=g.dtype)
    parts = index if isinstance(index, tuple) else (index,)
    if all(isinstance(p, (slice, int)) or p is Ellipsis for p in parts):
        full[index] = g
    else:
        np.add.at(full, index, g)
    return (full,)


def embedding(weight: Tensor, ids) -> Tensor:
    """Row lookup ``weight[ids]``; repeated ids accumulate gradient."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise DimensionError(f"embedding: ids outside [0, {weight.shape[0]})")
    return _make("embedding", weight.data[ids], (weight,), ids)


@_rule("embedding")
def _embedding_bw(g, inputs, ids, out):
    w = inputs[0]
    full = np.zeros(w.shape, dtype=g.dtype)
    np.add.at(full, ids.reshape(-1), g.reshape(-1, w.shape[-1]))
    return (full,)


# ---------------------------------------------------------------------------
# reductions


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return _make("sum", np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), (axis, keepdims))


@_rule("sum")
def _sum_bw(g, inputs, saved, out):
    axis, keepdims = saved
    a = inputs[0]
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, a.shape).astype(g.dtype, copy=True),)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(sum_(a, axis, keepdims), 1.0 / n)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean of squared differences over all entries (a scalar)."""
    a = as_tensor(a)
    b = _lift(b, a)
    if a.shape != b.shape:
        raise DimensionError(f"mse: shapes {a.shape} and {b.shape} differ")
    diff = a.data - b.data
    return _make("mse", np.asarray(np.mean(diff * diff), dtype=a.dtype), (a, b), diff)


@_rule("mse")
def _mse_bw(g, inputs, diff, out):
    scale = g * (2.0 / diff.size)
    return scale * diff, -scale * diff


def l2_norm_rows(a: Tensor) -> Tensor:
    """Euclidean norm over the last axis; gradient at a zero row is taken as 0."""
    norm = np.sqrt(np.sum(a.data * a.data, axis=-1))
    return _make("l2_norm_rows", norm, (a,), norm)


@_rule("l2_norm_rows")
def _l2_bw(g, inputs, norm, out):
    a = inputs[0]
    safe = np.where(norm > 0, norm, 1.0)
    scale = np.where(norm > 0, g / safe, 0.0).astype(a.dtype)
    return (scale[..., None] * a.data,)


# ---------------------------------------------------------------------------
# nonlinearities


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _make("tanh", y, (a,), y)


@_rule("tanh")
def _tanh_bw(g, inputs, y, out):
    return (g * (1.0 - y * y),)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; the gradient passes only where the input is inside."""
    mask = (a.data >= lo) & (a.data <= hi)
    return _make("clip", np.clip(a.data, lo, hi), (a,), mask)


@_rule("clip")
def _clip_bw(g, inputs, mask, out):
    return (g * mask,)


def sigmoid(a: Tensor) -> Tensor:
    y = _stable_sigmoid(a.data)
    return _make("sigmoid", y, (a,), y)


@_rule("sigmoid")
def _sigmoid_bw(g, inputs, y, out):
    return (g * y * (1.0 - y),)


def silu(a: Tensor) -> Tensor:
    s = _stable_sigmoid(a.data)
    return _make("silu", a.data * s, (a,), s)


@_rule("silu")
def _silu_bw(g, inputs, s, out):
    x = inputs[0].data
    return (g * s * (1.0 + x * (1.0 - s)),)


def log_sigmoid(a: Tensor) -> Tensor:
    x = a.data
    y = (np.minimum(x, 0) - np.log1p(np.exp(-np.abs(x)))).astype(x.dtype)
    return _make("log_sigmoid", y, (a,))


@_rule("log_sigmoid")
def _log_sigmoid_bw(g, inputs, saved, out):
    return (g * _stable_sigmoid(-inputs[0].data),)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Softmax along ``axis`` with max subtraction."""
    x = a.data
    if not np.all(np.isfinite(x)):
        raise NumericError("softmax received non-finite input")
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)
    return _make("softmax", y, (a,), (y, axis))


def softmax_rows(a: Tensor) -> Tensor:
    return softmax(a, axis=-1)


@_rule("softmax")
def _softmax_bw(g, inputs, saved, out):
    y, axis = saved
    return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)


LN_EPS = 1e-5


def layernorm(a: Tensor, gain: Tensor | None = None, bias: Tensor | None = None, eps: float = LN_EPS) -> Tensor:
    """Normalise the last axis to zero mean and unit variance, then apply ``gain``/``bias``."""
    d = a.shape[-1]
    if d < 2:
        raise DimensionError(f"layernorm needs at least 2 features, got shape {a.shape}")
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = (xc * inv).astype(x.dtype)
    y = xhat
    if gain is not None:
        y = y * gain.data
    if bias is not None:
        y = y + bias.data
    inputs = tuple(t for t in (a, gain, bias) if t is not None)
    return _make("layernorm", y.astype(x.dtype), inputs, (xhat, inv.astype(x.dtype), gain is not None, bias is not None))


@_rule("layernorm")
def _layernorm_bw(g, inputs, saved, out):
    xhat, inv, has_gain, has_bias = saved
    a = inputs[0]
    gain = inputs[1] if has_gain else None
    gx = g * gain.data if gain is not None else g
    ga = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
    grads = [ga]
    lead = tuple(range(g.ndim - 1))
    if has_gain:
        grads.append((g * xhat).sum(axis=lead))
    if has_bias:
        grads.append(g.sum(axis=lead))
    return tuple(grads)


def parameters_of(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]

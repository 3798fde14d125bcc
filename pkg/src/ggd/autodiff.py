"""Dense float64 tensors with a reverse-mode differentiation tape.

Operations only record themselves while a :class:`Tape` is active::

    with Tape() as tape:
        loss = sum_all(tanh(x @ w))
    grads = tape.backward(loss)
    grads[w]

Outside a tape every op is a plain numpy computation, which is how the
decoders run at inference time.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "DimensionError",
    "DomainError",
    "ContractError",
    "NonFiniteError",
    "as_tensor",
    "set_check_finite",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "neg",
    "tanh",
    "sigmoid",
    "exp",
    "log",
    "softmax",
    "log_softmax",
    "masked_softmax",
    "sum_all",
    "sum_axis",
    "concat",
    "split",
    "straight_through",
    "custom_op",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class DomainError(ValueError):
    """An argument lies outside the domain of the function."""


class ContractError(ValueError):
    """A calling contract was violated (e.g. non-scalar loss)."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


_CHECK_FINITE = True
_local = threading.local()


def set_check_finite(enabled: bool) -> None:
    """Toggle the NaN/Inf assertion applied to every op output."""
    global _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)


def _active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    """A float64 array, optionally tracked for gradients.

    ``requires_grad`` marks leaves whose gradient ``Tape.backward`` reports.
    Identity (not value) is used for hashing so tensors can key gradient maps.
    """

    __slots__ = ("data", "requires_grad", "name", "_node", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64, order="C")
        self.requires_grad = requires_grad
        self.name = name
        self._node = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported; use mul")
        return scale(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return _getitem(self, index)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("output", "inputs", "backward")

    def __init__(self, output, inputs, backward):
        self.output = output
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Append-only record of differentiable operations.

    Nodes are stored in execution order, so insertion order is a valid
    topological order; ``backward`` walks it in reverse.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        """Gradient of a scalar ``loss`` with respect to every reachable leaf."""
        if loss.data.size != 1:
            raise ContractError(f"loss must be a scalar, got shape {loss.shape}")
        return self.vjp([loss], [np.ones_like(loss.data)])

    def vjp(
        self,
        outputs: Sequence[Tensor],
        cotangents: Sequence[np.ndarray],
        wrt: Iterable[Tensor] | None = None,
    ) -> dict[Tensor, np.ndarray]:
        """Vector-Jacobian product seeded with ``cotangents`` on ``outputs``.

        Returns gradients for leaf tensors (``requires_grad`` and not produced
        by an op) plus any tensors explicitly listed in ``wrt``.
        """
        grads: dict[int, np.ndarray] = {}
        keep: dict[int, Tensor] = {}
        for out, ct in zip(outputs, cotangents, strict=True):
            ct = np.asarray(ct, dtype=np.float64)
            if ct.shape != out.shape:
                raise DimensionError(f"cotangent shape {ct.shape} != output shape {out.shape}")
            _accumulate(grads, out, ct)
            keep[id(out)] = out
        wanted = {id(t): t for t in (wrt or ())}
        for node in reversed(self.nodes):
            g = grads.get(id(node.output))
            if g is None:
                continue
            if id(node.output) not in wanted:
                del grads[id(node.output)]
            in_grads = node.backward(g)
            for inp, ig in zip(node.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                _accumulate(grads, inp, ig)
                keep[id(inp)] = inp
        result = {}
        for key, g in grads.items():
            t = keep[key]
            if t.is_leaf or key in wanted:
                result[t] = g
        return result


def _accumulate(grads: dict, t: Tensor, g: np.ndarray) -> None:
    prev = grads.get(id(t))
    grads[id(t)] = g if prev is None else prev + g


def _record(out: np.ndarray, inputs: tuple, backward: Callable) -> Tensor:
    if _CHECK_FINITE and not np.all(np.isfinite(out)):
        raise NonFiniteError("op produced a non-finite value")
    result = Tensor(out)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        result.requires_grad = True
        node = _Node(result, inputs, backward)
        result._node = node
        tape.nodes.append(node)
    return result


def custom_op(out: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    """Register a fused op with a hand-written backward rule.

    ``backward(g)`` receives the output cotangent and returns one gradient
    (or ``None``) per input, in order.
    """
    return _record(np.asarray(out, dtype=np.float64), tuple(inputs), backward)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: np.ndarray, b: np.ndarray) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise DimensionError(f"cannot combine shapes {a.shape} and {b.shape}") from exc


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data)
    sa, sb = a.shape, b.shape
    return _record(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data)
    sa, sb = a.shape, b.shape
    return _record(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data)
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _record(ad * bd, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _record(a.data * c, (a,), lambda g: (g * c,))


def neg(a: Tensor) -> Tensor:
    return _record(-a.data, (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    """Matrix product; ``a`` may carry leading batch dimensions, ``b`` is 1-D or 2-D."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0 or b.ndim > 2:
        raise DimensionError(f"matmul needs a (...,n) and b (n,) or (n,m); got {a.shape}, {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise DimensionError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = gb = None
        if bd.ndim == 1:
            if a.requires_grad:
                ga = g[..., None] * bd
            if b.requires_grad:
                gb = np.tensordot(ad, g, axes=(tuple(range(ad.ndim - 1)), tuple(range(g.ndim))))
        else:
            if a.requires_grad:
                ga = g @ bd.T
            if b.requires_grad:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _record(ad @ bd, (a, b), backward)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _record(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _record(out, (a,), lambda g: (g * out * (1.0 - out),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    x = a.data
    if np.any(x <= 0):
        raise DomainError("log of a non-positive value")
    return _record(np.log(x), (a,), lambda g: (g / x,))


def _softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    if x.shape[axis] == 0:
        raise DimensionError("softmax of an empty vector")
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _softmax_vjp(y: np.ndarray, g: np.ndarray, axis: int = -1) -> np.ndarray:
    # J = diag(y) - y y^T, applied as a vector-Jacobian product
    return y * (g - (g * y).sum(axis=axis, keepdims=True))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    y = _softmax_np(a.data, axis)
    return _record(y, (a,), lambda g: (_softmax_vjp(y, g, axis),))


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    if x.shape[axis] == 0:
        raise DimensionError("log_softmax of an empty vector")
    z = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _record(out, (a,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def masked_softmax(a: Tensor, mask: np.ndarray) -> Tensor:
    """Softmax over the last axis restricted to ``mask`` (1 = keep).

    Masked positions get probability exactly zero. Every row needs at least
    one unmasked entry.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any(axis=-1).all():
        raise DimensionError("masked_softmax row with no unmasked entries")
    x = np.where(mask, a.data, -np.inf)
    z = x - x.max(axis=-1, keepdims=True)
    e = np.where(mask, np.exp(z), 0.0)
    y = e / e.sum(axis=-1, keepdims=True)
    return _record(y, (a,), lambda g: (_softmax_vjp(y, g),))


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _record(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def sum_axis(a: Tensor, axis: int) -> Tensor:
    shape = a.shape
    axis = axis % a.ndim
    return _record(
        a.data.sum(axis=axis),
        (a,),
        lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),),
    )


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    datas = [t.data for t in tensors]
    try:
        out = np.concatenate(datas, axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from exc
    bounds = np.cumsum([d.shape[axis] for d in datas])[:-1]
    return _record(out, tuple(tensors), lambda g: tuple(np.split(g, bounds, axis=axis)))


def split(a: Tensor, sizes: Sequence[int], axis: int = -1) -> list[Tensor]:
    """Split along ``axis`` into consecutive pieces of the given sizes."""
    if sum(sizes) != a.shape[axis]:
        raise DimensionError(f"sizes {list(sizes)} do not cover axis of length {a.shape[axis]}")
    out, start = [], 0
    for size in sizes:
        sl = [slice(None)] * a.ndim
        sl[axis] = slice(start, start + size)
        out.append(a[tuple(sl)])
        start += size
    return out


def _getitem(a: Tensor, index) -> Tensor:
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _record(np.array(a.data[index]), (a,), backward)


def straight_through(hard: np.ndarray, soft: Tensor) -> Tensor:
    """Forward value ``hard``; the backward pass treats it as ``soft``."""
    hard = np.asarray(hard, dtype=np.float64)
    if hard.shape != soft.shape:
        raise DimensionError(f"hard {hard.shape} vs soft {soft.shape}")
    return _record(hard.copy(), (soft,), lambda g: (g,))

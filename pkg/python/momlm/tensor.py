"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array. Every differentiable op records its
parent tensors together with a closure that maps the gradient of the output
to one gradient per parent. :meth:`Tensor.backward` walks the recorded graph
in reverse topological order and accumulates gradients into leaf tensors.
"""

from __future__ import annotations

from collections.abc import Callable, Iterator, Sequence
from contextlib import contextmanager
import logging
import math
from typing import Any

import numpy as np

from .errors import ContractError, DimensionError

logger = logging.getLogger("momlm")

DTYPES: dict[str, type[np.floating[Any]]] = {
    "float32": np.float32,
    "float64": np.float64,
}

GradFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]

_GELU_C = math.sqrt(2.0 / math.pi)


class _Mode:
    dtype: np.dtype[Any] = np.dtype(np.float32)
    grad_enabled: bool = True


def set_default_dtype(name: str) -> None:
    """Set the dtype new tensors and parameters are created with."""
    try:
        _Mode.dtype = np.dtype(DTYPES[name])
    except KeyError:
        raise ContractError(
            f"unsupported dtype {name!r}, expected one of {sorted(DTYPES)}"
        ) from None


def get_default_dtype() -> np.dtype[Any]:
    return _Mode.dtype


@contextmanager
def default_dtype(name: str) -> Iterator[None]:
    previous = _Mode.dtype
    set_default_dtype(name)
    try:
        yield
    finally:
        _Mode.dtype = previous


@contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate without recording the autodiff graph."""
    previous = _Mode.grad_enabled
    _Mode.grad_enabled = False
    try:
        yield
    finally:
        _Mode.grad_enabled = previous


def is_grad_enabled() -> bool:
    return _Mode.grad_enabled


class Tensor:
    """A numpy array with an optional gradient and a recorded history."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_grad_fn")
    # makes ``ndarray * Tensor`` dispatch to Tensor.__rmul__
    __array_priority__ = 100

    def __init__(
        self,
        data: Any,
        requires_grad: bool = False,
        *,
        dtype: Any = None,
        name: str | None = None,
    ) -> None:
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (
                np.float32,
                np.float64,
            ):
                dtype = data.dtype
            else:
                dtype = _Mode.dtype
        self.data: np.ndarray = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fn: GradFn | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def dtype(self) -> np.dtype[Any]:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._grad_fn is None

    def item(self) -> float:
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return (
            f"Tensor(shape={self.shape}, dtype={self.dtype}, "
            f"requires_grad={self.requires_grad}{label})"
        )

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Backpropagate from this tensor.

        Leaf tensors accumulate into ``grad`` across calls; intermediate
        tensors hold the gradient of the most recent pass.
        """
        if grad is None:
            if self.data.size != 1:
                raise ContractError(
                    f"backward needs a scalar loss, got shape {self.shape}"
                )
            grad = np.ones_like(self.data)
        grads: dict[int, np.ndarray] = {
            id(self): np.asarray(grad, dtype=self.dtype)
        }
        for node in reversed(self._topological_order()):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._grad_fn is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            node.grad = g
            for parent, parent_grad in zip(node._parents, node._grad_fn(g)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + parent_grad if key in grads else parent_grad

    def _topological_order(self) -> list[Tensor]:
        # iterative post-order; recursion depth would scale with model depth
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        return order

    def __add__(self, other: Any) -> Tensor:
        return add(self, other)

    def __radd__(self, other: Any) -> Tensor:
        return add(other, self)

    def __sub__(self, other: Any) -> Tensor:
        return sub(self, other)

    def __rsub__(self, other: Any) -> Tensor:
        return sub(other, self)

    def __mul__(self, other: Any) -> Tensor:
        return mul(self, other)

    def __rmul__(self, other: Any) -> Tensor:
        return mul(other, self)

    def __truediv__(self, other: Any) -> Tensor:
        return div(self, other)

    def __neg__(self) -> Tensor:
        return neg(self)

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)

    def __getitem__(self, index: Any) -> Tensor:
        return getitem(self, index)

    def sum(self, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
        return tsum(self, axis, keepdims)

    def mean(self, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
        return mean(self, axis, keepdims)

    def reshape(self, *shape: int) -> Tensor:
        return reshape(self, shape)

    def transpose(self, *axes: int) -> Tensor:
        return transpose(self, axes or tuple(reversed(range(self.ndim))))

    def exp(self) -> Tensor:
        return exp(self)

    def log(self) -> Tensor:
        return log(self)

    def tanh(self) -> Tensor:
        return tanh(self)

    def sigmoid(self) -> Tensor:
        return sigmoid(self)


def as_tensor(value: Any, like: Tensor | None = None) -> Tensor:
    """Wrap ``value`` as a constant tensor, matching the dtype of ``like``."""
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value), dtype=like.dtype if like is not None else None)


def parameter(data: np.ndarray, name: str | None = None) -> Tensor:
    """A trainable leaf in the current default dtype."""
    return Tensor(data, requires_grad=True, dtype=_Mode.dtype, name=name)


def zeros(shape: Sequence[int], dtype: Any = None) -> Tensor:
    return Tensor(np.zeros(tuple(shape), dtype=dtype or _Mode.dtype))


def _result(data: np.ndarray, parents: tuple[Tensor, ...], grad_fn: GradFn) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if _Mode.grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._grad_fn = grad_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(
        i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1
    )
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _pair(a: Any, b: Any) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


# elementwise


def add(a: Any, b: Any) -> Tensor:
    a, b = _pair(a, b)
    return _result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: Any, b: Any) -> Tensor:
    a, b = _pair(a, b)
    return _result(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a: Any, b: Any) -> Tensor:
    a, b = _pair(a, b)
    return _result(
        a.data * b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.shape),
            _unbroadcast(g * a.data, b.shape),
        ),
    )


def div(a: Any, b: Any) -> Tensor:
    a, b = _pair(a, b)
    return _result(
        a.data / b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
    )


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1 - out * out),))


def sigmoid(a: Tensor) -> Tensor:
    # tanh form never overflows
    out = 0.5 * (1 + np.tanh(0.5 * a.data))
    return _result(out, (a,), lambda g: (g * out * (1 - out),))


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    t = np.tanh(_GELU_C * (x + 0.044715 * x**3))
    out = 0.5 * x * (1 + t)

    def grad_fn(g: np.ndarray) -> tuple[np.ndarray]:
        dt = (1 - t * t) * _GELU_C * (1 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1 + t) + 0.5 * x * dt),)

    return _result(out.astype(x.dtype, copy=False), (a,), grad_fn)


# linear algebra and shape


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    if a.dtype != b.dtype:
        raise ContractError(f"matmul dtype mismatch: {a.dtype} vs {b.dtype}")

    def grad_fn(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(a.data @ b.data, (a, b), grad_fn)


def tsum(
    a: Tensor, axis: int | tuple[int, ...] | None = None, keepdims: bool = False
) -> Tensor:
    def grad_fn(g: np.ndarray) -> tuple[np.ndarray]:
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _result(
        np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), grad_fn
    )


def mean(
    a: Tensor, axis: int | tuple[int, ...] | None = None, keepdims: bool = False
) -> Tensor:
    total = tsum(a, axis, keepdims)
    count = a.size // max(total.size, 1) if a.size else 1
    return total * (1.0 / count)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    return _result(
        a.data.reshape(tuple(shape)), (a,), lambda g: (g.reshape(a.shape),)
    )


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    inverse = tuple(np.argsort(axes))
    return _result(
        a.data.transpose(tuple(axes)), (a,), lambda g: (g.transpose(inverse),)
    )


def getitem(a: Tensor, index: Any) -> Tensor:
    def grad_fn(g: np.ndarray) -> tuple[np.ndarray]:
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _result(np.array(a.data[index]), (a,), grad_fn)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ContractError("concat needs at least one tensor")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _result(
        np.concatenate([t.data for t in tensors], axis=axis),
        tuple(tensors),
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


def take_along_lastdim(a: Tensor, indices: np.ndarray) -> Tensor:
    """Gather ``a[..., indices]`` row by row."""
    indices = np.asarray(indices, dtype=np.int64)

    def grad_fn(g: np.ndarray) -> tuple[np.ndarray]:
        full = np.zeros_like(a.data)
        lead = tuple(np.indices(indices.shape)[:-1])
        np.add.at(full, (*lead, indices), g)
        return (full,)

    return _result(np.take_along_axis(a.data, indices, axis=-1), (a,), grad_fn)


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise ContractError(
            f"token id out of range [0, {weight.shape[0]}): "
            f"min={ids.min()} max={ids.max()}"
        )

    def grad_fn(g: np.ndarray) -> tuple[np.ndarray]:
        full = np.zeros_like(weight.data)
        np.add.at(full, ids, g)
        return (full,)

    return _result(weight.data[ids], (weight,), grad_fn)


# normalisation and probabilities


def softmax_lastdim(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis with an optional additive 0/-inf mask."""
    if x.ndim == 0 or x.shape[-1] < 1:
        raise DimensionError(f"softmax needs a non-empty last axis, got {x.shape}")
    z = x.data if mask is None else x.data + np.asarray(mask, dtype=x.dtype)
    zmax = z.max(axis=-1, keepdims=True)
    if np.isneginf(zmax).any():
        raise ContractError("softmax row has every entry masked")
    e = np.exp(z - zmax)
    out = e / e.sum(axis=-1, keepdims=True)
    return _result(
        out,
        (x,),
        lambda g: (out * (g - (g * out).sum(axis=-1, keepdims=True)),),
    )


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float) -> Tensor:
    d = x.shape[-1] if x.ndim else 0
    if d == 0:
        raise DimensionError(f"layernorm over an empty axis: {x.shape}")
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(
            f"layernorm parameters {gain.shape}/{bias.shape} do not match width {d}"
        )
    if eps <= 0:
        raise ContractError(f"layernorm eps must be positive, got {eps}")
    centered = x.data - x.data.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std

    def grad_fn(g: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        lead = tuple(range(g.ndim - 1))
        gxhat = g * gain.data
        gx = inv_std * (
            gxhat
            - gxhat.mean(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    out = (xhat * gain.data + bias.data).astype(x.dtype, copy=False)
    return _result(out, (x, gain, bias), grad_fn)


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean next-token cross-entropy in nats."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise DimensionError(
            f"cross_entropy expects logits [N, V] and targets [N], got "
            f"{logits.shape} and {targets.shape}"
        )
    n, vocab = logits.shape
    if n == 0:
        raise ContractError("cross_entropy over zero tokens")
    if targets.min() < 0 or targets.max() >= vocab:
        raise ContractError(f"target id out of range [0, {vocab})")
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    rows = np.arange(n)
    loss = np.asarray(-log_probs[rows, targets].mean(), dtype=logits.dtype)

    def grad_fn(g: np.ndarray) -> tuple[np.ndarray]:
        probs = np.exp(log_probs)
        probs[rows, targets] -= 1
        return (probs * (g / n),)

    return _result(loss, (logits,), grad_fn)


class Rng:
    """Seeded random stream on numpy's PCG64 generator.

    The same seed yields the same stream on every platform.
    """

    def __init__(self, seed: int) -> None:
        if not 0 <= seed < 2**64:
            raise ContractError(f"seed must fit in 64 unsigned bits, got {seed}")
        self.seed = seed
        self._generator = np.random.Generator(np.random.PCG64(seed))

    def uniform(self, shape: Sequence[int], bound: float, dtype: Any = None) -> np.ndarray:
        values = self._generator.uniform(-bound, bound, size=tuple(shape))
        return values.astype(dtype or _Mode.dtype)

    def normal(self, shape: Sequence[int], std: float, dtype: Any = None) -> np.ndarray:
        values = self._generator.normal(0.0, std, size=tuple(shape))
        return values.astype(dtype or _Mode.dtype)

    def integers(self, high: int, size: int | Sequence[int] | None = None) -> Any:
        return self._generator.integers(0, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._generator.permutation(n)

    def spawn(self, key: int) -> Rng:
        """Derive an independent child stream keyed by ``key``."""
        sequence = np.random.SeedSequence([self.seed, key])
        return Rng(int(sequence.generate_state(1, np.uint64)[0]))

    @property
    def state(self) -> dict[str, Any]:
        return self._generator.bit_generator.state

    def set_state(self, state: dict[str, Any]) -> None:
        self._generator.bit_generator.state = state

"""Dense float64 tensors with a reverse-mode differentiation record.

Every forward operation that touches a tensor with ``requires_grad`` set
records a closure mapping the output gradient to input gradients.  Calling
:func:`backward` on a scalar walks the record in reverse topological order
and *adds* the resulting gradients into the ``grad`` field of every leaf
tensor that requires it.  Gradients are never cleared implicitly.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

from .errors import ArgumentError, DegenerateInputError, DimensionError

DTYPE = np.float64

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable recording inside the block (evaluation, optimizer updates)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class RandomSource:
    """Seeded PCG64 generator; the only source of randomness in the package."""

    algorithm = "PCG64"

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self.generator = np.random.Generator(np.random.PCG64(self.seed))

    def spawn(self, *keys: int) -> "RandomSource":
        """Independent child stream derived from this seed and ``keys``; does not advance self."""
        seq = np.random.SeedSequence([self.seed & 0xFFFFFFFFFFFFFFFF, *keys])
        child = RandomSource.__new__(RandomSource)
        child.seed = int(seq.generate_state(1, dtype=np.uint64)[0])
        child.generator = np.random.Generator(np.random.PCG64(seq))
        return child

    def get_state(self) -> dict:
        return {"seed": self.seed, "algorithm": self.algorithm,
                "bit_generator": self.generator.bit_generator.state}

    def set_state(self, state: dict) -> None:
        if state.get("algorithm") != self.algorithm:
            raise ArgumentError(f"unsupported generator {state.get('algorithm')!r}")
        self.seed = int(state["seed"])
        self.generator.bit_generator.state = state["bit_generator"]

    @classmethod
    def from_state(cls, state: dict) -> "RandomSource":
        rng = cls(state["seed"])
        rng.set_state(state)
        return rng


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __len__(self):
        return len(self.data)

    # -- operators --------------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

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

    def swapaxes(self, a, b):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    def backward(self):
        backward(self)


TensorLike = Union[Tensor, np.ndarray, float, int]


def as_tensor(x: TensorLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: Optional[str] = None) -> Tensor:
    return Tensor(np.array(data, dtype=DTYPE), requires_grad=True, name=name)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every recorded leaf."""
    if loss.size != 1:
        raise ArgumentError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# -- elementwise -----------------------------------------------------------

def add(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _node(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def power(a: Tensor, exponent: float) -> Tensor:
    a = as_tensor(a)
    return _node(a.data ** exponent, (a,),
                 lambda g: (g * exponent * a.data ** (exponent - 1),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximated GELU; smooth everywhere, so finite differences behave."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def grad_fn(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _node(out, (a,), grad_fn)


# -- reductions and shape ----------------------------------------------------

def _check_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise DimensionError(f"axis {axis} is invalid for a tensor with {ndim} dimensions")
    return axis % ndim


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(out, (a,), grad_fn)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axis, keepdims) * (1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return _node(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def take(a: Tensor, index) -> Tensor:
    """``a[index]`` with scatter-add backward (repeated indices accumulate)."""
    if isinstance(index, Tensor):
        index = index.data.astype(np.intp)

    def grad_fn(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _node(a.data[index], (a,), grad_fn)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    axis = _check_axis(axis, tensors[0].ndim)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tensors, grad_fn)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def grad_fn(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _node(np.stack([t.data for t in tensors], axis=axis), tensors, grad_fn)


# -- linear algebra ---------------------------------------------------------

def matmul(a: TensorLike, b: TensorLike) -> Tensor:
    """Batched matrix product over the last two axes (numpy broadcasting on the rest)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}")
    out = a.data @ b.data

    def grad_fn(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None
        return (None if ga is None else _unbroadcast(ga, a.shape),
                None if gb is None else _unbroadcast(gb, b.shape))

    return _node(out, (a, b), grad_fn)


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.intp)
    out = weight.data[ids]

    def grad_fn(g):
        full = np.zeros_like(weight.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, weight.shape[-1]))
        return (full,)

    return _node(out, (weight,), grad_fn)


# -- normalisation and probability ------------------------------------------

def softmax(x: Tensor, axis: int = -1, mask: Optional[np.ndarray] = None) -> Tensor:
    """Numerically stable softmax; ``mask`` (broadcastable bool) False entries get weight 0."""
    x = as_tensor(x)
    axis = _check_axis(axis, x.ndim)
    z = x.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not np.all(np.any(np.broadcast_to(mask, z.shape), axis=axis)):
            raise DegenerateInputError("softmax over a slice in which every entry is masked")
        z = np.where(mask, z, -np.inf)
    shifted = z - z.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (x,), grad_fn)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    axis = _check_axis(axis, x.ndim)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def grad_fn(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _node(out, (x,), grad_fn)


def cross_entropy(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """-log softmax(logits)[label]; logits ``[C]`` with an int label or ``[B, C]`` with ``[B]`` labels."""
    logits = as_tensor(logits)
    single = logits.ndim == 1
    z = logits.data[None, :] if single else logits.data
    n_classes = z.shape[-1]
    labels = np.atleast_1d(np.asarray(labels))
    if labels.dtype.kind not in "iu" or labels.shape != z.shape[:1]:
        raise ArgumentError(f"labels {labels.tolist()} do not match logits of shape {logits.shape}")
    if np.any(labels < 0) or np.any(labels >= n_classes):
        raise ArgumentError(f"label out of range 0..{n_classes - 1}: {labels.tolist()}")
    shifted = z - z.max(axis=-1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - logsum
    rows = np.arange(len(labels))
    losses = -logp[rows, labels]
    scale = 1.0 / len(labels) if reduction == "mean" else 1.0
    value = losses.sum() * scale if reduction in ("mean", "sum") else losses

    def grad_fn(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        if reduction in ("mean", "sum"):
            dz = p * (g * scale)
        else:
            dz = p * g[:, None]
        return (dz[0] if single else dz,)

    return _node(np.asarray(value), (logits,), grad_fn)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    def grad_fn(g):
        gxhat = g * gamma.data
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return (gx, (g * xhat).sum(axis=lead), g.sum(axis=lead))

    return _node(out, (x, gamma, beta), grad_fn)


def dropout(x: Tensor, rate: float, training: bool, rng: Optional[RandomSource]) -> Tensor:
    """Inverted dropout: survivors are scaled by ``1 / (1 - rate)`` so evaluation is the identity."""
    if not 0.0 <= rate < 1.0:
        raise ArgumentError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ArgumentError("training-mode dropout needs a RandomSource")
    keep = rng.generator.random(x.shape) >= rate
    scale = keep / (1.0 - rate)
    return _node(x.data * scale, (x,), lambda g: (g * scale,))


def mean_pool(x: Tensor, valid_mask: np.ndarray) -> Tensor:
    """Mean over the second-to-last axis, counting only positions where ``valid_mask`` is True.

    ``x`` is ``[..., L, d]`` and ``valid_mask`` is ``[..., L]``.
    """
    valid = np.asarray(valid_mask, dtype=bool)
    if valid.shape != x.shape[:-1]:
        raise DimensionError(f"mask shape {valid.shape} does not match positions of {x.shape}")
    counts = valid.sum(axis=-1, keepdims=True)
    if np.any(counts == 0):
        raise DegenerateInputError("mean_pool over a sequence with no valid positions")
    weights = (valid / counts)[..., None]
    out = (x.data * weights).sum(axis=-2)
    return _node(out, (x,), lambda g: (g[..., None, :] * weights,))


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None

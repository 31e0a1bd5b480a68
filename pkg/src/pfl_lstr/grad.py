"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation on a :class:`Tensor` that requires gradients records a node
carrying its inputs and a closure that maps the output gradient to input
gradients.  Node ids grow monotonically, so recording order is a valid
topological order and :func:`backward` simply walks it in reverse.
"""
from __future__ import annotations

import itertools
import math
from collections.abc import Mapping
from dataclasses import dataclass, field

import numpy as np

ENCODER = "encoder"
DECODER = "decoder"
ALL = "all"
PARTITIONS = (ENCODER, DECODER)

# Added to attention scores of masked slots; exp() of it underflows to exactly 0.
MASK_BIAS = -1e30

_ids = itertools.count()


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "_parents", "_backward", "_id")
    # make ndarray <op> Tensor dispatch to the reflected Tensor operator
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self._parents = _parents
        self._backward = _backward
        self._id = next(_ids)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    # operator sugar
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward) -> Tensor:
    """Build an op output; only record the node if some input needs grad."""
    parents = tuple(p for p in parents)
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=parents, _backward=backward)
    return Tensor(data)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    if grad.shape == tuple(shape):
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), backward)


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(a.data @ b.data, (a, b), backward)


def reshape(a: Tensor, shape) -> Tensor:
    def backward(g):
        return (g.reshape(a.shape),)

    return _result(a.data.reshape(shape), (a,), backward)


def transpose(a: Tensor, axes) -> Tensor:
    inverse = np.argsort(axes)

    def backward(g):
        return (np.transpose(g, inverse),)

    return _result(np.transpose(a.data, axes), (a,), backward)


def take(a: Tensor, index: int, axis: int) -> Tensor:
    """Select one position along ``axis`` (the axis is dropped)."""

    def backward(g):
        out = np.zeros_like(a.data)
        sl = [slice(None)] * a.ndim
        sl[axis] = index
        out[tuple(sl)] = g
        return (out,)

    return _result(np.take(a.data, index, axis=axis), (a,), backward)


def sum(a: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy
    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _result(a.data.sum(axis=axis), (a,), backward)


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return mul(sum(a, axis), 1.0 / n)


def _softmax_np(x: np.ndarray, axis: int) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if not -x.ndim <= axis < max(x.ndim, 1):
        raise ShapeError(f"softmax: axis {axis} invalid for shape {x.shape}")
    y = _softmax_np(x.data, axis)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (x,), backward)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale by ``gain`` and shift by ``bias``."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match last dim {d}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        gx_hat = g * gain.data
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, _unbroadcast(g * xhat, gain.shape), _unbroadcast(g, bias.shape)

    return _result(out, (x, gain, bias), backward)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x) -> Tensor:
    """tanh approximation of GELU."""
    x = as_tensor(x)
    u = _GELU_C * (x.data + 0.044715 * x.data**3)
    t = np.tanh(u)
    out = 0.5 * x.data * (1.0 + t)

    def backward(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x.data**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du),)

    return _result(out, (x,), backward)


def cross_entropy(logits, labels) -> Tensor:
    """Mean of ``-log softmax(logits)[label]`` over the leading axis.

    A 1-d ``logits`` with an integer label gives the single-sample loss.
    """
    logits = as_tensor(logits)
    single = logits.ndim == 1
    z = logits.data[None, :] if single else logits.data
    lab = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n, c = z.shape
    if lab.shape != (n,):
        raise ShapeError(f"cross_entropy: {lab.shape[0]} labels for {n} rows")
    if np.any(lab < 0) or np.any(lab >= c):
        raise ValueError(f"cross_entropy: label out of range [0, {c}): {lab.tolist()}")
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(logsum - shifted[rows, lab]))

    def backward(g):
        p = _softmax_np(z, 1)
        p[rows, lab] -= 1.0
        p *= g / n
        return (p[0] if single else p,)

    return _result(np.float64(loss), (logits,), backward)


def backward(loss: Tensor) -> dict[int, np.ndarray]:
    """Propagate d(loss)/d(node) through the recorded graph.

    Returns a map from node id to gradient for every node reachable from
    ``loss`` that requires grad.  Use :func:`grads_for` to key by name.
    """
    if loss.ndim != 0:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t._id in nodes or not t.requires_grad:
            continue
        nodes[t._id] = t
        stack.extend(t._parents)
    grads: dict[int, np.ndarray] = {loss._id: np.ones_like(loss.data)}
    for nid in sorted(nodes, reverse=True):
        t = nodes[nid]
        g = grads.get(nid)
        if g is None or t._backward is None:
            continue
        for parent, pg in zip(t._parents, t._backward(g)):
            if not parent.requires_grad:
                continue
            if parent._id in grads:
                grads[parent._id] = grads[parent._id] + pg
            else:
                grads[parent._id] = pg
    return grads


@dataclass(frozen=True)
class ParamSet(Mapping):
    """Named float64 parameters, each tagged ``encoder`` or ``decoder``.

    Behaves as a read-only mapping name -> ndarray.  Updates return new sets.
    """

    tensors: dict = field(default_factory=dict)
    tags: dict = field(default_factory=dict)

    def __post_init__(self):
        if set(self.tensors) != set(self.tags):
            raise ValueError("every parameter needs exactly one partition tag")
        bad = {n: t for n, t in self.tags.items() if t not in PARTITIONS}
        if bad:
            raise ValueError(f"unknown partition tags: {bad}")

    def __getitem__(self, name):
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self):
        return len(self.tensors)

    def names(self, partition: str = ALL) -> list[str]:
        if partition == ALL:
            return list(self.tensors)
        return [n for n, t in self.tags.items() if t == partition]

    def subset(self, partition: str) -> ParamSet:
        keep = self.names(partition)
        return ParamSet({n: self.tensors[n] for n in keep}, {n: self.tags[n] for n in keep})

    def merge(self, other: ParamSet) -> ParamSet:
        clash = set(self.tensors) & set(other.tensors)
        if clash:
            raise ValueError(f"cannot merge, duplicate names: {sorted(clash)}")
        return ParamSet({**self.tensors, **other.tensors}, {**self.tags, **other.tags})

    def replace(self, updates: Mapping) -> ParamSet:
        tensors = dict(self.tensors)
        for n, v in updates.items():
            if n not in tensors:
                raise KeyError(n)
            tensors[n] = v
        return ParamSet(tensors, dict(self.tags))

    def count(self, partition: str = ALL) -> int:
        return int(np.sum([self.tensors[n].size for n in self.names(partition)], dtype=np.int64))

    def copy(self) -> ParamSet:
        return ParamSet({n: v.copy() for n, v in self.tensors.items()}, dict(self.tags))

    def equals(self, other: ParamSet) -> bool:
        """Bit-exact comparison of names, tags, shapes and bytes."""
        if self.tags != other.tags:
            return False
        return all(
            self.tensors[n].shape == other.tensors[n].shape
            and self.tensors[n].tobytes() == other.tensors[n].tobytes()
            for n in self.tensors
        )

    def leaves(self, partition: str = ALL) -> dict[str, Tensor]:
        """Wrap parameters as graph leaves; only ``partition`` records grads."""
        return {
            n: Tensor(v, requires_grad=partition in (ALL, self.tags[n]), name=n)
            for n, v in self.tensors.items()
        }


def grads_for(leaves: Mapping[str, Tensor], node_grads: Mapping[int, np.ndarray]):
    """Key node gradients by parameter name; traced-but-unused leaves get zeros."""
    return {
        n: node_grads.get(t._id, np.zeros_like(t.data))
        for n, t in leaves.items()
        if t.requires_grad
    }


def sgd_step(params: ParamSet, grads: Mapping, lr: float, partition: str = ALL) -> ParamSet:
    """``p <- p - lr * g`` for the selected partition; other tensors are shared as-is."""
    if not lr > 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if partition not in (ALL, *PARTITIONS):
        raise ValueError(f"unknown partition {partition!r}")
    updates = {}
    for n in params.names(partition):
        if n in grads:
            updates[n] = params[n] - lr * grads[n]
    return params.replace(updates)

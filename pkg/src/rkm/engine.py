"""
Reverse-mode differentiation over dense float64 arrays.

Each operation returns a ``Value`` whose ``_backward`` closure pushes the
output gradient into its parents. Arrays may carry leading batch axes; the
trailing axis is always the feature axis, so a batch of vectors has shape
``[B, d]`` and every operation below treats it row by row.

Example:
    >>> w = Parameter.create("w", np.eye(2))
    >>> y = affine(w.value, constant([3.0, 4.0]))
    >>> loss, _ = softmax_xent(y, 1)
    >>> grads = backward(loss, {"w": w})
"""

import logging
from collections.abc import Callable, Iterable, Mapping, Sequence
from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike, NDArray

from rkm.constants import FINITE_DIFF_EPS
from rkm.errors import ShapeError

logger = logging.getLogger(__name__)

Array = NDArray[np.float64]


def _noop() -> None:
    pass


class Value:
    """A node of the computation record: data, its gradient and its producers."""

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        parents: Sequence["Value"] = (),
        op: str = "",
    ):
        self.data: Array = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.op = op
        self._parents: tuple[Value, ...] = tuple(parents)
        self._backward: Callable[[], None] = _noop
        self._grad: Array | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def grad(self) -> Array:
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        return self._grad

    @grad.setter
    def grad(self, value: Array) -> None:
        self._grad = np.asarray(value, dtype=np.float64)

    def zero_grad(self) -> None:
        self._grad = None

    def item(self) -> float:
        return float(self.data)

    def _accumulate(self, g: Array) -> None:
        if self._grad is None:
            self._grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self._grad += g

    def __repr__(self) -> str:
        return f"Value(shape={self.shape}, op={self.op or 'leaf'}, requires_grad={self.requires_grad})"


@dataclass
class Parameter:
    """A named learnable array."""

    name: str
    value: Value
    trainable: bool = True

    @classmethod
    def create(cls, name: str, data: ArrayLike, trainable: bool = True) -> "Parameter":
        return cls(name=name, value=Value(data, requires_grad=trainable), trainable=trainable)

    @property
    def data(self) -> Array:
        return self.value.data

    @property
    def size(self) -> int:
        return int(self.value.data.size)


def collect_parameters(*groups: Iterable[Parameter]) -> dict[str, Parameter]:
    """Merge parameter groups into one name-keyed mapping, rejecting duplicate names."""
    merged: dict[str, Parameter] = {}
    for group in groups:
        for param in group:
            if param.name in merged:
                raise ValueError(f"Duplicate parameter name: {param.name}")
            merged[param.name] = param
    return merged


def record(data: Array, parents: Sequence[Value], op: str) -> Value:
    return Value(
        data,
        requires_grad=any(p.requires_grad for p in parents),
        parents=parents,
        op=op,
    )


def _require(ok: bool, op: str, **shapes: tuple[int, ...]) -> None:
    if not ok:
        raise ShapeError(op, **shapes)


def constant(data: ArrayLike) -> Value:
    """Wrap an array as a non-differentiable leaf."""
    return Value(data, requires_grad=False, op="const")


def detach(v: Value) -> Value:
    """Cut the computation record: same data, no parents."""
    return Value(v.data, requires_grad=False, op="detach")


def affine(W: Value, x: Value, b: Value | None = None) -> Value:
    """Return ``W x (+ b)`` for every row of ``x``."""
    _require(
        W.data.ndim == 2
        and x.data.ndim >= 1
        and x.shape[-1] == W.shape[1]
        and (b is None or b.shape == (W.shape[0],)),
        "affine",
        W=W.shape,
        x=x.shape,
        b=b.shape if b is not None else (),
    )
    p, q = W.shape
    data = x.data @ W.data.T
    if b is not None:
        data = data + b.data
    parents = (W, x) if b is None else (W, x, b)
    out = record(data, parents, "affine")

    def _backward() -> None:
        g = out.grad
        if W.requires_grad:
            W._accumulate(g.reshape(-1, p).T @ x.data.reshape(-1, q))
        if x.requires_grad:
            x._accumulate(g @ W.data)
        if b is not None and b.requires_grad:
            b._accumulate(g.reshape(-1, p).sum(axis=0))

    out._backward = _backward
    return out


def sigmoid(v: Value) -> Value:
    """Elementwise logistic function, evaluated without overflow."""
    z = np.exp(-np.abs(v.data))
    data = np.where(v.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    out = record(data, (v,), "sigmoid")

    def _backward() -> None:
        if v.requires_grad:
            v._accumulate(out.grad * data * (1.0 - data))

    out._backward = _backward
    return out


def tanh(v: Value) -> Value:
    data = np.tanh(v.data)
    out = record(data, (v,), "tanh")

    def _backward() -> None:
        if v.requires_grad:
            v._accumulate(out.grad * (1.0 - data * data))

    out._backward = _backward
    return out


def hadamard(a: Value, b: Value) -> Value:
    """Pointwise product of equally shaped operands."""
    _require(a.shape == b.shape, "hadamard", a=a.shape, b=b.shape)
    out = record(a.data * b.data, (a, b), "hadamard")

    def _backward() -> None:
        if a.requires_grad:
            a._accumulate(out.grad * b.data)
        if b.requires_grad:
            b._accumulate(out.grad * a.data)

    out._backward = _backward
    return out


def add(a: Value, b: Value) -> Value:
    _require(a.shape == b.shape, "add", a=a.shape, b=b.shape)
    out = record(a.data + b.data, (a, b), "add")

    def _backward() -> None:
        if a.requires_grad:
            a._accumulate(out.grad)
        if b.requires_grad:
            b._accumulate(out.grad)

    out._backward = _backward
    return out


def one_minus(v: Value) -> Value:
    """Return ``1 - v``."""
    out = record(1.0 - v.data, (v,), "one_minus")

    def _backward() -> None:
        if v.requires_grad:
            v._accumulate(-out.grad)

    out._backward = _backward
    return out


def scale(v: Value, s: float | Value) -> Value:
    """Multiply by a scalar, either a fixed float or a 0-d Value."""
    if not isinstance(s, Value):
        factor = float(s)
        out = record(factor * v.data, (v,), "scale")

        def _backward_const() -> None:
            if v.requires_grad:
                v._accumulate(factor * out.grad)

        out._backward = _backward_const
        return out

    _require(s.data.ndim == 0, "scale", s=s.shape)
    out = record(s.data * v.data, (v, s), "scale")

    def _backward() -> None:
        if v.requires_grad:
            v._accumulate(s.data * out.grad)
        if s.requires_grad:
            s._accumulate(np.sum(out.grad * v.data))

    out._backward = _backward
    return out


def mean_pool(values: Sequence[Value]) -> Value:
    """Arithmetic mean over time of equally shaped vectors."""
    if not values:
        raise ValueError("mean_pool: empty sequence")
    first = values[0].shape
    for v in values:
        _require(v.shape == first, "mean_pool", first=first, other=v.shape)
    count = len(values)
    data = np.mean(np.stack([v.data for v in values]), axis=0)
    out = record(data, tuple(values), "mean_pool")

    def _backward() -> None:
        share = out.grad / count
        for v in values:
            if v.requires_grad:
                v._accumulate(share)

    out._backward = _backward
    return out


def concat(values: Sequence[Value]) -> Value:
    """Join values along the feature axis."""
    if not values:
        raise ValueError("concat: nothing to join")
    lead = values[0].shape[:-1]
    for v in values:
        _require(v.shape[:-1] == lead, "concat", first=values[0].shape, other=v.shape)
    widths = [v.shape[-1] for v in values]
    data = np.concatenate([v.data for v in values], axis=-1)
    out = record(data, tuple(values), "concat")

    def _backward() -> None:
        start = 0
        for v, width in zip(values, widths):
            if v.requires_grad:
                v._accumulate(out.grad[..., start : start + width])
            start += width

    out._backward = _backward
    return out


def embed(E: Value, ids: ArrayLike) -> Value:
    """Look up rows of an embedding table; gradients scatter back onto the rows."""
    index = np.asarray(ids, dtype=np.int64)
    _require(E.data.ndim == 2, "embed", E=E.shape)
    if index.size and (index.min() < 0 or index.max() >= E.shape[0]):
        raise ValueError(
            f"embed: token id out of vocabulary (vocab size {E.shape[0]}, "
            f"ids in [{index.min()}, {index.max()}])"
        )
    out = record(E.data[index], (E,), "embed")

    def _backward() -> None:
        if E.requires_grad:
            g = np.zeros_like(E.data)
            np.add.at(g, index, out.grad)
            E._accumulate(g)

    out._backward = _backward
    return out


def layer_norm(v: Value, gain: Value, bias: Value, eps: float) -> Value:
    """Normalize the feature axis to zero mean and unit population variance, then affine."""
    d = v.shape[-1]
    _require(
        d >= 1 and gain.shape == (d,) and bias.shape == (d,),
        "layer_norm",
        v=v.shape,
        gain=gain.shape,
        bias=bias.shape,
    )
    centered = v.data - v.data.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std
    out = record(xhat * gain.data + bias.data, (v, gain, bias), "layer_norm")

    def _backward() -> None:
        g = out.grad
        if v.requires_grad:
            dxhat = g * gain.data
            v._accumulate(
                inv_std
                * (
                    dxhat
                    - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
                )
            )
        if gain.requires_grad:
            gain._accumulate((g * xhat).reshape(-1, d).sum(axis=0))
        if bias.requires_grad:
            bias._accumulate(g.reshape(-1, d).sum(axis=0))

    out._backward = _backward
    return out


def softmax_xent(logits: Value, label: ArrayLike) -> tuple[Value, Array]:
    """
    Cross-entropy of a max-shifted softmax.

    Args:
        logits: ``[V]`` or a batch ``[B, V]``
        label: class index, or ``[B]`` indices for a batch

    Returns:
        Tuple of (scalar loss averaged over the batch, probabilities)
    """
    labels = np.asarray(label, dtype=np.int64)
    _require(
        logits.data.ndim in (1, 2) and labels.shape == logits.shape[:-1],
        "softmax_xent",
        logits=logits.shape,
        label=labels.shape,
    )
    num_classes = logits.shape[-1]
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"softmax_xent: label out of range [0, {num_classes})")

    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    probs = np.exp(log_probs)
    picked = np.take_along_axis(
        log_probs.reshape(-1, num_classes), labels.reshape(-1, 1), axis=1
    )
    count = picked.shape[0]
    out = record(np.asarray(-picked.mean()), (logits,), "softmax_xent")

    def _backward() -> None:
        if logits.requires_grad:
            delta = probs.reshape(-1, num_classes).copy()
            delta[np.arange(count), labels.reshape(-1)] -= 1.0
            logits._accumulate((out.grad / count) * delta.reshape(logits.shape))

    out._backward = _backward
    return out, probs


def _topological_order(root: Value) -> list[Value]:
    """Post-order of the differentiable part of the record, without recursion."""
    order: list[Value] = []
    visited: set[int] = set()
    stack: list[tuple[Value, bool]] = [(root, False)]
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
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(
    loss: Value, params: Mapping[str, Parameter] | None = None
) -> dict[str, Array]:
    """
    Accumulate gradients of a scalar loss through the record in reverse topological order.

    Gradients of the given parameters are reset first, so parameters the loss
    does not reach come back as zeros.

    Returns:
        Dictionary mapping parameter name to a copy of its gradient
    """
    if loss.data.ndim != 0:
        raise ShapeError("backward", loss=loss.shape)
    params = params or {}
    for param in params.values():
        param.value.zero_grad()
    order = _topological_order(loss)
    for node in order:
        node.zero_grad()
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        node._backward()
    return {name: param.value.grad.copy() for name, param in params.items()}


def finite_diff_grad(
    f: Callable[[Mapping[str, Parameter]], float],
    params: Mapping[str, Parameter],
    eps: float = FINITE_DIFF_EPS,
) -> dict[str, Array]:
    """Central differences ``(f(θ+eps) - f(θ-eps)) / (2 eps)`` for every coordinate of every parameter."""
    if eps <= 0:
        raise ValueError(f"finite_diff_grad: eps must be positive, got {eps}")
    grads: dict[str, Array] = {}
    for name, param in params.items():
        arr = param.value.data
        g = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            original = arr[idx]
            arr[idx] = original + eps
            upper = f(params)
            arr[idx] = original - eps
            lower = f(params)
            arr[idx] = original
            g[idx] = (upper - lower) / (2.0 * eps)
        grads[name] = g
    return grads


def relative_error(a: ArrayLike, b: ArrayLike) -> float:
    """Elementwise max of ``|a-b| / max(1e-8, |a|, |b|)``."""
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    if x.size == 0:
        return 0.0
    denom = np.maximum(1e-8, np.maximum(np.abs(x), np.abs(y)))
    return float(np.max(np.abs(x - y) / denom))

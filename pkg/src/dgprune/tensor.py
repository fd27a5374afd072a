"""Minimal reverse-mode autodiff over float64 numpy arrays.

Only the operations needed by the gated CNN, the per-domain risks and the
CORAL/Mixup pretraining losses are provided. Every op builds a node holding
its parents and a closure that maps the upstream gradient to one gradient per
parent; :class:`Tape` orders the nodes for the backward sweep.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import GradientError, LabelError, ShapeError

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """n-dimensional float64 array with optional gradient."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (),
                 _backward: BackwardFn | None = None, op: str = "leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        """Flat row-major view of the data."""
        return self.data.reshape(-1)

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # arithmetic sugar; all of it routes through the module-level ops
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], fn: BackwardFn, op: str) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=needs, _parents=parents if needs else (),
                  _backward=fn if needs else None, op=op)


class Tape:
    """Topologically ordered record of the nodes reachable from a root."""

    def __init__(self, root: Tensor):
        self.root = root
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
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
                if id(parent) not in seen:
                    stack.append((parent, False))
        self.nodes = order  # inputs before outputs

    def __len__(self) -> int:
        return len(self.nodes)

    def sweep(self) -> dict[int, np.ndarray]:
        """Propagate d(root)/d(node) for every node; returns grads keyed by id."""
        root = self.root
        if root.data.size != 1:
            raise GradientError(f"backward needs a scalar root, got shape {root.shape}")
        grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
        for node in reversed(self.nodes):
            g = grads.get(id(node))
            if g is None or node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        return grads

    def backward(self) -> None:
        grads = self.sweep()
        for node in self.nodes:
            if node.is_leaf and node.requires_grad:
                g = grads.get(id(node))
                if g is None:
                    g = np.zeros_like(node.data)
                node.grad = g.copy() if node.grad is None else node.grad + g


def backward(root: Tensor, tape: Tape | None = None) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every grad-requiring leaf."""
    (tape or Tape(root)).backward()


def grad(root: Tensor, inputs: Sequence[Tensor]) -> list[np.ndarray]:
    """Functional gradient: returns d(root)/d(input) without touching ``.grad``."""
    grads = Tape(root).sweep()
    out = []
    for t in inputs:
        g = grads.get(id(t))
        out.append(np.zeros_like(t.data) if g is None else g)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
                 "mul")


def square(x: Tensor) -> Tensor:
    return _node(x.data * x.data, (x,), lambda g: (2.0 * x.data * g,), "square")


def relu(x: Tensor) -> Tensor:
    """Elementwise max(x, 0); the subgradient at exactly 0 is 0."""
    mask = x.data > 0
    return _node(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


# ---------------------------------------------------------------- reductions / shape

def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _node(out, (x,), back, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {x.shape}")
    return _node(x.data.T.copy(), (x,), lambda g: (g.T,), "transpose")


def take(x: Tensor, index) -> Tensor:
    out = x.data[index]

    def back(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _node(np.array(out, dtype=np.float64), (x,), back, "take")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return _node(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def stack_scalars(xs: Sequence[Tensor]) -> Tensor:
    """Pack scalar tensors into a 1-D tensor."""
    xs = list(xs)
    if not xs:
        raise ShapeError("cannot stack an empty sequence")
    for x in xs:
        if x.data.size != 1:
            raise ShapeError(f"stack_scalars expects scalars, got shape {x.shape}")
    data = np.array([x.data.reshape(()) for x in xs], dtype=np.float64)
    return _node(data, tuple(xs), lambda g: tuple(gi.reshape(x.shape) for gi, x in zip(g, xs)), "stack")


# ---------------------------------------------------------------- network ops

def conv2d(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Valid, stride-1 cross-correlation of ``x[B,C,H,W]`` with ``kernel[O,C,kh,kw]``."""
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernel, got {x.shape} and {kernel.shape}")
    B, C, H, W = x.shape
    O, Ck, kh, kw = kernel.shape
    if Ck != C or kh > H or kw > W:
        raise ShapeError(f"conv2d shape mismatch: input {x.shape}, kernel {kernel.shape}")
    if bias.shape != (O,):
        raise ShapeError(f"conv2d bias shape {bias.shape} does not match kernel {kernel.shape}")
    Ho, Wo = H - kh + 1, W - kw + 1
    # cols[b, i, j, c*kh*kw]
    cols = sliding_window_view(x.data, (kh, kw), axis=(2, 3)).transpose(0, 2, 3, 1, 4, 5)
    cols = np.ascontiguousarray(cols).reshape(B * Ho * Wo, C * kh * kw)
    kmat = kernel.data.reshape(O, C * kh * kw)
    out = (cols @ kmat.T).reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2) + bias.data[None, :, None, None]

    def back(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, O)
        gk = (gmat.T @ cols).reshape(kernel.shape) if kernel.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (gmat @ kmat).reshape(B, Ho, Wo, C, kh, kw)
            gx = np.zeros_like(x.data)
            for u in range(kh):
                for v in range(kw):
                    gx[:, :, u:u + Ho, v:v + Wo] += gcols[:, :, :, :, u, v].transpose(0, 3, 1, 2)
        return gx, gk, gb

    return _node(np.ascontiguousarray(out), (x, kernel, bias), back, "conv2d")


def channel_scale(x: Tensor, gates: Tensor) -> Tensor:
    """Multiply channel ``c`` of ``x[B,C,H,W]`` by ``gates[c]``."""
    if x.data.ndim != 4 or gates.shape != (x.shape[1],):
        raise ShapeError(f"channel_scale: gates {gates.shape} do not match channels of {x.shape}")
    gv = gates.data[None, :, None, None]

    def back(g):
        return g * gv, (g * x.data).sum(axis=(0, 2, 3))

    return _node(x.data * gv, (x, gates), back, "channel_scale")


def global_avg_pool(x: Tensor) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool expects [B,C,H,W], got {x.shape}")
    B, C, H, W = x.shape
    scale = 1.0 / (H * W)

    def back(g):
        return (np.broadcast_to(g[:, :, None, None] * scale, x.shape).copy(),)

    return _node(x.data.mean(axis=(2, 3)), (x,), back, "global_avg_pool")


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``x @ weight.T + bias`` for ``x[B,F]``, ``weight[K,F]``, ``bias[K]``."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear shape mismatch: input {x.shape}, weight {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear bias shape {bias.shape} does not match weight {weight.shape}")

    def back(g):
        return g @ weight.data, g.T @ x.data, g.sum(axis=0)

    return _node(x.data @ weight.data.T + bias.data, (x, weight, bias), back, "linear")


def _check_labels(labels, batch: int, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (batch,):
        raise ShapeError(f"expected {batch} labels, got shape {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise LabelError(f"labels must be integers, got dtype {labels.dtype}")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise LabelError(f"label out of range [0, {n_classes}): min {labels.min()}, max {labels.max()}")
    return labels


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of ``-log softmax(logits)[label]``."""
    if logits.data.ndim != 2:
        raise ShapeError(f"logits must be [B,K], got {logits.shape}")
    B, K = logits.shape
    labels = _check_labels(labels, B, K)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(B)
    loss = (logsum - z[rows, labels]).mean()

    def back(g):
        p = np.exp(z - logsum[:, None])
        p[rows, labels] -= 1.0
        return (p * (g / B),)

    return _node(np.asarray(loss), (logits,), back, "softmax_cross_entropy")


def mse_loss(pred: Tensor, target) -> Tensor:
    """Mean squared error; an alternative risk used by closed-form oracle tests."""
    target = np.asarray(target, dtype=np.float64)
    if target.shape != pred.shape:
        raise ShapeError(f"mse_loss shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred.data - target
    n = diff.size
    return _node(np.asarray((diff * diff).mean()), (pred,), lambda g: (2.0 * diff * g / n,), "mse")


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------- scalar aggregates

def mean_of_scalars(xs: Iterable[Tensor]) -> Tensor:
    xs = list(xs)
    if not xs:
        raise ShapeError("mean_of_scalars needs at least one value")
    return mean(stack_scalars(xs))


def variance_of_scalars(xs: Iterable[Tensor], sample: bool = False) -> Tensor:
    """Population variance of scalar tensors (``sample=True`` divides by N-1)."""
    xs = list(xs)
    if not xs:
        raise ShapeError("variance_of_scalars needs at least one value")
    n = len(xs)
    if sample and n < 2:
        raise ShapeError("sample variance needs at least two values")
    v = stack_scalars(xs)
    centered = sub(v, mean(v))
    return mul(sum_(square(centered)), 1.0 / (n - 1 if sample else n))

"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable primitive records a node carrying its inputs and a
backward closure. ``backward`` collects the nodes reachable from a scalar
loss, orders them by creation (the tape), and replays them in reverse.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

_node_counter = itertools.count()
_grad_enabled = True


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


@contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation passes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@dataclass(eq=False)
class Node:
    seq: int
    op: str
    output: "Tensor"
    inputs: tuple["Tensor", ...]
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tensor:
    __slots__ = ("values", "grad", "requires_grad", "node", "name")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        arr = np.array(values, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.values = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.values.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.values

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    # Operator sugar; each maps to a recorded primitive below.
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(op: str, out_values: np.ndarray, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.values = out_values
    out.grad = None
    out.name = None
    out.node = None
    out.requires_grad = _grad_enabled and any(t.requires_grad for t in inputs)
    if out.requires_grad:
        out.node = Node(next(_node_counter), op, out, inputs, backward_fn)
    return out


@dataclass
class ComputationTape:
    """Nodes reachable from one output, in creation order."""

    nodes: list[Node] = field(default_factory=list)

    @classmethod
    def from_output(cls, out: Tensor) -> "ComputationTape":
        seen: set[int] = set()
        nodes: list[Node] = []
        stack = [out]
        while stack:
            t = stack.pop()
            n = t.node
            if n is None or n.seq in seen:
                continue
            seen.add(n.seq)
            nodes.append(n)
            stack.extend(n.inputs)
        nodes.sort(key=lambda n: n.seq)
        return cls(nodes)

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf reachable from ``loss``.

    Leaf gradients accumulate across calls; call ``zero_grad`` between steps.
    """
    if loss.values.size != 1 or loss.values.ndim != 0:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    tape = ComputationTape.from_output(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}
    leaves: dict[int, Tensor] = {}
    if loss.is_leaf:
        leaves[id(loss)] = loss
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.backward_fn(g)
        for t, tg in zip(node.inputs, in_grads):
            if tg is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + tg
            else:
                grads[key] = tg
            if t.is_leaf:
                leaves[key] = t
    for key, t in leaves.items():
        g = grads.get(key)
        if g is None:
            continue
        t.grad = g.copy() if t.grad is None else t.grad + g


# ---------------------------------------------------------------- primitives


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # Only trailing-aligned broadcasting of the second operand is supported.
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, dim in enumerate(shape):
        if dim == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape:
        return
    ok = b.values.ndim <= a.values.ndim and all(
        bd in (1, ad) for ad, bd in zip(a.shape[::-1], b.shape[::-1])
    )
    if not ok:
        raise ShapeError(f"{op}: cannot combine shapes {a.shape} and {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may broadcast along leading axes (bias add)."""
    _check_broadcast(a, b, "add")
    a_shape, b_shape = a.shape, b.shape
    return _record(
        "add", a.values + b.values, (a, b),
        lambda g: (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    av, bv = a.values, b.values
    return _record(
        "mul", av * bv, (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


def scale(a: Tensor, c: float) -> Tensor:
    return _record("scale", a.values * c, (a,), lambda g: (g * c,))


def add_constant(a: Tensor, const: np.ndarray) -> Tensor:
    """Add a non-differentiable array (e.g. an additive attention mask)."""
    return _record("add_constant", a.values + const, (a,), lambda g: (_unbroadcast(g, a.shape),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, batched over any leading axes."""
    if a.values.ndim < 2 or b.values.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    av, bv = a.values, b.values
    if bv.ndim > 2 and av.shape[:-2] != bv.shape[:-2]:
        raise ShapeError(f"matmul: batch dims differ for {a.shape} and {b.shape}")

    if bv.ndim == 2 and av.ndim > 2:
        # Fold leading axes into rows so a single GEMM handles the batch.
        k, n = bv.shape
        a2 = av.reshape(-1, k)
        out = (a2 @ bv).reshape(*av.shape[:-1], n)

        def back(g):
            g2 = g.reshape(-1, n)
            return (g2 @ bv.T).reshape(av.shape), a2.T @ g2

        return _record("matmul", out, (a, b), back)

    def back(g):
        return g @ np.swapaxes(bv, -1, -2), np.swapaxes(av, -1, -2) @ g

    return _record("matmul", av @ bv, (a, b), back)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record("transpose", np.transpose(a.values, axes), (a,), lambda g: (np.transpose(g, inv),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return _record("reshape", a.values.reshape(shape), (a,), lambda g: (g.reshape(old),))


def relu(a: Tensor) -> Tensor:
    pos = a.values > 0
    return _record("relu", np.where(pos, a.values, 0.0), (a,), lambda g: (g * pos,))


def tensor_sum(a: Tensor) -> Tensor:
    shape = a.shape
    return _record("sum", np.array(a.values.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(a: Tensor) -> Tensor:
    n = a.values.size
    shape = a.shape
    return _record("mean", np.array(a.values.sum() / n), (a,),
                   lambda g: (np.full(shape, g / n),))


def square(a: Tensor) -> Tensor:
    av = a.values
    return _record("square", av * av, (a,), lambda g: (2.0 * av * g,))


def _softmax_values(x: np.ndarray) -> np.ndarray:
    if np.isnan(x).any():
        raise NumericError("softmax: NaN in input")
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis with per-row max subtraction."""
    y = _softmax_values(x.values)

    def back(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _record("softmax", y, (x,), back)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain {gain.shape} / bias {bias.shape} vs last dim {d}")
    xv = x.values
    mu = xv.mean(axis=-1, keepdims=True)
    xc = xv - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gv = gain.values

    def back(g):
        gx_hat = g * gv
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _record("layer_norm", xhat * gv + bias.values, (x, gain, bias), back)


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of ``weight`` by integer ``ids`` (any shape)."""
    ids = np.asarray(ids, dtype=np.int64)
    vocab = weight.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise IndexError(f"embedding: token id out of range [0, {vocab})")
    wshape = weight.shape

    def back(g):
        gw = np.zeros(wshape)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, wshape[1]))
        return (gw,)

    return _record("embedding", weight.values[ids], (weight,), back)


def cross_entropy_loss(logits: Tensor, targets) -> Tensor:
    """Mean negative log-softmax of the target class over rows of ``logits``."""
    if logits.values.ndim != 2:
        raise ShapeError(f"cross_entropy_loss: logits must be batch x vocab, got {logits.shape}")
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    batch, vocab = logits.shape
    if targets.shape[0] != batch:
        raise ShapeError(f"cross_entropy_loss: {targets.shape[0]} targets for {batch} rows")
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        raise IndexError(f"cross_entropy_loss: target out of range [0, {vocab})")
    x = logits.values
    if np.isnan(x).any():
        raise NumericError("cross_entropy_loss: NaN in logits")
    z = x - x.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(batch)
    nll = lse - z[rows, targets]
    loss = nll.sum() / batch

    def back(g):
        p = np.exp(z - lse[:, None])
        p[rows, targets] -= 1.0
        return (p * (g / batch),)

    return _record("cross_entropy", np.array(loss), (logits,), back)

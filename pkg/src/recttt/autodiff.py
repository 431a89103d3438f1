"""Tape-based reverse-mode differentiation.

A :class:`Graph` is an append-only tape.  Every recorded operation stores the
ids of its inputs and whatever its gradient rule needs; :meth:`Graph.backward`
walks the tape once in reverse insertion order.  Forward functions and
gradient rules live in the module-level registries ``FORWARD`` and
``GRAD_RULES`` keyed by op kind, so a rule can be swapped out (the gradient
checker's negative control does exactly that).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable, Iterable, Sequence

import numpy as np

from .tensor import DTYPE, ShapeError

ForwardFn = Callable[..., tuple[np.ndarray, Any]]
GradRule = Callable[[Any, np.ndarray, tuple[bool, ...]], Sequence[np.ndarray | None]]

FORWARD: dict[str, ForwardFn] = {}
GRAD_RULES: dict[str, GradRule] = {}
# kinds whose output never carries gradient
NO_GRAD_KINDS = {"stop_gradient"}


def register(kind: str, forward: ForwardFn, rule: GradRule | None) -> None:
    FORWARD[kind] = forward
    if rule is not None:
        GRAD_RULES[kind] = rule


class Parameter:
    """A named, persistent tensor that graphs read and optimizers write."""

    __slots__ = ("name", "value", "trainable")

    def __init__(self, value: np.ndarray, name: str = "", trainable: bool = True):
        self.value = np.ascontiguousarray(value, dtype=DTYPE)
        self.name = name
        self.trainable = trainable

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        flag = "" if self.trainable else ", frozen"
        return f"Parameter({self.name!r}, shape={self.shape}{flag})"


class Var:
    __slots__ = ("graph", "id", "value", "requires_grad")

    def __init__(self, graph: "Graph", id: int, value: np.ndarray, requires_grad: bool):
        self.graph = graph
        self.id = id
        self.value = value
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def item(self) -> float:
        return float(self.value.reshape(-1)[0])

    def __add__(self, other: "Var") -> "Var":
        from . import ops
        return ops.add(self, other)

    def __sub__(self, other: "Var") -> "Var":
        from . import ops
        return ops.sub(self, other)

    def __mul__(self, other) -> "Var":
        from . import ops
        if isinstance(other, Var):
            return ops.mul(self, other)
        return ops.scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self) -> "Var":
        from . import ops
        return ops.scale(self, -1.0)

    def __truediv__(self, other: "Var") -> "Var":
        from . import ops
        return ops.div(self, other)

    def __matmul__(self, other: "Var") -> "Var":
        from . import ops
        return ops.matmul(self, other)

    def __repr__(self) -> str:
        return f"Var(id={self.id}, shape={self.shape}, requires_grad={self.requires_grad})"


@dataclass
class Node:
    kind: str
    inputs: tuple[int, ...]
    ctx: Any
    needs: tuple[bool, ...]
    requires_grad: bool


class Graph:
    """One forward/backward episode.

    ``dtype`` is float32 for normal use; float64 turns the graph into the
    shadow evaluator used by the gradient checker (parameters and inputs are
    upcast on entry).
    """

    def __init__(self, dtype=DTYPE):
        self.dtype = np.dtype(dtype)
        self.nodes: list[Node] = []
        self._param_vars: dict[int, tuple[Parameter, Var]] = {}
        self._leaf_shapes: dict[int, tuple[int, ...]] = {}

    def __len__(self) -> int:
        return len(self.nodes)

    def _cast(self, value) -> np.ndarray:
        arr = np.asarray(value)
        if arr.dtype != self.dtype:
            arr = arr.astype(self.dtype)
        return arr

    def var(self, value, requires_grad: bool = False) -> Var:
        value = self._cast(value)
        self.nodes.append(Node("leaf", (), None, (), requires_grad))
        nid = len(self.nodes) - 1
        self._leaf_shapes[nid] = value.shape
        return Var(self, nid, value, requires_grad)

    def param(self, p: Parameter) -> Var:
        hit = self._param_vars.get(id(p))
        if hit is not None:
            return hit[1]
        v = self.var(p.value, requires_grad=p.trainable)
        self._param_vars[id(p)] = (p, v)
        return v

    def record(self, kind: str, inputs: Sequence[Var], **attrs) -> Var:
        for v in inputs:
            if v.graph is not self:
                raise ValueError(f"{kind}: input {v} belongs to a different graph")
        out, ctx = FORWARD[kind](*(v.value for v in inputs), **attrs)
        needs = tuple(v.requires_grad for v in inputs)
        requires = any(needs) and kind not in NO_GRAD_KINDS
        self.nodes.append(Node(kind, tuple(v.id for v in inputs), ctx if requires else None, needs, requires))
        return Var(self, len(self.nodes) - 1, self._cast(out), requires)

    def backward(self, loss: Var) -> dict[int, np.ndarray]:
        """Gradients of a scalar ``loss`` for every requires-grad leaf.

        Leaves that are unreachable from ``loss`` (or only reachable through a
        stop-gradient) get an all-zero gradient.
        """
        if loss.graph is not self:
            raise ValueError("loss belongs to a different graph")
        if loss.value.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.value)}
        leaf_grads: dict[int, np.ndarray] = {}
        for nid in range(loss.id, -1, -1):
            node = self.nodes[nid]
            g = grads.pop(nid, None)
            if node.kind == "leaf":
                if node.requires_grad and g is not None:
                    leaf_grads[nid] = g
                continue
            if g is None or not node.requires_grad:
                continue
            in_grads = GRAD_RULES[node.kind](node.ctx, g, node.needs)
            for src, need, gi in zip(node.inputs, node.needs, in_grads):
                if not need or gi is None:
                    continue
                prev = grads.get(src)
                grads[src] = gi if prev is None else prev + gi
        out = {}
        for nid, shape in self._leaf_shapes.items():
            if self.nodes[nid].requires_grad:
                g = leaf_grads.get(nid)
                out[nid] = np.zeros(shape, self.dtype) if g is None else g
        return out

    def param_grads(self, grads: dict[int, np.ndarray]) -> list[tuple[Parameter, np.ndarray]]:
        """Pair every trainable parameter used in this graph with its gradient."""
        pairs = []
        for p, v in self._param_vars.values():
            if v.requires_grad:
                pairs.append((p, grads.get(v.id, np.zeros(v.shape, self.dtype))))
        return pairs


def stop_gradient(v: Var) -> Var:
    """Identity in the forward pass; blocks every gradient in the backward pass."""
    return v.graph.record("stop_gradient", [v])


def backward(loss: Var) -> dict[int, np.ndarray]:
    return loss.graph.backward(loss)


def sgd_step(params: Sequence[Parameter], grads: Sequence[np.ndarray], lr: float) -> Sequence[Parameter]:
    """In-place ``p -= lr * g`` for every trainable parameter; frozen ones are skipped."""
    for p, g in zip(params, grads):
        if p.value.shape != np.shape(g):
            raise ShapeError(f"sgd_step: {p.name} has shape {p.value.shape}, grad {np.shape(g)}")
        if not p.trainable or lr == 0.0:
            continue
        p.value -= (lr * g).astype(p.value.dtype, copy=False)
    return params


class SGD:
    """SGD with optional heavy-ball momentum and L2 weight decay.

    State is keyed by parameter identity, so one optimizer can serve a model
    whose trainable subset changes between phases.
    """

    def __init__(self, lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._velocity: dict[int, np.ndarray] = {}

    def step(self, pairs: Iterable[tuple[Parameter, np.ndarray]]) -> None:
        for p, g in pairs:
            if not p.trainable:
                continue
            if p.value.shape != g.shape:
                raise ShapeError(f"SGD: {p.name} has shape {p.value.shape}, grad {g.shape}")
            g = g.astype(p.value.dtype, copy=False)
            if self.weight_decay:
                g = g + self.weight_decay * p.value
            if self.momentum:
                buf = self._velocity.get(id(p))
                buf = g.copy() if buf is None else self.momentum * buf + g
                self._velocity[id(p)] = buf
                g = buf
            if self.lr:
                p.value -= self.lr * g


from . import ops  # noqa: E402,F401  (populates FORWARD / GRAD_RULES)

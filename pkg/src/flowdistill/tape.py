"""Define-by-run reverse-mode differentiation over float64 numpy arrays.

A :class:`Tape` records every node as it is created; values are computed
eagerly. :meth:`Tape.backward` walks the record in reverse creation order and
accumulates adjoints into the parameter nodes. ``stop_gradient`` passes its
input value through unchanged and is a dead end for adjoints.

Arrays are either scalars, vectors ``(d,)`` or row batches ``(n, d)``.
Elementwise ops accept numpy broadcasting between a batch and a per-row or
per-column operand; adjoints are summed back to the operand's shape.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "GradientMap",
    "Node",
    "ShapeError",
    "Tape",
    "TapeError",
    "backward",
    "forward",
    "stop_gradient",
]


class TapeError(ValueError):
    """Invalid use of a tape (non-scalar loss, foreign node, ...)."""


class ShapeError(TapeError):
    """Operand shapes are incompatible for a primitive."""

    def __init__(self, op: str, lhs: tuple, rhs: tuple):
        self.op = op
        self.lhs_shape = tuple(lhs)
        self.rhs_shape = tuple(rhs)
        super().__init__(
            f"{op}: incompatible operand shapes {self.lhs_shape} and {self.rhs_shape}"
        )


def _as_array(value) -> np.ndarray:
    return np.array(value, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Node:
    """One recorded value on a tape.

    Attributes
    ----------
    id : int
        Creation index, unique within the tape.
    op : str
        Primitive kind.
    inputs : tuple of int
        Ids of the input nodes (all smaller than ``id``).
    value : ndarray
        Forward value.
    requires_grad : bool
        Whether any parameter reaches this node without crossing a
        stop-gradient.
    """

    __slots__ = ("tape", "id", "op", "inputs", "value", "requires_grad", "name", "_vjp")

    def __init__(self, tape, id, op, inputs, value, requires_grad, vjp, name=None):
        self.tape = tape
        self.id = id
        self.op = op
        self.inputs = inputs
        self.value = value
        self.requires_grad = requires_grad
        self.name = name
        self._vjp = vjp

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Node(id={self.id}, op={self.op}{label}, shape={self.shape})"

    def _lift(self, other) -> "Node":
        if isinstance(other, Node):
            return other
        return self.tape.constant(other)

    def __add__(self, other):
        return self.tape.add(self, self._lift(other))

    def __radd__(self, other):
        return self.tape.add(self._lift(other), self)

    def __sub__(self, other):
        return self.tape.sub(self, self._lift(other))

    def __rsub__(self, other):
        return self.tape.sub(self._lift(other), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return self.tape.scale(self, float(other))
        return self.tape.mul(self, self._lift(other))

    def __rmul__(self, other):
        if np.isscalar(other):
            return self.tape.scale(self, float(other))
        return self.tape.mul(self._lift(other), self)

    def __neg__(self):
        return self.tape.scale(self, -1.0)


class GradientMap(dict):
    """Accumulated adjoints keyed by parameter node id.

    Indexing also accepts the parameter :class:`Node` itself.
    """

    def __getitem__(self, key):
        if isinstance(key, Node):
            key = key.id
        return super().__getitem__(key)

    def __contains__(self, key):
        if isinstance(key, Node):
            key = key.id
        return super().__contains__(key)


class Tape:
    """Computation record for one loss evaluation.

    Build a fresh tape per step and discard it afterwards. A tape is not
    thread-safe; distinct tapes share no state.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.parameters: list[Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def _push(self, op, inputs: Sequence[Node], value, vjp, requires_grad=None, name=None):
        for node in inputs:
            if node.tape is not self:
                raise TapeError(f"{op}: input {node!r} belongs to another tape")
        if requires_grad is None:
            requires_grad = any(node.requires_grad for node in inputs)
        node = Node(
            self,
            len(self.nodes),
            op,
            tuple(n.id for n in inputs),
            value,
            requires_grad,
            vjp,
            name,
        )
        self.nodes.append(node)
        return node

    # leaves

    def constant(self, value) -> Node:
        return self._push("constant", (), _as_array(value), None, requires_grad=False)

    def parameter(self, value, name: str | None = None) -> Node:
        node = self._push("parameter", (), _as_array(value), None, requires_grad=True, name=name)
        self.parameters.append(node)
        return node

    # elementwise

    def _check_broadcast(self, op, a: Node, b: Node) -> None:
        try:
            np.broadcast_shapes(a.shape, b.shape)
        except ValueError:
            raise ShapeError(op, a.shape, b.shape) from None

    def add(self, a: Node, b: Node) -> Node:
        self._check_broadcast("add", a, b)
        sa, sb = a.shape, b.shape
        return self._push(
            "add", (a, b), a.value + b.value,
            lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
        )

    def sub(self, a: Node, b: Node) -> Node:
        self._check_broadcast("sub", a, b)
        sa, sb = a.shape, b.shape
        return self._push(
            "sub", (a, b), a.value - b.value,
            lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
        )

    def mul(self, a: Node, b: Node) -> Node:
        self._check_broadcast("mul", a, b)
        va, vb = a.value, b.value
        return self._push(
            "mul", (a, b), va * vb,
            lambda g: (_unbroadcast(g * vb, va.shape), _unbroadcast(g * va, vb.shape)),
        )

    def scale(self, a: Node, c: float) -> Node:
        c = float(c)
        return self._push("scale", (a,), c * a.value, lambda g: (c * g,))

    def square(self, a: Node) -> Node:
        va = a.value
        return self._push("square", (a,), va * va, lambda g: (2.0 * va * g,))

    def tanh(self, a: Node) -> Node:
        y = np.tanh(a.value)
        return self._push("tanh", (a,), y, lambda g: (g * (1.0 - y * y),))

    def silu(self, a: Node) -> Node:
        va = a.value
        s = 0.5 * (1.0 + np.tanh(0.5 * va))  # overflow-free sigmoid
        return self._push("silu", (a,), va * s, lambda g: (g * s * (1.0 + va * (1.0 - s)),))

    # linear algebra

    def matvec(self, w: Node, x: Node) -> Node:
        """``W x`` for a vector, or row-wise ``x W^T`` for a batch."""
        if w.value.ndim != 2 or x.value.ndim not in (1, 2) or x.shape[-1] != w.shape[1]:
            raise ShapeError("matvec", w.shape, x.shape)
        vw, vx = w.value, x.value

        def vjp(g):
            if vx.ndim == 1:
                return np.outer(g, vx), vw.T @ g
            return g.T @ vx, g @ vw

        return self._push("matvec", (w, x), vx @ vw.T, vjp)

    def affine(self, w: Node, x: Node, b: Node) -> Node:
        """``W x + b`` (row-wise for a batch)."""
        if w.value.ndim != 2 or x.value.ndim not in (1, 2) or x.shape[-1] != w.shape[1]:
            raise ShapeError("affine", w.shape, x.shape)
        if b.shape != (w.shape[0],):
            raise ShapeError("affine", w.shape, b.shape)
        vw, vx = w.value, x.value

        def vjp(g):
            if vx.ndim == 1:
                return np.outer(g, vx), vw.T @ g, g
            return g.T @ vx, g @ vw, g.sum(axis=0)

        return self._push("affine", (w, x, b), vx @ vw.T + b.value, vjp)

    def dot(self, a: Node, b: Node) -> Node:
        """Inner product over the last axis (one value per row for batches)."""
        if a.shape != b.shape:
            raise ShapeError("dot", a.shape, b.shape)
        va, vb = a.value, b.value
        return self._push(
            "dot", (a, b), np.einsum("...i,...i->...", va, vb),
            lambda g: (np.expand_dims(g, -1) * vb, np.expand_dims(g, -1) * va),
        )

    def concat(self, nodes: Sequence[Node]) -> Node:
        """Concatenate along the last axis."""
        nodes = list(nodes)
        lead = nodes[0].shape[:-1]
        for n in nodes[1:]:
            if n.shape[:-1] != lead:
                raise ShapeError("concat", nodes[0].shape, n.shape)
        widths = [n.shape[-1] for n in nodes]
        cuts = np.cumsum(widths)[:-1]

        def vjp(g):
            return tuple(np.split(g, cuts, axis=-1))

        return self._push("concat", nodes, np.concatenate([n.value for n in nodes], axis=-1), vjp)

    # reductions

    def sum(self, a: Node, axis: int | None = None) -> Node:
        shape = a.shape
        if axis is None:
            return self._push("sum", (a,), np.sum(a.value), lambda g: (np.broadcast_to(g, shape).copy(),))
        return self._push(
            "sum", (a,), np.sum(a.value, axis=axis),
            lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),),
        )

    def mean(self, a: Node, axis: int | None = None) -> Node:
        shape = a.shape
        if axis is None:
            k = a.value.size
            return self._push("mean", (a,), np.mean(a.value), lambda g: (np.full(shape, g / k),))
        k = shape[axis]
        return self._push(
            "mean", (a,), np.mean(a.value, axis=axis),
            lambda g: (np.broadcast_to(np.expand_dims(g, axis) / k, shape).copy(),),
        )

    # gradient control

    def stop_gradient(self, a: Node) -> Node:
        return self._push("stop_gradient", (a,), a.value, None, requires_grad=False)

    def external(
        self,
        x: Node,
        value: np.ndarray,
        vjp: Callable[[np.ndarray], np.ndarray],
        name: str | None = None,
    ) -> Node:
        """Frozen function of ``x`` with a caller-supplied vector-Jacobian product.

        Used for closed-form fields whose Jacobian in ``x`` is known; the
        function itself carries no parameters.
        """
        value = _as_array(value)
        return self._push("external", (x,), value, lambda g: (vjp(g),), name=name)

    # evaluation

    def forward(self, node: Node) -> np.ndarray:
        if node.tape is not self:
            raise TapeError(f"{node!r} belongs to another tape")
        return node.value

    def backward(self, loss: Node, seed: float = 1.0) -> GradientMap:
        """Adjoints of ``seed * loss`` with respect to every parameter on the tape."""
        if loss.tape is not self:
            raise TapeError(f"{loss!r} belongs to another tape")
        if loss.value.ndim != 0:
            raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        adj: dict[int, np.ndarray] = {}
        if loss.requires_grad:
            adj[loss.id] = np.array(float(seed))
        for node in reversed(self.nodes[: loss.id + 1]):
            g = adj.pop(node.id, None) if node.op != "parameter" else None
            if g is None or node._vjp is None:
                continue
            grads = node._vjp(g)
            for input_id, gi in zip(node.inputs, grads):
                if not self.nodes[input_id].requires_grad:
                    continue
                if input_id in adj:
                    adj[input_id] = adj[input_id] + gi
                else:
                    adj[input_id] = gi
        out = GradientMap()
        for p in self.parameters:
            g = adj.get(p.id)
            out[p.id] = np.zeros_like(p.value) if g is None else np.asarray(g, dtype=np.float64).reshape(p.shape)
        return out


def forward(graph: Tape, node: Node) -> np.ndarray:
    return graph.forward(node)


def backward(graph: Tape, loss: Node, seed: float = 1.0) -> GradientMap:
    return graph.backward(loss, seed)


def stop_gradient(graph: Tape, node: Node) -> Node:
    return graph.stop_gradient(node)


def parameter_nodes(tape: Tape, arrays: Iterable[np.ndarray], prefix: str = "p") -> list[Node]:
    return [tape.parameter(a, name=f"{prefix}{i}") for i, a in enumerate(arrays)]

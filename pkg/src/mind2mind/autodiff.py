"""Symbolic reverse-mode differentiation over dense float64 arrays.

Expressions are immutable :class:`Node` DAGs. :func:`gradient` returns a new
graph whose nodes are ordinary primitives, so it can be differentiated again;
this is how the gradient-penalty term gets its parameter gradient.

Tensors are plain ``numpy.ndarray`` values of dtype float64.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "Node",
    "ExprGraph",
    "GraphError",
    "UnboundLeafError",
    "ShapeError",
    "NonFiniteError",
    "leaf",
    "const",
    "add",
    "sub",
    "mul",
    "scale",
    "neg",
    "matmul",
    "transpose",
    "relu",
    "step",
    "tanh",
    "power",
    "sum",
    "mean",
    "row_norm",
    "lerp",
    "pad_cols",
    "slice_cols",
    "concat_cols",
    "grad_nodes",
    "evaluate",
    "gradient",
    "check_gradients",
]


class GraphError(Exception):
    """Base class for expression-graph failures."""


class UnboundLeafError(GraphError):
    pass


class ShapeError(GraphError):
    pass


class NonFiniteError(GraphError):
    def __init__(self, node: "Node", message: str | None = None):
        self.node = node
        super().__init__(message or f"non-finite value produced by {node.op!r} node")


_ids = itertools.count()


class Node:
    """One primitive application. Treat as immutable."""

    __slots__ = ("op", "inputs", "attr", "name", "trainable", "id")

    def __init__(self, op: str, inputs: tuple["Node", ...] = (), attr=None,
                 name: str | None = None, trainable: bool = False):
        self.op = op
        self.inputs = inputs
        self.attr = attr
        self.name = name
        self.trainable = trainable
        self.id = next(_ids)

    def __repr__(self):
        if self.op == "leaf":
            return f"Node(leaf {self.name!r})"
        return f"Node({self.op}#{self.id})"

    def __hash__(self):
        return self.id

    def __eq__(self, other):
        return self is other

    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, _lift(other))

    def __rmul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(_lift(other), self)

    def __matmul__(self, other):
        return matmul(self, _lift(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __pow__(self, p):
        return power(self, p)


def _lift(x) -> Node:
    return x if isinstance(x, Node) else const(x)


# ---------------------------------------------------------------- builders

def leaf(name: str, trainable: bool = False) -> Node:
    return Node("leaf", name=name, trainable=trainable)


def const(value) -> Node:
    arr = np.array(value, dtype=np.float64)
    arr.setflags(write=False)
    return Node("const", attr=arr)


def add(a: Node, b: Node) -> Node:
    return Node("add", (a, b))


def sub(a: Node, b: Node) -> Node:
    return add(a, scale(b, -1.0))


def mul(a: Node, b: Node) -> Node:
    return Node("mul", (a, b))


def scale(a: Node, c: float) -> Node:
    return Node("scale", (a,), float(c))


def neg(a: Node) -> Node:
    return scale(a, -1.0)


def matmul(a: Node, b: Node) -> Node:
    return Node("matmul", (a, b))


def transpose(a: Node) -> Node:
    return Node("transpose", (a,))


def relu(a: Node) -> Node:
    return Node("relu", (a,))


def step(a: Node) -> Node:
    """Heaviside indicator ``a > 0`` as 0/1 floats; its derivative is zero."""
    return Node("step", (a,))


def tanh(a: Node) -> Node:
    return Node("tanh", (a,))


def power(a: Node, p: float) -> Node:
    return Node("power", (a,), float(p))


def sum(a: Node, axis: int | None = None) -> Node:  # noqa: A001
    """Sum to a scalar (``axis=None``) or along ``axis`` keeping dims."""
    return Node("sum", (a,), axis)


def mean(a: Node, axis: int | None = None) -> Node:
    return Node("div_count", (sum(a, axis), a), axis)


def row_norm(x: Node, tiny: float = 1e-12) -> Node:
    """Euclidean norm of every row, shape ``(n, 1)``.

    ``tiny`` keeps the derivative finite when a row is exactly zero.
    """
    return power(sum(mul(x, x), axis=1) + tiny, 0.5)


def lerp(alpha: Node, a: Node, b: Node) -> Node:
    """``alpha * a + (1 - alpha) * b`` with row-wise broadcasting of ``alpha``."""
    return add(mul(alpha, a), mul(sub(const(1.0), alpha), b))


def pad_cols(a: Node, before: int, after: int) -> Node:
    return Node("pad_cols", (a,), (int(before), int(after)))


def slice_cols(a: Node, start: int, end_offset: int = 0) -> Node:
    """Columns ``start : width - end_offset``."""
    return Node("slice_cols", (a,), (int(start), int(end_offset)))


def concat_cols(a: Node, b: Node, widths: tuple[int, int]) -> Node:
    wa, wb = widths
    return add(pad_cols(a, 0, wb), pad_cols(b, wa, 0))


def _broadcast(a: Node, ref: Node) -> Node:
    return Node("broadcast", (a, ref))


def _unbroadcast(a: Node, ref: Node) -> Node:
    return Node("unbroadcast", (a, ref))


# ------------------------------------------------------------- evaluation

def _unbroadcast_value(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    if g.shape != shape:
        raise ShapeError(f"cannot reduce {g.shape} to {shape}")
    return g


def _pad(v, attr):
    before, after = attr
    if v.ndim != 2:
        raise ShapeError("pad_cols expects a 2-d operand")
    out = np.zeros((v.shape[0], v.shape[1] + before + after))
    out[:, before:before + v.shape[1]] = v
    return out


def _slice(v, attr):
    start, end_offset = attr
    if v.ndim != 2 or start + end_offset > v.shape[1]:
        raise ShapeError(f"slice_cols {attr} out of range for shape {v.shape}")
    return v[:, start:v.shape[1] - end_offset].copy()


def _sum(v, axis):
    if axis is None:
        return np.asarray(v.sum())
    return v.sum(axis=axis, keepdims=True)


def _div_count(v, ref, axis):
    count = ref.size if axis is None else ref.shape[axis]
    return v / count


def _matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} and {b.shape}")
    return a @ b


_FORWARD: dict[str, Callable] = {
    "add": lambda n, a, b: a + b,
    "mul": lambda n, a, b: a * b,
    "scale": lambda n, a: n.attr * a,
    "matmul": lambda n, a, b: _matmul(a, b),
    "transpose": lambda n, a: np.ascontiguousarray(a.T),
    "relu": lambda n, a: np.maximum(a, 0.0),
    "step": lambda n, a: (a > 0.0).astype(np.float64),
    "tanh": lambda n, a: np.tanh(a),
    "power": lambda n, a: np.power(a, n.attr),
    "sum": lambda n, a: _sum(a, n.attr),
    "div_count": lambda n, a, ref: _div_count(a, ref, n.attr),
    "broadcast": lambda n, a, ref: np.broadcast_to(a, ref.shape).copy(),
    "unbroadcast": lambda n, a, ref: _unbroadcast_value(a, ref.shape),
    "pad_cols": lambda n, a: _pad(a, n.attr),
    "slice_cols": lambda n, a: _slice(a, n.attr),
    "seed": lambda n, a: _seed(a),
}


def _seed(a):
    if a.shape != ():
        raise ShapeError(f"gradient output must be a scalar, got shape {a.shape}")
    return np.asarray(1.0)


def _toposort(roots: Iterable[Node]) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    for root in roots:
        if root.id in seen:
            continue
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if node.id in seen:
                continue
            seen.add(node.id)
            stack.append((node, True))
            for inp in reversed(node.inputs):
                if inp.id not in seen:
                    stack.append((inp, False))
    return order


@dataclass
class ExprGraph:
    """Named output nodes plus optional default leaf bindings."""

    outputs: dict[str, Node]
    defaults: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self._order = _toposort(self.outputs.values())
        self.leaves: dict[str, Node] = {}
        for node in self._order:
            if node.op == "leaf":
                other = self.leaves.setdefault(node.name, node)
                if other is not node:
                    raise GraphError(f"two distinct leaves named {node.name!r}")

    @property
    def parameters(self) -> list[str]:
        return [name for name, n in self.leaves.items() if n.trainable]

    @property
    def order(self) -> list[Node]:
        return self._order

    def __len__(self):
        return len(self._order)


def _finite(v: np.ndarray) -> bool:
    # one reduction; NaN or Inf anywhere makes the sum non-finite. Only an
    # overflowing sum of finite values needs the exact check.
    total = float(np.add.reduce(v, axis=None))
    return math.isfinite(total) or bool(np.isfinite(v).all())


def _run(order: Sequence[Node], bindings: Mapping[str, np.ndarray],
         check_finite: bool) -> dict[int, np.ndarray]:
    values: dict[int, np.ndarray] = {}
    with np.errstate(all="ignore"):
        for node in order:
            op = node.op
            if op == "leaf":
                try:
                    v = bindings[node.name]
                except KeyError:
                    raise UnboundLeafError(f"leaf {node.name!r} is not bound") from None
                v = np.asarray(v, dtype=np.float64)
            elif op == "const":
                v = node.attr
            else:
                try:
                    v = _FORWARD[op](node, *[values[i.id] for i in node.inputs])
                except ValueError as exc:
                    raise ShapeError(f"{op}: {exc}") from exc
            if check_finite and not _finite(v):
                raise NonFiniteError(node)
            values[node.id] = v
    return values


def evaluate(graph: ExprGraph, bindings: Mapping[str, np.ndarray] | None = None,
             outputs: Sequence[str] | None = None,
             check_finite: bool = True) -> dict[str, np.ndarray]:
    """Evaluate the requested outputs (all by default)."""
    merged = dict(graph.defaults)
    if bindings:
        merged.update(bindings)
    if outputs is None:
        names = list(graph.outputs)
        order = graph.order
    else:
        names = list(outputs)
        order = _toposort(graph.outputs[n] for n in names)
    values = _run(order, merged, check_finite)
    return {n: values[graph.outputs[n].id] for n in names}


# ----------------------------------------------------------- differentiation

def _vjp(node: Node, g: Node) -> tuple[Node | None, ...]:
    op, ins = node.op, node.inputs
    if op == "add":
        a, b = ins
        return _unbroadcast(g, a), _unbroadcast(g, b)
    if op == "mul":
        a, b = ins
        return _unbroadcast(mul(g, b), a), _unbroadcast(mul(g, a), b)
    if op == "scale":
        return (scale(g, node.attr),)
    if op == "matmul":
        a, b = ins
        return matmul(g, transpose(b)), matmul(transpose(a), g)
    if op == "transpose":
        return (transpose(g),)
    if op == "relu":
        return (mul(g, step(ins[0])),)
    if op == "step":
        return (None,)
    if op == "tanh":
        return (mul(g, sub(const(1.0), mul(node, node))),)
    if op == "power":
        p = node.attr
        if p == 1.0:
            return (g,)
        return (mul(g, scale(power(ins[0], p - 1.0), p)),)
    if op == "sum":
        return (_broadcast(g, ins[0]),)
    if op == "div_count":
        return Node("div_count", (g, ins[1]), node.attr), None
    if op == "broadcast":
        return _unbroadcast(g, ins[0]), None
    if op == "unbroadcast":
        return _broadcast(g, ins[0]), None
    if op == "pad_cols":
        return (slice_cols(g, *node.attr),)
    if op == "slice_cols":
        return (pad_cols(g, *node.attr),)
    if op == "seed":
        return (None,)
    raise GraphError(f"no derivative rule for {op!r}")


def grad_nodes(output: Node, wrt: Sequence[Node]) -> list[Node]:
    """Adjoint nodes of ``output`` with respect to each node in ``wrt``.

    ``wrt`` may contain interior nodes; their adjoint collects every path
    from the node to the output.
    """
    order = _toposort([output])
    targets = {w.id for w in wrt}
    live: set[int] = set()
    for node in order:
        if node.id in targets or any(i.id in live for i in node.inputs):
            live.add(node.id)
    adjoint: dict[int, Node] = {}
    if output.id in live:
        adjoint[output.id] = Node("seed", (output,))
    for node in reversed(order):
        g = adjoint.get(node.id)
        if g is None or node.id in targets and not node.inputs:
            continue
        if not any(i.id in live for i in node.inputs):
            continue
        for inp, gi in zip(node.inputs, _vjp(node, g)):
            if gi is None or inp.id not in live:
                continue
            prev = adjoint.get(inp.id)
            adjoint[inp.id] = gi if prev is None else add(prev, gi)
    result = []
    for w in wrt:
        g = adjoint.get(w.id)
        if g is None:
            g = _broadcast(const(0.0), w)
        result.append(g)
    return result


def gradient(graph: ExprGraph, output: str, wrt: Sequence[str]) -> ExprGraph:
    """Graph whose output ``name`` is d(output)/d(leaf ``name``) for each name."""
    if output not in graph.outputs:
        raise GraphError(f"unknown output {output!r}")
    nodes = []
    for name in wrt:
        if name not in graph.leaves:
            raise GraphError(f"unknown leaf {name!r}")
        nodes.append(graph.leaves[name])
    grads = grad_nodes(graph.outputs[output], nodes)
    return ExprGraph(dict(zip(wrt, grads)), dict(graph.defaults))


def check_gradients(graph: ExprGraph, bindings: Mapping[str, np.ndarray] | None = None,
                    eps: float = 1e-6, output: str | None = None,
                    wrt: Sequence[str] | None = None) -> float:
    """Worst relative error between :func:`gradient` and central differences.

    The relative error of one coordinate is
    ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    output = output or next(iter(graph.outputs))
    names = list(wrt) if wrt is not None else graph.parameters
    base = dict(graph.defaults)
    if bindings:
        base.update(bindings)
    base = {k: np.array(v, dtype=np.float64) for k, v in base.items()}
    analytic = evaluate(gradient(graph, output, names), base)

    def f(b):
        return float(evaluate(graph, b, outputs=[output])[output])

    worst = 0.0
    for name in names:
        x = base[name]
        flat = x.reshape(-1)
        a = np.asarray(analytic[name]).reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + eps
            fp = f(base)
            flat[k] = orig - eps
            fm = f(base)
            flat[k] = orig
            num = (fp - fm) / (2.0 * eps)
            err = abs(a[k] - num) / max(abs(a[k]), abs(num), 1e-8)
            worst = max(worst, err)
    return worst

"""Computational-graph IR.

Graphs are immutable DAGs of typed operation nodes with one ``Input`` source,
any number of constant ``Parameter`` sources and a single sink.  Every node
value is handled as a flat (row-major) float64 vector; ``TensorShape`` only
matters for ``Concat`` along a non-leading axis and for import bookkeeping.

The ``relu_*`` builder helpers emit the exact gadget sub-graphs used by all
auxiliary networks::

    max(a, b) = relu(a - b) + b
    min(a, b) = -max(-a, -b)
    |a|       = max(a, -a)
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from types import MappingProxyType
from typing import Callable, Mapping, Sequence

import numpy as np


class GraphError(ValueError):
    """Raised for malformed graphs or invalid construction requests."""


class EvaluationError(ArithmeticError):
    """Raised when a forward pass produces a non-finite value."""

    def __init__(self, node: int, message: str):
        super().__init__(f"node {node}: {message}")
        self.node = node


# ---------------------------------------------------------------------------
# shapes and boxes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TensorShape:
    dims: tuple[int, ...]

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if not dims or any(d < 1 for d in dims):
            raise GraphError(f"invalid tensor shape {self.dims!r}")
        object.__setattr__(self, "dims", dims)

    @classmethod
    def of(cls, shape: "int | Sequence[int] | TensorShape") -> "TensorShape":
        if isinstance(shape, TensorShape):
            return shape
        if isinstance(shape, (int, np.integer)):
            return cls((int(shape),))
        return cls(tuple(shape))

    @property
    def size(self) -> int:
        return math.prod(self.dims)

    def __repr__(self):
        return f"TensorShape{self.dims}"


@dataclass(frozen=True, eq=False)
class Hyperrectangle:
    """Axis-aligned bounded box ``{x : lower <= x <= upper}``."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.array(self.lower, dtype=np.float64).ravel()
        hi = np.array(self.upper, dtype=np.float64).ravel()
        if lo.shape != hi.shape or lo.size == 0:
            raise GraphError("box bounds must be non-empty vectors of equal length")
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise GraphError("box bounds must be finite")
        if np.any(lo > hi):
            raise GraphError("box lower bound exceeds upper bound")
        lo.flags.writeable = False
        hi.flags.writeable = False
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def center(self) -> np.ndarray:
        return (self.lower + self.upper) / 2

    @property
    def widths(self) -> np.ndarray:
        return self.upper - self.lower

    def contains(self, x, atol: float = 0.0) -> bool:
        x = np.asarray(x, dtype=np.float64).ravel()
        return bool(np.all(x >= self.lower - atol) and np.all(x <= self.upper + atol))

    def clip(self, x) -> np.ndarray:
        return np.clip(np.asarray(x, dtype=np.float64), self.lower, self.upper)

    def sample(self, rng: np.random.Generator, count: int) -> np.ndarray:
        return rng.uniform(self.lower, self.upper, size=(count, self.dim))

    def product(self, other: "Hyperrectangle") -> "Hyperrectangle":
        return Hyperrectangle(
            np.concatenate([self.lower, other.lower]),
            np.concatenate([self.upper, other.upper]),
        )

    def split(self, axis: int) -> tuple["Hyperrectangle", "Hyperrectangle"]:
        mid = (self.lower[axis] + self.upper[axis]) / 2
        left_hi = self.upper.copy()
        left_hi[axis] = mid
        right_lo = self.lower.copy()
        right_lo[axis] = mid
        return Hyperrectangle(self.lower, left_hi), Hyperrectangle(right_lo, self.upper)

    def __repr__(self):
        return f"Hyperrectangle(lower={self.lower.tolist()}, upper={self.upper.tolist()})"


def _frozen(a, dtype=np.float64) -> np.ndarray:
    arr = np.array(a, dtype=dtype)
    arr.flags.writeable = False
    return arr


def _concat_index_maps(shapes: Sequence[TensorShape], axis: int) -> list[np.ndarray]:
    """Flat output position of every flat input element of a concatenation."""
    total = sum(s.size for s in shapes)
    pieces, offset = [], 0
    for s in shapes:
        pieces.append(np.arange(offset, offset + s.size).reshape(s.dims))
        offset += s.size
    out = np.concatenate(pieces, axis=axis).ravel()
    position = np.empty(total, dtype=np.int64)
    position[out] = np.arange(total)
    maps, offset = [], 0
    for s in shapes:
        maps.append(position[offset : offset + s.size])
        offset += s.size
    return maps


# ---------------------------------------------------------------------------
# node kinds
# ---------------------------------------------------------------------------
#
# ``infer`` maps predecessor shapes to the output shape (raising GraphError),
# ``forward`` acts on (batch, size) arrays, ``interval`` on (lower, upper)
# pairs of flat vectors.


class Op:
    kind: str = ""
    arity: int | None = 1

    def infer(self, shapes: Sequence[TensorShape]) -> TensorShape:
        return shapes[0]

    def forward(self, *xs: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def interval(self, *bounds: tuple[np.ndarray, np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    @property
    def linear(self) -> bool:
        return True

    def __repr__(self):
        return f"{type(self).__name__}()"


@dataclass(frozen=True, eq=False, repr=False)
class Input(Op):
    shape: TensorShape
    kind = "input"
    arity = 0

    def __post_init__(self):
        object.__setattr__(self, "shape", TensorShape.of(self.shape))

    def infer(self, shapes):
        return self.shape

    def __repr__(self):
        return f"Input({self.shape.dims})"


@dataclass(frozen=True, eq=False, repr=False)
class Parameter(Op):
    value: np.ndarray
    shape: TensorShape | None = None
    kind = "parameter"
    arity = 0

    def __post_init__(self):
        value = np.asarray(self.value, dtype=np.float64)
        shape = TensorShape.of(self.shape if self.shape is not None else value.shape or (1,))
        if value.size != shape.size:
            raise GraphError(f"parameter value of size {value.size} does not fit shape {shape.dims}")
        if not np.all(np.isfinite(value)):
            raise GraphError("parameter values must be finite")
        object.__setattr__(self, "value", _frozen(value.ravel()))
        object.__setattr__(self, "shape", shape)

    def infer(self, shapes):
        return self.shape

    def forward(self):
        return self.value[None, :]

    def interval(self):
        return self.value, self.value


@dataclass(frozen=True, eq=False, repr=False)
class Affine(Op):
    weight: np.ndarray
    bias: np.ndarray | None = None
    kind = "affine"

    def __post_init__(self):
        w = np.asarray(self.weight, dtype=np.float64)
        if w.ndim != 2 or 0 in w.shape:
            raise GraphError(f"affine weight must be a non-empty matrix, got shape {w.shape}")
        b = np.zeros(w.shape[0]) if self.bias is None else np.asarray(self.bias, dtype=np.float64).ravel()
        if b.size != w.shape[0]:
            raise GraphError(f"affine bias length {b.size} does not match {w.shape[0]} weight rows")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise GraphError("affine weights must be finite")
        object.__setattr__(self, "weight", _frozen(w))
        object.__setattr__(self, "bias", _frozen(b))

    @cached_property
    def _split(self):
        return np.maximum(self.weight, 0.0), np.minimum(self.weight, 0.0)

    def infer(self, shapes):
        if shapes[0].size != self.weight.shape[1]:
            raise GraphError(
                f"affine weight is {self.weight.shape[0]}x{self.weight.shape[1]} "
                f"but its input has {shapes[0].size} elements"
            )
        return TensorShape((self.weight.shape[0],))

    def forward(self, x):
        # explicit row sums instead of BLAS: the result of one row must not
        # depend on how many rows are evaluated together
        return (x[:, None, :] * self.weight[None, :, :]).sum(axis=2) + self.bias

    def interval(self, b):
        lo, hi = b
        wp, wn = self._split
        return wp @ lo + wn @ hi + self.bias, wp @ hi + wn @ lo + self.bias

    def __repr__(self):
        return f"Affine({self.weight.shape[0]}x{self.weight.shape[1]})"


class ReLU(Op):
    kind = "relu"

    def forward(self, x):
        return np.maximum(x, 0.0)

    def interval(self, b):
        return np.maximum(b[0], 0.0), np.maximum(b[1], 0.0)

    @property
    def linear(self):
        return False


class _Binary(Op):
    arity = 2

    def infer(self, shapes):
        if shapes[0].size != shapes[1].size:
            raise GraphError(f"{self.kind} operands have sizes {shapes[0].size} and {shapes[1].size}")
        return shapes[0]


class MaxPairwise(_Binary):
    kind = "max"

    def forward(self, a, b):
        return np.maximum(a, b)

    def interval(self, a, b):
        return np.maximum(a[0], b[0]), np.maximum(a[1], b[1])

    @property
    def linear(self):
        return False


class MinPairwise(_Binary):
    kind = "min"

    def forward(self, a, b):
        return np.minimum(a, b)

    def interval(self, a, b):
        return np.minimum(a[0], b[0]), np.minimum(a[1], b[1])

    @property
    def linear(self):
        return False


class Add(_Binary):
    kind = "add"

    def forward(self, a, b):
        return a + b

    def interval(self, a, b):
        return a[0] + b[0], a[1] + b[1]


class Subtract(_Binary):
    kind = "sub"

    def forward(self, a, b):
        return a - b

    def interval(self, a, b):
        return a[0] - b[1], a[1] - b[0]


class Negate(Op):
    kind = "neg"

    def forward(self, x):
        return -x

    def interval(self, b):
        return -b[1], -b[0]


@dataclass(frozen=True, eq=False, repr=False)
class ScaleConst(Op):
    scale: float
    kind = "scale"

    def __post_init__(self):
        if not math.isfinite(self.scale):
            raise GraphError("scale must be finite")
        object.__setattr__(self, "scale", float(self.scale))

    def forward(self, x):
        return self.scale * x

    def interval(self, b):
        lo, hi = self.scale * b[0], self.scale * b[1]
        return (lo, hi) if self.scale >= 0 else (hi, lo)

    def __repr__(self):
        return f"ScaleConst({self.scale})"


@dataclass(frozen=True, eq=False, repr=False)
class Concat(Op):
    axis: int = 0
    kind = "concat"
    arity = None

    def infer(self, shapes):
        ranks = {len(s.dims) for s in shapes}
        if len(ranks) != 1:
            raise GraphError("concat operands have different ranks")
        rank = ranks.pop()
        if not 0 <= self.axis < rank:
            raise GraphError(f"concat axis {self.axis} out of range for rank {rank}")
        rest = {s.dims[: self.axis] + s.dims[self.axis + 1 :] for s in shapes}
        if len(rest) != 1:
            raise GraphError("concat operands disagree off the concatenation axis")
        dims = list(shapes[0].dims)
        dims[self.axis] = sum(s.dims[self.axis] for s in shapes)
        return TensorShape(tuple(dims))

    def index_maps(self, shapes: Sequence[TensorShape]) -> list[np.ndarray]:
        return _concat_index_maps(shapes, self.axis)

    def forward(self, *xs):
        return np.concatenate(xs, axis=1)

    def interval(self, *bs):
        return np.concatenate([b[0] for b in bs]), np.concatenate([b[1] for b in bs])

    def __repr__(self):
        return f"Concat(axis={self.axis})"


@dataclass(frozen=True, eq=False, repr=False)
class Slice(Op):
    start: int
    end: int
    kind = "slice"

    def __post_init__(self):
        if not 0 <= self.start < self.end:
            raise GraphError(f"invalid slice [{self.start}, {self.end})")

    def infer(self, shapes):
        if self.end > shapes[0].size:
            raise GraphError(f"slice [{self.start}, {self.end}) exceeds input size {shapes[0].size}")
        return TensorShape((self.end - self.start,))

    def forward(self, x):
        return x[:, self.start : self.end]

    def interval(self, b):
        return b[0][self.start : self.end], b[1][self.start : self.end]

    def __repr__(self):
        return f"Slice({self.start}, {self.end})"


@dataclass(frozen=True, eq=False, repr=False)
class SelectIndices(Op):
    indices: np.ndarray
    kind = "select"

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64).ravel()
        if idx.size == 0 or np.any(idx < 0):
            raise GraphError("select needs a non-empty list of non-negative indices")
        object.__setattr__(self, "indices", _frozen(idx, np.int64))

    def infer(self, shapes):
        if int(self.indices.max()) >= shapes[0].size:
            raise GraphError(f"select index {int(self.indices.max())} out of range for size {shapes[0].size}")
        return TensorShape((self.indices.size,))

    def forward(self, x):
        return x[:, self.indices]

    def interval(self, b):
        return b[0][self.indices], b[1][self.indices]

    def __repr__(self):
        return f"SelectIndices({self.indices.tolist()})"


@dataclass(frozen=True, eq=False, repr=False)
class ClampConst(Op):
    lower: np.ndarray
    upper: np.ndarray
    kind = "clamp"

    def __post_init__(self):
        box = Hyperrectangle(self.lower, self.upper)
        object.__setattr__(self, "lower", box.lower)
        object.__setattr__(self, "upper", box.upper)

    def infer(self, shapes):
        if shapes[0].size != self.lower.size:
            raise GraphError(f"clamp bounds have size {self.lower.size}, input has {shapes[0].size}")
        return shapes[0]

    def forward(self, x):
        return np.minimum(np.maximum(x, self.lower), self.upper)

    def interval(self, b):
        return (
            np.minimum(np.maximum(b[0], self.lower), self.upper),
            np.minimum(np.maximum(b[1], self.lower), self.upper),
        )

    @property
    def linear(self):
        return False

    def __repr__(self):
        return "ClampConst()"


class ReduceMax(Op):
    kind = "reduce_max"

    def infer(self, shapes):
        return TensorShape((1,))

    def forward(self, x):
        return np.max(x, axis=1, keepdims=True)

    def interval(self, b):
        return np.array([b[0].max()]), np.array([b[1].max()])

    @property
    def linear(self):
        return False


OP_TYPES: dict[str, type[Op]] = {
    cls.kind: cls
    for cls in (
        Input, Parameter, Affine, ReLU, MaxPairwise, MinPairwise, Add, Subtract,
        Negate, ScaleConst, Concat, Slice, SelectIndices, ClampConst, ReduceMax,
    )
}


@dataclass(frozen=True)
class Node:
    op: Op
    preds: tuple[int, ...] = ()


# ---------------------------------------------------------------------------
# graph + validation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Violation:
    kind: str  # cycle | arity | shape | missing | sink | dangling | input
    message: str
    node: int | None = None

    def __str__(self):
        where = f"node {self.node}: " if self.node is not None else ""
        return f"[{self.kind}] {where}{self.message}"


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[Violation, ...] = ()

    def __bool__(self):
        # truthy when the graph is well-formed
        return not self.violations

    def of_kind(self, kind: str) -> list[Violation]:
        return [v for v in self.violations if v.kind == kind]

    def __str__(self):
        return "ok" if not self.violations else "\n".join(map(str, self.violations))


@dataclass(frozen=True, eq=False)
class Graph:
    nodes: Mapping[int, Node]
    input: int
    sink: int

    def __post_init__(self):
        object.__setattr__(self, "nodes", MappingProxyType(dict(sorted(self.nodes.items()))))

    def __len__(self):
        return len(self.nodes)

    @cached_property
    def report(self) -> ValidationReport:
        return _validate(self)

    @property
    def valid(self) -> bool:
        return bool(self.report)

    def require_valid(self) -> "Graph":
        if not self.report:
            raise GraphError(f"invalid graph:\n{self.report}")
        return self

    @cached_property
    def order(self) -> tuple[int, ...]:
        """Topological order (Kahn, smallest id first)."""
        order = _toposort(self)
        if order is None:
            raise GraphError("graph contains a cycle")
        return order

    @cached_property
    def shapes(self) -> Mapping[int, TensorShape]:
        self.require_valid()
        return MappingProxyType(_infer_shapes(self)[0])

    @cached_property
    def successors(self) -> Mapping[int, tuple[int, ...]]:
        succ: dict[int, list[int]] = {i: [] for i in self.nodes}
        for i, node in self.nodes.items():
            for p in node.preds:
                if p in succ:
                    succ[p].append(i)
        return MappingProxyType({i: tuple(s) for i, s in succ.items()})

    @property
    def input_shape(self) -> TensorShape:
        return self.shapes[self.input]

    @property
    def output_shape(self) -> TensorShape:
        return self.shapes[self.sink]

    @property
    def input_size(self) -> int:
        return self.input_shape.size

    @property
    def output_size(self) -> int:
        return self.output_shape.size

    def count(self, kind: str) -> int:
        return sum(1 for n in self.nodes.values() if n.op.kind == kind)

    def relu_units(self) -> int:
        """Number of scalar ReLU units."""
        return sum(self.shapes[i].size for i, n in self.nodes.items() if n.op.kind == "relu")

    def is_lowered(self) -> bool:
        return all(n.op.linear or n.op.kind == "relu" for n in self.nodes.values())

    def __repr__(self):
        return f"Graph({len(self.nodes)} nodes, input={self.input}, sink={self.sink})"


def _toposort(graph: Graph) -> tuple[int, ...] | None:
    import heapq

    indeg = {i: 0 for i in graph.nodes}
    succ: dict[int, list[int]] = {i: [] for i in graph.nodes}
    for i, node in graph.nodes.items():
        for p in node.preds:
            if p in graph.nodes:
                indeg[i] += 1
                succ[p].append(i)
    ready = [i for i, d in indeg.items() if d == 0]
    heapq.heapify(ready)
    order = []
    while ready:
        i = heapq.heappop(ready)
        order.append(i)
        for s in succ[i]:
            indeg[s] -= 1
            if indeg[s] == 0:
                heapq.heappush(ready, s)
    return tuple(order) if len(order) == len(graph.nodes) else None


def _infer_shapes(graph: Graph) -> tuple[dict[int, TensorShape], list[Violation]]:
    shapes: dict[int, TensorShape] = {}
    problems = []
    for i in _toposort(graph) or ():
        node = graph.nodes[i]
        if any(p not in shapes for p in node.preds):
            continue
        try:
            shapes[i] = node.op.infer([shapes[p] for p in node.preds])
        except GraphError as exc:
            problems.append(Violation("shape", str(exc), i))
    return shapes, problems


def _cycles(graph: Graph) -> list[list[int]]:
    import networkx as nx

    g = nx.DiGraph()
    g.add_nodes_from(graph.nodes)
    g.add_edges_from((p, i) for i, n in graph.nodes.items() for p in n.preds if p in graph.nodes)
    return [
        sorted(c)
        for c in nx.strongly_connected_components(g)
        if len(c) > 1 or any(next(iter(c)) in graph.nodes[k].preds for k in c)
    ]


def _validate(graph: Graph) -> ValidationReport:
    out: list[Violation] = []
    nodes = graph.nodes
    inputs = [i for i, n in nodes.items() if isinstance(n.op, Input)]
    if graph.input not in nodes or not isinstance(nodes[graph.input].op, Input):
        out.append(Violation("input", f"designated input {graph.input} is not an Input node"))
    if len(inputs) != 1:
        out.append(Violation("input", f"expected exactly one Input node, found {len(inputs)}"))
    if graph.sink not in nodes:
        out.append(Violation("sink", f"sink {graph.sink} does not exist"))
    for i, n in nodes.items():
        for p in n.preds:
            if p not in nodes:
                out.append(Violation("missing", f"predecessor {p} does not exist", i))
        arity = n.op.arity
        if (arity is None and not n.preds) or (arity is not None and len(n.preds) != arity):
            expected = "at least 1" if arity is None else str(arity)
            out.append(Violation("arity", f"{n.op.kind} expects {expected} predecessors, got {len(n.preds)}", i))
    acyclic = _toposort(graph) is not None
    if not acyclic:
        for cyc in _cycles(graph):
            out.append(Violation("cycle", f"cycle through nodes {cyc}", cyc[0]))
    if graph.sink in nodes:
        succ = graph.successors
        for i in nodes:
            if i != graph.sink and not succ[i]:
                out.append(Violation("sink", "node has no successors but is not the sink", i))
        reach = {graph.sink}
        stack = [graph.sink]
        while stack:
            for p in nodes[stack.pop()].preds:
                if p in nodes and p not in reach:
                    reach.add(p)
                    stack.append(p)
        for i in nodes:
            if i not in reach and succ[i]:
                out.append(Violation("dangling", "node does not lie on a path to the sink", i))
    if acyclic and not any(v.kind in ("arity", "missing") for v in out):
        out.extend(_infer_shapes(graph)[1])
    return ValidationReport(tuple(out))


def validate(graph: Graph) -> ValidationReport:
    """Check every structural invariant; an empty report means well-formed."""
    return graph.report


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def _forward(graph: Graph, xs: np.ndarray, keep_all: bool = False):
    graph.require_valid()
    xs = np.asarray(xs, dtype=np.float64)
    xs = xs.reshape(xs.shape[0], -1)
    if xs.shape[1] != graph.input_size:
        raise GraphError(f"input has {xs.shape[1]} elements, graph expects {graph.input_size}")
    with np.errstate(over="ignore", invalid="ignore"):
        return _walk(graph, xs, keep_all)


def _walk(graph: Graph, xs: np.ndarray, keep_all: bool):
    values: dict[int, np.ndarray] = {}
    succ = graph.successors
    remaining = {i: len(s) for i, s in succ.items()}
    for i in graph.order:
        node = graph.nodes[i]
        if node.op.kind == "input":
            out = xs
        else:
            out = node.op.forward(*(values[p] for p in node.preds))
            if out.shape[0] != xs.shape[0]:
                out = np.broadcast_to(out, (xs.shape[0], out.shape[1]))
            if not np.all(np.isfinite(out)):
                raise EvaluationError(i, f"non-finite value in {node.op.kind} output")
        values[i] = out
        if not keep_all:
            for p in node.preds:
                remaining[p] -= 1
                if remaining[p] == 0 and p != graph.sink:
                    del values[p]
    return values


def evaluate(graph: Graph, x) -> np.ndarray:
    """Forward walk over ``graph`` for a single input; returns the flat sink value."""
    x = np.asarray(x, dtype=np.float64).ravel()
    return _forward(graph, x[None, :])[graph.sink][0].copy()


def evaluate_batch(graph: Graph, xs) -> np.ndarray:
    """Evaluate a (batch, input_size) array row-wise."""
    xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
    return np.array(_forward(graph, xs)[graph.sink])


def evaluate_all(graph: Graph, x) -> dict[int, np.ndarray]:
    """Values of every node for one input."""
    x = np.asarray(x, dtype=np.float64).ravel()
    return {i: v[0].copy() for i, v in _forward(graph, x[None, :], keep_all=True).items()}


def evaluate_nodes(graph: Graph, xs) -> dict[int, np.ndarray]:
    """Values of every node for a (batch, input_size) array, each of shape (batch, size)."""
    xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
    return dict(_forward(graph, xs, keep_all=True))


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------


class GraphBuilder:
    """Incremental graph construction with eager shape checking.

    >>> b = GraphBuilder()
    >>> x = b.input(1)
    >>> g = b.build(b.affine(x, [[2.0]], [1.0]))
    >>> float(evaluate(g, [3.0])[0])
    7.0
    """

    def __init__(self):
        self._nodes: dict[int, Node] = {}
        self._shapes: dict[int, TensorShape] = {}
        self._input: int | None = None

    def size(self, node: int) -> int:
        return self._shapes[node].size

    def shape(self, node: int) -> TensorShape:
        return self._shapes[node]

    def add_node(self, op: Op, *preds: int) -> int:
        for p in preds:
            if p not in self._nodes:
                raise GraphError(f"unknown predecessor {p}")
        arity = op.arity
        if (arity is None and not preds) or (arity is not None and len(preds) != arity):
            raise GraphError(f"{op.kind} got {len(preds)} predecessors")
        shape = op.infer([self._shapes[p] for p in preds])
        i = len(self._nodes)
        self._nodes[i] = Node(op, tuple(preds))
        self._shapes[i] = shape
        return i

    # primitive nodes

    def input(self, shape) -> int:
        if self._input is not None:
            raise GraphError("graph already has an input")
        self._input = self.add_node(Input(TensorShape.of(shape)))
        return self._input

    def parameter(self, value, shape=None) -> int:
        return self.add_node(Parameter(value, None if shape is None else TensorShape.of(shape)))

    def affine(self, x: int, weight, bias=None) -> int:
        return self.add_node(Affine(weight, bias), x)

    def relu(self, x: int) -> int:
        return self.add_node(ReLU(), x)

    def maximum(self, a: int, b: int) -> int:
        return self.add_node(MaxPairwise(), a, b)

    def minimum(self, a: int, b: int) -> int:
        return self.add_node(MinPairwise(), a, b)

    def add(self, a: int, b: int) -> int:
        return self.add_node(Add(), a, b)

    def sub(self, a: int, b: int) -> int:
        return self.add_node(Subtract(), a, b)

    def neg(self, x: int) -> int:
        return self.add_node(Negate(), x)

    def scale(self, x: int, c: float) -> int:
        return self.add_node(ScaleConst(c), x)

    def concat(self, *xs: int, axis: int = 0) -> int:
        if len(xs) == 1:
            return xs[0]
        return self.add_node(Concat(axis), *xs)

    def slice(self, x: int, start: int, end: int) -> int:
        if start == 0 and end == self.size(x) and len(self.shape(x).dims) == 1:
            return x
        return self.add_node(Slice(start, end), x)

    def select(self, x: int, indices) -> int:
        return self.add_node(SelectIndices(indices), x)

    def clamp(self, x: int, lower, upper) -> int:
        return self.add_node(ClampConst(lower, upper), x)

    def reduce_max(self, x: int) -> int:
        return self.add_node(ReduceMax(), x)

    # ReLU gadgets (Affine/ReLU/Negate/Add only, plus structural slicing)

    def relu_max(self, a: int, b: int) -> int:
        """Elementwise max(a, b) = relu(a - b) + b."""
        return self.add(self.relu(self.add(a, self.neg(b))), b)

    def relu_min(self, a: int, b: int) -> int:
        """Elementwise min(a, b) = -max(-a, -b)."""
        return self.neg(self.relu_max(self.neg(a), self.neg(b)))

    def relu_abs(self, a: int) -> int:
        return self.relu_max(a, self.neg(a))

    def _tree(self, x: int, pair: Callable[[int, int], int]) -> int:
        size = self.size(x)
        while size > 1:
            half = size // 2
            merged = pair(self.slice(x, 0, half), self.slice(x, half, 2 * half))
            x = merged if size == 2 * half else self.concat(merged, self.slice(x, 2 * half, size))
            size = self.size(x)
        return x

    def relu_reduce_max(self, x: int) -> int:
        """Balanced pairwise max tree of depth ceil(log2 size)."""
        return self._tree(x, self.relu_max)

    def relu_reduce_min(self, x: int) -> int:
        return self._tree(x, self.relu_min)

    def relu_linf(self, d: int) -> int:
        return self.relu_reduce_max(self.relu_abs(d))

    def relu_project(self, x: int, lower, upper) -> int:
        """Clamp ``x`` into [lower, upper] as min(max(x, lower), upper)."""
        box = Hyperrectangle(lower, upper)
        eye = np.eye(box.dim)
        above = self.affine(self.relu(self.affine(x, eye, -box.lower)), eye, box.lower)
        # min(z, hi) = -(relu(-z - (-hi)) + (-hi))
        below = self.affine(self.relu(self.affine(self.neg(above), eye, box.upper)), eye, -box.upper)
        return self.neg(below)

    # composition

    def include(self, graph: Graph, at: int) -> dict[int, int]:
        """Copy ``graph`` into this builder, feeding node ``at`` to its input.

        Returns the id map from ``graph`` nodes to builder nodes.
        """
        graph.require_valid()
        if self.size(at) != graph.input_size:
            raise GraphError(
                f"cannot feed {self.size(at)} values into a graph expecting {graph.input_size}"
            )
        ids = {graph.input: at}
        for i in graph.order:
            if i == graph.input:
                continue
            node = graph.nodes[i]
            ids[i] = self.add_node(node.op, *(ids[p] for p in node.preds))
        return ids

    def build(self, sink: int) -> Graph:
        if self._input is None:
            raise GraphError("graph has no input")
        if sink not in self._nodes:
            raise GraphError(f"unknown sink {sink}")
        # drop helper nodes that ended up unused, then renumber densely
        keep = {sink}
        stack = [sink]
        while stack:
            for p in self._nodes[stack.pop()].preds:
                if p not in keep:
                    keep.add(p)
                    stack.append(p)
        keep.add(self._input)
        ids = {old: new for new, old in enumerate(sorted(keep))}
        nodes = {ids[i]: Node(n.op, tuple(ids[p] for p in n.preds)) for i, n in self._nodes.items() if i in keep}
        #: builder id -> id in the most recently built graph
        self.id_map = ids
        return Graph(nodes, ids[self._input], ids[sink]).require_valid()


# ---------------------------------------------------------------------------
# standalone gadgets
# ---------------------------------------------------------------------------


def _check_dim(dim: int) -> int:
    if int(dim) < 1:
        raise GraphError(f"gadget dimension must be >= 1, got {dim}")
    return int(dim)


def _pairwise_gadget(dim: int, method: str) -> Graph:
    dim = _check_dim(dim)
    b = GraphBuilder()
    x = b.input(2 * dim)
    pair = getattr(b, method)
    return b.build(pair(b.slice(x, 0, dim), b.slice(x, dim, 2 * dim)))


def max_gadget(dim: int) -> Graph:
    """Graph of elementwise max over the two halves of a stacked 2*dim input."""
    return _pairwise_gadget(dim, "relu_max")


def min_gadget(dim: int) -> Graph:
    return _pairwise_gadget(dim, "relu_min")


def abs_gadget(dim: int) -> Graph:
    b = GraphBuilder()
    return b.build(b.relu_abs(b.input(_check_dim(dim))))


def linf_norm_gadget(dim: int) -> Graph:
    """Scalar L-infinity norm of a difference vector of length ``dim``."""
    b = GraphBuilder()
    return b.build(b.relu_linf(b.input(_check_dim(dim))))


def project_gadget(box: Hyperrectangle) -> Graph:
    b = GraphBuilder()
    return b.build(b.relu_project(b.input(box.dim), box.lower, box.upper))


# ---------------------------------------------------------------------------
# graph transformations
# ---------------------------------------------------------------------------


def stitch(outer: Graph, inner: Graph, at: int | None = None) -> Graph:
    """Insert ``inner`` into ``outer``.

    With ``at`` = the outer input (default) the result is ``outer(inner(x))``.
    For any other node the value of ``at`` is routed through ``inner`` before
    reaching its successors, so ``inner`` must map that node's size to itself.
    """
    outer.require_valid()
    inner.require_valid()
    at = outer.input if at is None else at
    if at not in outer.nodes:
        raise GraphError(f"stitch point {at} is not a node of the outer graph")
    expected = outer.shapes[at].size
    if inner.output_size != expected:
        raise GraphError(f"inner graph produces {inner.output_size} values, node {at} has {expected}")
    b = GraphBuilder()
    if at == outer.input:
        x = b.input(inner.input_shape)
        routed = b.include(inner, x)[inner.sink]
        ids = {outer.input: routed}
    else:
        x = b.input(outer.input_shape)
        ids = {outer.input: x}
    for i in outer.order:
        if i == outer.input:
            continue
        node = outer.nodes[i]
        ids[i] = b.add_node(node.op, *(ids[p] for p in node.preds))
        if i == at:
            if inner.input_size != expected:
                raise GraphError(f"inner graph expects {inner.input_size} values, node {at} has {expected}")
            ids[i] = b.include(inner, ids[i])[inner.sink]
    return b.build(ids[outer.sink])


def lower_with_map(graph: Graph) -> tuple[Graph, dict[int, int]]:
    """Rewrite max/min/clamp/reduce-max nodes into ReLU gadgets.

    Returns the lowered graph and the map from original node ids to the ids
    computing the same value in the lowered graph.
    """
    graph.require_valid()
    if graph.is_lowered():
        return graph, {i: i for i in graph.nodes}
    b = GraphBuilder()
    ids = {graph.input: b.input(graph.input_shape)}
    for i in graph.order:
        if i == graph.input:
            continue
        node = graph.nodes[i]
        preds = [ids[p] for p in node.preds]
        op = node.op
        if isinstance(op, MaxPairwise):
            ids[i] = b.relu_max(*preds)
        elif isinstance(op, MinPairwise):
            ids[i] = b.relu_min(*preds)
        elif isinstance(op, ClampConst):
            ids[i] = b.relu_project(preds[0], op.lower, op.upper)
        elif isinstance(op, ReduceMax):
            ids[i] = b.relu_reduce_max(preds[0])
        else:
            ids[i] = b.add_node(op, *preds)
    lowered = b.build(ids[graph.sink])
    return lowered, {i: b.id_map[j] for i, j in ids.items()}


def lower(graph: Graph) -> Graph:
    return lower_with_map(graph)[0]

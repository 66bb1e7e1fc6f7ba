"""Serialization: native JSON graphs, ONNX subset import/export, VNN-LIB properties."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np
import onnx
from onnx import TensorProto, helper, numpy_helper

from .compose import ComposedProblem, Property, Provenance
from .graph import (
    Add, Affine, ClampConst, Concat, Graph, GraphBuilder, GraphError, Hyperrectangle, Input,
    MaxPairwise, MinPairwise, Negate, Node, OP_TYPES, Parameter, ReLU, ReduceMax, ScaleConst,
    SelectIndices, Slice, Subtract, TensorShape, lower,
)

FORMAT_VERSION = 1


class GraphFormatError(GraphError):
    """Malformed or schema-violating graph file."""

    def __init__(self, message: str, pointer: str | None = None):
        self.pointer = pointer
        super().__init__(f"{pointer}: {message}" if pointer is not None else message)


class FormatVersionError(GraphFormatError):
    pass


class ModelImportError(GraphError):
    def __init__(self, message: str, unsupported: tuple[str, ...] = ()):
        self.unsupported = unsupported
        super().__init__(message)


# ---------------------------------------------------------------------------
# native JSON
# ---------------------------------------------------------------------------


def _schema() -> dict:
    text = resources.files(__package__).joinpath("graph.schema.json").read_text()
    return json.loads(text)


_VALIDATOR = jsonschema.Draft202012Validator(_schema())


def _floats(a) -> list[float]:
    return [float(v) for v in np.asarray(a).ravel()]


def _node_to_dict(node: Node) -> dict:
    op = node.op
    d: dict = {"kind": op.kind, "preds": list(node.preds)}
    if isinstance(op, Input):
        d["shape"] = list(op.shape.dims)
    elif isinstance(op, Parameter):
        d["value"] = _floats(op.value)
        d["shape"] = list(op.shape.dims)
    elif isinstance(op, Affine):
        d["weight"] = [_floats(row) for row in op.weight]
        d["bias"] = _floats(op.bias)
    elif isinstance(op, ScaleConst):
        d["scale"] = float(op.scale)
    elif isinstance(op, Concat):
        d["axis"] = int(op.axis)
    elif isinstance(op, Slice):
        d["start"], d["end"] = int(op.start), int(op.end)
    elif isinstance(op, SelectIndices):
        d["indices"] = [int(i) for i in op.indices]
    elif isinstance(op, ClampConst):
        d["lo"], d["hi"] = _floats(op.lower), _floats(op.upper)
    return d


def graph_to_dict(graph: Graph) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "input": graph.input,
        "sink": graph.sink,
        "nodes": {str(i): _node_to_dict(n) for i, n in sorted(graph.nodes.items())},
    }


def _op_from_dict(d: dict):
    kind = d["kind"]
    if kind == "input":
        return Input(TensorShape.of(d["shape"]))
    if kind == "parameter":
        return Parameter(np.array(d["value"], dtype=np.float64), TensorShape.of(d["shape"]))
    if kind == "affine":
        return Affine(np.array(d["weight"], dtype=np.float64), np.array(d["bias"], dtype=np.float64))
    if kind == "scale":
        return ScaleConst(float(d["scale"]))
    if kind == "concat":
        return Concat(int(d["axis"]))
    if kind == "slice":
        return Slice(int(d["start"]), int(d["end"]))
    if kind == "select":
        return SelectIndices(np.array(d["indices"], dtype=np.int64))
    if kind == "clamp":
        return ClampConst(np.array(d["lo"], dtype=np.float64), np.array(d["hi"], dtype=np.float64))
    return OP_TYPES[kind]()


def _pointer(path) -> str:
    return "/" + "/".join(str(p).replace("~", "~0").replace("/", "~1") for p in path)


def graph_from_dict(data, base: str = "") -> Graph:
    """Parse and validate a graph document; errors carry a JSON pointer."""
    if isinstance(data, dict) and "format_version" in data and data["format_version"] != FORMAT_VERSION:
        raise FormatVersionError(
            f"unsupported format_version {data['format_version']!r}; this reader handles {FORMAT_VERSION}",
            base + "/format_version",
        )
    errors = sorted(_VALIDATOR.iter_errors(data), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        raise GraphFormatError(err.message, base + _pointer(err.absolute_path))
    nodes = {}
    for key, nd in data["nodes"].items():
        try:
            nodes[int(key)] = Node(_op_from_dict(nd), tuple(nd["preds"]))
        except (GraphError, ValueError) as exc:
            raise GraphFormatError(str(exc), f"{base}/nodes/{key}") from None
    graph = Graph(nodes, data["input"], data["sink"])
    report = graph.report
    if not report:
        first = report.violations[0]
        where = f"{base}/nodes/{first.node}" if first.node is not None else base or "/"
        raise GraphFormatError(f"invalid graph: {report}", where)
    return graph


def _read_json(path) -> object:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise GraphFormatError(f"malformed JSON: {exc.msg} at line {exc.lineno} column {exc.colno}", "") from None


def _write_json(data, path) -> None:
    Path(path).write_text(json.dumps(data, indent=1, allow_nan=False) + "\n")


def save_graph(graph: Graph, path) -> None:
    graph.require_valid()
    _write_json(graph_to_dict(graph), path)


def load_graph(path) -> Graph:
    return graph_from_dict(_read_json(path))


def problem_to_dict(problem: ComposedProblem) -> dict:
    doc = graph_to_dict(problem.graph)
    doc["problem"] = {
        "name": problem.name,
        "box": {"lo": _floats(problem.box.lower), "hi": _floats(problem.box.upper)},
        "output_set": problem.property.output_set,
        "provenance": problem.provenance.to_dict(),
    }
    return doc


def save_problem(problem: ComposedProblem, path) -> None:
    _write_json(problem_to_dict(problem), path)


def load_problem(path) -> ComposedProblem:
    data = _read_json(path)
    if not isinstance(data, dict) or "problem" not in data:
        raise GraphFormatError("not a composed problem file (no 'problem' member)", "")
    meta = data.pop("problem")
    graph = graph_from_dict(data)
    try:
        box = Hyperrectangle(meta["box"]["lo"], meta["box"]["hi"])
        prov = Provenance.from_dict(meta["provenance"])
        return ComposedProblem(graph, Property(box, meta.get("output_set", "non_negative")), prov, meta.get("name", "composed"))
    except (KeyError, TypeError, ValueError) as exc:
        raise GraphFormatError(f"bad problem metadata: {exc}", "/problem") from None


def load_any(path) -> Graph | ComposedProblem:
    """A native graph or composed-problem file, whichever ``path`` holds."""
    data = _read_json(path)
    if isinstance(data, dict) and "problem" in data:
        return load_problem(path)
    return graph_from_dict(data)


# ---------------------------------------------------------------------------
# ONNX subset
# ---------------------------------------------------------------------------

SUPPORTED_ONNX_OPS = frozenset({
    "Gemm", "MatMul", "Add", "Sub", "Neg", "Mul", "Relu", "Flatten", "Reshape", "Identity",
    "Constant", "Concat", "Slice", "Gather", "Max", "Min", "Clip",
})

ONNX_OPSET = 17


@dataclass(frozen=True)
class ModelFile:
    path: str
    graph: Graph
    report: dict = field(default_factory=dict)


class _Importer:
    def __init__(self, model: onnx.ModelProto):
        self.model = model
        self.b = GraphBuilder()
        self.const: dict[str, np.ndarray] = {}
        self.dyn: dict[str, int] = {}
        self.rank: dict[str, int] = {}
        # MatMul results not yet emitted, so a following constant Add can become their bias
        self.lazy: dict[str, tuple[int, np.ndarray]] = {}

    def fail(self, node, message: str):
        raise ModelImportError(f"{node.op_type} node {node.name or node.output[0]!r}: {message}")

    def value(self, name: str) -> int:
        """Graph node for ``name``; constants become Parameter nodes."""
        if name in self.dyn:
            return self.dyn[name]
        if name in self.lazy:
            x, w = self.lazy[name]
            self.dyn[name] = self.b.affine(x, w, np.zeros(w.shape[0]))
            return self.dyn[name]
        if name in self.const:
            arr = self.const[name]
            self.dyn[name] = self.b.parameter(arr.ravel())
            self.rank[name] = max(arr.ndim, 1)
            return self.dyn[name]
        raise ModelImportError(f"tensor {name!r} is used before it is defined")

    def last_axis(self, node, name: str, axis: int) -> None:
        rank = self.rank.get(name, 2)
        if axis not in (-1, rank - 1):
            self.fail(node, f"only the feature (last) axis is supported, got axis {axis}")

    def run(self) -> Graph:
        g = self.model.graph
        unsupported = sorted({n.op_type for n in g.node if n.op_type not in SUPPORTED_ONNX_OPS})
        if unsupported:
            raise ModelImportError(f"unsupported operators: {', '.join(unsupported)}", tuple(unsupported))
        for init in g.initializer:
            self.const[init.name] = numpy_helper.to_array(init).astype(np.float64, copy=False) \
                if init.data_type in (TensorProto.FLOAT, TensorProto.DOUBLE) else numpy_helper.to_array(init)
        inputs = [i for i in g.input if i.name not in self.const]
        if len(inputs) != 1:
            raise ModelImportError(f"expected exactly one graph input, found {len(inputs)}")
        dims = [d.dim_value if d.HasField("dim_value") else 1 for d in inputs[0].type.tensor_type.shape.dim]
        if not dims:
            raise ModelImportError("graph input has no shape")
        feature = dims[1:] if len(dims) > 1 else dims
        self.dyn[inputs[0].name] = self.b.input(int(np.prod(feature)))
        self.rank[inputs[0].name] = len(dims)
        for node in g.node:
            self.convert(node)
        if len(g.output) != 1:
            raise ModelImportError(f"expected exactly one graph output, found {len(g.output)}")
        return self.b.build(self.value(g.output[0].name))

    def _set(self, node, nid: int, rank: int | None = None):
        self.dyn[node.output[0]] = nid
        self.rank[node.output[0]] = rank if rank is not None else self.rank.get(node.input[0], 2)

    def convert(self, node):
        b = self.b
        op = node.op_type
        attrs = {a.name: helper.get_attribute_value(a) for a in node.attribute}
        ins = list(node.input)
        if op == "Constant":
            if "value" not in attrs:
                self.fail(node, "only tensor-valued constants are supported")
            self.const[node.output[0]] = numpy_helper.to_array(attrs["value"])
            return
        if all(n in self.const for n in ins if n):
            self.fold(node, attrs)
            return
        if op == "Gemm":
            if attrs.get("transA", 0):
                self.fail(node, "transA is not supported")
            if ins[1] not in self.const or (len(ins) > 2 and ins[2] and ins[2] not in self.const):
                self.fail(node, "weights and bias must be constant")
            w = np.asarray(self.const[ins[1]], dtype=np.float64)
            w = w if attrs.get("transB", 0) else w.T
            alpha, beta = attrs.get("alpha", 1.0), attrs.get("beta", 1.0)
            if alpha != 1.0:
                w = alpha * w
            bias = np.zeros(w.shape[0])
            if len(ins) > 2 and ins[2]:
                bias = np.broadcast_to(np.asarray(self.const[ins[2]], dtype=np.float64).ravel(), (w.shape[0],))
                if beta != 1.0:
                    bias = beta * bias
            self._set(node, b.affine(self.value(ins[0]), w, bias))
        elif op == "MatMul":
            if ins[1] not in self.const:
                self.fail(node, "the right operand must be a constant matrix")
            w = np.asarray(self.const[ins[1]], dtype=np.float64)
            if w.ndim != 2:
                self.fail(node, "weight must be 2-D")
            self.lazy[node.output[0]] = (self.value(ins[0]), w.T)
            self.rank[node.output[0]] = self.rank.get(ins[0], 2)
        elif op in ("Add", "Sub") and self._fuse_bias(node, ins, op):
            return
        elif op in ("Add", "Sub"):
            x, y = self.value(ins[0]), self.value(ins[1])
            if b.size(x) != b.size(y):
                self.fail(node, "broadcasting is not supported")
            dyn = ins[0] if ins[0] in self.dyn and ins[0] not in self.const else ins[1]
            self._set(node, b.add(x, y) if op == "Add" else b.sub(x, y), self.rank.get(dyn, 2))
        elif op == "Neg":
            self._set(node, b.neg(self.value(ins[0])))
        elif op == "Mul":
            consts = [n for n in ins if n in self.const]
            dyn = [n for n in ins if n not in self.const]
            if len(consts) != 1 or np.asarray(self.const[consts[0]]).size != 1:
                self.fail(node, "only multiplication by a scalar constant is supported")
            self._set(node, b.scale(self.value(dyn[0]), float(np.asarray(self.const[consts[0]]).ravel()[0])), self.rank.get(dyn[0], 2))
        elif op == "Relu":
            self._set(node, b.relu(self.value(ins[0])))
        elif op in ("Flatten", "Identity"):
            self._set(node, self.value(ins[0]), 2 if op == "Flatten" else None)
        elif op == "Reshape":
            shape = np.asarray(self.const.get(ins[1], [1, -1])).ravel()
            self._set(node, self.value(ins[0]), len(shape))
        elif op == "Concat":
            for name in ins:
                self.last_axis(node, name, int(attrs.get("axis", 1)))
            self._set(node, b.concat(*(self.value(n) for n in ins)))
        elif op == "Slice":
            starts, ends = (np.asarray(self.const[n]).ravel() for n in ins[1:3])
            axes = np.asarray(self.const[ins[3]]).ravel() if len(ins) > 3 and ins[3] else np.array([0])
            steps = np.asarray(self.const[ins[4]]).ravel() if len(ins) > 4 and ins[4] else np.array([1])
            if len(starts) != 1 or int(steps[0]) != 1:
                self.fail(node, "only unit-step slicing of one axis is supported")
            self.last_axis(node, ins[0], int(axes[0]))
            x = self.value(ins[0])
            start, stop, _ = slice(int(starts[0]), int(ends[0])).indices(b.size(x))
            self._set(node, b.slice(x, start, stop))
        elif op == "Gather":
            self.last_axis(node, ins[0], int(attrs.get("axis", 0)))
            x = self.value(ins[0])
            idx = np.asarray(self.const[ins[1]]).ravel().astype(np.int64) % b.size(x)
            self._set(node, b.select(x, idx))
        elif op in ("Max", "Min"):
            if len(ins) != 2:
                self.fail(node, "exactly two operands are supported")
            x, y = self.value(ins[0]), self.value(ins[1])
            self._set(node, b.maximum(x, y) if op == "Max" else b.minimum(x, y))
        elif op == "Clip":
            x = self.value(ins[0])
            size = b.size(x)
            lo = np.asarray(self.const[ins[1]]).ravel() if len(ins) > 1 and ins[1] else np.array([-np.inf])
            hi = np.asarray(self.const[ins[2]]).ravel() if len(ins) > 2 and ins[2] else np.array([np.inf])
            if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
                self.fail(node, "both clip bounds are required")
            self._set(node, b.clamp(x, np.broadcast_to(lo, size), np.broadcast_to(hi, size)))
        else:  # pragma: no cover - guarded by SUPPORTED_ONNX_OPS
            self.fail(node, "unsupported")

    def _fuse_bias(self, node, ins, op) -> bool:
        """MatMul followed by adding/subtracting a constant vector: one Affine."""
        kinds = [n in self.lazy and n not in self.dyn for n in ins], [n in self.const for n in ins]
        if sorted(kinds[0]) != [False, True] or sorted(kinds[1]) != [False, True]:
            return False
        k = kinds[0].index(True)
        x, w = self.lazy[ins[k]]
        c = np.asarray(self.const[ins[1 - k]], dtype=np.float64).ravel()
        if c.size not in (1, w.shape[0]):
            return False
        c = np.broadcast_to(c, (w.shape[0],))
        if op == "Sub" and k == 1:  # c - x W
            w = -w
        elif op == "Sub":
            c = -c
        self._set(node, self.b.affine(x, w, c), self.rank.get(ins[k], 2))
        return True

    def fold(self, node, attrs):
        """Evaluate a node whose operands are all constant."""
        c = [np.asarray(self.const[n]) for n in node.input if n]
        op = node.op_type
        out = {
            "Identity": lambda: c[0],
            "Neg": lambda: -c[0],
            "Add": lambda: c[0] + c[1],
            "Sub": lambda: c[0] - c[1],
            "Mul": lambda: c[0] * c[1],
            "Reshape": lambda: c[0].reshape([int(s) for s in c[1]]),
            "Flatten": lambda: c[0].reshape(1, -1),
        }.get(op)
        if out is None:
            self.fail(node, "constant folding of this operator is not supported")
        self.const[node.output[0]] = out()


def import_model(path) -> ModelFile:
    """Load an ONNX feed-forward model into a validated graph."""
    try:
        model = onnx.load(str(path))
    except FileNotFoundError:
        raise
    except Exception as exc:  # protobuf decode errors come in several types
        raise ModelImportError(f"cannot parse {path}: {exc}") from None
    graph = _Importer(model).run().require_valid()
    kinds: dict[str, int] = {}
    for n in graph.nodes.values():
        kinds[n.op.kind] = kinds.get(n.op.kind, 0) + 1
    report = {
        "onnx_ops": sorted({n.op_type for n in model.graph.node}),
        "node_kinds": dict(sorted(kinds.items())),
        "unsupported": [],
    }
    return ModelFile(str(path), graph, report)


def load_network(path) -> Graph:
    """Network from an ``.onnx`` file or a native ``.json`` graph file."""
    if str(path).endswith(".json"):
        return load_graph(path)
    return import_model(path).graph


def to_onnx(graph: Graph, name: str = "hyperspec") -> onnx.ModelProto:
    """ONNX model (float64, batch 1) of ``graph`` after gadget lowering."""
    graph = lower(graph).require_valid()
    nodes, inits = [], []
    names = {i: f"n{i}" for i in graph.nodes}
    names[graph.sink] = "Y"
    names[graph.input] = "X"

    def const(key: str, arr, dtype=np.float64):
        inits.append(numpy_helper.from_array(np.asarray(arr, dtype=dtype), key))
        return key

    for i in graph.order:
        node = graph.nodes[i]
        op = node.op
        src = [names[p] for p in node.preds]
        out = [names[i]]
        if isinstance(op, Input):
            continue
        if isinstance(op, Parameter):
            nodes.append(helper.make_node("Identity", [const(f"p{i}", op.value.reshape(1, -1))], out))
        elif isinstance(op, Affine):
            nodes.append(helper.make_node("Gemm", src + [const(f"W{i}", op.weight), const(f"b{i}", op.bias)], out, transB=1))
        elif isinstance(op, ReLU):
            nodes.append(helper.make_node("Relu", src, out))
        elif isinstance(op, Add):
            nodes.append(helper.make_node("Add", src, out))
        elif isinstance(op, Subtract):
            nodes.append(helper.make_node("Sub", src, out))
        elif isinstance(op, Negate):
            nodes.append(helper.make_node("Neg", src, out))
        elif isinstance(op, ScaleConst):
            nodes.append(helper.make_node("Mul", src + [const(f"s{i}", op.scale)], out))
        elif isinstance(op, Concat):
            nodes.append(helper.make_node("Concat", src, out, axis=1))
        elif isinstance(op, Slice):
            nodes.append(helper.make_node(
                "Slice",
                src + [const(f"st{i}", [op.start], np.int64), const(f"en{i}", [op.end], np.int64), const(f"ax{i}", [1], np.int64)],
                out,
            ))
        elif isinstance(op, SelectIndices):
            nodes.append(helper.make_node("Gather", src + [const(f"ix{i}", op.indices, np.int64)], out, axis=1))
        elif isinstance(op, (MaxPairwise, MinPairwise, ClampConst, ReduceMax)):  # pragma: no cover
            raise GraphError(f"{op.kind} survived lowering")
        else:  # pragma: no cover
            raise GraphError(f"no ONNX encoding for {op.kind}")
    if graph.sink == graph.input:
        nodes.append(helper.make_node("Identity", ["X"], ["Y"]))
    g = helper.make_graph(
        nodes, name,
        [helper.make_tensor_value_info("X", TensorProto.DOUBLE, [1, graph.input_size])],
        [helper.make_tensor_value_info("Y", TensorProto.DOUBLE, [1, graph.output_size])],
        inits,
    )
    model = helper.make_model(g, opset_imports=[helper.make_opsetid("", ONNX_OPSET)], producer_name="hyperspec")
    model.ir_version = 8
    onnx.checker.check_model(model)
    return model


def save_onnx(graph: Graph, path, name: str = "hyperspec") -> None:
    Path(path).write_bytes(to_onnx(graph, name).SerializeToString(deterministic=True))


# ---------------------------------------------------------------------------
# VNN-LIB property
# ---------------------------------------------------------------------------


def _num(x: float) -> str:
    x = float(x)
    return repr(x) if x != 0 else "0.0"


def vnnlib_text(problem: ComposedProblem, margin: float = 0.0) -> str:
    """Violation query: box bounds on every input and ``Y_0 <= -margin``.

    The composed graph holds (is non-negative on the box) iff the query is
    unsatisfiable.  With ``margin = 0`` an exactly-zero optimum makes the
    query satisfiable although the property holds; a small positive margin
    mirrors the strict ``< 0`` violation condition.
    """
    box = problem.box
    lines = [
        f"; hyperspec violation query: {problem.name}",
        "; X_i range over the box W, Y_0 is the composed satisfaction value.",
        "; The property holds iff this query is UNSAT (no input with Y_0 < 0).",
        f"; Strict negativity is encoded as Y_0 <= -{_num(margin)}.",
        "",
    ]
    lines += [f"(declare-const X_{k} Real)" for k in range(box.dim)]
    lines += ["(declare-const Y_0 Real)", ""]
    for k in range(box.dim):
        lines.append(f"(assert (>= X_{k} {_num(box.lower[k])}))")
        lines.append(f"(assert (<= X_{k} {_num(box.upper[k])}))")
    lines += ["", f"(assert (<= Y_0 {_num(-margin)}))", ""]
    return "\n".join(lines)


def export_problem(problem: ComposedProblem, model_path, property_path, margin: float = 0.0) -> None:
    save_onnx(problem.graph, model_path, problem.name)
    Path(property_path).write_text(vnnlib_text(problem, margin))

import json

import numpy as np
import onnx
import pytest
from onnx import TensorProto, helper, numpy_helper

from hyperspec.benchmarks import SPEC_NAMES, random_instance
from hyperspec.compose import self_compose
from hyperspec.graph import Hyperrectangle, evaluate_batch, lower, validate
from hyperspec.io import (
    FormatVersionError, GraphFormatError, ModelImportError, export_problem, graph_from_dict,
    graph_to_dict, import_model, load_any, load_graph, load_network, load_problem, save_graph,
    save_onnx, save_problem, vnnlib_text,
)
from hyperspec.networks import identity, random_mlp, residual_block
from hyperspec.specs import SpecParams, build_global_robustness_katz, build_monotonicity


def write_model(path, nodes, inits, in_dim, out_dim, dtype=TensorProto.FLOAT):
    g = helper.make_graph(
        nodes, "t",
        [helper.make_tensor_value_info("x", dtype, [1, in_dim])],
        [helper.make_tensor_value_info("y", dtype, [1, out_dim])],
        [numpy_helper.from_array(v, k) for k, v in inits.items()],
    )
    model = helper.make_model(g, opset_imports=[helper.make_opsetid("", 17)])
    model.ir_version = 8
    onnx.save(model, str(path))
    return path


def reference_mlp(xs, w1, b1, w2, b2):
    """Plain row-by-row evaluation, independent of the graph code."""
    out = []
    for x in xs:
        h = [max(0.0, sum(float(w1[i, k]) * float(x[k]) for k in range(len(x))) + float(b1[i])) for i in range(len(b1))]
        out.append([sum(float(w2[j, i]) * h[i] for i in range(len(h))) + float(b2[j]) for j in range(len(b2))])
    return np.array(out)


@pytest.fixture
def mlp_file(tmp_path, rng):
    w1 = rng.normal(size=(4, 3)).astype(np.float32)
    b1 = rng.normal(size=4).astype(np.float32)
    w2 = rng.normal(size=(2, 4)).astype(np.float32)
    b2 = rng.normal(size=2).astype(np.float32)
    nodes = [
        helper.make_node("Gemm", ["x", "W1", "B1"], ["h"], transB=1),
        helper.make_node("Relu", ["h"], ["r"]),
        helper.make_node("MatMul", ["r", "W2T"], ["m"]),
        helper.make_node("Add", ["m", "B2"], ["y"]),
    ]
    path = write_model(tmp_path / "mlp.onnx", nodes, {"W1": w1, "B1": b1, "W2T": w2.T.copy(), "B2": b2}, 3, 2)
    return path, (w1, b1, w2, b2)


class TestImport:
    def test_two_layer_mlp(self, mlp_file, rng):
        path, weights = mlp_file
        mf = import_model(path)
        assert validate(mf.graph)
        kinds = [mf.graph.nodes[i].op.kind for i in mf.graph.order]
        assert kinds == ["input", "affine", "relu", "affine"]
        xs = rng.uniform(-1, 1, size=(20, 3))
        np.testing.assert_allclose(evaluate_batch(mf.graph, xs), reference_mlp(xs, *weights), rtol=1e-12, atol=1e-12)
        assert mf.report["unsupported"] == []

    def test_conv_rejected(self, tmp_path):
        nodes = [helper.make_node("Conv", ["x", "K"], ["y"])]
        path = write_model(tmp_path / "conv.onnx", nodes, {"K": np.ones((1, 1, 1), np.float32)}, 3, 3)
        with pytest.raises(ModelImportError, match="Conv") as info:
            import_model(path)
        assert "Conv" in info.value.unsupported

    def test_residual_block(self, tmp_path, rng):
        w1, w2 = rng.normal(size=(3, 3)), rng.normal(size=(3, 3))
        b1, b2 = rng.normal(size=3), rng.normal(size=3)
        nodes = [
            helper.make_node("Gemm", ["x", "W1", "B1"], ["h"], transB=1),
            helper.make_node("Relu", ["h"], ["r"]),
            helper.make_node("Gemm", ["r", "W2", "B2"], ["z"], transB=1),
            helper.make_node("Add", ["z", "x"], ["s"]),
            helper.make_node("Relu", ["s"], ["y"]),
        ]
        path = write_model(tmp_path / "res.onnx", nodes, {"W1": w1, "B1": b1, "W2": w2, "B2": b2}, 3, 3, TensorProto.DOUBLE)
        g = import_model(path).graph
        assert validate(g) and g.count("add") == 1
        native = residual_block(w1, b1, w2, b2)
        xs = rng.normal(size=(50, 3))
        assert np.array_equal(evaluate_batch(g, xs), evaluate_batch(native, xs))

    def test_flatten_reshape_bookkeeping(self, tmp_path, rng):
        w = rng.normal(size=(2, 3))
        nodes = [
            helper.make_node("Flatten", ["x"], ["f"]),
            helper.make_node("Reshape", ["f", "S"], ["r"]),
            helper.make_node("Gemm", ["r", "W"], ["y"], transB=1),
        ]
        path = write_model(tmp_path / "fr.onnx", nodes, {"W": w, "S": np.array([1, 3], np.int64)}, 3, 2, TensorProto.DOUBLE)
        g = import_model(path).graph
        xs = rng.normal(size=(10, 3))
        np.testing.assert_allclose(evaluate_batch(g, xs), xs @ w.T, rtol=1e-14)

    @pytest.mark.parametrize("order", [("m", "C"), ("C", "m")])
    def test_matmul_sub_becomes_affine(self, tmp_path, rng, order):
        w, c = rng.normal(size=(3, 2)), rng.normal(size=2)
        nodes = [helper.make_node("MatMul", ["x", "W"], ["m"]), helper.make_node("Sub", list(order), ["y"])]
        path = write_model(tmp_path / "ms.onnx", nodes, {"W": w, "C": c}, 3, 2, TensorProto.DOUBLE)
        g = import_model(path).graph
        assert g.count("affine") == 1 and len(g.nodes) == 2
        xs = rng.normal(size=(10, 3))
        ref = xs @ w - c if order[0] == "m" else c - xs @ w
        np.testing.assert_allclose(evaluate_batch(g, xs), ref, rtol=1e-13, atol=1e-13)

    def test_garbage_file(self, tmp_path):
        path = tmp_path / "bad.onnx"
        path.write_bytes(b"\x00\x01not a model")
        with pytest.raises(ModelImportError):
            import_model(path)

    def test_load_network_dispatch(self, tmp_path, mlp_file, rng):
        g = random_mlp([2, 3, 1], rng)
        save_graph(g, tmp_path / "g.json")
        assert load_network(tmp_path / "g.json").input_size == 2
        assert load_network(mlp_file[0]).input_size == 3


class TestNativeJson:
    def test_round_trip_composed(self, tmp_path, rng):
        problem = self_compose(identity(), build_monotonicity(SpecParams(Hyperrectangle([0.0], [1.0]), 1)))
        save_problem(problem, tmp_path / "p.json")
        back = load_problem(tmp_path / "p.json")
        ws = problem.box.sample(rng, 100)
        assert np.array_equal(evaluate_batch(back.graph, ws), evaluate_batch(problem.graph, ws))
        assert np.array_equal(back.box.lower, problem.box.lower)
        assert back.provenance == problem.provenance
        assert isinstance(load_any(tmp_path / "p.json"), type(problem))

    def test_stable_output(self, tmp_path, rng):
        g = random_mlp([2, 4, 1], rng)
        save_graph(g, tmp_path / "a.json")
        save_graph(load_graph(tmp_path / "a.json"), tmp_path / "b.json")
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()

    def test_truncated_file(self, tmp_path, rng):
        save_graph(random_mlp([2, 4, 1], rng), tmp_path / "g.json")
        text = (tmp_path / "g.json").read_text()
        (tmp_path / "t.json").write_text(text[: len(text) // 2])
        with pytest.raises(GraphFormatError):
            load_graph(tmp_path / "t.json")

    def test_version_two(self, rng):
        doc = graph_to_dict(random_mlp([2, 1], rng))
        doc["format_version"] = 2
        with pytest.raises(FormatVersionError):
            graph_from_dict(doc)

    def test_schema_error_pointer(self, rng):
        doc = graph_to_dict(random_mlp([2, 1], rng))
        key = next(k for k, n in doc["nodes"].items() if n["kind"] == "affine")
        del doc["nodes"][key]["weight"]
        with pytest.raises(GraphFormatError) as info:
            graph_from_dict(doc)
        assert info.value.pointer.startswith(f"/nodes/{key}")

    def test_invalid_graph_rejected(self, rng):
        doc = graph_to_dict(random_mlp([2, 1], rng))
        doc["sink"] = 999
        with pytest.raises(GraphFormatError):
            graph_from_dict(doc)

    def test_schema_shipped(self):
        from importlib import resources
        schema = json.loads(resources.files("hyperspec").joinpath("graph.schema.json").read_text())
        assert schema["properties"]["format_version"]["const"] == 1


class TestExport:
    @pytest.mark.parametrize("name", SPEC_NAMES)
    def test_reimport_zero_ulps(self, tmp_path, name, rng):
        problem = random_instance(name, 1).problem
        export_problem(problem, tmp_path / "m.onnx", tmp_path / "p.vnnlib")
        g = import_model(tmp_path / "m.onnx").graph
        ws = problem.box.sample(rng, 100)
        assert np.array_equal(evaluate_batch(g, ws), evaluate_batch(lower(problem.graph), ws))
        assert np.array_equal(evaluate_batch(g, ws), evaluate_batch(problem.graph, ws))

    def test_onnxruntime_agrees(self, tmp_path, rng):
        ort = pytest.importorskip("onnxruntime")
        problem = random_instance("lipschitz", 2).problem
        save_onnx(problem.graph, tmp_path / "m.onnx")
        sess = ort.InferenceSession(str(tmp_path / "m.onnx"), providers=["CPUExecutionProvider"])
        for w in problem.box.sample(rng, 20):
            got = sess.run(None, {"X": w[None, :]})[0]
            np.testing.assert_allclose(got, evaluate_batch(problem.graph, w[None, :]), rtol=1e-12, atol=1e-12)

    def test_deterministic_bytes(self, tmp_path):
        problem = random_instance("dependency_fairness", 4).problem
        for d in ("a", "b"):
            (tmp_path / d).mkdir()
            export_problem(problem, tmp_path / d / "m.onnx", tmp_path / d / "p.vnnlib")
        for f in ("m.onnx", "p.vnnlib"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_monotonicity_property_text(self):
        problem = self_compose(identity(), build_monotonicity(SpecParams(Hyperrectangle([0.0], [1.0]), 1)))
        text = vnnlib_text(problem)
        asserts = [ln for ln in text.splitlines() if ln.startswith("(assert")]
        assert len(asserts) == 2 * 2 + 1
        assert asserts[-1] == "(assert (<= Y_0 0.0))"
        assert "UNSAT" in text

    def test_katz_bounds(self):
        dom = Hyperrectangle([0.0, -1.0], [1.0, 2.0])
        problem = self_compose(random_mlp([2, 1], np.random.default_rng(0)),
                               build_global_robustness_katz(SpecParams(dom, 1, delta=0.25, epsilon=0.1)))
        text = vnnlib_text(problem, margin=1e-9)
        lo = [0.0, -1.0, -0.25, -0.25]
        hi = [1.0, 2.0, 0.25, 0.25]
        for k in range(4):
            assert f"(assert (>= X_{k} {lo[k]!r}))" in text
            assert f"(assert (<= X_{k} {hi[k]!r}))" in text
        assert "(assert (<= Y_0 -1e-09))" in text

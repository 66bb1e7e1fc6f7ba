import json
import os
import subprocess
import sys

import numpy as np
import pytest

from hyperspec.anchors import anchor_cases
from hyperspec.cli import main
from hyperspec.io import save_graph, save_onnx
from hyperspec.networks import identity, random_mlp

CASES = {c.name: c for c in anchor_cases()}


def write_case(tmp_path, case, fmt="onnx", config=None):
    model = tmp_path / f"{case.name}.{fmt}"
    (save_onnx if fmt == "onnx" else save_graph)(case.network, model)
    spec = dict(case.spec, **({"config": config} if config else {}))
    spec_path = tmp_path / f"{case.name}.spec.json"
    spec_path.write_text(json.dumps(spec))
    return str(model), str(spec_path)


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    manifest = json.loads(err.strip().splitlines()[-1])["manifest"]
    return code, out, manifest


@pytest.mark.parametrize("name", sorted(CASES))
def test_verify_exit_codes(tmp_path, capsys, name):
    case = CASES[name]
    model, spec = write_case(tmp_path, case)
    code, out, manifest = run(capsys, "verify", model, spec, "--json")
    assert code == {"sat": 0, "violated": 1}[case.expected]
    payload = json.loads(out)
    assert payload["verdict"] == case.expected
    assert manifest["exit_code"] == code and manifest["command"] == "verify"
    if case.expected == "violated":
        assert len(payload["decoded"]["inputs"]) == len(payload["decoded"]["outputs"]) >= 2
        assert payload["sat_value"] < -1e-9


def test_unknown_exit_code(tmp_path, capsys):
    # K|x1 - x2| - |2 x1 - 2 x2| is exactly 0 everywhere; bisection cannot close it
    model, spec = write_case(tmp_path, CASES["double_lipschitz_2"])
    code, out, _ = run(capsys, "verify", model, spec, "--split", "longest_edge", "--max-regions", "3", "--json")
    assert code == 2 and json.loads(out)["verdict"] == "unknown"


@pytest.mark.parametrize("argv", [
    ["verify", "missing.onnx", "SPEC"],
    ["verify", "MODEL", "missing.json"],
    ["verify", "MODEL", "SPEC", "--tolerance", "-1"],
    ["verify", "MODEL", "SPEC", "--bound-method", "zonotope"],
    ["frobnicate"],
    ["verify", "MODEL", "BADSPEC"],
    ["verify", "MODEL", "WRONGSPEC"],
])
def test_input_errors(tmp_path, capsys, argv):
    model, spec = write_case(tmp_path, CASES["identity_monotone"])
    (tmp_path / "bad.json").write_text("{not json")
    (tmp_path / "wrong.json").write_text(json.dumps({"spec": "lipschitz", "domain": {"lo": [0, 0], "hi": [1, 1]}, "K": 1}))
    subst = {"MODEL": model, "SPEC": spec, "BADSPEC": tmp_path / "bad.json", "WRONGSPEC": tmp_path / "wrong.json"}
    argv = [str(subst.get(a, a)) for a in argv]
    assert main(argv) >= 3
    assert "error" in capsys.readouterr().err


def test_oracle_cross_check(tmp_path, capsys):
    rng = np.random.default_rng(3)
    net = random_mlp([1, 3, 1], rng)
    save_graph(net, tmp_path / "net.json")
    (tmp_path / "lip.json").write_text(json.dumps({"spec": "lipschitz", "domain": {"lo": [0], "hi": [1]}, "K": 1.0}))
    code, out, _ = run(capsys, "verify", tmp_path / "net.json", tmp_path / "lip.json", "--oracle", "--json")
    payload = json.loads(out)
    assert payload["oracle"]["agrees"] is True
    assert code in (0, 1) and payload["oracle"]["verdict"] == payload["verdict"]


def test_config_precedence(tmp_path, capsys):
    model, spec = write_case(tmp_path, CASES["identity_monotone"], config={"seed": 5, "tolerance": 1e-6})
    _, _, manifest = run(capsys, "verify", model, spec, "--seed", "9")
    assert manifest["config"]["seed"] == 9 and manifest["config_sources"]["seed"] == "flag"
    assert manifest["config"]["tolerance"] == 1e-6 and manifest["config_sources"]["tolerance"] == "spec"
    assert manifest["config_sources"]["max_regions"] == "default"


def test_unknown_config_key(tmp_path, capsys):
    model, spec = write_case(tmp_path, CASES["identity_monotone"], config={"colour": "red"})
    assert main(["verify", model, spec]) == 3


class TestFalsify:
    def test_finds_witness(self, tmp_path, capsys):
        model, spec = write_case(tmp_path, CASES["identity_monotone"])
        code, out, _ = run(capsys, "falsify", model, spec, "--budget", "1000", "--json")
        assert code == 1 and json.loads(out)["verdict"] == "violated"

    def test_nothing_found(self, tmp_path, capsys):
        model, spec = write_case(tmp_path, CASES["constant_robust_eps0.05"])
        code, out, _ = run(capsys, "falsify", model, spec, "--budget", "500", "--json")
        assert code == 0 and json.loads(out)["verdict"] == "none"

    def test_seed_reproducible(self, tmp_path, capsys):
        model, spec = write_case(tmp_path, CASES["identity_monotone"])
        outs = {run(capsys, "falsify", model, spec, "--budget", "50", "--seed", "7", "--json")[1] for _ in range(2)}
        assert len(outs) == 1
        other = run(capsys, "falsify", model, spec, "--budget", "50", "--seed", "8", "--json")[1]
        assert json.loads(other)["witness"] != json.loads(outs.pop())["witness"]


class TestExportInspect:
    def test_export_deterministic(self, tmp_path, capsys):
        model, spec = write_case(tmp_path, CASES["identity_monotone"])
        for d in ("a", "b"):
            assert run(capsys, "export", model, spec, f"{tmp_path / d}/")[0] == 0
        for f in ("model.onnx", "property.vnnlib", "composed.json"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
        assert "(assert (<= Y_0 -1e-09))" in (tmp_path / "a" / "property.vnnlib").read_text()

    def test_export_prefix(self, tmp_path, capsys):
        model, spec = write_case(tmp_path, CASES["identity_monotone"])
        run(capsys, "export", model, spec, tmp_path / "out" / "mono", "--margin", "0")
        assert (tmp_path / "out" / "mono.onnx").exists()
        assert "(assert (<= Y_0 0.0))" in (tmp_path / "out" / "mono.vnnlib").read_text()

    def test_inspect_composed(self, tmp_path, capsys):
        case = CASES["identity_monotone"]
        model, spec = write_case(tmp_path, case)
        run(capsys, "export", model, spec, f"{tmp_path / 'e'}/")
        code, out, _ = run(capsys, "inspect", tmp_path / "e" / "composed.json", "--json")
        info = json.loads(out)
        problem = case.problem()
        assert code == 0 and info["valid"] and info["nodes"] == len(problem.graph)
        assert info["problem"]["copies"] == 2
        assert sum(info["problem"]["provenance"].values()) == info["nodes"]

    def test_inspect_text(self, tmp_path, capsys):
        save_graph(identity(2), tmp_path / "g.json")
        code, out, _ = run(capsys, "inspect", tmp_path / "g.json")
        assert code == 0 and "valid graph" in out


def test_module_entry_point_and_log_level(tmp_path):
    model, spec = write_case(tmp_path, CASES["identity_monotone"])
    env = dict(os.environ, HYPERSPEC_LOG="debug")
    proc = subprocess.run([sys.executable, "-m", "hyperspec", "verify", model, spec],
                          capture_output=True, text=True, env=env)
    assert proc.returncode == 1
    assert "VIOLATED" in proc.stdout
    assert "DEBUG" in proc.stderr
    quiet = subprocess.run([sys.executable, "-m", "hyperspec", "verify", model, spec],
                           capture_output=True, text=True, env=dict(os.environ, HYPERSPEC_LOG="error"))
    assert "DEBUG" not in quiet.stderr

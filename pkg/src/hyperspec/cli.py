"""Command-line front end.

Exit codes: 0 satisfied (or nothing found), 1 violated, 2 unknown,
3 input error, 4 verifier/oracle disagreement, 5 internal error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__
from .compose import ComposedProblem, self_compose
from .graph import Graph, GraphError, validate
from .io import export_problem, load_any, load_network, save_problem
from .oracle import OracleCapExceeded, oracle_verify
from .specs import SpecError, build_spec
from .verify import ConfigError, Satisfied, Unknown, Violated, VerifyConfig, falsify, verdict_tag, verify

EXIT_SAT, EXIT_VIOLATED, EXIT_UNKNOWN = 0, 1, 2
EXIT_INPUT, EXIT_DISAGREE, EXIT_INTERNAL = 3, 4, 5

log = logging.getLogger("hyperspec")

# flag name -> VerifyConfig field
_FLAG_FIELDS = {
    "tolerance": "tolerance",
    "max_regions": "max_regions",
    "max_time": "max_time",
    "workers": "workers",
    "seed": "seed",
    "bound_method": "bound_method",
    "split": "split_strategy",
    "samples": "falsify_samples",
}


class CliError(Exception):
    pass


@dataclass
class RunManifest:
    command: str
    model: str | None = None
    spec: dict | None = None
    config: dict = field(default_factory=dict)
    config_sources: dict = field(default_factory=dict)
    verdict: dict | None = None
    exit_code: int | None = None
    wall_time_s: float = 0.0
    version: str = __version__

    def emit(self, stream=None):
        stream = stream or sys.stderr
        print(json.dumps({"manifest": dataclasses.asdict(self)}, sort_keys=True, default=str), file=stream)


def _configure_logging():
    level_name = os.environ.get("HYPERSPEC_LOG", "WARNING").upper()
    level = logging.getLevelName(level_name)
    bad = not isinstance(level, int)
    logging.basicConfig(level=logging.WARNING if bad else level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if bad:
        log.warning("ignoring unknown HYPERSPEC_LOG level %r", level_name)


def _read_spec(path) -> dict:
    try:
        desc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise CliError(f"spec file {path}: malformed JSON ({exc.msg} at line {exc.lineno})") from None
    if not isinstance(desc, dict):
        raise CliError(f"spec file {path}: expected a JSON object")
    return desc


def resolve_config(args, desc: dict) -> tuple[VerifyConfig, dict]:
    """Flags override spec-file ``config`` entries, which override defaults."""
    values = {f.name: f.default for f in dataclasses.fields(VerifyConfig)}
    sources = {name: "default" for name in values}
    file_cfg = desc.get("config") or {}
    if not isinstance(file_cfg, dict):
        raise CliError("spec 'config' must be an object")
    for key, value in file_cfg.items():
        if key not in values:
            raise CliError(f"unknown config key {key!r} in spec file")
        values[key], sources[key] = value, "spec"
    for flag, name in _FLAG_FIELDS.items():
        value = getattr(args, flag, None)
        if value is not None:
            values[name], sources[name] = value, "flag"
    try:
        return VerifyConfig(**values), sources
    except (TypeError, ConfigError) as exc:
        raise CliError(f"invalid configuration: {exc}") from None


def _problem(args, manifest: RunManifest) -> tuple[ComposedProblem, dict]:
    network = load_network(args.model)
    log.debug("loaded %s: %d nodes, %d inputs, %d outputs", args.model, len(network), network.input_size, network.output_size)
    desc = _read_spec(args.spec)
    spec_only = {k: v for k, v in desc.items() if k != "config"}
    manifest.model, manifest.spec = str(args.model), spec_only
    spec = build_spec(spec_only, network.output_size)
    problem = self_compose(network, spec)
    log.debug("composed %s: %d nodes, W of dimension %d", spec.name, len(problem.graph), problem.box.dim)
    return problem, desc


def _print(args, payload: dict, text: str):
    if args.json:
        print(json.dumps(payload, sort_keys=True))
    else:
        print(text)


def _summary(verdict) -> str:
    if isinstance(verdict, Satisfied):
        return f"SATISFIED  certified lower bound {verdict.certified_lower_bound:.6g} ({verdict.regions} regions, {verdict.time_ms:.0f} ms)"
    if isinstance(verdict, Violated):
        lines = [f"VIOLATED  sat value {verdict.sat_value:.6g} ({verdict.regions} regions, {verdict.time_ms:.0f} ms)"]
        lines.append(f"  witness w = {[float(v) for v in verdict.witness]}")
        for k, (x, y) in enumerate(zip(verdict.inputs, verdict.outputs), 1):
            lines.append(f"  copy {k}: x = {[float(v) for v in x]}  y = {[float(v) for v in y]}")
        return "\n".join(lines)
    return f"UNKNOWN  best lower bound {verdict.best_lower_bound:.6g}, {verdict.regions_remaining} regions left"


def _code(verdict) -> int:
    if isinstance(verdict, Satisfied):
        return EXIT_SAT
    if isinstance(verdict, Violated):
        return EXIT_VIOLATED
    return EXIT_UNKNOWN


def cmd_verify(args, manifest: RunManifest) -> int:
    problem, desc = _problem(args, manifest)
    config, sources = resolve_config(args, desc)
    manifest.config, manifest.config_sources = dataclasses.asdict(config), sources
    log.info("verifying with %s", config)
    verdict = verify(problem, config)
    payload = verdict.to_json()
    text = _summary(verdict)
    code = _code(verdict)
    if args.oracle:
        try:
            reference = oracle_verify(problem)
        except OracleCapExceeded as exc:
            payload["oracle"] = {"refused": str(exc)}
            text += f"\noracle refused: {exc}"
        else:
            agrees = isinstance(verdict, Unknown) or verdict_tag(reference) == verdict_tag(verdict)
            payload["oracle"] = {"verdict": verdict_tag(reference), "agrees": agrees}
            text += f"\noracle: {verdict_tag(reference)} ({'agrees' if agrees else 'DISAGREES'})"
            if not agrees:
                code = EXIT_DISAGREE
    manifest.verdict = {k: payload[k] for k in ("verdict", "regions", "time_ms") if k in payload}
    _print(args, payload, text)
    return code


def cmd_falsify(args, manifest: RunManifest) -> int:
    problem, desc = _problem(args, manifest)
    config, sources = resolve_config(args, desc)
    manifest.config, manifest.config_sources = dataclasses.asdict(config), sources
    budget = args.budget if args.budget is not None else config.falsify_samples
    hit = falsify(problem, budget, seed=config.seed, tolerance=config.tolerance)
    if hit is None:
        manifest.verdict = {"verdict": "none"}
        _print(args, {"verdict": "none", "budget": budget}, f"no counterexample within {budget} samples")
        return EXIT_SAT
    payload = hit.to_json()
    manifest.verdict = {"verdict": "violated"}
    _print(args, payload, _summary(hit))
    return EXIT_VIOLATED


def _export_paths(prefix: str) -> tuple[Path, Path, Path]:
    p = Path(prefix)
    if prefix.endswith(("/", os.sep)) or p.is_dir():
        p.mkdir(parents=True, exist_ok=True)
        return p / "model.onnx", p / "property.vnnlib", p / "composed.json"
    p.parent.mkdir(parents=True, exist_ok=True)
    return Path(f"{p}.onnx"), Path(f"{p}.vnnlib"), Path(f"{p}.json")


def cmd_export(args, manifest: RunManifest) -> int:
    problem, desc = _problem(args, manifest)
    config, sources = resolve_config(args, desc)
    manifest.config, manifest.config_sources = dataclasses.asdict(config), sources
    model, prop, native = _export_paths(args.out)
    margin = config.tolerance if args.margin is None else args.margin
    export_problem(problem, model, prop, margin)
    save_problem(problem, native)
    files = {"model": str(model), "property": str(prop), "graph": str(native)}
    manifest.verdict = {"exported": files}
    _print(args, files, "\n".join(f"wrote {v}" for v in files.values()))
    return EXIT_SAT


def _stats(graph: Graph) -> dict:
    kinds: dict[str, int] = {}
    for n in graph.nodes.values():
        kinds[n.op.kind] = kinds.get(n.op.kind, 0) + 1
    return {
        "nodes": len(graph),
        "edges": sum(len(n.preds) for n in graph.nodes.values()),
        "input_size": graph.input_size,
        "output_size": graph.output_size,
        "relu_units": graph.relu_units(),
        "kinds": dict(sorted(kinds.items())),
    }


def cmd_inspect(args, manifest: RunManifest) -> int:
    manifest.model = str(args.graph)
    path = str(args.graph)
    obj = load_any(path) if path.endswith(".json") else load_network(path)
    graph = obj.graph if isinstance(obj, ComposedProblem) else obj
    report = validate(graph)
    info = {"valid": bool(report), "violations": [str(v) for v in report.violations], **_stats(graph)}
    if isinstance(obj, ComposedProblem):
        labels: dict[str, int] = {}
        for lab in obj.provenance.labels.values():
            labels[lab] = labels.get(lab, 0) + 1
        info["problem"] = {
            "name": obj.name,
            "box_dim": obj.box.dim,
            "copies": obj.provenance.copies,
            "provenance": dict(sorted(labels.items())),
        }
    manifest.verdict = {"valid": info["valid"]}
    text = [f"{path}: {'valid' if report else 'INVALID'} graph"]
    text += [f"  {k}: {v}" for k, v in info.items() if k not in ("valid", "violations")]
    text += [f"  {v}" for v in info["violations"]]
    _print(args, info, "\n".join(text))
    return EXIT_SAT if report else EXIT_INPUT


def _add_run_flags(p: argparse.ArgumentParser):
    p.add_argument("model", help="network (.onnx or native .json graph)")
    p.add_argument("spec", help="spec description JSON")
    p.add_argument("--tolerance", type=float)
    p.add_argument("--max-regions", type=int)
    p.add_argument("--max-time", type=float, help="seconds")
    p.add_argument("--workers", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--bound-method", choices=["interval", "backward_linear"])
    p.add_argument("--split", choices=["activation", "longest_edge", "bound_improvement"])
    p.add_argument("--samples", type=int, help="falsification samples before branch and bound")
    p.add_argument("--json", action="store_true", help="machine-readable output")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hyperspec", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"hyperspec {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify", help="decide a spec for a network")
    _add_run_flags(p)
    p.add_argument("--oracle", action="store_true", help="cross-check with the exact enumeration oracle")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("falsify", help="search for a counterexample only")
    _add_run_flags(p)
    p.add_argument("--budget", type=int, help="number of samples")
    p.set_defaults(func=cmd_falsify)

    p = sub.add_parser("export", help="write the composed problem as ONNX + VNN-LIB")
    _add_run_flags(p)
    p.add_argument("out", help="output directory (trailing /) or file prefix")
    p.add_argument("--margin", type=float, help="violation margin in the property (default: tolerance)")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("inspect", help="validate a graph file and print statistics")
    p.add_argument("graph")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    _configure_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits with 2, which would read as "unknown"
        return EXIT_SAT if exc.code == 0 else EXIT_INPUT
    manifest = RunManifest(args.command)
    start = time.perf_counter()
    try:
        code = args.func(args, manifest)
    except (CliError, SpecError, GraphError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        code = EXIT_INPUT
    except Exception as exc:  # noqa: BLE001 - last-resort diagnostic
        log.debug("internal error", exc_info=True)
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        code = EXIT_INTERNAL
    manifest.exit_code = code
    manifest.wall_time_s = round(time.perf_counter() - start, 6)
    manifest.emit()
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

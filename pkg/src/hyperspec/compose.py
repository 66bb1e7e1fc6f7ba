"""Self-composition: reduce a hyperproperty check to a plain reachability check.

The composed graph feeds ``w`` through the generator network, runs ``v``
copies of the network under verification on the generated inputs and hands
``(x1, ..., xv, y1, ..., yv)`` to the satisfaction network.  The network
satisfies the hyperproperty iff the composed graph is non-negative on all
of ``W``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Mapping

import numpy as np

from .graph import Graph, GraphBuilder, GraphError, Hyperrectangle, evaluate, evaluate_all
from .specs import NNDH


class CompositionError(GraphError):
    pass


@dataclass(frozen=True, eq=False)
class Property:
    """Input box plus the output set ``{y : y >= 0}`` of a scalar graph."""

    input_box: Hyperrectangle
    output_set: str = "non_negative"

    def __post_init__(self):
        if self.output_set != "non_negative":
            raise ValueError(f"unsupported output set {self.output_set!r}")


@dataclass(frozen=True)
class Provenance:
    """Where each composed node came from.

    ``labels`` maps node ids to ``"n_in"``, ``"copy:k"`` (1-based),
    ``"n_sat"`` or ``"glue"``.  ``inputs_node`` carries the stacked generated
    inputs and ``output_nodes`` the sink of each network copy.
    """

    labels: Mapping[int, str]
    inputs_node: int
    output_nodes: tuple[int, ...]
    copies: int
    input_dim: int
    output_dim: int

    def to_dict(self) -> dict:
        return {
            "labels": {str(k): v for k, v in sorted(self.labels.items())},
            "inputs_node": self.inputs_node,
            "output_nodes": list(self.output_nodes),
            "copies": self.copies,
            "input_dim": self.input_dim,
            "output_dim": self.output_dim,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Provenance":
        return cls(
            MappingProxyType({int(k): v for k, v in d["labels"].items()}),
            int(d["inputs_node"]),
            tuple(int(i) for i in d["output_nodes"]),
            int(d["copies"]),
            int(d["input_dim"]),
            int(d["output_dim"]),
        )


@dataclass(frozen=True, eq=False)
class ComposedProblem:
    graph: Graph
    property: Property
    provenance: Provenance
    name: str = "composed"

    def __post_init__(self):
        if self.graph.input_size != self.property.input_box.dim:
            raise CompositionError("composed graph input does not match the property box")
        if self.graph.output_size != 1:
            raise CompositionError("composed graph must be scalar")

    @property
    def box(self) -> Hyperrectangle:
        return self.property.input_box

    def decode(self, w) -> tuple[list[np.ndarray], list[np.ndarray]]:
        """Generated inputs and network outputs for a point of ``W``."""
        values = evaluate_all(self.graph, w)
        p = self.provenance
        xs = values[p.inputs_node]
        n = p.input_dim
        return (
            [xs[k * n : (k + 1) * n] for k in range(p.copies)],
            [values[i] for i in p.output_nodes],
        )


def scalar_problem(graph: Graph, box: Hyperrectangle, name: str = "scalar") -> ComposedProblem:
    """``graph >= 0`` on ``box`` as a problem with one trivial copy (no spec involved)."""
    labels = MappingProxyType({i: "copy:1" for i in graph.nodes})
    prov = Provenance(labels, graph.input, (graph.sink,), 1, graph.input_size, graph.output_size)
    return ComposedProblem(graph, Property(box), prov, name)


def self_compose(network: Graph, spec: NNDH) -> ComposedProblem:
    network.require_valid()
    if network.input_size != spec.input_dim:
        raise CompositionError(
            f"network input has {network.input_size} values but the spec generates inputs of size {spec.input_dim}"
        )
    if network.output_size != spec.output_dim:
        raise CompositionError(
            f"network output has {network.output_size} values but the spec expects {spec.output_dim}"
        )
    v, n = spec.copies, spec.input_dim
    b = GraphBuilder()
    labels: dict[int, str] = {}
    w = b.input(spec.w_box.dim)
    labels[w] = "n_in"

    def take(ids: dict[int, int], label: str, skip: int):
        for src, dst in ids.items():
            if src != skip:
                labels[dst] = label

    ids = b.include(spec.n_in, w)
    take(ids, "n_in", spec.n_in.input)
    xs = ids[spec.n_in.sink]

    outputs = []
    for k in range(v):
        xk = b.slice(xs, k * n, (k + 1) * n)
        if xk != xs:
            labels[xk] = "glue"
        ids = b.include(network, xk)
        take(ids, f"copy:{k + 1}", network.input)
        outputs.append(ids[network.sink])

    z = b.concat(xs, *outputs)
    labels[z] = "glue"
    ids = b.include(spec.n_sat, z)
    take(ids, "n_sat", spec.n_sat.input)

    graph = b.build(ids[spec.n_sat.sink])
    remap = b.id_map
    if len(remap) != len(b._nodes):
        raise CompositionError("composition produced unreachable nodes")
    provenance = Provenance(
        MappingProxyType({remap[i]: lab for i, lab in labels.items()}),
        remap[xs],
        tuple(remap[o] for o in outputs),
        v,
        n,
        spec.output_dim,
    )
    return ComposedProblem(graph, Property(spec.w_box), provenance, spec.name)


def staged_value(network: Graph, spec: NNDH, w) -> float:
    """Composed value computed stage by stage, without the composed graph."""
    xs = spec.split_inputs(evaluate(spec.n_in, w))
    ys = [evaluate(network, x) for x in xs]
    return float(evaluate(spec.n_sat, np.concatenate(xs + ys))[0])


@dataclass
class EquivalenceReport:
    samples: int
    violations: int = 0
    disagreements: list[dict] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.disagreements


def satisfaction_equivalence_check(
    network: Graph, spec: NNDH, samples: int, seed: int = 0
) -> EquivalenceReport:
    """Sampled check that the composed sign matches the direct output-set test."""
    if spec.output_predicate is None:
        raise ValueError("spec carries no direct output predicate")
    problem = self_compose(network, spec)
    rng = np.random.default_rng(seed)
    report = EquivalenceReport(samples)
    for w in spec.w_box.sample(rng, samples):
        value = float(evaluate(problem.graph, w)[0])
        xs, ys = problem.decode(w)
        holds = bool(spec.output_predicate(xs, ys))
        if value < 0:
            report.violations += 1
        if (value >= 0) != holds:
            report.disagreements.append({"w": w.tolist(), "value": value, "predicate": holds})
    return report

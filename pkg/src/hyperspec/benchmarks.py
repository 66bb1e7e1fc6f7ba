"""Random instance families for the verifier/oracle agreement suite."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .compose import ComposedProblem, self_compose
from .graph import Graph, Hyperrectangle, lower
from .networks import random_mlp
from .specs import (
    NNDH, SpecParams, build_dependency_fairness, build_global_robustness_extra_class,
    build_global_robustness_katz, build_lipschitz, build_monotonicity,
)

SPEC_NAMES = ("monotonicity", "robustness_katz", "robustness_extra_class", "lipschitz", "dependency_fairness")


@dataclass(frozen=True)
class Instance:
    spec_name: str
    index: int
    network: Graph
    spec: NNDH
    problem: ComposedProblem

    @property
    def relu_units(self) -> int:
        return lower(self.problem.graph).relu_units()


def _spec(name: str, rng: np.random.Generator) -> tuple[NNDH, int, int]:
    """A random spec of family ``name`` plus the network's (input, output) sizes."""
    if name == "dependency_fairness":
        n, m = 2, 2
        dom = Hyperrectangle([1.0, 0.0], [2.0, 1.0])
        return build_dependency_fairness(SpecParams(dom, m, num_values=2)), n, m
    n = int(rng.integers(1, 3))
    dom = Hyperrectangle(np.zeros(n), np.ones(n))
    if name == "monotonicity":
        direction = str(rng.choice(["non_increasing", "non_decreasing"]))
        i = int(rng.integers(1, n + 1))
        return build_monotonicity(SpecParams(dom, 1, input_index=i, direction=direction)), n, 1
    if name == "robustness_katz":
        p = SpecParams(dom, 1, delta=float(rng.uniform(0.05, 0.3)), epsilon=float(rng.uniform(0.1, 1.0)))
        return build_global_robustness_katz(p), n, 1
    if name == "robustness_extra_class":
        # two regular classes plus the extra one; N_sat alone needs 7 units
        dom = Hyperrectangle([0.0], [1.0])
        p = SpecParams(dom, 3, delta=float(rng.uniform(0.05, 0.3)))
        return build_global_robustness_extra_class(p), 1, 3
    if name == "lipschitz":
        p = SpecParams(dom, 1, lipschitz_constant=float(rng.uniform(0.5, 3.0)))
        return build_lipschitz(p), n, 1
    raise ValueError(f"unknown spec family {name!r}")


def random_instance(name: str, index: int, seed: int = 0, max_units: int = 12) -> Instance:
    """Instance ``index`` of family ``name``: the composed graph has at most ``max_units`` ReLUs."""
    rng = np.random.default_rng([seed, SPEC_NAMES.index(name), index])
    for _ in range(100):
        spec, n, m = _spec(name, rng)
        depth = int(rng.integers(0 if name == "robustness_extra_class" else 1, 3))
        sizes = [n] + [int(rng.integers(1, 5)) for _ in range(depth)] + [m]
        net = random_mlp(sizes, rng)
        problem = self_compose(net, spec)
        inst = Instance(name, index, net, spec, problem)
        if inst.relu_units <= max_units:
            return inst
    raise RuntimeError(f"could not draw a {name} instance with at most {max_units} ReLU units")


def agreement_suite(count: int = 50, seed: int = 0, max_units: int = 12) -> Iterator[Instance]:
    for index in range(count):
        for name in SPEC_NAMES:
            yield random_instance(name, index, seed, max_units)

"""Small networks whose verdicts are known by hand.

Each case pairs a network with a spec description (the same JSON object the
CLI reads) and the expected verdict.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .compose import ComposedProblem, self_compose
from .graph import Graph
from .networks import constant, identity, linear, mlp
from .specs import build_spec


@dataclass(frozen=True)
class AnchorCase:
    name: str
    network: Graph
    spec: dict
    expected: str  # "sat" or "violated"

    def problem(self) -> ComposedProblem:
        return self_compose(self.network, build_spec(self.spec, self.network.output_size))


def _unit(**kw) -> dict:
    return {"domain": {"lo": [0.0], "hi": [1.0]}, **kw}


def attribute_blind_network() -> Graph:
    """2 inputs (sensitive attribute first), 2 classes; the first weight column is zero."""
    w1 = np.array([[0.0, 1.5], [0.0, -2.0], [0.0, 0.5]])
    b1 = np.array([0.1, 0.7, -0.2])
    w2 = np.array([[1.0, -1.0, 2.0], [-0.5, 1.0, 1.0]])
    return mlp([w1, w2], [b1, np.array([0.0, 0.3])])


def anchor_cases() -> list[AnchorCase]:
    mono = _unit(spec="monotonicity", direction="non_increasing")
    fair = {"spec": "dependency_fairness", "domain": {"lo": [1.0, 0.0], "hi": [2.0, 1.0]}, "num_values": 2}
    cases = [
        AnchorCase("neg_identity_monotone", linear([[-1.0]]), mono, "sat"),
        AnchorCase("identity_monotone", identity(), mono, "violated"),
        AnchorCase("identity_robust", identity(), _unit(spec="robustness_katz", delta=0.1, epsilon=0.05), "violated"),
        AnchorCase("double_lipschitz_2", linear([[2.0]]), _unit(spec="lipschitz", lipschitz_constant=2.0), "sat"),
        AnchorCase("double_lipschitz_1", linear([[2.0]]), _unit(spec="lipschitz", lipschitz_constant=1.0), "violated"),
        AnchorCase("attribute_blind_fair", attribute_blind_network(), fair, "sat"),
    ]
    for eps in (0.05, 1e-3, 1.0):
        cases.append(AnchorCase(
            f"constant_robust_eps{eps:g}", constant(0.7),
            _unit(spec="robustness_katz", delta=0.1, epsilon=eps), "sat",
        ))
    return cases

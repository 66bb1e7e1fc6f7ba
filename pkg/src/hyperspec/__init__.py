"""Verification of neural-network hyperproperties by self-composition."""

__version__ = "0.1.0"

from .compose import ComposedProblem, Property, self_compose  # noqa: E402
from .graph import Graph, GraphBuilder, Hyperrectangle, evaluate, validate  # noqa: E402
from .specs import NNDH, SpecParams, build_spec  # noqa: E402
from .verify import Satisfied, Unknown, Violated, VerifyConfig, falsify, verify  # noqa: E402

__all__ = [
    "ComposedProblem", "Graph", "GraphBuilder", "Hyperrectangle", "NNDH", "Property",
    "Satisfied", "SpecParams", "Unknown", "Violated", "VerifyConfig", "build_spec",
    "evaluate", "falsify", "self_compose", "validate", "verify",
]

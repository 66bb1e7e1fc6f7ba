"""Global specifications as network-defined hyperproperties.

Each builder returns an :class:`NNDH`: a box ``W``, a generator network that
maps ``w`` to the ``v`` inputs being compared, and a satisfaction network
that is non-negative exactly when the inputs and outputs of the ``v``
executions are acceptable.  Zero counts as satisfied.

Index conventions: ``SpecParams.input_index`` / ``output_index`` /
``sensitive_index`` are 1-based like the usual mathematical notation;
``DnfFormula`` atoms index a Python vector and are 0-based.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .graph import Graph, GraphBuilder, GraphError, Hyperrectangle


class SpecError(ValueError):
    """Invalid specification parameters or formula."""


Vectors = Sequence[np.ndarray]


@dataclass(frozen=True, eq=False)
class NNDH:
    name: str
    w_box: Hyperrectangle
    n_in: Graph
    n_sat: Graph
    copies: int
    input_dim: int
    output_dim: int
    # direct (graph-free) membership tests, used by sampling checks
    input_predicate: Callable[[Vectors], bool] | None = field(default=None, repr=False)
    output_predicate: Callable[[Vectors, Vectors], bool] | None = field(default=None, repr=False)

    def __post_init__(self):
        v, n, m = self.copies, self.input_dim, self.output_dim
        if self.n_in.input_size != self.w_box.dim:
            raise SpecError(f"generator expects {self.n_in.input_size} inputs but W has dimension {self.w_box.dim}")
        if self.n_in.output_size != v * n:
            raise SpecError(f"generator produces {self.n_in.output_size} values, expected {v * n}")
        if self.n_sat.input_size != v * (n + m):
            raise SpecError(f"satisfaction network expects {self.n_sat.input_size} values, expected {v * (n + m)}")
        if self.n_sat.output_size != 1:
            raise SpecError("satisfaction network must be scalar")

    def split_inputs(self, flat) -> list[np.ndarray]:
        flat = np.asarray(flat, dtype=np.float64).ravel()
        n = self.input_dim
        return [flat[k * n : (k + 1) * n] for k in range(self.copies)]


@dataclass(frozen=True)
class DnfFormula:
    """Disjunction of conjunctions of atoms ``u[k1] >= u[k2]``."""

    clauses: tuple[tuple[tuple[int, int], ...], ...]
    dim: int

    def __post_init__(self):
        clauses = tuple(tuple((int(a), int(b)) for a, b in clause) for clause in self.clauses)
        if not clauses:
            raise SpecError("formula needs at least one clause")
        for clause in clauses:
            if not clause:
                raise SpecError("clauses must be non-empty")
            for a, b in clause:
                if not (0 <= a < self.dim and 0 <= b < self.dim):
                    raise SpecError(f"atom ({a}, {b}) out of range for dimension {self.dim}")
        object.__setattr__(self, "clauses", clauses)

    def holds(self, u) -> bool:
        u = np.asarray(u, dtype=np.float64).ravel()
        return any(all(u[a] >= u[b] for a, b in clause) for clause in self.clauses)


@dataclass(frozen=True)
class SpecParams:
    domain: Hyperrectangle
    output_dim: int
    input_index: int = 1
    output_index: int = 1
    direction: str = "non_increasing"
    delta: float | None = None
    epsilon: float | None = None
    lipschitz_constant: float | None = None
    num_values: int | None = None
    sensitive_index: int = 1

    @property
    def input_dim(self) -> int:
        return self.domain.dim


def compile_dnf(formula: DnfFormula) -> Graph:
    """Satisfaction network ``max over clauses of min over atoms of u[k1] - u[k2]``.

    Min and max are reduced with balanced pairwise ReLU gadget trees, clause
    order and atom order as given.
    """
    b = GraphBuilder()
    u = b.input(formula.dim)
    clauses = [_clause(b, u, c) for c in formula.clauses]
    return b.build(b.relu_reduce_max(b.concat(*clauses)))


def _clause(b: GraphBuilder, u: int, clause) -> int:
    left = b.select(u, [a for a, _ in clause])
    right = b.select(u, [k for _, k in clause])
    return b.relu_reduce_min(b.sub(left, right))


def _include_dnf(b: GraphBuilder, u: int, formula: DnfFormula) -> int:
    g = compile_dnf(formula)
    return b.include(g, u)[g.sink]


def _block_diff(total: int, first: int, second: int, size: int) -> np.ndarray:
    """Rows selecting vec[first + j] - vec[second + j] for j < size."""
    w = np.zeros((size, total))
    for j in range(size):
        w[j, first + j] = 1.0
        w[j, second + j] = -1.0
    return w


def _check_index(value: int, upper: int, name: str) -> int:
    if not 1 <= value <= upper:
        raise SpecError(f"{name} must lie in 1..{upper}, got {value}")
    return value - 1


def _linf(a, b) -> float:
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b))))


# ---------------------------------------------------------------------------
# global monotonicity
# ---------------------------------------------------------------------------


def build_monotonicity(params: SpecParams) -> NNDH:
    """Output ``j`` may not increase (or decrease) when input ``i`` increases."""
    n, m = params.input_dim, params.output_dim
    i = _check_index(params.input_index, n, "input_index")
    j = _check_index(params.output_index, m, "output_index")
    if params.direction not in ("non_increasing", "non_decreasing"):
        raise SpecError(f"unknown direction {params.direction!r}")

    b = GraphBuilder()
    x = b.input(2 * n)
    pair = b.select(x, [i, n + i])
    lo = b.relu_min(b.slice(pair, 0, 1), b.slice(pair, 1, 2))
    hi = b.relu_max(b.slice(pair, 0, 1), b.slice(pair, 1, 2))
    order = list(range(2 * n))
    order[i], order[n + i] = 2 * n, 2 * n + 1
    n_in = b.build(b.select(b.concat(x, lo, hi), order))

    sign = 1.0 if params.direction == "non_increasing" else -1.0
    w = np.zeros((1, 2 * n + 2 * m))
    w[0, 2 * n + j] = sign
    w[0, 2 * n + m + j] = -sign
    b = GraphBuilder()
    n_sat = b.build(b.affine(b.input(2 * n + 2 * m), w))

    def inputs_ok(xs):
        return bool(xs[1][i] >= xs[0][i])

    def outputs_ok(xs, ys):
        if sign > 0:
            return bool(ys[1][j] <= ys[0][j])
        return bool(ys[1][j] >= ys[0][j])

    return NNDH(
        "monotonicity", params.domain.product(params.domain), n_in, n_sat, 2, n, m,
        inputs_ok, outputs_ok,
    )


# ---------------------------------------------------------------------------
# global robustness
# ---------------------------------------------------------------------------


def _robustness_generator(params: SpecParams) -> tuple[Hyperrectangle, Graph]:
    if params.delta is None or not params.delta > 0:
        raise SpecError(f"delta must be positive, got {params.delta}")
    n, dom = params.input_dim, params.domain
    b = GraphBuilder()
    w = b.input(2 * n)
    moved = b.affine(w, np.hstack([np.eye(n), np.eye(n)]))
    n_in = b.build(b.concat(b.slice(w, 0, n), b.relu_project(moved, dom.lower, dom.upper)))
    tau = Hyperrectangle(np.full(n, -params.delta), np.full(n, params.delta))
    return dom.product(tau), n_in


def _robustness_inputs(params: SpecParams):
    delta, dom = params.delta, params.domain

    def inputs_ok(xs):
        # rounding slack for x + tau
        return _linf(xs[0], xs[1]) <= delta * (1 + 1e-12) and dom.contains(xs[0], 1e-12) and dom.contains(xs[1], 1e-12)

    return inputs_ok


def build_global_robustness_katz(params: SpecParams) -> NNDH:
    """Outputs of inputs at L-inf distance <= delta differ by at most epsilon."""
    if params.epsilon is None or not params.epsilon > 0:
        raise SpecError(f"epsilon must be positive, got {params.epsilon}")
    n, m, eps = params.input_dim, params.output_dim, float(params.epsilon)
    w_box, n_in = _robustness_generator(params)

    b = GraphBuilder()
    z = b.input(2 * n + 2 * m)
    dy = b.affine(z, _block_diff(2 * n + 2 * m, 2 * n, 2 * n + m, m))
    n_sat = b.build(b.affine(b.relu_linf(dy), [[-1.0]], [eps]))

    def outputs_ok(xs, ys):
        return _linf(ys[0], ys[1]) <= eps

    return NNDH("robustness_katz", w_box, n_in, n_sat, 2, n, m, _robustness_inputs(params), outputs_ok)


def extra_class_formula(num_outputs: int) -> DnfFormula:
    """NR(y1) or NR(y2) or Same(y1, y2) over u = (y1, y2); the last output is the extra class."""
    m = num_outputs - 1
    if m < 1:
        raise SpecError("the extra-class formulation needs at least one regular class")
    bot = m
    stride = m + 1
    clauses = [
        tuple((k * stride + bot, k * stride + j) for j in range(m)) for k in range(2)
    ]
    for j1 in range(m):
        # u_j >= u_j always holds; keep one only if nothing else is left (m == 1)
        atoms = tuple((k * stride + j1, k * stride + j2) for k in range(2) for j2 in range(m) if j2 != j1)
        clauses.append(atoms or ((j1, j1),))
    return DnfFormula(tuple(clauses), 2 * stride)


def _non_robust(y, m) -> bool:
    return all(y[m] >= y[j] for j in range(m))


def _same(ys, m) -> bool:
    return any(all(y[j1] >= y[j2] for y in ys for j2 in range(m)) for j1 in range(m))


def build_global_robustness_extra_class(params: SpecParams) -> NNDH:
    """Close inputs get the same class unless one of them is flagged by the last output."""
    n, outputs = params.input_dim, params.output_dim
    formula = extra_class_formula(outputs)
    m = outputs - 1
    w_box, n_in = _robustness_generator(params)

    b = GraphBuilder()
    z = b.input(2 * n + 2 * outputs)
    n_sat = b.build(_include_dnf(b, b.slice(z, 2 * n, 2 * n + 2 * outputs), formula))

    def outputs_ok(xs, ys):
        return _non_robust(ys[0], m) or _non_robust(ys[1], m) or _same(ys, m)

    return NNDH(
        "robustness_extra_class", w_box, n_in, n_sat, 2, n, outputs,
        _robustness_inputs(params), outputs_ok,
    )


# ---------------------------------------------------------------------------
# Lipschitz continuity
# ---------------------------------------------------------------------------


def build_lipschitz(params: SpecParams) -> NNDH:
    """``|y1 - y2|_inf <= K |x1 - x2|_inf`` over all pairs of domain points."""
    k = params.lipschitz_constant
    if k is None or not k >= 0:
        raise SpecError(f"Lipschitz constant must be non-negative, got {k}")
    n, m, k = params.input_dim, params.output_dim, float(k)

    b = GraphBuilder()
    n_in = b.build(b.input(2 * n))

    total = 2 * n + 2 * m
    b = GraphBuilder()
    z = b.input(total)
    nx = b.relu_linf(b.affine(z, _block_diff(total, 0, n, n)))
    ny = b.relu_linf(b.affine(z, _block_diff(total, 2 * n, 2 * n + m, m)))
    n_sat = b.build(b.affine(b.concat(nx, ny), [[k, -1.0]]))

    dom = params.domain

    def outputs_ok(xs, ys):
        return _linf(ys[0], ys[1]) <= k * _linf(xs[0], xs[1])

    return NNDH(
        "lipschitz", dom.product(dom), n_in, n_sat, 2, n, m,
        lambda xs: dom.contains(xs[0]) and dom.contains(xs[1]), outputs_ok,
    )


# ---------------------------------------------------------------------------
# dependency fairness
# ---------------------------------------------------------------------------


def fairness_formula(copies: int, num_outputs: int) -> DnfFormula:
    """Some class is maximal in every one of the ``copies`` output vectors."""
    m = num_outputs
    clauses = []
    for j1 in range(m):
        atoms = tuple((k * m + j1, k * m + j2) for k in range(copies) for j2 in range(m) if j2 != j1)
        clauses.append(atoms or ((j1, j1),))
    return DnfFormula(tuple(clauses), copies * m)


def build_dependency_fairness(params: SpecParams) -> NNDH:
    """Inputs that differ only in the sensitive attribute get the same class.

    Copy ``k`` (1-based) sets the sensitive coordinate to ``k`` and keeps the
    other coordinates of ``w``.
    """
    a = params.num_values
    if a is None or a < 2:
        raise SpecError(f"the sensitive attribute needs at least 2 values, got {a}")
    n, m = params.input_dim, params.output_dim
    s = _check_index(params.sensitive_index, n, "sensitive_index")

    keep = np.eye(n)
    keep[s, s] = 0.0
    weight = np.vstack([keep] * a)
    bias = np.zeros(a * n)
    for k in range(a):
        bias[k * n + s] = k + 1
    b = GraphBuilder()
    n_in = b.build(b.affine(b.input(n), weight, bias))

    formula = fairness_formula(a, m)
    b = GraphBuilder()
    z = b.input(a * n + a * m)
    n_sat = b.build(_include_dnf(b, b.slice(z, a * n, a * n + a * m), formula))

    others = [i for i in range(n) if i != s]

    def inputs_ok(xs):
        return all(
            xs[k][s] == k + 1 and np.array_equal(xs[k][others], xs[0][others]) for k in range(a)
        )

    def outputs_ok(xs, ys):
        return any(all(y[j1] >= y[j2] for y in ys for j2 in range(m)) for j1 in range(m))

    return NNDH("dependency_fairness", params.domain, n_in, n_sat, a, n, m, inputs_ok, outputs_ok)


BUILDERS: dict[str, Callable[[SpecParams], NNDH]] = {
    "monotonicity": build_monotonicity,
    "robustness_katz": build_global_robustness_katz,
    "robustness_extra_class": build_global_robustness_extra_class,
    "lipschitz": build_lipschitz,
    "dependency_fairness": build_dependency_fairness,
}

_PARAM_KEYS = {
    "input_index": int,
    "output_index": int,
    "direction": str,
    "delta": float,
    "epsilon": float,
    "lipschitz_constant": float,
    "num_values": int,
    "sensitive_index": int,
}


def params_from_dict(desc: dict, output_dim: int) -> tuple[str, SpecParams]:
    """Parse a spec description (``{"spec": ..., "domain": {"lo", "hi"}, ...}``)."""
    try:
        name = desc["spec"]
        dom = desc["domain"]
        domain = Hyperrectangle(dom["lo"], dom["hi"])
    except (KeyError, TypeError) as exc:
        raise SpecError(f"spec description is missing {exc}") from None
    except GraphError as exc:
        raise SpecError(f"invalid domain: {exc}") from None
    if name not in BUILDERS:
        raise SpecError(f"unknown spec {name!r}; expected one of {sorted(BUILDERS)}")
    kwargs = {}
    for key, cast in _PARAM_KEYS.items():
        if key in desc:
            kwargs[key] = cast(desc[key])
    if "K" in desc:
        kwargs.setdefault("lipschitz_constant", float(desc["K"]))
    if "A" in desc:
        kwargs.setdefault("num_values", int(desc["A"]))
    return name, SpecParams(domain=domain, output_dim=output_dim, **kwargs)


def build_spec(desc: dict, output_dim: int) -> NNDH:
    name, params = params_from_dict(desc, output_dim)
    return BUILDERS[name](params)

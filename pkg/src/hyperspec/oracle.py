"""Exact reference decision procedure for small composed problems.

Every ReLU activation pattern turns the lowered graph into an affine function
of ``w`` on a polytope (box plus one sign condition per unit).  Patterns are
enumerated depth-first in topological order; partial patterns are pruned as
soon as their polytope is empty.  Emptiness and the minimum of the affine
sink are decided by Fourier-Motzkin elimination over ``fractions.Fraction``,
so the oracle shares no floating-point code with :mod:`hyperspec.verify`.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from fractions import Fraction
from math import gcd
from typing import Sequence

import numpy as np

from .compose import ComposedProblem
from .graph import (
    Add, Affine, Concat, Graph, Negate, Parameter, ReLU, ScaleConst,
    SelectIndices, Slice, Subtract, lower,
)
from .verify import Satisfied, Verdict, make_violation


class OracleCapExceeded(RuntimeError):
    """Too many unstable ReLU units; use ``verify`` instead."""


# a linear constraint sum(coeffs[k] * x[k]) <= rhs
Row = tuple[tuple[Fraction, ...], Fraction]


# ---------------------------------------------------------------------------
# Fourier-Motzkin elimination
# ---------------------------------------------------------------------------


# Internally a row is a tuple of integers (a_1, ..., a_k, b) for
# a . x <= b.  Every input number is a float, hence a dyadic rational, so
# scaling by the common denominator is exact; rows are kept primitive
# (coprime entries) so equal half-spaces compare equal.

IntRow = tuple[int, ...]


def _to_int(coeffs: Sequence[Fraction], rhs: Fraction) -> IntRow:
    den = 1
    for v in (*coeffs, rhs):
        den = den * v.denominator // gcd(den, v.denominator)
    return _primitive(tuple(int(v * den) for v in (*coeffs, rhs)))


def _primitive(row: IntRow) -> IntRow:
    g = gcd(*row)
    return row if g <= 1 else tuple(v // g for v in row)


def _dedupe(rows: list[tuple[IntRow, frozenset]], dominance: bool) -> list[tuple[IntRow, frozenset]] | None:
    """Merge duplicate rows; None if a constant row is violated.

    With ``dominance`` only the tightest row per direction survives.  That is
    always sound, but it must not be combined with Chernikov's rule, which
    counts on the descendants of the dropped rows.
    """
    best: dict = {}
    for row, hist in rows:
        coeffs = row[:-1]
        g = gcd(*coeffs)
        if g == 0:
            if row[-1] < 0:
                return None
            continue
        if dominance:
            key = tuple(c // g for c in coeffs)
            kept = best.get(key)
            # compare rhs / g against kept rhs / kept g
            if kept is None or row[-1] * kept[2] < kept[0][-1] * g:
                best[key] = (row, hist, g)
        else:
            kept = best.get(row)
            if kept is None or len(hist) < len(kept[1]):
                best[row] = (row, hist, g)
    return [(r, h) for r, h, _ in best.values()]


@dataclass
class _Stage:
    var: int
    rows: list[IntRow]


def _eliminate(rows: list[IntRow], nvars: int, keep: int | None, chernikov: bool):
    current = _dedupe([(r, frozenset([k])) for k, r in enumerate(rows)], not chernikov)
    if current is None:
        return None
    todo = [v for v in range(nvars) if v != keep]
    stages: list[_Stage] = []
    eliminated = 0
    while todo:
        def cost(v):
            pos = sum(1 for r, _h in current if r[v] > 0)
            neg = sum(1 for r, _h in current if r[v] < 0)
            return pos * neg - pos - neg

        var = min(todo, key=cost)
        todo.remove(var)
        stages.append(_Stage(var, [r for r, _ in current]))
        eliminated += 1
        pos = [(r, h) for r, h in current if r[var] > 0]
        neg = [(r, h) for r, h in current if r[var] < 0]
        nxt = [(r, h) for r, h in current if r[var] == 0]
        for pr, ph in pos:
            for nr, nh in neg:
                hist = ph | nh
                if chernikov and len(hist) > eliminated + 1:
                    continue
                a, b = -nr[var], pr[var]
                nxt.append((_primitive(tuple(a * x + b * y for x, y in zip(pr, nr))), hist))
        current = _dedupe(nxt, not chernikov)
        if current is None:
            return None
    return stages, [r for r, _ in current]


def fourier_motzkin(rows: Sequence[Row], nvars: int, keep: int | None = None, chernikov: bool = True):
    """Eliminate every variable except ``keep``.

    Returns the elimination stages (for back-substitution) and the remaining
    rows, both as primitive integer rows, or None if the system is
    infeasible.  With ``chernikov`` the combinations whose history exceeds
    ``eliminated + 1`` originals are skipped.  Skipping only ever drops
    rows, so an infeasible answer is always correct; on degenerate systems
    (implicit equalities) the kept rows can describe a larger set, which
    :func:`minimize` detects.
    """
    return _eliminate([_to_int(c, r) for c, r in rows], nvars, keep, chernikov)


def _interval_of(var: int, rows: Sequence[IntRow], point: dict[int, Fraction]):
    lo, hi = None, None
    for row in rows:
        a = row[var]
        if a == 0:
            continue
        rest = row[-1] - sum(c * point[k] for k, c in enumerate(row[:-1]) if k != var and c)
        bound = Fraction(rest) / a
        if a > 0:
            hi = bound if hi is None else min(hi, bound)
        else:
            lo = bound if lo is None else max(lo, bound)
    return lo, hi


def feasible(rows: Sequence[Row], nvars: int) -> bool:
    """Exact emptiness test.

    An empty result is always right; a non-empty one can be wrong on
    degenerate systems (see :func:`fourier_motzkin`), which only costs the
    pattern search some extra work.
    """
    return fourier_motzkin(rows, nvars) is not None


def _satisfies(rows: Sequence[Row], point: Sequence[Fraction]) -> bool:
    return all(sum((c * x for c, x in zip(coeffs, point) if c), Fraction(0)) <= rhs for coeffs, rhs in rows)


def _minimize_once(rows, objective, const, nvars, chernikov):
    t = nvars
    ext = [(tuple(c) + (Fraction(0),), r) for c, r in rows]
    # objective . x - t <= -const  (t >= objective value)
    ext.append((tuple(objective) + (Fraction(-1),), -const))
    result = fourier_motzkin(ext, nvars + 1, keep=t, chernikov=chernikov)
    if result is None:
        return None
    stages, final = result
    point: dict[int, Fraction] = {}
    lo, _ = _interval_of(t, final, point)
    if lo is None:
        raise ValueError("objective is unbounded below")
    point[t] = lo
    for stage in reversed(stages):
        v_lo, v_hi = _interval_of(stage.var, stage.rows, {**point, stage.var: Fraction(0)})
        point[stage.var] = v_lo if v_lo is not None else v_hi if v_hi is not None else Fraction(0)
    return lo, [point[k] for k in range(nvars)]


def minimize(rows: Sequence[Row], objective: Sequence[Fraction], const: Fraction, nvars: int):
    """Exact minimum of ``objective . x + const`` over ``rows`` and a minimizer.

    Returns None for an empty polytope.  The polytope must be bounded.  The
    fast pass is accepted only when its minimizer is feasible and attains
    the reported value; otherwise the system is solved again without
    Chernikov pruning.
    """
    fast = _minimize_once(rows, objective, const, nvars, chernikov=True)
    if fast is None:
        return None
    value, point = fast
    attained = sum((c * x for c, x in zip(objective, point) if c), Fraction(0)) + const
    if attained == value and _satisfies(rows, point):
        return fast
    return _minimize_once(rows, objective, const, nvars, chernikov=False)


# ---------------------------------------------------------------------------
# activation-pattern enumeration
# ---------------------------------------------------------------------------

Form = tuple[list[Fraction], Fraction]  # coefficients over w, constant


def _frac(a) -> list:
    return [Fraction(float(x)) for x in np.asarray(a).ravel()]


class _Found(Exception):
    """Unwinds the search once a violating leaf is known."""


class _Enumerator:
    def __init__(self, graph: Graph, box_lo: list[Fraction], box_hi: list[Fraction], cap: int, stop_negative: bool = False):
        self.graph = graph
        self.stop_negative = stop_negative
        self.p = len(box_lo)
        self.lo, self.hi = box_lo, box_hi
        self.shapes = graph.shapes
        self.weights = {}
        for i, n in graph.nodes.items():
            if isinstance(n.op, Affine):
                rows, cols = n.op.weight.shape
                w = _frac(n.op.weight)
                self.weights[i] = ([w[r * cols : (r + 1) * cols] for r in range(rows)], _frac(n.op.bias))
        self.stable = self._stable_units()
        self.unstable = sum(1 for s in self.stable.values() for v in s if v is None)
        if self.unstable > cap:
            raise OracleCapExceeded(f"{self.unstable} unstable ReLU units exceed the cap of {cap}")
        base = []
        for k in range(self.p):
            e = [Fraction(0)] * self.p
            e[k] = Fraction(1)
            base.append((tuple(e), self.hi[k]))
            base.append((tuple(-x for x in e), -self.lo[k]))
        self.base = base
        self.best: tuple[Fraction, list[Fraction]] | None = None
        self.leaves = 0

    # exact interval pass to fix stable units
    def _stable_units(self):
        g = self.graph
        lo: dict[int, list[Fraction]] = {}
        hi: dict[int, list[Fraction]] = {}
        stable = {}
        for i in g.order:
            n = g.nodes[i]
            op = n.op
            a = [(lo[q], hi[q]) for q in n.preds]
            if op.kind == "input":
                lo[i], hi[i] = list(self.lo), list(self.hi)
            elif isinstance(op, Parameter):
                lo[i] = hi[i] = _frac(op.value)
            elif isinstance(op, Affine):
                ws, bias = self.weights[i]
                l, h = a[0]
                lo[i] = [sum((c * (l[k] if c > 0 else h[k]) for k, c in enumerate(w)), Fraction(0)) + b for w, b in zip(ws, bias)]
                hi[i] = [sum((c * (h[k] if c > 0 else l[k]) for k, c in enumerate(w)), Fraction(0)) + b for w, b in zip(ws, bias)]
            elif isinstance(op, Add):
                lo[i] = [x + y for x, y in zip(a[0][0], a[1][0])]
                hi[i] = [x + y for x, y in zip(a[0][1], a[1][1])]
            elif isinstance(op, Subtract):
                lo[i] = [x - y for x, y in zip(a[0][0], a[1][1])]
                hi[i] = [x - y for x, y in zip(a[0][1], a[1][0])]
            elif isinstance(op, Negate):
                lo[i], hi[i] = [-x for x in a[0][1]], [-x for x in a[0][0]]
            elif isinstance(op, ScaleConst):
                s = Fraction(op.scale)
                l2, h2 = [s * x for x in a[0][0]], [s * x for x in a[0][1]]
                lo[i], hi[i] = (l2, h2) if s >= 0 else (h2, l2)
            elif isinstance(op, ReLU):
                l, h = a[0]
                stable[i] = [True if x >= 0 else False if y <= 0 else None for x, y in zip(l, h)]
                lo[i] = [max(x, Fraction(0)) for x in l]
                hi[i] = [max(y, Fraction(0)) for y in h]
            else:
                lo[i] = self._gather(i, [x[0] for x in a])
                hi[i] = self._gather(i, [x[1] for x in a])
        return stable

    def _gather(self, i: int, args: list[list]) -> list:
        """Value routing of structural nodes (concat / slice / select)."""
        op = self.graph.nodes[i].op
        if isinstance(op, Concat):
            out = [None] * self.shapes[i].size
            maps = op.index_maps([self.shapes[q] for q in self.graph.nodes[i].preds])
            for vals, idx in zip(args, maps):
                for v, j in zip(vals, idx):
                    out[j] = v
            return out
        if isinstance(op, Slice):
            return args[0][op.start : op.end]
        if isinstance(op, SelectIndices):
            return [args[0][j] for j in op.indices]
        raise ValueError(f"oracle cannot handle {op.kind}")

    def _linear(self, i: int, env: dict[int, list[Form]]) -> list[Form]:
        n = self.graph.nodes[i]
        op = n.op
        zero = [Fraction(0)] * self.p
        if op.kind == "input":
            out = []
            for k in range(self.p):
                e = list(zero)
                e[k] = Fraction(1)
                out.append((e, Fraction(0)))
            return out
        if isinstance(op, Parameter):
            return [(list(zero), v) for v in _frac(op.value)]
        a = [env[q] for q in n.preds]
        if isinstance(op, Affine):
            ws, bias = self.weights[i]
            out = []
            for w, b in zip(ws, bias):
                coeffs = list(zero)
                const = b
                for c, (fc, f0) in zip(w, a[0]):
                    if c:
                        coeffs = [x + c * y for x, y in zip(coeffs, fc)]
                        const += c * f0
                out.append((coeffs, const))
            return out
        if isinstance(op, Add):
            return [([x + y for x, y in zip(f[0], g[0])], f[1] + g[1]) for f, g in zip(a[0], a[1])]
        if isinstance(op, Subtract):
            return [([x - y for x, y in zip(f[0], g[0])], f[1] - g[1]) for f, g in zip(a[0], a[1])]
        if isinstance(op, Negate):
            return [([-x for x in f[0]], -f[1]) for f in a[0]]
        if isinstance(op, ScaleConst):
            s = Fraction(op.scale)
            return [([s * x for x in f[0]], s * f[1]) for f in a[0]]
        return self._gather(i, a)

    def _range(self, form: Form) -> tuple[Fraction, Fraction]:
        coeffs, const = form
        lo = const + sum((c * (self.lo[k] if c > 0 else self.hi[k]) for k, c in enumerate(coeffs) if c), Fraction(0))
        hi = const + sum((c * (self.hi[k] if c > 0 else self.lo[k]) for k, c in enumerate(coeffs) if c), Fraction(0))
        return lo, hi

    def _with(self, cons: list[Row], form: Form, active: bool) -> list[Row] | None:
        """Add ``form >= 0`` (active) or ``form <= 0``; None if provably empty."""
        coeffs, const = form
        lo, hi = self._range(form)
        if active:
            if lo >= 0:
                return cons
            if hi < 0:
                return None
            row = (tuple(-c for c in coeffs), const)
        else:
            if hi <= 0:
                return cons
            if lo > 0:
                return None
            row = (tuple(coeffs), -const)
        new = cons + [row]
        return new if feasible(self.base + new, self.p) else None

    def run(self):
        try:
            self._dfs(0, {}, [])
        except _Found:
            pass
        return self.best

    def _dfs(self, pos: int, env: dict, cons: list[Row]):
        order = self.graph.order
        while pos < len(order) and not isinstance(self.graph.nodes[order[pos]].op, ReLU):
            env[order[pos]] = self._linear(order[pos], env)
            pos += 1
        if pos == len(order):
            self._leaf(env[self.graph.sink][0], cons)
            return
        relu = order[pos]
        pre = env[self.graph.nodes[relu].preds[0]]
        zero: Form = ([Fraction(0)] * self.p, Fraction(0))

        def units(k: int, outs: list[Form], cons: list[Row]):
            if k == len(pre):
                self._dfs(pos + 1, {**env, relu: outs}, cons)
                return
            phase = self.stable[relu][k]
            if phase is True:
                units(k + 1, outs + [pre[k]], cons)
            elif phase is False:
                units(k + 1, outs + [zero], cons)
            else:
                for active in (True, False):
                    branch = self._with(cons, pre[k], active)
                    if branch is not None:
                        units(k + 1, outs + [pre[k] if active else zero], branch)

        units(0, [], cons)

    def _leaf(self, sink: Form, cons: list[Row]):
        self.leaves += 1
        result = minimize(self.base + cons, sink[0], sink[1], self.p)
        if result is None:
            return
        value, point = result
        if self.best is None or value < self.best[0]:
            self.best = (value, point)
        if self.stop_negative and value < 0:
            raise _Found


@dataclass(frozen=True)
class OracleResult:
    verdict: Verdict
    minimum: Fraction
    patterns: int
    unstable_units: int


def oracle_minimum(problem: ComposedProblem, cap: int = 20, stop_negative: bool = False) -> OracleResult:
    """Exact minimum of the composed graph over ``W`` with its verdict.

    With ``stop_negative`` the search ends at the first pattern whose exact
    minimum is negative, so ``minimum`` is then only an upper bound.
    """
    start = time.perf_counter()
    graph = lower(problem.graph)
    box = problem.box
    en = _Enumerator(graph, _frac(box.lower), _frac(box.upper), cap, stop_negative)
    best = en.run()
    if best is None:
        raise RuntimeError("no feasible activation pattern; the box cannot be empty")
    value, point = best
    elapsed = (time.perf_counter() - start) * 1e3
    if value >= 0:
        verdict = Satisfied(float(value), en.leaves, elapsed)
    else:
        verdict = make_violation(problem, [float(x) for x in point], en.leaves, elapsed)
    return OracleResult(verdict, value, en.leaves, en.unstable)


def oracle_verify(problem: ComposedProblem, cap: int = 20) -> Verdict:
    """Exact verdict by activation-pattern enumeration (refuses above ``cap`` unstable units)."""
    return oracle_minimum(problem, cap, stop_negative=True).verdict

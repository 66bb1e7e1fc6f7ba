from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import linprog

from hyperspec.compose import scalar_problem
from hyperspec.graph import GraphBuilder, Hyperrectangle, evaluate
from hyperspec.networks import linear, random_mlp
from hyperspec.oracle import (
    OracleCapExceeded, feasible, fourier_motzkin, minimize, oracle_minimum, oracle_verify,
)
from hyperspec.verify import Satisfied, Violated

F = Fraction


def rows_of(a, b):
    return [(tuple(F(float(x)) for x in r), F(float(c))) for r, c in zip(a, b)]


def box_rows(n, lo=-1.0, hi=1.0):
    eye = np.eye(n)
    return np.vstack([eye, -eye]), np.concatenate([np.full(n, hi), np.full(n, -lo)])


class TestFourierMotzkin:
    def test_empty_system(self):
        # x <= 0 and x >= 1
        assert not feasible([((F(1),), F(0)), ((F(-1),), F(-1))], 1)
        assert fourier_motzkin([((F(1),), F(0)), ((F(-1),), F(-1))], 1) is None

    def test_point_polytope(self):
        rows = [((F(1), F(0)), F(1, 2)), ((F(-1), F(0)), F(-1, 2)),
                ((F(0), F(1)), F(0)), ((F(0), F(-1)), F(0))]
        value, point = minimize(rows, (F(3), F(-2)), F(1), 2)
        assert value == F(5, 2) and point == [F(1, 2), F(0)]

    def test_implicit_equality(self):
        # x == y inside the unit square: min of x - y is exactly 0
        a = np.array([[1.0, -1.0], [-1.0, 1.0]])
        ba, bb = box_rows(2, 0.0, 1.0)
        rows = rows_of(np.vstack([a, ba]), np.concatenate([[0.0, 0.0], bb]))
        value, point = minimize(rows, (F(1), F(-1)), F(0), 2)
        assert value == 0 and point[0] == point[1]

    @pytest.mark.parametrize("seed", range(30))
    def test_matches_linprog(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 5))
        extra = int(rng.integers(0, 6))
        a = np.round(rng.normal(size=(extra, n)), 3)
        b = np.round(rng.normal(size=extra), 3)
        ba, bb = box_rows(n)
        A, B = np.vstack([a, ba]), np.concatenate([b, bb])
        c = np.round(rng.normal(size=n), 3)
        ref = linprog(c, A_ub=A, b_ub=B, bounds=[(None, None)] * n, method="highs")
        got = minimize(rows_of(A, B), tuple(F(float(x)) for x in c), F(0), n)
        if ref.status == 2:
            assert got is None
            return
        assert got is not None
        value, point = got
        assert abs(float(value) - ref.fun) < 1e-7
        assert all(sum(F(float(x)) * p for x, p in zip(r, point)) <= F(float(rhs)) for r, rhs in zip(A, B))
        assert sum(F(float(x)) * p for x, p in zip(c, point)) == value

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.tuples(st.integers(-3, 3), st.integers(-3, 3), st.integers(-3, 3)), max_size=6))
    def test_feasibility_matches_linprog(self, extra):
        ba, bb = box_rows(2)
        a = np.array([e[:2] for e in extra], dtype=float).reshape(-1, 2)
        b = np.array([e[2] for e in extra], dtype=float)
        A, B = np.vstack([a, ba]), np.concatenate([b, bb])
        ref = linprog(np.zeros(2), A_ub=A, b_ub=B, bounds=[(None, None)] * 2, method="highs")
        assert feasible(rows_of(A, B), 2) == (ref.status == 0)


class TestOracle:
    def test_affine_only_single_pattern(self):
        g = linear([[1.0, -2.0]], [0.5])
        res = oracle_minimum(scalar_problem(g, Hyperrectangle([0.0, 0.0], [1.0, 1.0])))
        assert res.patterns == 1 and res.unstable_units == 0
        assert res.minimum == F(-3, 2)
        assert isinstance(res.verdict, Violated)
        assert list(res.verdict.witness) == [0.0, 1.0]

    def test_single_relu_two_patterns(self):
        gb = GraphBuilder()
        x = gb.input(1)
        y = gb.affine(gb.concat(gb.relu(x), x), [[1.0, -0.5]], [0.25])
        res = oracle_minimum(scalar_problem(gb.build(y), Hyperrectangle([-1.0], [1.0])))
        assert res.patterns == 2 and res.unstable_units == 1
        # active piece: x/2 + 1/4 >= 1/4; inactive piece: -x/2 + 1/4 >= 1/4
        assert res.minimum == F(1, 4)
        assert isinstance(res.verdict, Satisfied)

    def test_stable_units_are_not_enumerated(self):
        gb = GraphBuilder()
        x = gb.input(1)
        y = gb.relu(gb.affine(x, [[1.0]], [2.0]))
        res = oracle_minimum(scalar_problem(gb.build(y), Hyperrectangle([-1.0], [1.0])))
        assert res.unstable_units == 0 and res.patterns == 1 and res.minimum == 1

    def test_cap_refusal(self):
        g = random_mlp([1, 30, 1], np.random.default_rng(0), scale=3.0)
        problem = scalar_problem(g, Hyperrectangle([-10.0], [10.0]))
        with pytest.raises(OracleCapExceeded, match="cap"):
            oracle_verify(problem, cap=5)

    @pytest.mark.parametrize("seed", range(8))
    def test_minimum_matches_dense_sampling(self, seed):
        rng = np.random.default_rng(seed)
        g = random_mlp([1, 4, 3, 1], rng)
        box = Hyperrectangle([-1.0], [1.0])
        res = oracle_minimum(scalar_problem(g, box))
        grid = np.linspace(-1.0, 1.0, 4001)
        sampled = min(float(evaluate(g, [t])[0]) for t in grid)
        assert float(res.minimum) <= sampled + 1e-12
        # the minimizer is a true point of the graph
        point = [float(v) for v in res.verdict.witness] if isinstance(res.verdict, Violated) else None
        if point is not None:
            assert abs(float(evaluate(g, point)[0]) - float(res.minimum)) < 1e-9

    def test_early_stop_agrees(self):
        g = linear([[1.0]], [-0.5])
        problem = scalar_problem(g, Hyperrectangle([0.0], [1.0]))
        v = oracle_verify(problem)
        assert isinstance(v, Violated) and v.sat_value < 0

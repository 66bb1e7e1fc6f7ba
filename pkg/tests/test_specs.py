import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hyperspec.graph import Hyperrectangle, evaluate, evaluate_batch
from hyperspec.specs import (
    DnfFormula, SpecError, SpecParams, build_dependency_fairness, build_global_robustness_extra_class,
    build_global_robustness_katz, build_lipschitz, build_monotonicity, build_spec, compile_dnf,
    extra_class_formula, params_from_dict,
)

UNIT = Hyperrectangle([0.0], [1.0])


def dnf_value(formula, u):
    return max(min(u[a] - u[b] for a, b in clause) for clause in formula.clauses)


class TestCompileDnf:
    def test_single_atom(self):
        g = compile_dnf(DnfFormula((((0, 1),),), 2))
        assert evaluate(g, [3.0, 1.0])[0] == 2.0

    def test_two_clauses(self):
        f = DnfFormula((((0, 1), (0, 2)), ((1, 0),)), 3)
        assert evaluate(compile_dnf(f), [1.0, 2.0, 0.0])[0] == 1.0
        assert f.holds([1.0, 2.0, 0.0])

    def test_rejects_empty(self):
        with pytest.raises(SpecError):
            DnfFormula((), 2)
        with pytest.raises(SpecError):
            DnfFormula(((),), 2)
        with pytest.raises(SpecError):
            DnfFormula((((0, 5),),), 2)

    @given(st.data())
    @settings(max_examples=60, deadline=None)
    def test_value_and_sign(self, data):
        dim = data.draw(st.integers(2, 5))
        atom = st.tuples(st.integers(0, dim - 1), st.integers(0, dim - 1))
        clauses = data.draw(st.lists(st.lists(atom, min_size=1, max_size=3), min_size=1, max_size=3))
        f = DnfFormula(tuple(tuple(c) for c in clauses), dim)
        g = compile_dnf(f)
        # small integers make every difference exact and produce many ties
        u = np.array(data.draw(st.lists(st.integers(-3, 3), min_size=dim, max_size=dim)), dtype=float)
        value = evaluate(g, u)[0]
        assert value == dnf_value(f, u)
        assert (value >= 0) == f.holds(u)


class TestMonotonicity:
    def test_generator_example(self):
        spec = build_monotonicity(SpecParams(UNIT, 1))
        np.testing.assert_array_equal(evaluate(spec.n_in, [0.7, 0.2]), [0.2, 0.7])

    def test_sat_network(self):
        spec = build_monotonicity(SpecParams(UNIT, 1))
        assert evaluate(spec.n_sat, [0.0, 0.0, 5.0, 3.0])[0] == 2.0
        flipped = build_monotonicity(SpecParams(UNIT, 1, direction="non_decreasing"))
        assert evaluate(flipped.n_sat, [0.0, 0.0, 5.0, 3.0])[0] == -2.0
        assert spec.n_sat.count("affine") == 1 and len(spec.n_sat) == 2

    def test_shape(self):
        dom = Hyperrectangle([0.0, -1.0, 2.0], [1.0, 1.0, 3.0])
        spec = build_monotonicity(SpecParams(dom, 2, input_index=2, output_index=2))
        assert spec.copies == 2 and spec.w_box.dim == 6
        x = evaluate(spec.n_in, [0.5, 0.9, 2.5, 0.1, -0.4, 2.2])
        np.testing.assert_array_equal(x, [0.5, -0.4, 2.5, 0.1, 0.9, 2.2])

    def test_errors(self):
        with pytest.raises(SpecError):
            build_monotonicity(SpecParams(UNIT, 1, input_index=2))
        with pytest.raises(SpecError):
            build_monotonicity(SpecParams(UNIT, 1, output_index=0))
        with pytest.raises(SpecError):
            build_monotonicity(SpecParams(UNIT, 1, direction="sideways"))


class TestRobustness:
    def test_projection_in_generator(self):
        spec = build_global_robustness_katz(SpecParams(UNIT, 1, delta=0.1, epsilon=0.05))
        np.testing.assert_array_equal(evaluate(spec.n_in, [0.95, 0.1]), [0.95, 1.0])

    def test_w_box(self):
        dom = Hyperrectangle([0.0, 1.0], [1.0, 2.0])
        spec = build_global_robustness_katz(SpecParams(dom, 1, delta=0.1, epsilon=0.05))
        np.testing.assert_array_equal(spec.w_box.lower, [0.0, 1.0, -0.1, -0.1])
        np.testing.assert_array_equal(spec.w_box.upper, [1.0, 2.0, 0.1, 0.1])

    def test_sat_network_value(self):
        spec = build_global_robustness_katz(SpecParams(Hyperrectangle([0.0] * 2, [1.0] * 2), 2, delta=0.1, epsilon=0.5))
        # x blocks are ignored; |y1 - y2|_inf = 3
        assert evaluate(spec.n_sat, [0, 0, 0, 0, 1.0, 2.0, 1.0, -1.0])[0] == 0.5 - 3.0

    @pytest.mark.parametrize("delta,eps", [(0.0, 1.0), (-1.0, 1.0), (0.1, 0.0), (0.1, None)])
    def test_errors(self, delta, eps):
        with pytest.raises(SpecError):
            build_global_robustness_katz(SpecParams(UNIT, 1, delta=delta, epsilon=eps))

    @pytest.mark.parametrize(
        "y1,y2,ok",
        [((1, 0, 0), (1, 0, 0), True), ((0, 0, 5), (9, 0, 0), True), ((2, 0, 1), (0, 2, 1), False)],
    )
    def test_extra_class_examples(self, y1, y2, ok):
        spec = build_global_robustness_extra_class(SpecParams(UNIT, 3, delta=0.1))
        value = evaluate(spec.n_sat, [0.0, 0.0, *y1, *y2])[0]
        assert (value >= 0) == ok
        assert spec.output_predicate([np.zeros(1)] * 2, [np.array(y1, float), np.array(y2, float)]) == ok

    def test_extra_class_needs_a_regular_class(self):
        with pytest.raises(SpecError):
            build_global_robustness_extra_class(SpecParams(UNIT, 1, delta=0.1))
        with pytest.raises(SpecError):
            extra_class_formula(1)


class TestLipschitz:
    def test_sat_network(self):
        spec = build_lipschitz(SpecParams(UNIT, 1, lipschitz_constant=2.0))
        assert evaluate(spec.n_sat, [0.0, 1.0, 0.0, 2.0])[0] == 0.0
        spec1 = build_lipschitz(SpecParams(UNIT, 1, lipschitz_constant=1.0))
        assert evaluate(spec1.n_sat, [0.0, 1.0, 0.0, 2.0])[0] == -1.0

    def test_generator_is_identity(self):
        spec = build_lipschitz(SpecParams(UNIT, 1, lipschitz_constant=1.0))
        np.testing.assert_array_equal(evaluate(spec.n_in, [0.3, 0.8]), [0.3, 0.8])

    def test_negative_constant(self):
        with pytest.raises(SpecError):
            build_lipschitz(SpecParams(UNIT, 1, lipschitz_constant=-1.0))


class TestFairness:
    def test_assign(self):
        dom = Hyperrectangle([0.0, 0.0], [10.0, 1.0])
        spec = build_dependency_fairness(SpecParams(dom, 2, num_values=3))
        np.testing.assert_array_equal(evaluate(spec.n_in, [7.0, 0.3]), [1, 0.3, 2, 0.3, 3, 0.3])
        assert spec.n_in.count("affine") == 1

    def test_sat_reads_outputs_only(self):
        dom = Hyperrectangle([0.0, 0.0], [10.0, 1.0])
        spec = build_dependency_fairness(SpecParams(dom, 2, num_values=2))
        same = evaluate(spec.n_sat, [1, 5, 2, 5, 1.0, 0.0, 3.0, 1.0])[0]
        other = evaluate(spec.n_sat, [9, 9, 9, 9, 1.0, 0.0, 3.0, 1.0])[0]
        assert same == other >= 0
        assert evaluate(spec.n_sat, [1, 5, 2, 5, 1.0, 0.0, 1.0, 3.0])[0] < 0

    def test_errors(self):
        with pytest.raises(SpecError):
            build_dependency_fairness(SpecParams(UNIT, 2, num_values=1))


class TestSetExactness:
    """Every generated tuple lies in the described input set."""

    @pytest.mark.parametrize("name", ["monotonicity", "katz", "extra", "lipschitz", "fairness"])
    def test_generated_inputs(self, name, rng):
        dom = Hyperrectangle([0.0, -1.0], [1.0, 2.0])
        spec = {
            "monotonicity": lambda: build_monotonicity(SpecParams(dom, 1, input_index=2)),
            "katz": lambda: build_global_robustness_katz(SpecParams(dom, 1, delta=0.3, epsilon=1.0)),
            "extra": lambda: build_global_robustness_extra_class(SpecParams(dom, 3, delta=0.3)),
            "lipschitz": lambda: build_lipschitz(SpecParams(dom, 1, lipschitz_constant=1.0)),
            "fairness": lambda: build_dependency_fairness(SpecParams(dom, 2, num_values=3)),
        }[name]()
        ws = spec.w_box.sample(rng, 10_000)
        for w, flat in zip(ws, evaluate_batch(spec.n_in, ws)):
            xs = spec.split_inputs(flat)
            assert spec.input_predicate(xs)
            if name == "monotonicity":
                # only coordinate 2 is reordered; the others come from their own copy
                assert xs[0][0] == w[0] and xs[1][0] == w[2]
                assert xs[1][1] >= xs[0][1]
            if name == "katz":
                assert np.max(np.abs(xs[0] - xs[1])) <= 0.3 * (1 + 1e-12)


class TestParsing:
    def test_aliases_and_domain(self):
        name, p = params_from_dict({"spec": "lipschitz", "domain": {"lo": [0, 0], "hi": [1, 1]}, "K": 3}, 2)
        assert name == "lipschitz" and p.lipschitz_constant == 3.0 and p.input_dim == 2
        spec = build_spec({"spec": "dependency_fairness", "domain": {"lo": [0, 0], "hi": [1, 1]}, "A": 2}, 2)
        assert spec.copies == 2

    @pytest.mark.parametrize("desc", [{}, {"spec": "nope", "domain": {"lo": [0], "hi": [1]}}, {"spec": "lipschitz"},
                                      {"spec": "lipschitz", "domain": {"lo": [1], "hi": [0]}}])
    def test_errors(self, desc):
        with pytest.raises(SpecError):
            build_spec(desc, 1)

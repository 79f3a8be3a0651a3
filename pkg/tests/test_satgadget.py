"""Gadget tests: the bump function's exact values, corner correctness
against brute-force CNF evaluation, the wrapping flow, decoding, DIMACS,
and the conditioning demo against independent oracles."""

import math

import numpy as np
import pytest

from flowcond.satgadget import (CnfFormula, GadgetError,
                                GadgetFlow, all_corners, compile_gadget,
                                conditional_sat_demo, decode_assignment,
                                default_output_scale, delta_eps, eval_gadget,
                                load_dimacs, parse_dimacs,
                                random_satisfiable_formula, save_dimacs,
                                to_dimacs, transformed_var, _std_normal_tail)

SINGLE = parse_dimacs("p cnf 3 1\n1 2 3 0\n")
TWO = parse_dimacs("p cnf 3 2\n1 2 3 0\n-1 2 -3 0\n")


class TestBumpFunction:
    @pytest.mark.parametrize("eps", [0.25, 0.3, 0.1])
    def test_exact_values(self, eps):
        assert delta_eps(1.0, eps) == pytest.approx(1.0, abs=1e-12)
        assert delta_eps(1.0 - eps, eps) == 0.0
        assert delta_eps(1.0 + eps, eps) == 0.0
        assert delta_eps(1.0 - eps / 2.0, eps) == pytest.approx(0.5, abs=1e-12)
        assert delta_eps(0.0, eps) == 0.0
        assert delta_eps(5.0, eps) == 0.0

    def test_linear_interpolation_on_support(self):
        eps = 0.25
        xs = np.linspace(1.0 - eps, 1.0 + eps, 11)
        expected = 1.0 - np.abs(xs - 1.0) / eps
        np.testing.assert_allclose(delta_eps(xs, eps), expected, atol=1e-12)

    def test_transformed_variable_endpoints(self):
        eps = 0.25
        assert transformed_var(1.0, eps) == pytest.approx(1.0, abs=1e-12)
        assert transformed_var(-1.0, eps) == pytest.approx(-1.0, abs=1e-12)
        assert transformed_var(0.0, eps) == 0.0

    def test_transformed_variable_dead_zone(self):
        eps = 0.2
        for x in (0.5, -0.5, 1.3, -1.3, 0.0):
            assert transformed_var(x, eps) == 0.0

    def test_transformed_variable_odd(self):
        rng = np.random.default_rng(0)
        a = rng.uniform(-2.0, 2.0, size=20)
        np.testing.assert_allclose(transformed_var(-a, 0.25),
                                   -transformed_var(a, 0.25), atol=1e-12)


class TestCompileAndEval:
    def test_single_clause_satisfying_corner(self):
        g = compile_gadget(SINGLE, 0.25, 7.0)
        assert g.eval(np.array([1.0, 1.0, 1.0])) == pytest.approx(7.0, abs=1e-12)

    def test_single_clause_falsifying_corner(self):
        g = compile_gadget(SINGLE, 0.25, 7.0)
        assert g.eval(np.array([-1.0, -1.0, -1.0])) == 0.0

    def test_dead_interior_is_zero(self):
        g = compile_gadget(SINGLE, 0.25, 7.0)
        assert g.eval(np.array([0.5, 0.5, 0.5])) == 0.0

    def test_interior_band_zero_everywhere(self):
        g = compile_gadget(TWO, 0.25, 5.0)
        rng = np.random.default_rng(1)
        x = rng.uniform(-0.75, 0.75, size=(200, 3))
        np.testing.assert_array_equal(g.eval(x), np.zeros(200))

    @pytest.mark.parametrize("seed", range(5))
    def test_exhaustive_corners_match_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        d = int(rng.integers(3, 11))
        formula = random_satisfiable_formula(d, int(rng.integers(2, 2 * d)), rng)
        big_m = 4.0 + float(rng.uniform(0, 8))
        gadget = compile_gadget(formula, 0.25, big_m)
        corners = all_corners(d)
        values = gadget.eval(corners)
        truth = formula.satisfies(corners)
        np.testing.assert_allclose(
            values, np.where(truth, big_m, 0.0), atol=1e-9)

    def test_output_bounded_by_m(self):
        g = compile_gadget(TWO, 0.3, 5.0)
        rng = np.random.default_rng(2)
        x = rng.uniform(-1.5, 1.5, size=(5000, 3))
        v = g.eval(x)
        assert np.all(v >= 0.0) and np.all(v <= 5.0 + 1e-12)

    def test_half_output_region_at_corrected_width(self):
        # at per-coordinate offset eps^2/(2m) from a satisfying corner the
        # output is still at least M/2 (box corners are the worst case)
        for formula in (SINGLE, TWO):
            eps, big_m = 0.25, 5.0
            m = formula.num_clauses
            w = eps * eps / (2.0 * m)
            gadget = compile_gadget(formula, eps, big_m)
            for a in formula.satisfying_corners():
                probes = a[None, :] + w * all_corners(formula.num_vars)
                rng = np.random.default_rng(3)
                probes = np.vstack([probes,
                                    a + rng.uniform(-w, w, (200, formula.num_vars))])
                assert np.min(gadget.eval(probes)) >= big_m / 2.0 - 1e-9

    def test_repeated_variable_rejected(self):
        formula = CnfFormula(num_vars=3,
                             clauses=(((0, 1), (0, 1), (2, -1)),))
        with pytest.raises(GadgetError, match="repeat"):
            compile_gadget(formula, 0.25, 5.0)

    def test_eps_range_enforced(self):
        with pytest.raises(GadgetError):
            compile_gadget(SINGLE, 1.0 / 3.0, 5.0)
        with pytest.raises(GadgetError):
            compile_gadget(SINGLE, 0.0, 5.0)

    def test_eval_gadget_function_form(self):
        g = compile_gadget(SINGLE, 0.25, 2.0)
        assert eval_gadget(g, np.ones(3)) == pytest.approx(2.0)


class TestDecode:
    def test_within_eps_rounds(self):
        out = decode_assignment(np.array([0.95, -1.02]), 0.1)
        np.testing.assert_array_equal(out, [1.0, -1.0])

    def test_far_coordinate_fails(self):
        assert decode_assignment(np.array([0.5, 1.0]), 0.1) is None

    def test_corners_are_fixed_points(self):
        for d in (2, 4, 6):
            for corner in all_corners(d):
                np.testing.assert_array_equal(
                    decode_assignment(corner, 0.25), corner)


class TestGadgetFlow:
    def test_roundtrip_and_logdet(self):
        flow = GadgetFlow(compile_gadget(TWO, 0.25, 5.0))
        rng = np.random.default_rng(4)
        xz = rng.standard_normal((100, 4))
        back = flow.inverse(flow.forward(xz))
        assert np.max(np.abs(back - xz)) < 1e-12
        assert flow.log_det() == 0.0

    def test_passthrough_coordinates(self):
        flow = GadgetFlow(compile_gadget(TWO, 0.25, 5.0))
        xz = np.random.default_rng(5).standard_normal(4)
        out = flow.forward(xz)
        np.testing.assert_array_equal(out[:3], xz[:3])

    def test_output_shift_is_gadget_value(self):
        gadget = compile_gadget(SINGLE, 0.25, 5.0)
        flow = GadgetFlow(gadget)
        xz = np.array([1.0, 1.0, 1.0, 0.25])
        assert flow.forward(xz)[3] == pytest.approx(0.25 + 5.0, abs=1e-12)


class TestDimacs:
    def test_roundtrip_identity(self):
        rng = np.random.default_rng(6)
        formula = random_satisfiable_formula(7, 9, rng)
        again = parse_dimacs(to_dimacs(formula))
        assert again == formula
        third = parse_dimacs(to_dimacs(again))
        assert third == again

    def test_file_roundtrip(self, tmp_path):
        path = tmp_path / "f.cnf"
        save_dimacs(TWO, path)
        assert load_dimacs(path) == TWO

    def test_comments_and_blank_lines(self):
        f = parse_dimacs("c hi\n\np cnf 3 1\nc mid\n1 -2 3 0\n")
        assert f.num_vars == 3 and f.num_clauses == 1

    def test_bad_problem_line(self):
        with pytest.raises(GadgetError):
            parse_dimacs("p wcnf 3 1\n1 2 3 0\n")

    def test_complementary_literals_rejected(self):
        with pytest.raises(GadgetError, match="negation"):
            parse_dimacs("p cnf 3 1\n1 -1 2 0\n")

    def test_clause_size_enforced(self):
        with pytest.raises(GadgetError):
            parse_dimacs("p cnf 3 1\n1 2 0\n")


class TestConditionalDemo:
    def test_zero_budget_inconclusive(self):
        report = conditional_sat_demo(TWO, sampler_budget=0)
        assert report.status == "inconclusive"
        assert math.isnan(report.success_fraction)

    def test_small_formula_against_quadrature_oracle(self):
        # independent oracle: integrate prior * window over the nonzero
        # region (boxes around satisfying corners); the far region
        # contributes the plain Gaussian window tail
        eps, tau = 0.25, 0.5
        big_m = default_output_scale(TWO)
        gadget = compile_gadget(TWO, eps, big_m)

        def window(f):
            return (_std_normal_tail(big_m - tau - f)
                    - _std_normal_tail(big_m + tau - f))

        n_grid = 61
        good = 0.0
        for a in TWO.satisfying_corners():
            axes = [np.linspace(ai - eps, ai + eps, n_grid) for ai in a]
            grid = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, 3)
            phi = np.exp(-0.5 * np.sum(grid * grid, 1)) / (2 * np.pi) ** 1.5
            cell = (2 * eps / (n_grid - 1)) ** 3
            good += float(np.sum(phi * window(gadget.eval(grid))) * cell)
        bad = float(window(0.0))
        oracle = good / (good + bad)

        report = conditional_sat_demo(TWO, eps=eps, tau=tau,
                                      sampler_budget=200_000,
                                      rng=np.random.default_rng(0))
        assert report.status == "ok"
        assert report.n_sat_corners == 6
        assert report.success_fraction == pytest.approx(oracle, abs=0.05)
        assert report.accept_rate == pytest.approx(good + bad, rel=0.3)

    def test_larger_formula_concentrates(self):
        rng = np.random.default_rng(7)
        formula = random_satisfiable_formula(8, 12, rng)
        report = conditional_sat_demo(formula, sampler_budget=40_000,
                                      rng=np.random.default_rng(1))
        assert report.status == "ok"
        assert report.success_fraction >= 0.99

    def test_unsatisfiable_formula_matches_gaussian_tail(self):
        # all eight sign patterns over three variables: unsatisfiable
        clauses = []
        for bits in range(8):
            clauses.append(tuple(
                (k, 1 if bits >> k & 1 else -1) for k in range(3)))
        formula = CnfFormula(num_vars=3, clauses=tuple(clauses))
        assert len(formula.satisfying_corners()) == 0

        big_m, tau = 2.5, 0.5
        gadget = compile_gadget(formula, 0.25, big_m)
        rng = np.random.default_rng(8)
        assert np.all(gadget.eval(rng.uniform(-2, 2, (20000, 3))) == 0.0)

        report = conditional_sat_demo(formula, big_m=big_m, tau=tau,
                                      sampler_budget=50_000,
                                      rng=np.random.default_rng(2))
        tail = float(_std_normal_tail(big_m - tau) - _std_normal_tail(big_m + tau))
        assert report.accept_rate == pytest.approx(tail, rel=1e-9)
        assert report.success_fraction == 0.0
        assert report.n_sat_corners == 0

    def test_default_scale_formula(self):
        assert default_output_scale(TWO) == pytest.approx(
            4.0 * math.sqrt(3 * math.log(2)))
        with pytest.raises(GadgetError):
            default_output_scale(SINGLE)

    def test_too_many_variables_rejected(self):
        rng = np.random.default_rng(9)
        formula = random_satisfiable_formula(13, 5, rng)
        with pytest.raises(GadgetError, match="12"):
            conditional_sat_demo(formula)

    def test_report_text_has_machine_keys(self):
        report = conditional_sat_demo(TWO, sampler_budget=5000,
                                      rng=np.random.default_rng(3))
        text = report.to_text()
        for key in ("status=", "accept_rate=", "success_fraction=",
                    "n_sat_corners=", "M=", "tau="):
            assert key in text


class TestFormulaValidation:
    def test_variable_out_of_range(self):
        with pytest.raises(GadgetError):
            CnfFormula(num_vars=2, clauses=(((0, 1), (1, 1), (2, 1)),))

    def test_planted_formulas_are_satisfiable(self):
        rng = np.random.default_rng(10)
        for _ in range(10):
            f = random_satisfiable_formula(int(rng.integers(3, 12)),
                                           int(rng.integers(2, 20)), rng)
            assert len(f.satisfying_corners()) >= 1

import math

import numpy as np
import pytest
from scipy import stats

from core import mixability
from core.engine import RaOptions
from core.errors import InputValidationError
from core.marginals import (binomial, cauchy, discrete_uniform, discretize,
                            discretize_all, exponential, normal, pareto, uniform)
from core.mixability import (G_GRID, NORMS, analyze, complete_mixability_rules,
                             detect_mixability, g_inverse, mean_inequality,
                             norm_inequality, one_sided_rule,
                             sufficient_decreasing_density,
                             sufficient_location_scale,
                             sufficient_unimodal_symmetric)


def _by_name(report, name):
    return next(t for t in report.evidence if t.name == name)


class TestNecessaryConditions:
    def test_one_sided_fails_for_pareto(self):
        assert one_sided_rule([pareto(2)] * 3).status == "fail"

    def test_one_sided_mirror_image(self):
        outcome = one_sided_rule([uniform(), normal()])
        assert outcome.status == "pass"
        assert one_sided_rule([exponential(), uniform(-1, 0)]).status == "fail"

    def test_mean_inequality_uniforms(self):
        outcome = mean_inequality([uniform()] * 3)
        assert outcome.status == "pass"
        assert outcome.slack == pytest.approx(0.5)

    def test_mean_inequality_fails(self):
        outcome = mean_inequality([uniform(), uniform(), uniform(0, 5)])
        assert outcome.status == "fail"
        assert outcome.slack == pytest.approx(-1.5)

    def test_mean_inequality_boundary(self):
        outcome = mean_inequality([uniform(0, 2), uniform(), uniform()])
        assert outcome.status == "pass"
        assert outcome.slack == pytest.approx(0.0, abs=1e-12)

    def test_mean_inequality_na_for_infinite_mean(self):
        assert mean_inequality([pareto(1)] * 3).status == "na"

    def test_mean_inequality_na_for_unbounded_below(self):
        assert mean_inequality([normal()] * 3).status == "na"

    def test_norm_inequality_normal_triples(self):
        assert norm_inequality([normal(0, s) for s in (1, 1, 1)], "L2").status == "pass"
        failing = norm_inequality([normal(0, s) for s in (3, 1, 1)], "L2")
        assert failing.status == "fail"
        assert failing.slack == pytest.approx(-1.0)

    def test_norm_inequality_l1(self):
        outcome = norm_inequality([normal(0, s) for s in (2, 1, 1)], "L1")
        assert outcome.status == "pass"
        assert outcome.slack == pytest.approx(0.0, abs=1e-9)

    def test_norm_inequality_range_na_when_unbounded(self):
        assert norm_inequality([normal()] * 3, "range").status == "na"

    def test_unknown_norm(self):
        with pytest.raises(InputValidationError):
            norm_inequality([uniform()] * 3, "Linf")


class TestSufficientConditions:
    @pytest.mark.parametrize("margin", [exponential(), pareto(2)])
    def test_decreasing_density_one_sided(self, margin):
        assert sufficient_decreasing_density([margin] * 3).status == "not_mixable"

    def test_decreasing_density_uniform(self):
        assert sufficient_decreasing_density([uniform()] * 3).status == "mixable"

    def test_decreasing_density_uniform_unbalanced(self):
        assert sufficient_decreasing_density([uniform(), uniform(), uniform(0, 5)]).status == "not_mixable"

    def test_decreasing_density_other_family(self):
        assert sufficient_decreasing_density([normal()] * 3).status == "na"

    def test_location_scale_normals(self):
        assert sufficient_location_scale([normal(0, s) for s in (1, 1, 1)]).status == "mixable"
        outcome = sufficient_location_scale([normal(0, s) for s in (2, 1, 1)])
        assert outcome.status == "mixable" and outcome.slack == pytest.approx(0.0)
        assert outcome.name == "location_scale_normal"
        assert sufficient_location_scale([normal(0, s) for s in (3, 1, 1)]).status == "not_mixable"

    def test_location_scale_mixed_families(self):
        assert sufficient_location_scale([normal(), uniform(-1, 1)]).status == "na"

    def test_g_inverse_solves_equation(self):
        levels = np.array([0.01, 0.1, 0.3, 0.45])
        x = g_inverse(normal(), levels)
        g = stats.norm.cdf(x) - x * stats.norm.pdf(x) - 0.5
        np.testing.assert_allclose(g, levels, atol=1e-8)

    def test_g_inverse_scales_with_sigma(self):
        np.testing.assert_allclose(g_inverse(normal(5, 2), G_GRID), 2 * g_inverse(normal(), G_GRID),
                                   atol=1e-8)

    def test_g_inverse_unreachable_levels_are_infinite(self):
        x = g_inverse(normal(), np.array([0.1, 0.6]))
        assert math.isfinite(x[0]) and x[1] == math.inf
        np.testing.assert_array_equal(g_inverse(uniform(-1, 1), np.array([0.2, 0.7])), [1.0, math.inf])

    def test_g_inverse_cauchy_heavy_tail(self):
        levels = np.array([0.1, 0.3, 0.45])
        x = g_inverse(cauchy(), levels)
        assert np.all(np.isfinite(x)) and np.all(np.diff(x) > 0)
        g = np.arctan(x) / math.pi - x / (math.pi * (1 + x ** 2))
        np.testing.assert_allclose(g, levels, atol=1e-8)

    def test_unimodal_symmetric_cauchy(self):
        outcome = sufficient_unimodal_symmetric([cauchy()] * 3)
        assert outcome.status == "mixable"
        assert math.isfinite(outcome.slack)

    def test_unimodal_symmetric_shared_unreachable_level(self, monkeypatch):
        monkeypatch.setattr(mixability, "G_GRID", np.array([0.1, 0.6]))
        assert sufficient_unimodal_symmetric([normal()] * 3).status == "mixable"
        mixed = sufficient_unimodal_symmetric([normal(), normal(), uniform(-1, 1)])
        assert mixed.status == "mixable"

    def test_unimodal_symmetric_normals(self):
        assert sufficient_unimodal_symmetric([normal()] * 3).status == "mixable"

    def test_unimodal_symmetric_uniforms(self):
        assert sufficient_unimodal_symmetric([uniform(-1, 1)] * 3).status == "mixable"

    def test_unimodal_symmetric_inconclusive(self):
        assert sufficient_unimodal_symmetric([normal(0, s) for s in (3, 1, 1)]).status == "na"

    def test_unimodal_symmetric_rejects_skewed(self):
        with pytest.raises(InputValidationError):
            sufficient_unimodal_symmetric([exponential()] * 3)


class TestCompleteMixability:
    def test_discrete_uniform_on_d_points(self):
        outcome = complete_mixability_rules(discrete_uniform([1, 2, 3, 4, 5]), 5)
        assert outcome.status == "mixable" and outcome.detail == "discrete_uniform"

    def test_binomial(self):
        assert complete_mixability_rules(binomial(4, 0.5), 2).detail == "binomial"
        assert complete_mixability_rules(binomial(4, 0.3), 3).status == "na"

    def test_cauchy(self):
        assert complete_mixability_rules(cauchy(), 2).detail == "cauchy"

    def test_uniform_density_bound(self):
        outcome = complete_mixability_rules(uniform(), 3)
        assert outcome.status == "mixable" and outcome.detail == "density_lower_bound"

    def test_uniform_two_copies(self):
        assert complete_mixability_rules(uniform(), 2).status == "na"

    def test_bad_dimension(self):
        with pytest.raises(InputValidationError):
            complete_mixability_rules(uniform(), 0)


class TestDetection:
    def test_uniform_triple_certificate(self):
        grids = [discretize(uniform(), 9, "shifted")] * 3
        report = detect_mixability(grids, RaOptions(restarts=50))
        assert report.verdict == "mixable"
        assert report.residual <= 1e-12
        assert report.center == pytest.approx(1.5)
        np.testing.assert_allclose(report.certificate.row_sums(), 1.5, atol=1e-12)

    def test_nines_pair(self, nine_points):
        report = detect_mixability([nine_points, nine_points])
        assert report.residual == 0.0
        assert report.center == 10.0

    def test_unbalanced_normals_undecided(self):
        grids = discretize_all([normal(0, 3), normal(), normal()], 100)
        report = detect_mixability(grids, RaOptions(restarts=4))
        assert report.verdict == "undecided"
        assert report.residual > report.threshold

    def test_mismatched_n(self):
        with pytest.raises(InputValidationError):
            detect_mixability([discretize(uniform(), 4), discretize(uniform(), 5)])

    def test_deterministic(self):
        grids = discretize_all([uniform(), uniform(), uniform(0, 2)], 20)
        first = detect_mixability(grids, RaOptions(seed=7, restarts=5))
        second = detect_mixability(grids, RaOptions(seed=7, restarts=5))
        np.testing.assert_array_equal(first.certificate.values, second.certificate.values)
        assert first.residual == second.residual

    def test_residual_vanishes_when_analytically_mixable(self):
        margins = [normal(0, s) for s in (2, 1, 1)]
        assert analyze(margins).verdict == "mixable"
        residuals = []
        for n in (64, 256, 1024):
            report = detect_mixability(discretize_all(margins, n), RaOptions(restarts=2))
            assert report.verdict == "mixable"
            residuals.append(report.residual)
        assert max(residuals) <= 1e-9
        assert residuals[-1] <= residuals[0] + 1e-12

    def test_unbalanced_uniforms_stay_uncertified(self):
        margins = [uniform(), uniform(), uniform(0, 5)]
        assert analyze(margins).verdict == "not_mixable"
        for n in (16, 64):
            report = detect_mixability(discretize_all(margins, n), RaOptions(restarts=4))
            assert report.verdict == "undecided"
            assert report.residual > 1.0


class TestAnalyze:
    def test_boundary_normals(self):
        report = analyze([normal(0, s) for s in (2, 1, 1)])
        assert report.verdict == "mixable"
        assert _by_name(report, "location_scale_normal").slack == pytest.approx(0.0)
        assert report.center == pytest.approx(0.0)

    def test_unbalanced_normals(self):
        report = analyze([normal(0, s) for s in (3, 1, 1)])
        assert report.verdict == "not_mixable"
        assert _by_name(report, "norm_inequality_L2").status == "fail"

    def test_pareto_not_mixable(self):
        report = analyze([pareto(2)] * 3)
        assert report.verdict == "not_mixable"
        assert _by_name(report, "one_sided").status == "fail"

    def test_uniform_center(self):
        report = analyze([uniform()] * 3)
        assert report.verdict == "mixable"
        assert report.center == pytest.approx(1.5)

    def test_two_point_margins_undecided(self):
        margins = [discrete_uniform([0, 1])] * 3
        report = analyze(margins, discretize_all(margins, 4, "shifted"), RaOptions(restarts=10))
        assert report.verdict == "undecided"
        assert report.residual >= 1.0

    def test_detection_upgrades_undecided(self, nine_points):
        margins = [discrete_uniform(range(1, 10))] * 2
        report = analyze(margins, [nine_points, nine_points])
        assert report.verdict == "mixable"
        assert report.center == 10.0
        assert _by_name(report, "detection").status == "mixable"

    def test_evidence_covers_all_norms(self):
        names = {t.name for t in analyze([uniform()] * 3).evidence}
        assert {f"norm_inequality_{n}" for n in NORMS} <= names

    def test_not_mixable_is_never_certified(self):
        """Whenever an analytic test rules mixability out, detection finds no certificate."""
        cases = [
            [uniform(), uniform(), uniform(0, 3)],
            [normal(0, 3), normal(), normal()],
            [exponential()] * 3,
        ]
        for margins in cases:
            assert analyze(margins).verdict == "not_mixable"
            report = detect_mixability(discretize_all(margins, 30), RaOptions(restarts=4))
            assert report.verdict == "undecided"

    def test_empty(self):
        with pytest.raises(InputValidationError):
            analyze([])

    def test_report_serializes(self):
        payload = analyze([uniform()] * 3).to_dict()
        assert payload["verdict"] == "mixable"
        assert all(math.isfinite(e["slack"]) for e in payload["evidence"] if e["slack"] is not None)

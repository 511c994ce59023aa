"""Unit tests for analysis.py module."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from volterra_lab.analysis import (
    ConvergenceStudyError,
    PathCountMismatchError,
    StudySetup,
    YWReport,
    build_yw,
    convergence_study,
    first_moment_bounds,
    l1_distance,
    oracle_refinement_study,
    rate_profile,
    verify_yw_inequalities,
    verify_yw_lemmas,
)
from volterra_lab.kernels import ExpSumKernel, KernelDomainError, SampledKernel
from volterra_lab.levy import StableDriverParams
from volterra_lab.model import ModelCoefficients, affine_coefficients, zero_coefficients

YW = build_yw(10.0, 0.01)


def desk_kernel() -> ExpSumKernel:
    return ExpSumKernel(weights=(0.7, 0.3), rates=(0.5, 3.0))


def desk_coefficients() -> ModelCoefficients:
    return affine_coefficients(a=1.0, kappa=1.0, sigma=0.5, eta=0.3, alpha=1.5)


def setup_for(coeffs: ModelCoefficients, **kwargs: object) -> StudySetup:
    params = {
        "kernel": desk_kernel(),
        "coeffs": coeffs,
        "X0": 1.0,
        "T": 1.0,
        "n_sub": 4,
        "driver": StableDriverParams(alpha=1.5),
    }
    params.update(kwargs)
    return StudySetup(**params)  # type: ignore[arg-type]


class TestYWFunction:
    """Tests for the smoothed absolute value."""

    def test_density_integrates_to_one(self) -> None:
        assert YW.density_integral() == pytest.approx(1.0, rel=1e-10)

    def test_support(self) -> None:
        assert YW.lower == pytest.approx(0.001)
        assert float(YW.d2phi(0.0005)) == 0.0
        assert float(YW.d2phi(0.02)) == 0.0
        assert float(YW.d2phi(0.003)) > 0.0

    def test_slope_limits(self) -> None:
        assert float(YW.dphi(0.0)) == 0.0
        assert float(YW.dphi(0.01)) == pytest.approx(1.0, abs=1e-12)
        assert float(YW.dphi(-0.5)) == pytest.approx(-1.0, abs=1e-12)
        assert float(YW.phi(0.0)) == 0.0

    def test_phi_is_even(self) -> None:
        x = np.linspace(0.0, 0.05, 101)
        np.testing.assert_array_equal(YW.phi(x), YW.phi(-x))

    @settings(max_examples=200, deadline=None)
    @given(st.floats(min_value=-1.0, max_value=1.0, allow_nan=False))
    def test_pointwise_inequalities(self, x: float) -> None:
        phi = float(YW.phi(x))
        assert phi >= -1e-15
        assert abs(x) <= YW.eps + phi + 1e-9
        assert abs(float(YW.dphi(x))) <= 1.0 + 1e-12
        d2 = float(YW.d2phi(x))
        assert d2 >= 0.0
        if d2 > 0.0:
            assert d2 <= 2.0 / (abs(x) * YW.log_delta) + 1e-9

    @pytest.mark.parametrize("delta, eps", [(1.0, 0.1), (0.5, 0.1), (10.0, 0.0), (10.0, 1.0)])
    def test_rejects_bad_parameters(self, delta: float, eps: float) -> None:
        with pytest.raises(ValueError):
            build_yw(delta, eps)


class TestYWVerification:
    """Tests for the randomized inequality and lemma checks."""

    def test_inequalities_hold(self) -> None:
        report = verify_yw_inequalities(YW, samples=20_000, seed=0, threads=2)
        assert report.passed, report.as_dict()
        assert report.samples >= 20_000

    def test_thread_count_does_not_change_the_report(self) -> None:
        one = verify_yw_inequalities(YW, samples=25_000, seed=3, threads=1)
        many = verify_yw_inequalities(YW, samples=25_000, seed=3, threads=4)
        assert one.as_dict() == many.as_dict()

    def test_lemmas_hold_for_the_desk_model(self) -> None:
        report = verify_yw_lemmas(YW, desk_coefficients(), c=1.0, samples=20_000, seed=1)
        assert report.passed, report.as_dict()
        assert report.holder_constant > 0.0
        assert set(report.violations) == {"lemma1_lower", "lemma1_upper", "lemma2_upper"}

    def test_lemma_arguments(self) -> None:
        with pytest.raises(ValueError):
            verify_yw_lemmas(YW, desk_coefficients(), c=0.0, samples=10, seed=0)
        with pytest.raises(ValueError):
            verify_yw_inequalities(YW, samples=0, seed=0)

    def test_reports_add_up(self) -> None:
        a = YWReport(samples=10, violations={"x": 1}, worst_excess={"x": 0.5}, holder_constant=1.0)
        b = YWReport(samples=5, violations={"x": 0, "y": 2}, worst_excess={"x": 0.7, "y": 0.1}, holder_constant=2.0)
        total = a + b
        assert total.samples == 15
        assert total.violations == {"x": 1, "y": 2}
        assert total.worst_excess == {"x": 0.7, "y": 0.1}
        assert total.holder_constant == 2.0
        assert not total.passed


class TestL1Distance:
    """Tests for paired sup-L1 distances."""

    def test_values(self) -> None:
        a = np.array([[0.0, 1.0], [0.0, 3.0]])
        result = l1_distance(a, np.zeros((2, 2)), times=[0.0, 0.5])
        assert result.sup == pytest.approx(2.0)
        assert result.argmax_time == 0.5
        assert result.se == pytest.approx(1.0)
        assert result.n_paths == 2

    def test_flagged_rows_are_dropped(self) -> None:
        a = np.array([[1.0, 1.0], [np.nan, 5.0], [3.0, 3.0]])
        result = l1_distance(a, np.zeros((3, 2)))
        assert result.n_paths == 2
        assert result.sup == pytest.approx(2.0)

    def test_mismatch(self) -> None:
        with pytest.raises(PathCountMismatchError):
            l1_distance(np.zeros((2, 3)), np.zeros((3, 3)))
        with pytest.raises(PathCountMismatchError):
            l1_distance(np.zeros((2, 3)), np.zeros((2, 4)))
        with pytest.raises(PathCountMismatchError):
            l1_distance(np.full((1, 2), np.nan), np.zeros((1, 2)))


class TestProfiles:
    def test_first_moment_bounds_without_growth(self) -> None:
        bounds = first_moment_bounds(0.0, desk_kernel(), 1.0, 2.0)
        assert bounds.constant == 0.0
        assert bounds.xi_bound == pytest.approx(2.0)
        assert bounds.xhat_bound == pytest.approx(2.0)

    def test_first_moment_bounds_grow_with_L(self) -> None:
        low = first_moment_bounds(0.5, desk_kernel(), 1.0, 1.0)
        high = first_moment_bounds(1.0, desk_kernel(), 1.0, 1.0)
        assert high.xi_bound > low.xi_bound > 1.0

    def test_rate_profile(self) -> None:
        kernel = desk_kernel()
        drop = 1.0 - float(kernel.eval(0.25))
        inner, recombination = rate_profile(kernel, 1.0, 4)
        assert inner == pytest.approx(0.5 * (1.0 + 4.0 * drop))
        assert recombination == pytest.approx(0.5 + drop)


class TestConvergenceStudy:
    """Tests for coupled convergence tables."""

    def test_zero_model_has_zero_distances(self) -> None:
        table = convergence_study(setup_for(zero_coefficients()), [2, 4, 8], n_paths=4, master_seed=0)
        frame = table.to_frame()
        assert frame["N"].tolist() == [2, 4, 8]
        for column in ("xi_xhat", "xhat_xbar", "xi_xbar"):
            assert frame[column].tolist() == [0.0, 0.0, 0.0]
        assert [row.cauchy for row in table.rows] == [0.0, 0.0, None]
        assert table.cauchy_non_increasing
        assert table.moment_variation == 0.0
        assert table.as_dict()["metadata"]["finest_substeps"] == 32

    def test_desk_model(self) -> None:
        table = convergence_study(setup_for(desk_coefficients()), [4, 8], n_paths=32, master_seed=5)
        first, last = table.rows
        assert first.cauchy is not None and first.cauchy >= 0.0
        assert last.cauchy is None
        assert all(math.isfinite(row.xi_xhat) for row in table.rows)
        assert first.rate_inner > last.rate_inner

    @pytest.mark.parametrize("levels", [[], [8, 4], [4, 4], [0, 4], [4, 6]])
    def test_rejects_bad_ladders(self, levels: list) -> None:
        with pytest.raises(ValueError):
            convergence_study(setup_for(zero_coefficients()), levels, n_paths=2, master_seed=0)

    def test_flag_rate_limit(self) -> None:
        setup = setup_for(zero_coefficients(), max_flag_rate=0.0)
        with pytest.raises(ConvergenceStudyError):
            convergence_study(setup, [2, 4], n_paths=2, master_seed=0)


class TestOracleRefinement:
    """Tests for the split scheme against the Markovian oracle."""

    def test_zero_model(self) -> None:
        rows = oracle_refinement_study(setup_for(zero_coefficients()), [(2, 4), (4, 4)], n_paths=3, master_seed=0)
        assert [(row.N, row.n_sub) for row in rows] == [(2, 4), (4, 4)]
        assert all(row.distance == 0.0 for row in rows)

    def test_desk_model(self) -> None:
        rows = oracle_refinement_study(setup_for(desk_coefficients()), [(2, 4), (8, 8)], n_paths=32, master_seed=2)
        assert all(math.isfinite(row.distance) and row.flagged == 0 for row in rows)

    def test_rejections(self) -> None:
        with pytest.raises(ValueError):
            oracle_refinement_study(setup_for(zero_coefficients()), [], n_paths=2, master_seed=0)
        with pytest.raises(ValueError):
            oracle_refinement_study(setup_for(zero_coefficients()), [(2, 3), (4, 4)], n_paths=2, master_seed=0)
        sampled = setup_for(zero_coefficients(), kernel=SampledKernel(times=(0.0, 1.0), values=(1.0, 0.5)))
        with pytest.raises(KernelDomainError):
            oracle_refinement_study(sampled, [(2, 4)], n_paths=2, master_seed=0)

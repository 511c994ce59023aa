"""Unit tests for scheme.py module."""

import math

import numpy as np
import pytest
from pytest_mock import MockerFixture

from volterra_lab import scheme
from volterra_lab.kernels import CallableKernel, ExpSumKernel, KernelDomainError, SampledKernel
from volterra_lab.levy import FineGrid, NoiseBundle, StableDriverParams, derive_noise_bundle
from volterra_lab.model import ModelCoefficients, affine_coefficients, zero_coefficients
from volterra_lab.scheme import (
    LedgerRangeError,
    SchemeGrid,
    ZLedger,
    chain_inner_paths,
    compute_barX,
    run_markovian_oracle,
    run_split_scheme,
)


def desk_kernel() -> ExpSumKernel:
    return ExpSumKernel(weights=(0.7, 0.3), rates=(0.5, 3.0))


def desk_coefficients() -> ModelCoefficients:
    return affine_coefficients(a=1.0, kappa=1.0, sigma=0.5, eta=0.3, alpha=1.5)


EXACT = StableDriverParams(alpha=1.5)


class TestSchemeGrid:
    """Tests for node and substep bookkeeping."""

    def test_nodes_and_indices(self) -> None:
        grid = SchemeGrid(T=2.0, N=4, n_sub=3)
        np.testing.assert_allclose(grid.nodes, [0.0, 0.5, 1.0, 1.5, 2.0])
        np.testing.assert_array_equal(grid.node_indices, [0, 3, 6, 9, 12])
        assert grid.n_fine == 12
        assert grid.fine_step == pytest.approx(2.0 / 12)

    def test_locate(self) -> None:
        grid = SchemeGrid(T=1.0, N=4, n_sub=2)
        np.testing.assert_array_equal(grid.locate([0.0, 0.2, 0.25, 0.49, 0.99, 1.0]), [0, 0, 1, 1, 3, 4])

    def test_locate_rejects_outside_times(self) -> None:
        with pytest.raises(ValueError):
            SchemeGrid(T=1.0, N=4, n_sub=2).locate([1.5])

    def test_validation(self) -> None:
        with pytest.raises(ValueError):
            SchemeGrid(T=0.0, N=4, n_sub=2)
        with pytest.raises(ValueError):
            SchemeGrid(T=1.0, N=0, n_sub=2)


class TestSplitScheme:
    """Tests for the splitting scheme."""

    def test_zero_model_stays_at_x0(self) -> None:
        grid = SchemeGrid(T=1.0, N=8, n_sub=4)
        paths = run_split_scheme(desk_kernel(), zero_coefficients(), 1.7, grid, EXACT, n_paths=5, master_seed=3)
        for name in ("xi", "xhat", "xbar"):
            np.testing.assert_array_equal(paths.require(name), np.full((5, grid.n_fine + 1), 1.7))
        np.testing.assert_array_equal(paths.jumps, np.zeros((5, 8)))
        assert paths.flag_count == 0

    def test_nodes_are_glued(self) -> None:
        grid = SchemeGrid(T=1.0, N=8, n_sub=4)
        paths = run_split_scheme(desk_kernel(), desk_coefficients(), 1.0, grid, EXACT, n_paths=16, master_seed=1)
        xhat = paths.require("xhat")
        np.testing.assert_array_equal(xhat[:, grid.node_indices[1:]], paths.xi_left)
        np.testing.assert_array_equal(xhat[:, 0], np.ones(16))
        np.testing.assert_allclose(paths.xi_left - paths.xhat_left, paths.jumps, rtol=1e-12, atol=1e-14)

    def test_non_negative_paths(self) -> None:
        grid = SchemeGrid(T=1.0, N=16, n_sub=8)
        paths = run_split_scheme(desk_kernel(), desk_coefficients(), 0.2, grid, EXACT, n_paths=64, master_seed=7)
        valid = paths.valid
        assert np.all(paths.require("xi")[valid] >= 0.0)
        assert np.min(paths.require("xhat")[valid]) >= -1e-12
        assert np.all(paths.recombination_min[valid] >= -1e-12)

    def test_thread_count_does_not_change_results(self) -> None:
        grid = SchemeGrid(T=1.0, N=4, n_sub=4)
        coeffs = desk_coefficients()
        one = run_split_scheme(desk_kernel(), coeffs, 1.0, grid, EXACT, 10, 42, threads=1, block_size=3)
        many = run_split_scheme(desk_kernel(), coeffs, 1.0, grid, EXACT, 10, 42, threads=4, block_size=3)
        whole = run_split_scheme(desk_kernel(), coeffs, 1.0, grid, EXACT, 10, 42, threads=1, block_size=64)
        for name in ("xi", "xhat", "xbar"):
            np.testing.assert_array_equal(one.require(name), many.require(name))
            np.testing.assert_allclose(one.require(name), whole.require(name), rtol=1e-12, atol=1e-14)
        np.testing.assert_array_equal(one.path_indices, np.arange(10))

    def test_constant_kernel_matches_chained_inner_solver(self) -> None:
        grid = SchemeGrid(T=1.0, N=4, n_sub=8)
        kernel = ExpSumKernel(weights=(1.0,), rates=(0.0,))
        coeffs = desk_coefficients()
        paths = run_split_scheme(kernel, coeffs, 1.0, grid, EXACT, n_paths=6, master_seed=9)
        noise = derive_noise_bundle(9, range(6), grid.fine, EXACT)
        chained = chain_inner_paths(coeffs, 1.0, 1.0, grid, noise)
        np.testing.assert_allclose(paths.require("xi"), chained, rtol=1e-9, atol=1e-9)

    def test_thinned_mode_runs(self) -> None:
        grid = SchemeGrid(T=1.0, N=4, n_sub=4)
        driver = StableDriverParams(alpha=1.5, mode="thinned", threshold=0.1)
        paths = run_split_scheme(
            desk_kernel(), desk_coefficients(), 1.0, grid, driver, 8, 5, keep=("xhat", "xbar", "dz")
        )
        assert paths.xi is None
        assert paths.require("dz").shape == (8, grid.n_fine)
        assert paths.jump_amounts is not None
        np.testing.assert_allclose(compute_barX(desk_kernel(), paths.ledger()), paths.require("xbar"))
        with pytest.raises(ValueError, match="not kept"):
            paths.require("xi")

    def test_evaluate_xhat_matches_the_fine_grid(self) -> None:
        grid = SchemeGrid(T=1.0, N=4, n_sub=4)
        paths = run_split_scheme(desk_kernel(), desk_coefficients(), 1.0, grid, EXACT, n_paths=4, master_seed=2)
        times = grid.fine_times[[0, 3, 4, 9, 16]]
        np.testing.assert_allclose(
            paths.evaluate_xhat(times), paths.require("xhat")[:, [0, 3, 4, 9, 16]], rtol=1e-12, atol=1e-14
        )
        with pytest.raises(ValueError):
            paths.evaluate_xhat([1.5])

    def test_overflow_is_flagged_and_logged(self, mocker: MockerFixture) -> None:
        grid = SchemeGrid(T=1.0, N=2, n_sub=2)
        warning = mocker.patch.object(scheme.flagged_logger, "warning")

        def source(block: range) -> NoiseBundle:
            n = len(block)
            dL = np.zeros((n, grid.n_fine))
            dL[0, 0] = 1e14
            return NoiseBundle(
                grid=grid.fine,
                mode="exact",
                path_indices=np.asarray(block, dtype=np.int64),
                dB=np.zeros((n, grid.n_fine)),
                dL=dL,
            )

        paths = run_split_scheme(desk_kernel(), desk_coefficients(), 1.0, grid, EXACT, 3, 0, noise_source=source)
        np.testing.assert_array_equal(paths.flagged, [True, False, False])
        assert paths.flag_rate == pytest.approx(1.0 / 3.0)
        assert paths.flagged_time[0] == pytest.approx(0.25)
        assert warning.call_count == 1
        assert np.all(np.isfinite(paths.mean_curve("xhat")))

    def test_rejections(self) -> None:
        grid = SchemeGrid(T=1.0, N=4, n_sub=2)
        coeffs = desk_coefficients()
        sampled = SampledKernel(times=(0.0, 1.0), values=(1.0, 0.5))
        with pytest.raises(KernelDomainError):
            run_split_scheme(sampled, coeffs, 1.0, grid, EXACT, 2, 0)
        with pytest.raises(ValueError, match="alpha"):
            run_split_scheme(desk_kernel(), coeffs, 1.0, grid, StableDriverParams(alpha=1.7), 2, 0)
        with pytest.raises(ValueError, match="keep"):
            run_split_scheme(desk_kernel(), coeffs, 1.0, grid, EXACT, 2, 0, keep=("xi", "bogus"))
        with pytest.raises(ValueError):
            run_split_scheme(desk_kernel(), coeffs, -1.0, grid, EXACT, 2, 0)
        with pytest.raises(ValueError):
            run_split_scheme(desk_kernel(), coeffs, 1.0, grid, EXACT, 0, 0)


class TestComputeBarX:
    """Tests for the convolution-form companion."""

    def ledger(self) -> ZLedger:
        rng = np.random.default_rng(12)
        return ZLedger(step=1.0 / 16, x0=0.5, dz=rng.standard_normal((3, 16)) * 0.1)

    def test_recursion_matches_convolution(self) -> None:
        kernel = desk_kernel()
        as_callable = CallableKernel(
            lambda t: 0.7 * np.exp(-0.5 * np.asarray(t)) + 0.3 * np.exp(-3.0 * np.asarray(t)), name="desk-callable"
        )
        ledger = self.ledger()
        np.testing.assert_allclose(compute_barX(kernel, ledger), compute_barX(as_callable, ledger), rtol=1e-12, atol=1e-12)

    def test_direct_sum(self) -> None:
        kernel = desk_kernel()
        ledger = self.ledger()
        m = 5
        expected = 0.5 + sum(float(kernel.eval((m - j) / 16)) * ledger.dz[:, j] for j in range(m))
        np.testing.assert_allclose(compute_barX(kernel, ledger, [m / 16])[:, 0], expected, rtol=1e-12)

    def test_starts_at_x0(self) -> None:
        np.testing.assert_array_equal(compute_barX(desk_kernel(), self.ledger(), [0.0]), np.full((3, 1), 0.5))

    def test_only_ledger_times(self) -> None:
        ledger = self.ledger()
        with pytest.raises(LedgerRangeError):
            compute_barX(desk_kernel(), ledger, [0.03])
        with pytest.raises(LedgerRangeError):
            compute_barX(desk_kernel(), ledger, [2.0])


class TestMarkovianOracle:
    """Tests for the factor-system oracle."""

    def test_degenerates_to_the_inner_chain(self) -> None:
        grid = SchemeGrid(T=1.0, N=4, n_sub=8)
        coeffs = desk_coefficients()
        noise = derive_noise_bundle(21, range(5), grid.fine, EXACT)
        oracle = run_markovian_oracle(ExpSumKernel(weights=(0.8,), rates=(0.0,)), coeffs, 1.0, grid.fine, noise)
        chained = chain_inner_paths(coeffs, 0.8, 1.0, grid, noise)
        np.testing.assert_array_equal(oracle.x, chained)

    def test_thinned_jumps_use_the_kernel_weight(self) -> None:
        grid = SchemeGrid(T=1.0, N=4, n_sub=8)
        coeffs = desk_coefficients()
        driver = StableDriverParams(alpha=1.5, mode="thinned", threshold=0.05)
        noise = derive_noise_bundle(21, range(6), grid.fine, driver)
        assert noise.jump_sizes is not None and np.any(noise.jump_sizes > 0.0)
        oracle = run_markovian_oracle(ExpSumKernel(weights=(2.5,), rates=(0.0,)), coeffs, 1.0, grid.fine, noise)
        chained = chain_inner_paths(coeffs, 2.5, 1.0, grid, noise)
        valid = oracle.valid
        assert valid.any()
        np.testing.assert_allclose(oracle.x[valid], chained[valid], rtol=1e-10, atol=1e-12)

    def test_factor_identity(self) -> None:
        kernel = desk_kernel()
        fine = FineGrid(T=1.0, n_steps=64)
        noise = derive_noise_bundle(4, range(8), fine, EXACT)
        oracle = run_markovian_oracle(kernel, desk_coefficients(), 0.5, fine, noise)
        valid = oracle.valid
        np.testing.assert_allclose(
            oracle.x[valid, -1], 0.5 + oracle.factors[valid] @ kernel.w, rtol=1e-10, atol=1e-12
        )
        assert np.all(oracle.x[valid] >= 0.0)

    def test_requires_expsum_kernel(self) -> None:
        fine = FineGrid(T=1.0, n_steps=4)
        noise = derive_noise_bundle(0, range(1), fine, EXACT)
        with pytest.raises(KernelDomainError):
            run_markovian_oracle(
                SampledKernel(times=(0.0, 1.0), values=(1.0, 0.5)),  # type: ignore[arg-type]
                desk_coefficients(),
                1.0,
                fine,
                noise,
            )

    def test_zero_model(self) -> None:
        fine = FineGrid(T=1.0, n_steps=16)
        noise = derive_noise_bundle(0, range(2), fine, EXACT)
        oracle = run_markovian_oracle(desk_kernel(), zero_coefficients(), 1.25, fine, noise)
        np.testing.assert_array_equal(oracle.x, np.full((2, 17), 1.25))
        assert math.isclose(float(np.max(np.abs(oracle.factors))), 0.0)

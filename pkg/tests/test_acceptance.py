"""Desk-scale acceptance runs.

These take minutes and are deselected by default; run them with
``pytest -m slow``.
"""

import math
from pathlib import Path

import numpy as np
import pytest
from typer.testing import CliRunner

from volterra_lab.analysis import (
    StudySetup,
    build_yw,
    convergence_study,
    oracle_refinement_study,
    verify_yw_inequalities,
    verify_yw_lemmas,
)
from volterra_lab.cli import app
from volterra_lab.kernels import ExpSumKernel
from volterra_lab.levy import StableDriverParams, compensator_mass, derive_noise_bundle, path_rng, sample_stable_increment
from volterra_lab.model import AffineParams, affine_coefficients
from volterra_lab.riccati import (
    RiccatiProblem,
    cir_laplace_closed_form,
    laplace_transform,
    mc_laplace,
    solve_psi,
    solve_psi_factor_ode,
)
from volterra_lab.scheme import SchemeGrid, chain_inner_paths, run_markovian_oracle, run_split_scheme
from volterra_lab.workers import default_threads

pytestmark = pytest.mark.slow

FIXTURES = Path(__file__).parent / "fixtures"

DESK_PARAMS = AffineParams(a=1.0, kappa=1.0, sigma=0.5, eta=0.3, alpha=1.5)
DESK_COEFFS = affine_coefficients(a=1.0, kappa=1.0, sigma=0.5, eta=0.3, alpha=1.5)
DRIVER = StableDriverParams(alpha=1.5)
N_PATHS = 1000
SEED = 42


def desk_kernel() -> ExpSumKernel:
    return ExpSumKernel(weights=(0.7, 0.3), rates=(0.5, 3.0))


def desk_setup(n_sub: int = 16) -> StudySetup:
    return StudySetup(
        kernel=desk_kernel(),
        coeffs=DESK_COEFFS,
        X0=1.0,
        T=1.0,
        n_sub=n_sub,
        driver=DRIVER,
        threads=default_threads(),
    )


class TestSchemeAcceptance:
    """Positivity, moment stability and convergence of the splitting scheme."""

    def test_positivity(self) -> None:
        paths = run_split_scheme(
            desk_kernel(),
            DESK_COEFFS,
            1.0,
            SchemeGrid(T=1.0, N=64, n_sub=16),
            DRIVER,
            N_PATHS,
            SEED,
            threads=default_threads(),
            keep=("xhat",),
        )
        assert float(np.min(paths.require("xhat")[paths.valid])) >= -1e-12
        assert paths.flag_rate < 1e-3

    def test_uniform_moment_bound(self) -> None:
        table = convergence_study(desk_setup(), [16, 64, 256], N_PATHS, SEED)
        moments = [row.moment_xi for row in table.rows]
        assert max(moments) <= 1.25 * moments[0]

    def test_cauchy_contraction(self) -> None:
        table = convergence_study(desk_setup(), [16, 32, 64, 128], N_PATHS, SEED)
        assert [row.cauchy is not None for row in table.rows] == [True, True, True, False]
        assert table.cauchy_non_increasing

    def test_scheme_to_convolution_gap(self) -> None:
        table = convergence_study(desk_setup(), [16, 256], N_PATHS, SEED)
        coarse, fine = table.rows
        assert fine.xhat_xbar <= 0.5 * coarse.xhat_xbar


class TestDriverAcceptance:
    def test_laplace_transform_of_the_driver(self) -> None:
        draws = np.asarray(sample_stable_increment(DRIVER, 1.0, path_rng(SEED, 0), size=1_000_000))
        values = np.exp(-draws)
        estimate = float(np.mean(values))
        se = float(np.std(values, ddof=1) / math.sqrt(values.size))
        assert abs(estimate - math.exp(math.sqrt(2.0))) <= 3.0 * se

    def test_compensator_constant(self) -> None:
        assert abs(compensator_mass(1.5) - 4.0) <= 1e-15


class TestRiccatiAcceptance:
    """Riccati-Volterra solver against independent oracles."""

    def test_classical_cir_oracle(self) -> None:
        params = AffineParams(a=1.0, kappa=1.0, sigma=0.5, eta=0.0, alpha=1.5)
        problem = RiccatiProblem(
            u=-0.5, params=params, kernel=ExpSumKernel(weights=(1.0,), rates=(0.0,)), T=1.0, X0=1.0, h=1e-3
        )
        solution = solve_psi(problem)
        assert float(np.max(np.abs(solution.psi - solve_psi_factor_ode(problem).psi))) <= 1e-6
        closed = cir_laplace_closed_form(a=1.0, kappa=1.0, sigma=0.5, X0=1.0, u=-0.5, T=1.0)
        assert abs(laplace_transform(problem).transform / closed - 1.0) <= 1e-4

    def test_affine_cross_validation(self) -> None:
        problem = RiccatiProblem(u=-0.5, params=DESK_PARAMS, kernel=desk_kernel(), T=1.0, X0=1.0, h=1e-3)
        transform = laplace_transform(problem).transform
        paths = run_split_scheme(
            desk_kernel(),
            DESK_COEFFS,
            1.0,
            SchemeGrid(T=1.0, N=128, n_sub=16),
            DRIVER,
            10_000,
            SEED,
            threads=default_threads(),
            keep=("xhat",),
        )
        estimate, se = mc_laplace(paths, -0.5)
        assert abs(estimate - transform) <= 3.0 * se


class TestYamadaWatanabeAcceptance:
    def test_suite_has_no_violations(self) -> None:
        yw = build_yw(100.0, 0.01)
        threads = default_threads()
        inequalities = verify_yw_inequalities(yw, 100_000, SEED, threads=threads)
        lemmas = verify_yw_lemmas(yw, DESK_COEFFS, 1.0, 100_000, SEED, threads=threads)
        assert inequalities.total_violations == 0, inequalities.as_dict()
        assert lemmas.total_violations == 0, lemmas.as_dict()


class TestOracleAcceptance:
    """Split scheme against the Markovian factor system."""

    def test_one_factor_without_decay_is_the_inner_chain(self) -> None:
        grid = SchemeGrid(T=1.0, N=16, n_sub=16)
        noise = derive_noise_bundle(SEED, range(200), grid.fine, DRIVER)
        oracle = run_markovian_oracle(ExpSumKernel(weights=(1.0,), rates=(0.0,)), DESK_COEFFS, 1.0, grid.fine, noise)
        np.testing.assert_array_equal(oracle.x, chain_inner_paths(DESK_COEFFS, 1.0, 1.0, grid, noise))

    def test_refinement_in_substeps(self) -> None:
        rows = oracle_refinement_study(desk_setup(), [(16, 4), (16, 8), (16, 16)], N_PATHS, SEED)
        for coarse, fine in zip(rows, rows[1:]):
            assert fine.distance <= 0.5 * coarse.distance + 2.0 * max(coarse.se, fine.se)
        assert rows[-1].distance < rows[0].distance


class TestDeterminismAcceptance:
    def test_byte_identical_across_thread_counts(self, tmp_path: Path) -> None:
        runner = CliRunner()
        config = str(FIXTURES / "desk-config.json")
        outputs = []
        for threads in ("1", "8", "8"):
            out = tmp_path / f"run-{len(outputs)}"
            result = runner.invoke(app, ["simulate", "-c", config, "-o", str(out), "--threads", threads])
            assert result.exit_code == 0, result.output
            outputs.append(out)
        for name in ("paths.csv", "summary.json"):
            reference = (outputs[0] / name).read_bytes()
            assert all((out / name).read_bytes() == reference for out in outputs[1:])

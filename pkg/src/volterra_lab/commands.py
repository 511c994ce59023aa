"""Command bodies behind the CLI.

Each command takes a validated :class:`RunConfig` and an output directory,
writes its artifacts and returns a response dict::

    {"status": "success" | "failure" | "error", "message": str, "data": dict, "artifacts": [str]}

``failure`` means a check did not pass, ``error`` that the inputs were
rejected. Commands never raise.
"""

import logging
import math
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

import numpy as np
from opentelemetry import trace
from scipy import stats

from volterra_lab import __version__
from volterra_lab.analysis import (
    ConvergenceStudyError,
    build_yw,
    convergence_study,
    oracle_refinement_study,
    verify_yw_inequalities,
    verify_yw_lemmas,
)
from volterra_lab.config import ConfigError, RunConfig
from volterra_lab.kernels import (
    KernelDomainError,
    NonNegCertificate,
    check_complete_monotonicity,
    exhaustive_nonneg_search,
    search_nonneg_counterexample,
)
from volterra_lab.levy import (
    StableDriverParams,
    compensator_mass,
    derive_noise_bundle,
    noise_to_frame,
    path_rng,
    sample_stable_increment,
    stable_laplace_exponent,
)
from volterra_lab.model import validate_assumptions
from volterra_lab.reporting import RunMetadata, paths_frame, summarize_paths, write_csv, write_json
from volterra_lab.riccati import (
    RiccatiBlowUpError,
    RiccatiConvergenceError,
    RiccatiProblem,
    laplace_transform,
    mc_laplace,
    solve_psi_factor_ode,
)
from volterra_lab.scheme import run_split_scheme

logger: logging.Logger = logging.getLogger(__name__)
tracer = trace.get_tracer(__name__)

ResponseDict = Dict[str, Any]
CommandFn = Callable[[RunConfig, Path], ResponseDict]

POSITIVITY_TOL: float = 1e-12
Z_LIMIT: float = 3.0
KS_MIN_PVALUE: float = 1e-3

EXIT_CODES: Dict[str, int] = {"success": 0, "failure": 1, "error": 2}


def _meta(config: RunConfig) -> RunMetadata:
    return RunMetadata(config=config.echo(), seed=config.seed, version=__version__)


def _response(status: str, message: str, data: Dict[str, Any], artifacts: List[Path]) -> ResponseDict:
    return {"status": status, "message": message, "data": data, "artifacts": [str(p) for p in artifacts]}


def _z_score(estimate: float, expected: float, se: float) -> float:
    if se > 0.0:
        return (estimate - expected) / se
    return 0.0 if estimate == expected else math.copysign(math.inf, estimate - expected)


def run_command(name: str, command: CommandFn, config: RunConfig, out_dir: Path) -> ResponseDict:
    """Run ``command`` and turn exceptions into ``error`` / ``failure`` responses."""
    with tracer.start_as_current_span(f"cmd_{name}") as span:
        span.set_attribute("run.seed", config.seed)
        try:
            response = command(config, Path(out_dir))
        except (ConvergenceStudyError, RiccatiBlowUpError, RiccatiConvergenceError) as e:
            logger.warning("%s failed: %s", name, e)
            response = _response("failure", str(e), {}, [])
        except (ConfigError, KernelDomainError, ValueError) as e:
            logger.error("%s rejected its inputs: %s", name, e)
            response = _response("error", str(e), {}, [])
        except Exception as e:
            logger.exception("%s crashed", name)
            response = _response("error", f"Unexpected error: {e}", {}, [])
        span.set_attribute("run.status", response["status"])
    return response


def cmd_kernel_check(config: RunConfig, out_dir: Path) -> ResponseDict:
    """Complete-monotonicity scan and non-negativity counterexample search."""
    section = config.kernel_check
    kernel = config.to_kernel()
    T = section.T if section.T is not None else config.grid.T

    cm = check_complete_monotonicity(kernel, T, max_order=section.max_order, grid_size=section.grid_size)
    certificate = search_nonneg_counterexample(kernel, section.M, T, section.trials, seed=section.search_seed)
    exhaustive: Optional[NonNegCertificate] = None
    if section.exhaustive is not None:
        exhaustive = exhaustive_nonneg_search(
            kernel, section.exhaustive.time_lattice, section.exhaustive.x_lattice, section.exhaustive.M, T
        )
    norms = kernel.sup_norms(T)
    passed = cm.passed and certificate is None and exhaustive is None
    payload: Dict[str, Any] = {
        "kernel": kernel.describe(),
        "T": T,
        "passed": passed,
        "schemable": kernel.schemable,
        "complete_monotonicity": cm.as_dict(),
        "nonneg_search": {
            "M": section.M,
            "trials": section.trials,
            "seed": section.search_seed,
            "certificate": None if certificate is None else certificate.as_dict(),
        },
        "exhaustive_search": None
        if section.exhaustive is None
        else {"certificate": None if exhaustive is None else exhaustive.as_dict()},
        "norms": vars(norms),
    }
    artifact = write_json(out_dir, "kernel_check.json", payload, _meta(config))

    if passed:
        return _response("success", "All kernel checks passed.", payload, [artifact])
    problems = []
    first = cm.first_violation
    if first is not None:
        problems.append(f"CM violation of order {first.order} at t={first.time:.6g}")
    for label, cert in (("search", certificate), ("exhaustive", exhaustive)):
        if cert is not None:
            problems.append(f"{label} counterexample at t={cert.violation_time:.6g} (value {cert.violation_value:.3e})")
    return _response("failure", "; ".join(problems), payload, [artifact])


def cmd_simulate(config: RunConfig, out_dir: Path) -> ResponseDict:
    """Split-scheme paths, positivity summary and optional noise dump."""
    section = config.simulate
    coeffs = config.to_coeffs()
    driver = config.to_driver()
    grid = config.to_grid()
    paths = run_split_scheme(
        config.to_kernel(),
        coeffs,
        config.X0,
        grid,
        driver,
        config.n_paths,
        config.seed,
        threads=config.resolved_threads,
        block_size=config.block_size,
        keep=section.keep,
    )
    meta = _meta(config)
    summary = summarize_paths(paths, validate_assumptions(coeffs, seed=config.seed))
    artifacts: List[Path] = []

    dumped = [name for name in ("xi", "xhat", "xbar") if name in section.keep]
    artifacts.append(write_csv(out_dir, "paths.csv", paths_frame(paths, dumped, limit=section.dump_paths), meta))
    count = min(section.dump_paths, config.n_paths)
    if section.write_noise and count > 0:
        noise = derive_noise_bundle(config.seed, range(count), grid.fine, driver)
        artifacts.append(write_csv(out_dir, "noise.csv", noise_to_frame(noise), meta))

    positivity: Optional[float] = summary.get("positivity_min")
    summary["checks"] = {
        "positivity": positivity is None or positivity >= -POSITIVITY_TOL,
        "flag_rate": paths.flag_rate < config.max_flag_rate,
    }
    artifacts.append(write_json(out_dir, "summary.json", summary, meta))

    if all(summary["checks"].values()):
        return _response("success", f"Simulated {config.n_paths} paths on N={grid.N}.", summary, artifacts)
    failed = sorted(k for k, ok in summary["checks"].items() if not ok)
    return _response("failure", f"Simulation checks failed: {', '.join(failed)}.", summary, artifacts)


def cmd_converge(config: RunConfig, out_dir: Path) -> ResponseDict:
    """Coupled convergence table, Yamada-Watanabe suite and optional oracle ladder."""
    setup = config.to_setup()
    meta = _meta(config)
    table = convergence_study(setup, config.grid.N_list, config.n_paths, config.seed)
    artifacts = [
        write_csv(out_dir, "convergence.csv", table.to_frame(), meta),
        write_json(out_dir, "convergence.json", table.as_dict(), meta),
    ]
    data: Dict[str, Any] = {
        "table": [vars(row) for row in table.rows],
        "cauchy_non_increasing": table.cauchy_non_increasing,
        "moment_variation": table.moment_variation,
    }
    passed = table.cauchy_non_increasing

    if config.yw.run:
        yw_section = config.yw
        yw = build_yw(yw_section.delta, yw_section.eps)
        threads = config.resolved_threads
        inequalities = verify_yw_inequalities(yw, yw_section.samples, config.seed, threads=threads)
        lemmas = verify_yw_lemmas(
            yw, setup.coeffs, yw_section.c, yw_section.samples, config.seed, m=yw_section.m, threads=threads
        )
        yw_payload = {
            "delta": yw_section.delta,
            "eps": yw_section.eps,
            "inequalities": inequalities.as_dict(),
            "lemmas": lemmas.as_dict(),
        }
        artifacts.append(write_json(out_dir, "yw.json", yw_payload, meta))
        data["yw_violations"] = inequalities.total_violations + lemmas.total_violations
        passed = passed and inequalities.passed and lemmas.passed

    if config.oracle.ladder:
        n_paths = config.oracle.n_paths or config.n_paths
        ladder = [(int(N), int(n_sub)) for N, n_sub in config.oracle.ladder]
        rows = oracle_refinement_study(setup, ladder, n_paths, config.seed)
        frame = [vars(row) for row in rows]
        artifacts.append(write_json(out_dir, "oracle.json", {"rows": frame}, meta))
        data["oracle"] = frame

    if passed:
        return _response("success", f"Convergence study over N={config.grid.N_list} done.", data, artifacts)
    return _response("failure", "Convergence checks failed.", data, artifacts)


def cmd_laplace(config: RunConfig, out_dir: Path) -> ResponseDict:
    """Riccati-Volterra transform, optionally cross-checked against Monte Carlo."""
    section = config.laplace
    coeffs = config.to_coeffs()
    if coeffs.affine is None:
        raise ConfigError("laplace needs the alpha_cir model.")
    kernel = config.to_kernel()
    f_input = tuple(section.f) if isinstance(section.f, list) else float(section.f)
    problem = RiccatiProblem(
        u=section.u, params=coeffs.affine, kernel=kernel, T=config.grid.T, X0=config.X0, f=f_input, h=section.h
    )
    result = laplace_transform(problem)
    payload: Dict[str, Any] = {
        "u": section.u,
        "psi_grid": {"times": result.solution.times, "psi": result.solution.psi},
        "Y0": result.Y0,
        "transform": result.transform,
        "solver": {
            "method": result.solution.method,
            "iterations": result.solution.iterations,
            "max_node_iterations": result.solution.max_node_iterations,
            "residual": result.solution.residual,
            "psi_nonpositive": result.solution.nonpositive,
        },
        "mc_estimate": None,
        "mc_se": None,
        "z_score": None,
    }
    if kernel.schemable:
        factor = solve_psi_factor_ode(problem)
        payload["factor_ode_max_diff"] = float(np.max(np.abs(factor.psi - result.solution.psi)))

    passed = True
    if section.monte_carlo:
        grid = config.to_grid(section.N)
        paths = run_split_scheme(
            kernel,
            coeffs,
            config.X0,
            grid,
            config.to_driver(),
            config.n_paths,
            config.seed,
            threads=config.resolved_threads,
            block_size=config.block_size,
            keep=("xhat",),
        )
        if isinstance(f_input, tuple):
            estimate, se = mc_laplace(paths, section.u, problem.f_values, f_times=problem.times)
        else:
            estimate, se = mc_laplace(paths, section.u, f_input)
        z = _z_score(estimate, result.transform, se)
        payload.update({"mc_estimate": estimate, "mc_se": se, "z_score": z, "mc_N": grid.N, "mc_flagged": paths.flag_count})
        passed = abs(z) <= Z_LIMIT

    artifact = write_json(out_dir, "laplace.json", payload, _meta(config))
    message = f"exp(Y0) = {result.transform:.10g}"
    if payload["z_score"] is not None:
        message += f", Monte Carlo z = {payload['z_score']:.3g}"
    summary = {k: v for k, v in payload.items() if k != "psi_grid"}
    return _response("success" if passed else "failure", message, summary, [artifact])


def cmd_stable_test(config: RunConfig, out_dir: Path) -> ResponseDict:
    """Laplace transform z-scores, compensator mass and a self-similarity KS test of the driver."""
    section = config.stable_test
    alpha = config.model.alpha
    params = StableDriverParams(alpha=alpha)
    draws = np.asarray(sample_stable_increment(params, section.dt, path_rng(config.seed, 0), size=section.draws))

    laplace_rows = []
    for u in section.u_values:
        values = np.exp(u * draws)
        estimate = float(np.mean(values))
        se = float(np.std(values, ddof=1) / math.sqrt(values.size))
        expected = math.exp(stable_laplace_exponent(alpha, u, section.dt))
        laplace_rows.append(
            {"u": u, "expected": expected, "estimate": estimate, "se": se, "z_score": _z_score(estimate, expected, se)}
        )

    # L_2 has the law of 2^(1/alpha) L_1
    doubled = np.asarray(sample_stable_increment(params, 2.0, path_rng(config.seed, 1), size=section.ks_draws))
    rescaled = 2.0 ** (1.0 / alpha) * np.asarray(
        sample_stable_increment(params, 1.0, path_rng(config.seed, 2), size=section.ks_draws)
    )
    ks = stats.ks_2samp(doubled, rescaled)

    payload: Dict[str, Any] = {
        "alpha": alpha,
        "dt": section.dt,
        "draws": section.draws,
        "sample_mean": float(np.mean(draws)),
        "laplace": laplace_rows,
        "compensator_mass": compensator_mass(alpha),
        "self_similarity": {"statistic": float(ks.statistic), "pvalue": float(ks.pvalue), "draws": section.ks_draws},
    }
    artifact = write_json(out_dir, "stable_test.json", payload, _meta(config))

    worst = max((abs(row["z_score"]) for row in laplace_rows), default=0.0)
    passed = worst <= Z_LIMIT and float(ks.pvalue) >= KS_MIN_PVALUE
    message = f"max |z| = {worst:.3g}, KS p-value = {float(ks.pvalue):.3g}"
    return _response("success" if passed else "failure", message, payload, [artifact])


COMMANDS: Dict[str, CommandFn] = {
    "kernel-check": cmd_kernel_check,
    "simulate": cmd_simulate,
    "converge": cmd_converge,
    "laplace": cmd_laplace,
    "stable-test": cmd_stable_test,
}

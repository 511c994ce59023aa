"""Non-negativity preserving splitting scheme and its Markovian oracle.

On each coarse interval [t_k, t_{k+1}) the inner SDE with constant kernel
K(0) is solved from the recombined left limit

    Xhat_{t_{k+1}-} = X0 + sum_{j<=k} J_j K(t_{k+1} - t_j) / K(0),

where J_j = xi_{t_j-} - Xhat_{t_j-} is the jump ledger. At every node the
recombined process is glued to the inner chain, Xhat_{t_k} = xi_{t_k-}.
The convolution-form companion Xbar = X0 + int K(t - s) dZ_s is rebuilt from
the per-substep Z increments.

Public API
- SchemeGrid, SchemePaths, ZLedger, OracleResult
- run_split_scheme(kernel, coeffs, X0, grid, driver, n_paths, master_seed, ...)
- compute_barX(kernel, ledger, eval_times)
- run_markovian_oracle(kernel, coeffs, X0, grid, noise)
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import partial
from typing import Callable, Collection, List, Optional, Sequence, Union

import numpy as np
from numpy.typing import ArrayLike, NDArray
from opentelemetry import trace
from scipy import signal

from volterra_lab.cache import KernelTables, kernel_table_cache
from volterra_lab.inner_sde import (
    OVERFLOW_GUARD,
    InnerSolveConfig,
    NegativityDiagnostics,
    solve_inner,
    substep_increment,
)
from volterra_lab.kernels import ExpSumKernel, Kernel, KernelDomainError, check_complete_monotonicity
from volterra_lab.levy import FineGrid, NoiseBundle, StableDriverParams, derive_noise_bundle
from volterra_lab.model import ModelCoefficients
from volterra_lab.observability import FLAGGED_PATH_LOGGER_NAME
from volterra_lab.workers import DEFAULT_BLOCK_SIZE, map_blocks, split_blocks

logger: logging.Logger = logging.getLogger(__name__)
flagged_logger: logging.Logger = logging.getLogger(FLAGGED_PATH_LOGGER_NAME)
tracer = trace.get_tracer(__name__)

FloatArray = NDArray[np.float64]
NoiseSource = Callable[[range], NoiseBundle]

KEEP_OPTIONS = frozenset({"xi", "xhat", "xbar", "dz"})
DEFAULT_KEEP = ("xi", "xhat", "xbar")


class LedgerRangeError(ValueError):
    """Raised when Xbar is requested outside the ledger or between ledger times."""


@dataclass(frozen=True)
class SchemeGrid:
    """Coarse nodes t_k = k T / N, each interval split into ``n_sub`` substeps."""

    T: float
    N: int
    n_sub: int

    def __post_init__(self) -> None:
        if not self.T > 0:
            raise ValueError(f"T must be positive, got {self.T}.")
        if self.N < 1 or self.n_sub < 1:
            raise ValueError(f"N and n_sub must be >= 1, got N={self.N}, n_sub={self.n_sub}.")

    @property
    def coarse_step(self) -> float:
        return self.T / self.N

    @property
    def n_fine(self) -> int:
        return self.N * self.n_sub

    @property
    def fine(self) -> FineGrid:
        return FineGrid(T=self.T, n_steps=self.n_fine)

    @property
    def fine_step(self) -> float:
        return self.T / self.n_fine

    @property
    def nodes(self) -> FloatArray:
        return self.T * np.arange(self.N + 1, dtype=np.float64) / self.N

    @property
    def fine_times(self) -> FloatArray:
        return self.fine.times

    @property
    def node_indices(self) -> NDArray[np.int64]:
        """Fine-grid index of every coarse node."""
        return self.n_sub * np.arange(self.N + 1, dtype=np.int64)

    def locate(self, t: ArrayLike) -> NDArray[np.int64]:
        """nu(t, N): the k with t in [t_k, t_{k+1}); t = T maps to N."""
        arr = np.asarray(t, dtype=np.float64)
        if np.any(arr < 0.0) or np.any(arr > self.T):
            raise ValueError(f"Times must lie in [0, {self.T}].")
        nodes = self.nodes
        k = np.clip(np.floor(arr * self.N / self.T).astype(np.int64), 0, self.N)
        k = np.where(nodes[k] > arr, k - 1, k)
        nxt = np.clip(k + 1, 0, self.N)
        k = np.where((k < self.N) & (nodes[nxt] <= arr), nxt, k)
        return np.asarray(k, dtype=np.int64)


@dataclass(frozen=True)
class ZLedger:
    """Per-substep Z increments starting at s_i = i * step.

    ``dz`` holds mu h + sigma dB + (gamma dL or the compensating drift); in
    thinned mode the large-jump amounts gamma(xi_{tau-}) dL_tau are kept
    separately with their absolute event times.
    """

    step: float
    x0: float
    dz: FloatArray
    jump_times: Optional[FloatArray] = None
    jump_amounts: Optional[FloatArray] = None

    @property
    def n_steps(self) -> int:
        return int(self.dz.shape[1])

    @property
    def n_paths(self) -> int:
        return int(self.dz.shape[0])

    @property
    def times(self) -> FloatArray:
        return self.step * np.arange(self.n_steps + 1, dtype=np.float64)


def _ledger_indices(ledger: ZLedger, eval_times: Optional[ArrayLike]) -> NDArray[np.int64]:
    if eval_times is None:
        return np.arange(ledger.n_steps + 1, dtype=np.int64)
    times = np.atleast_1d(np.asarray(eval_times, dtype=np.float64))
    idx = np.rint(times / ledger.step).astype(np.int64)
    if np.any(idx < 0) or np.any(idx > ledger.n_steps):
        raise LedgerRangeError(f"Evaluation times must lie in [0, {ledger.n_steps * ledger.step}].")
    off_grid = np.abs(idx * ledger.step - times) > 1e-9 * np.maximum(1.0, np.abs(times))
    if np.any(off_grid):
        raise LedgerRangeError(f"Xbar is only available at ledger times; got {times[off_grid][0]}.")
    return idx


def compute_barX(kernel: Kernel, ledger: ZLedger, eval_times: Optional[ArrayLike] = None) -> FloatArray:
    """Xbar_t = X0 + sum_{s_j < t} K(t - s_j) dZ_j at ledger times, shape (paths, times).

    Sums of exponentials go through the factor recursion
    F_m = exp(-lambda h) (F_{m-1} + dZ_{m-1}), with thinned-mode jumps weighted
    at their exact event times. Other kernels are convolved with the lag table
    and their jumps are weighted at the substep start.
    """
    idx = _ledger_indices(ledger, eval_times)
    n, h = ledger.n_steps, ledger.step
    if n == 0:
        return np.full((ledger.n_paths, idx.size), ledger.x0)

    has_jumps = ledger.jump_amounts is not None and ledger.jump_times is not None and ledger.jump_amounts.shape[2] > 0
    if isinstance(kernel, ExpSumKernel):
        out = np.full((ledger.n_paths, n + 1), ledger.x0)
        padded = np.zeros((ledger.n_paths, n + 1))
        starts = h * np.arange(n, dtype=np.float64)
        for w_l, lam_l in zip(kernel.weights, kernel.rates):
            decay = float(np.exp(-lam_l * h))
            padded[:, :n] = ledger.dz
            if has_jumps:
                assert ledger.jump_times is not None and ledger.jump_amounts is not None
                lag = np.where(np.isfinite(ledger.jump_times), ledger.jump_times - starts[None, :, None], 0.0)
                padded[:, :n] += np.sum(ledger.jump_amounts * np.exp(lam_l * lag), axis=2)
            factor = signal.lfilter([0.0, decay], [1.0, -decay], padded, axis=1)
            out += w_l * factor
        return np.asarray(out[:, idx], dtype=np.float64)

    increments = ledger.dz.copy()
    if has_jumps:
        assert ledger.jump_amounts is not None
        increments += np.sum(ledger.jump_amounts, axis=2)
    lags = np.asarray(kernel.eval(h * np.arange(n + 1, dtype=np.float64)), dtype=np.float64)
    lags[0] = 0.0
    conv = signal.fftconvolve(increments, lags[None, :], axes=1)[:, : n + 1]
    return np.asarray(ledger.x0 + conv[:, idx], dtype=np.float64)


@dataclass
class SchemePaths:
    """All paths of one split-scheme run.

    Fine-grid arrays have n_fine + 1 columns. ``xi[:, i]`` is the inner chain
    at s_i (the restarted value at interior nodes, the left limit at T);
    ``xhat`` is glued, so its node columns equal ``xi_left``. Coarse arrays
    have N columns, column k - 1 belonging to node t_k.
    """

    grid: SchemeGrid
    kernel: Kernel
    x0: float
    master_seed: int
    path_indices: NDArray[np.int64]
    jumps: FloatArray
    xhat_left: FloatArray
    xi_left: FloatArray
    flagged: NDArray[np.bool_]
    flagged_time: FloatArray
    prefloor_min: FloatArray
    floor_events: NDArray[np.int64]
    recombination_min: FloatArray
    xi: Optional[FloatArray] = None
    xhat: Optional[FloatArray] = None
    xbar: Optional[FloatArray] = None
    dz: Optional[FloatArray] = None
    jump_times: Optional[FloatArray] = None
    jump_amounts: Optional[FloatArray] = None
    kernel_checks_waived: bool = False

    @property
    def n_paths(self) -> int:
        return int(self.path_indices.size)

    @property
    def valid(self) -> NDArray[np.bool_]:
        return ~self.flagged

    @property
    def flag_count(self) -> int:
        return int(np.sum(self.flagged))

    @property
    def flag_rate(self) -> float:
        return self.flag_count / max(self.n_paths, 1)

    def require(self, name: str) -> FloatArray:
        values = getattr(self, name)
        if values is None:
            raise ValueError(f"Array {name!r} was not kept by this run.")
        return np.asarray(values, dtype=np.float64)

    def mean_curve(self, name: str) -> FloatArray:
        """Mean over unflagged paths at every fine-grid time."""
        values = self.require(name)[self.valid]
        if values.shape[0] == 0:
            return np.full(values.shape[1], np.nan)
        return np.asarray(np.mean(values, axis=0), dtype=np.float64)

    def ledger(self) -> ZLedger:
        return ZLedger(
            step=self.grid.fine_step,
            x0=self.x0,
            dz=self.require("dz"),
            jump_times=self.jump_times,
            jump_amounts=self.jump_amounts,
        )

    def evaluate_xhat(self, t: ArrayLike) -> FloatArray:
        """Recombined process at arbitrary times in [0, T], shape (paths, times)."""
        times = np.atleast_1d(np.asarray(t, dtype=np.float64))
        if np.any(times < 0.0) or np.any(times > self.grid.T):
            raise ValueError(f"Times must lie in [0, {self.grid.T}].")
        nodes = self.grid.nodes[1:]
        lag = times[:, None] - nodes[None, :]
        weights = np.where(lag >= 0.0, self.kernel.eval(np.maximum(lag, 0.0)), 0.0) / self.kernel.k0
        values = self.x0 + self.jumps @ weights.T
        # glue exactly at the nodes
        k = self.grid.locate(times)
        on_node = (k >= 1) & (self.grid.nodes[k] == times)
        values[:, on_node] = self.xi_left[:, k[on_node] - 1]
        return np.asarray(values, dtype=np.float64)

    @classmethod
    def concatenate(cls, parts: Sequence["SchemePaths"]) -> "SchemePaths":
        if not parts:
            raise ValueError("Nothing to concatenate.")
        head = parts[0]

        def cat(name: str) -> Optional[FloatArray]:
            arrays = [getattr(p, name) for p in parts]
            if any(a is None for a in arrays):
                return None
            if name in ("jump_times", "jump_amounts"):
                width = max(a.shape[2] for a in arrays)
                fill = np.inf if name == "jump_times" else 0.0
                arrays = [np.pad(a, ((0, 0), (0, 0), (0, width - a.shape[2])), constant_values=fill) for a in arrays]
            return np.concatenate(arrays, axis=0)

        return cls(
            grid=head.grid,
            kernel=head.kernel,
            x0=head.x0,
            master_seed=head.master_seed,
            path_indices=np.concatenate([p.path_indices for p in parts]),
            jumps=np.concatenate([p.jumps for p in parts]),
            xhat_left=np.concatenate([p.xhat_left for p in parts]),
            xi_left=np.concatenate([p.xi_left for p in parts]),
            flagged=np.concatenate([p.flagged for p in parts]),
            flagged_time=np.concatenate([p.flagged_time for p in parts]),
            prefloor_min=np.concatenate([p.prefloor_min for p in parts]),
            floor_events=np.concatenate([p.floor_events for p in parts]),
            recombination_min=np.concatenate([p.recombination_min for p in parts]),
            xi=cat("xi"),
            xhat=cat("xhat"),
            xbar=cat("xbar"),
            dz=cat("dz"),
            jump_times=cat("jump_times"),
            jump_amounts=cat("jump_amounts"),
            kernel_checks_waived=head.kernel_checks_waived,
        )


def _simulate_block(
    kernel: Kernel,
    tables: KernelTables,
    coeffs: ModelCoefficients,
    x0: float,
    grid: SchemeGrid,
    keep: Collection[str],
    master_seed: int,
    waived: bool,
    noise: NoiseBundle,
) -> SchemePaths:
    n_paths, N, n_sub, n_fine = noise.n_paths, grid.N, grid.n_sub, grid.n_fine
    config = InnerSolveConfig(n_sub=n_sub)
    diagnostics = NegativityDiagnostics.empty(n_paths)
    nodes = grid.nodes

    xi = np.empty((n_paths, n_fine + 1))
    dz = np.empty((n_paths, n_fine))
    width = 0 if noise.jump_sizes is None else noise.jump_sizes.shape[2]
    amounts = np.zeros((n_paths, n_fine, width)) if noise.mode == "thinned" else None
    jumps = np.zeros((n_paths, N))
    xhat_left = np.empty((n_paths, N))
    xi_left = np.empty((n_paths, N))
    flagged = np.zeros(n_paths, dtype=bool)
    flagged_time = np.full(n_paths, np.nan)
    recombination_min = np.full(n_paths, np.inf)

    with np.errstate(invalid="ignore", over="ignore"):
        for k in range(N):
            left = np.full(n_paths, x0) if k == 0 else x0 + jumps[:, :k] @ tables.node_weights[k + 1, 1 : k + 1]
            xhat_left[:, k] = left
            recombination_min = np.fmin(recombination_min, left)
            fine = slice(k * n_sub, (k + 1) * n_sub)
            result = solve_inner(
                coeffs,
                tables.k0,
                # rounding can leave the recombined value a few ulps below zero
                np.maximum(left, 0.0),
                (float(nodes[k]), float(nodes[k + 1])),
                config,
                noise.window(k * n_sub, (k + 1) * n_sub),
                diagnostics,
            )
            xi[:, fine] = result.path[:, :-1]
            xi_left[:, k] = result.terminal
            jumps[:, k] = result.terminal - left
            dz[:, fine] = result.dz
            if amounts is not None and result.jump_amounts is not None:
                amounts[:, fine, :] = result.jump_amounts
            newly = result.flagged & ~flagged & (result.flagged_step >= 0)
            flagged_time[newly] = nodes[k] + (result.flagged_step[newly] + 1) * grid.fine_step
            flagged |= result.flagged
    xi[:, n_fine] = xi_left[:, N - 1]

    xhat = None
    if "xhat" in keep:
        xhat = x0 + jumps @ tables.fine_weights[:, 1:].T
        xhat[:, grid.node_indices[1:]] = xi_left

    xbar = None
    if "xbar" in keep:
        ledger = ZLedger(grid.fine_step, x0, dz, noise.jump_times, amounts)
        xbar = compute_barX(kernel, ledger)

    keep_dz = "dz" in keep
    return SchemePaths(
        grid=grid,
        kernel=kernel,
        x0=x0,
        master_seed=master_seed,
        path_indices=noise.path_indices,
        jumps=jumps,
        xhat_left=xhat_left,
        xi_left=xi_left,
        flagged=flagged,
        flagged_time=flagged_time,
        prefloor_min=diagnostics.prefloor_min,
        floor_events=diagnostics.floor_events,
        recombination_min=recombination_min,
        xi=xi if "xi" in keep else None,
        xhat=xhat,
        xbar=xbar,
        dz=dz if keep_dz else None,
        jump_times=noise.jump_times if keep_dz else None,
        jump_amounts=amounts if keep_dz else None,
        kernel_checks_waived=waived,
    )


def _log_flagged(paths: SchemePaths) -> None:
    for index, when in zip(paths.path_indices[paths.flagged], paths.flagged_time[paths.flagged]):
        flagged_logger.warning(
            "Flagged path [%d] seed [%d] N [%d] n_sub [%d] at t=%.6g: state overflow",
            int(index),
            paths.master_seed,
            paths.grid.N,
            paths.grid.n_sub,
            float(when),
        )


def run_split_scheme(
    kernel: Kernel,
    coeffs: ModelCoefficients,
    X0: float,
    grid: SchemeGrid,
    driver: StableDriverParams,
    n_paths: int,
    master_seed: int,
    threads: int = 1,
    block_size: int = DEFAULT_BLOCK_SIZE,
    keep: Collection[str] = DEFAULT_KEEP,
    noise_source: Optional[NoiseSource] = None,
    waive_kernel_checks: bool = False,
) -> SchemePaths:
    """Simulate ``n_paths`` paths of the splitting scheme.

    Noise comes from ``noise_source`` (called with a range of path indices and
    expected to return noise on ``grid.fine``) or is derived from
    ``master_seed``. Blocks of ``block_size`` paths run on ``threads`` workers;
    results do not depend on the thread count.
    """
    if X0 < 0 or not np.isfinite(X0):
        raise ValueError(f"X0 must be finite and >= 0, got {X0}.")
    if n_paths < 1:
        raise ValueError("n_paths must be >= 1.")
    if not kernel.schemable:
        raise KernelDomainError(f"Kernel {kernel.describe()['type']!r} cannot drive the scheme.")
    if not np.isclose(driver.alpha, coeffs.alpha):
        raise ValueError(f"Driver alpha {driver.alpha} differs from the model alpha {coeffs.alpha}.")
    unknown = set(keep) - KEEP_OPTIONS
    if unknown:
        raise ValueError(f"Unknown keep options {sorted(unknown)}.")
    if not waive_kernel_checks:
        report = check_complete_monotonicity(kernel, grid.T)
        if not report.passed:
            raise KernelDomainError(f"Kernel fails complete monotonicity: {report.first_violation}.")

    with tracer.start_as_current_span("run_split_scheme") as span:
        span.set_attribute("grid.N", grid.N)
        span.set_attribute("grid.n_sub", grid.n_sub)
        span.set_attribute("scheme.n_paths", n_paths)
        span.set_attribute("driver.mode", driver.mode)

        tables, cache_status = kernel_table_cache.get_tables(kernel, grid.T, grid.N, grid.n_sub)
        span.set_attribute("kernel_tables.status", cache_status)
        source: NoiseSource = noise_source or partial(_derived_noise, master_seed, grid.fine, driver)
        simulate = partial(_simulate_block, kernel, tables, coeffs, float(X0), grid, frozenset(keep), master_seed)

        def run_block(block: range) -> SchemePaths:
            noise = source(block)
            if noise.grid.n_steps != grid.n_fine or noise.n_paths != len(block):
                raise ValueError("Noise source returned a bundle that does not match the grid or block.")
            return simulate(waive_kernel_checks, noise)

        blocks = split_blocks(n_paths, block_size)
        paths = SchemePaths.concatenate(map_blocks(run_block, blocks, threads=threads))
        span.set_attribute("scheme.flagged_paths", paths.flag_count)

    if paths.flag_count:
        _log_flagged(paths)
        logger.warning("%d of %d paths flagged (N=%d, n_sub=%d)", paths.flag_count, n_paths, grid.N, grid.n_sub)
    logger.debug("Split scheme done: N=%d n_sub=%d paths=%d cache=%s", grid.N, grid.n_sub, n_paths, cache_status)
    return paths


def _derived_noise(master_seed: int, fine: FineGrid, driver: StableDriverParams, block: range) -> NoiseBundle:
    return derive_noise_bundle(master_seed, block, fine, driver)


@dataclass
class OracleResult:
    grid: FineGrid
    path_indices: NDArray[np.int64]
    x: FloatArray
    factors: FloatArray
    flagged: NDArray[np.bool_]
    flagged_time: FloatArray

    @property
    def valid(self) -> NDArray[np.bool_]:
        return ~self.flagged


def run_markovian_oracle(
    kernel: ExpSumKernel,
    coeffs: ModelCoefficients,
    X0: float,
    grid: FineGrid,
    noise: NoiseBundle,
    overflow_guard: float = OVERFLOW_GUARD,
) -> OracleResult:
    """Explicit Euler on the factor system X = X0 + sum_i w_i X^i.

    dX^i = -lambda_i X^i dt + dZ with coefficients read at X+. The aggregate
    is tracked directly and floored like the inner solver; a floor correction
    is spread over the factors so the identity with X0 + sum w_i X^i holds.
    """
    if not isinstance(kernel, ExpSumKernel):
        raise KernelDomainError("The Markovian oracle needs a sum-of-exponentials kernel.")
    if X0 < 0:
        raise ValueError(f"X0 must be >= 0, got {X0}.")
    if noise.grid.n_steps != grid.n_steps:
        raise ValueError(f"Noise has {noise.grid.n_steps} substeps, grid has {grid.n_steps}.")

    with tracer.start_as_current_span("run_markovian_oracle") as span:
        span.set_attribute("oracle.n_steps", grid.n_steps)
        span.set_attribute("oracle.n_factors", kernel.n_factors)
        n_paths, h = noise.n_paths, grid.step
        weights, rates = kernel.weights, kernel.rates
        total_weight = kernel.k0
        x = np.full(n_paths, float(X0))
        factors = np.zeros((n_paths, kernel.n_factors))
        path = np.empty((n_paths, grid.n_steps + 1))
        path[:, 0] = x
        flagged = np.zeros(n_paths, dtype=bool)
        flagged_time = np.full(n_paths, np.nan)
        offsets = noise.jump_offsets(0.0)

        with np.errstate(over="ignore", invalid="ignore"):
            for i in range(grid.n_steps):
                step = substep_increment(
                    coeffs,
                    x,
                    total_weight,
                    h,
                    noise.dB[:, i],
                    dL=None if noise.dL is None else noise.dL[:, i],
                    jump_frac=None if offsets is None else offsets[:, i, :],
                    jump_size=None if noise.jump_sizes is None else noise.jump_sizes[:, i, :],
                    drift_rate=noise.drift_rate,
                )
                dz = step.dz
                total = np.zeros(n_paths)
                for j, (w_l, lam_l) in enumerate(zip(weights, rates)):
                    delta = dz - lam_l * factors[:, j] * h
                    factors[:, j] = factors[:, j] + delta
                    total = total + w_l * delta
                x_new = x + total
                bad = ~np.isfinite(x_new) | (np.abs(x_new) > overflow_guard)
                flagged_time[bad & ~flagged] = (i + 1) * h
                flagged |= bad
                correction = np.where(x_new < 0.0, -x_new, 0.0)
                factors += (correction / total_weight)[:, None]
                x = np.maximum(x_new, 0.0)
                x[flagged] = np.nan
                path[:, i + 1] = x
        span.set_attribute("oracle.flagged_paths", int(np.sum(flagged)))

    return OracleResult(
        grid=grid,
        path_indices=noise.path_indices,
        x=path,
        factors=factors,
        flagged=flagged,
        flagged_time=flagged_time,
    )


def chain_inner_paths(
    coeffs: ModelCoefficients,
    K0: float,
    X0: Union[float, FloatArray],
    grid: SchemeGrid,
    noise: NoiseBundle,
) -> FloatArray:
    """Inner solver chained across the coarse intervals with no recombination."""
    config = InnerSolveConfig(n_sub=grid.n_sub)
    nodes = grid.nodes
    x: Union[float, FloatArray] = X0
    pieces: List[FloatArray] = []
    for k in range(grid.N):
        result = solve_inner(
            coeffs,
            K0,
            x,
            (float(nodes[k]), float(nodes[k + 1])),
            config,
            noise.window(k * grid.n_sub, (k + 1) * grid.n_sub),
        )
        pieces.append(result.path[:, :-1])
        x = result.terminal
    pieces.append(np.asarray(x, dtype=np.float64).reshape(-1, 1))
    return np.concatenate(pieces, axis=1)

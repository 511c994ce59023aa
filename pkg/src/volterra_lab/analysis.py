"""Diagnostics around the splitting scheme.

Public API
- build_yw(delta, eps) -> YWFunction
- verify_yw_inequalities(yw, samples, seed) -> YWReport
- verify_yw_lemmas(yw, coeffs, c, samples, seed) -> YWReport
- l1_distance(paths_a, paths_b, times) -> L1Distance
- convergence_study(setup, N_list, n_paths, master_seed) -> ConvergenceTable
- oracle_refinement_study(setup, ladder, n_paths, master_seed) -> list of OracleRefinementRow
- first_moment_bounds(L, kernel, T, X0), rate_profile(kernel, T, N)
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import partial
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from numpy.polynomial import legendre
from numpy.typing import ArrayLike, NDArray
from opentelemetry import trace
from scipy.interpolate import CubicHermiteSpline

from volterra_lab.kernels import ExpSumKernel, Kernel, KernelDomainError, modulus_bound
from volterra_lab.levy import FineGrid, NoiseBundle, StableDriverParams, aggregate_noise, derive_noise_bundle, path_rng
from volterra_lab.model import ModelCoefficients, holder_constant
from volterra_lab.scheme import SchemeGrid, run_markovian_oracle, run_split_scheme
from volterra_lab.workers import DEFAULT_BLOCK_SIZE, map_blocks, split_blocks

logger: logging.Logger = logging.getLogger(__name__)
tracer = trace.get_tracer(__name__)

FloatArray = NDArray[np.float64]

RAMP_FRACTION: float = 0.05
YW_SLACK: float = 1e-9
YW_BLOCK_SIZE: int = 10_000
MAX_FLAG_RATE: float = 1e-3


class PathCountMismatchError(ValueError):
    """Raised when paired path bundles differ in path count or time points."""


class ConvergenceStudyError(RuntimeError):
    """Raised when a convergence study cannot produce trustworthy statistics."""


# Yamada-Watanabe approximation of |x|


@dataclass(frozen=True)
class YWFunction:
    """phi with phi'' = psi on [eps / delta, eps], built from a log-scale trapezoidal taper.

    psi(x) = c(log x) * 2 / (x log delta) where c ramps linearly from 0 to the
    plateau over the outer 5% of the support (in log x) on each side.
    """

    delta: float
    eps: float
    plateau: float
    knots: FloatArray = field(repr=False)
    phi_knots: FloatArray = field(repr=False)
    _spline: CubicHermiteSpline = field(repr=False, compare=False)

    @property
    def lower(self) -> float:
        return self.knots[0].item()

    @property
    def log_delta(self) -> float:
        return math.log(self.delta)

    @property
    def _ramp(self) -> float:
        return RAMP_FRACTION * self.log_delta

    @property
    def _s_bounds(self) -> Tuple[float, float]:
        return math.log(self.eps) - self.log_delta, math.log(self.eps)

    def taper(self, s: ArrayLike) -> FloatArray:
        s0, s1 = self._s_bounds
        arr = np.asarray(s, dtype=np.float64)
        ramp = np.minimum((arr - s0) / self._ramp, (s1 - arr) / self._ramp)
        return np.asarray(self.plateau * np.clip(ramp, 0.0, 1.0), dtype=np.float64)

    def density(self, x: ArrayLike) -> FloatArray:
        """psi on the real line; zero off the support."""
        arr = np.asarray(x, dtype=np.float64)
        inside = (arr >= self.lower) & (arr <= self.eps)
        safe = np.where(inside, arr, 1.0)
        return np.asarray(np.where(inside, self.taper(np.log(safe)) * 2.0 / (safe * self.log_delta), 0.0))

    def _cumulative_taper(self, s: FloatArray) -> FloatArray:
        s0, s1 = self._s_bounds
        r, p, width = self._ramp, self.plateau, self.log_delta
        s = np.clip(s, s0, s1)
        left = p * (s - s0) ** 2 / (2.0 * r)
        middle = p * r / 2.0 + p * (s - s0 - r)
        right = p * (width - r) - p * (s1 - s) ** 2 / (2.0 * r)
        return np.asarray(np.where(s <= s0 + r, left, np.where(s <= s1 - r, middle, right)), dtype=np.float64)

    def _slope(self, a: FloatArray) -> FloatArray:
        """Psi(a) = int_0^a psi, for a >= 0."""
        safe = np.where(a > 0.0, a, self.lower)
        value = 2.0 / self.log_delta * self._cumulative_taper(np.log(safe))
        return np.asarray(np.where(a <= self.lower, 0.0, np.where(a >= self.eps, 1.0, value)), dtype=np.float64)

    def phi(self, x: ArrayLike) -> FloatArray:
        a = np.abs(np.asarray(x, dtype=np.float64))
        inner = self._spline(np.clip(a, self.lower, self.eps))
        phi_eps = self.phi_knots[-1]
        return np.asarray(np.where(a <= self.lower, 0.0, np.where(a >= self.eps, phi_eps + a - self.eps, inner)))

    def dphi(self, x: ArrayLike) -> FloatArray:
        arr = np.asarray(x, dtype=np.float64)
        return np.asarray(np.sign(arr) * self._slope(np.abs(arr)), dtype=np.float64)

    def d2phi(self, x: ArrayLike) -> FloatArray:
        return self.density(np.abs(np.asarray(x, dtype=np.float64)))

    def density_integral(self) -> float:
        """int psi over the support, by Gauss-Legendre on each taper piece in log x."""
        s0, s1 = self._s_bounds
        nodes, weights = legendre.leggauss(8)
        total = 0.0
        for lo, hi in ((s0, s0 + self._ramp), (s0 + self._ramp, s1 - self._ramp), (s1 - self._ramp, s1)):
            s = 0.5 * (hi - lo) * nodes + 0.5 * (hi + lo)
            total += 0.5 * (hi - lo) * float(np.dot(weights, self.taper(s))) * 2.0 / self.log_delta
        return total


def build_yw(delta: float, eps: float, knots_per_piece: int = 1024) -> YWFunction:
    if not delta > 1.0:
        raise ValueError(f"delta must exceed 1, got {delta}.")
    if not 0.0 < eps < 1.0:
        raise ValueError(f"eps must lie in (0, 1), got {eps}.")
    # untapered integral is 2; the ramps remove RAMP_FRACTION of the plateau mass
    plateau = 1.0 / (2.0 * (1.0 - RAMP_FRACTION))
    if plateau > 1.0:
        raise ValueError("Taper plateau exceeds the 2 / (x log delta) envelope.")

    log_delta = math.log(delta)
    s1 = math.log(eps)
    s0 = s1 - log_delta
    ramp = RAMP_FRACTION * log_delta
    ramp_knots = max(knots_per_piece // 8, 16)
    s_knots = np.unique(
        np.concatenate(
            [
                np.linspace(s0, s0 + ramp, ramp_knots),
                np.linspace(s0 + ramp, s1 - ramp, knots_per_piece),
                np.linspace(s1 - ramp, s1, ramp_knots),
            ]
        )
    )
    knots = np.exp(s_knots)
    knots[0], knots[-1] = eps / delta, eps

    draft = YWFunction(
        delta=float(delta),
        eps=float(eps),
        plateau=plateau,
        knots=knots,
        phi_knots=np.zeros_like(knots),
        _spline=CubicHermiteSpline(knots, np.zeros_like(knots), np.zeros_like(knots)),
    )
    # phi(x) = int_0^x Psi, Psi = phi' in closed form
    nodes, weights = legendre.leggauss(8)
    lo, hi = knots[:-1], knots[1:]
    points = 0.5 * (hi - lo)[:, None] * nodes[None, :] + 0.5 * (hi + lo)[:, None]
    pieces = 0.5 * (hi - lo) * (draft._slope(points) @ weights)
    phi_knots = np.concatenate([[0.0], np.cumsum(pieces)])
    slopes = draft._slope(knots)
    return YWFunction(
        delta=float(delta),
        eps=float(eps),
        plateau=plateau,
        knots=knots,
        phi_knots=phi_knots,
        _spline=CubicHermiteSpline(knots, phi_knots, slopes),
    )


@dataclass
class YWReport:
    """Violation counts per inequality; reports from sample blocks add up."""

    samples: int = 0
    violations: Dict[str, int] = field(default_factory=dict)
    worst_excess: Dict[str, float] = field(default_factory=dict)
    holder_constant: float = 0.0

    @classmethod
    def from_excess(cls, excess: Dict[str, FloatArray], holder: float = 0.0) -> "YWReport":
        samples = max((v.size for v in excess.values()), default=0)
        return cls(
            samples=samples,
            violations={k: int(np.sum(v > YW_SLACK)) for k, v in excess.items()},
            worst_excess={k: float(np.max(v, initial=-np.inf)) for k, v in excess.items()},
            holder_constant=holder,
        )

    def __add__(self, other: "YWReport") -> "YWReport":
        keys = set(self.violations) | set(other.violations)
        return YWReport(
            samples=self.samples + other.samples,
            violations={k: self.violations.get(k, 0) + other.violations.get(k, 0) for k in keys},
            worst_excess={
                k: max(self.worst_excess.get(k, -np.inf), other.worst_excess.get(k, -np.inf)) for k in keys
            },
            holder_constant=max(self.holder_constant, other.holder_constant),
        )

    @property
    def total_violations(self) -> int:
        return sum(self.violations.values())

    @property
    def passed(self) -> bool:
        return self.total_violations == 0

    def as_dict(self) -> Dict[str, Any]:
        return {
            "samples": self.samples,
            "passed": self.passed,
            "violations": dict(sorted(self.violations.items())),
            "worst_excess": dict(sorted(self.worst_excess.items())),
            "holder_constant": self.holder_constant,
        }


def _log_uniform(rng: np.random.Generator, lo: float, hi: float, size: int) -> FloatArray:
    return np.asarray(np.exp(rng.uniform(math.log(lo), math.log(hi), size=size)), dtype=np.float64)


def _yw_inequality_block(yw: YWFunction, seed: int, block: range) -> YWReport:
    rng = path_rng(seed, block.start)
    n = len(block)
    spread = _log_uniform(rng, yw.lower / yw.delta, 10.0 * yw.eps, n) * rng.choice([-1.0, 1.0], size=n)
    x = np.where(rng.random(n) < 0.5, spread, rng.uniform(-3.0 * yw.eps, 3.0 * yw.eps, size=n))
    if block.start == 0:
        edges = np.array([0.0, yw.lower, yw.eps, 2.0 * yw.eps])
        x = np.concatenate([x, edges, -edges])
    a = np.abs(x)
    d2 = yw.d2phi(x)
    inside = (a >= yw.lower) & (a <= yw.eps)
    envelope = np.where(inside, 2.0 / (np.where(inside, a, 1.0) * yw.log_delta), 0.0)
    return YWReport.from_excess(
        {
            "abs_bound": a - (yw.eps + yw.phi(x)),
            "first_derivative": np.abs(yw.dphi(x)) - 1.0,
            "second_derivative_nonneg": -d2,
            "second_derivative_bound": d2 - envelope,
        }
    )


def verify_yw_inequalities(
    yw: YWFunction, samples: int, seed: int, threads: int = 1, block_size: int = YW_BLOCK_SIZE
) -> YWReport:
    """Check |x| <= eps + phi, |phi'| <= 1 and 0 <= phi'' <= 2 / (|x| log delta) at random x."""
    if samples < 1:
        raise ValueError("At least one sample is required.")
    with tracer.start_as_current_span("verify_yw_inequalities") as span:
        span.set_attribute("yw.samples", samples)
        reports = map_blocks(partial(_yw_inequality_block, yw, seed), split_blocks(samples, block_size), threads)
        total = sum(reports[1:], reports[0])
        span.set_attribute("yw.violations", total.total_violations)
    return total


def _near(rng: np.random.Generator, center: FloatArray, yw: YWFunction, m: float) -> FloatArray:
    """Either a uniform point of [-m, m] or a point within the support scale of ``center``."""
    n = center.size
    offset = _log_uniform(rng, yw.lower / yw.delta, 2.0 * yw.eps, n) * rng.choice([-1.0, 1.0], size=n)
    return np.where(rng.random(n) < 0.5, np.clip(center + offset, -m, m), rng.uniform(-m, m, size=n))


def _yw_lemma_block(
    yw: YWFunction, coeffs: ModelCoefficients, c: float, m: float, u_max: float, grid_constant: float, seed: int, block: range
) -> YWReport:
    rng = path_rng(seed, block.start)
    n = len(block)
    x = rng.uniform(-m, m, size=n)
    y = _near(rng, x, yw, m)
    a = _near(rng, x, yw, m)
    b = _near(rng, y, yw, m)
    if block.start == 0:
        # coincident pairs and coincident perturbations
        x = np.concatenate([x, [0.5, -1.0]])
        y = np.concatenate([y, [0.5, 2.0]])
        a = np.concatenate([a, [1.0, -1.0]])
        b = np.concatenate([b, [0.0, 2.0]])
    u = u_max * (1.0 - rng.random(x.size))

    gamma = coeffs.gamma
    holder = max(
        grid_constant,
        holder_constant(gamma, x, y),
        holder_constant(gamma, a, x),
        holder_constant(gamma, b, y),
    )
    f_u = holder * u
    f_wedge = np.minimum(f_u, f_u**2)
    c_vee = max(c, c**2)
    h_xy = u * (gamma(x) - gamma(y))
    h_ab = u * (gamma(a) - gamma(b))
    z = x - y
    slope = yw.dphi(z)

    lemma1 = yw.phi(z + c * h_xy) - yw.phi(z) - c * h_xy * slope
    bound1 = 2.0 * c_vee * f_wedge * (math.sqrt(yw.eps) + 1.0 / yw.log_delta)
    dx, dy = np.abs(x - a), np.abs(y - b)
    lemma2 = yw.phi(z + c * h_ab) - yw.phi(z + c * h_xy) - c * (h_ab - h_xy) * slope
    bound2 = (
        6.0
        * c_vee
        * f_wedge
        * (np.sqrt(dx) + np.sqrt(dy) + 1.0 / yw.log_delta + yw.delta / (yw.eps * yw.log_delta) * (dx + dy))
    )
    return YWReport.from_excess(
        {"lemma1_lower": -lemma1, "lemma1_upper": lemma1 - bound1, "lemma2_upper": lemma2 - bound2},
        holder=holder,
    )


def verify_yw_lemmas(
    yw: YWFunction,
    coeffs: ModelCoefficients,
    c: float,
    samples: int,
    seed: int,
    m: float = 5.0,
    u_max: float = 10.0,
    threads: int = 1,
    block_size: int = YW_BLOCK_SIZE,
) -> YWReport:
    """Check the two Taylor-remainder bounds used to compare jumps of coupled schemes.

    eta(x, u) = u gamma(x) and f(u) = C u, with C the largest sampled 1/2-Hoelder
    ratio of gamma on [-m, m] (grid pairs plus every pair a sample block uses).
    """
    if c <= 0:
        raise ValueError("c must be positive.")
    if samples < 1:
        raise ValueError("At least one sample is required.")
    grid = np.linspace(-m, m, 201)
    gx, gy = np.meshgrid(grid, grid)
    grid_constant = holder_constant(coeffs.gamma, gx.ravel(), gy.ravel())
    with tracer.start_as_current_span("verify_yw_lemmas") as span:
        span.set_attribute("yw.samples", samples)
        work = partial(_yw_lemma_block, yw, coeffs, c, m, u_max, grid_constant, seed)
        reports = map_blocks(work, split_blocks(samples, block_size), threads)
        total = sum(reports[1:], reports[0])
        span.set_attribute("yw.violations", total.total_violations)
    if not total.passed:
        logger.warning("Lemma checks found %d violations", total.total_violations)
    return total


# L1 distances between coupled path bundles


@dataclass(frozen=True)
class L1Distance:
    sup: float
    argmax_time: float
    se: float
    curve: FloatArray = field(repr=False)
    n_paths: int = 0


def l1_distance(paths_a: ArrayLike, paths_b: ArrayLike, times: Optional[ArrayLike] = None) -> L1Distance:
    """sup over times of the paired mean |A - B|, rows with a NaN in either bundle dropped."""
    a = np.atleast_2d(np.asarray(paths_a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(paths_b, dtype=np.float64))
    if a.shape[0] != b.shape[0]:
        raise PathCountMismatchError(f"Path counts differ: {a.shape[0]} != {b.shape[0]}.")
    if a.shape[1] != b.shape[1]:
        raise PathCountMismatchError(f"Time counts differ: {a.shape[1]} != {b.shape[1]}.")
    labels = np.arange(a.shape[1], dtype=np.float64) if times is None else np.asarray(times, dtype=np.float64)
    if labels.size != a.shape[1]:
        raise ValueError("times must label every column.")
    keep = np.all(np.isfinite(a), axis=1) & np.all(np.isfinite(b), axis=1)
    gaps = np.abs(a[keep] - b[keep])
    n = gaps.shape[0]
    if n == 0:
        raise PathCountMismatchError("No paired paths without flags.")
    curve = np.mean(gaps, axis=0)
    j = int(np.argmax(curve))
    se = float(np.std(gaps[:, j], ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return L1Distance(sup=float(curve[j]), argmax_time=float(labels[j]), se=se, curve=curve, n_paths=n)


# Theoretical profiles


@dataclass(frozen=True)
class FirstMomentBounds:
    constant: float
    xi_bound: float
    xhat_bound: float


def first_moment_bounds(L: float, kernel: Kernel, T: float, X0: float) -> FirstMomentBounds:
    """Uniform-in-N bounds on sup_t E[xi] and sup_t E[Xhat] for growth constant L."""
    if L < 0 or T <= 0 or X0 < 0:
        raise ValueError("Need L >= 0, T > 0 and X0 >= 0.")
    k0 = kernel.k0
    max_k = kernel.sup_norms(T).max_value
    constant = L * max_k * T * math.exp(k0 * L * T)
    xi_bound = (1.0 + X0) * math.exp(k0 * L * T + constant) - 1.0
    xhat_bound = X0 + (1.0 + X0) * constant * math.exp(constant)
    return FirstMomentBounds(constant=constant, xi_bound=xi_bound, xhat_bound=xhat_bound)


def rate_profile(kernel: Kernel, T: float, N: int) -> Tuple[float, float]:
    """(sqrt(T/N) (1 + N w(T/N)), sqrt(T/N) + w(T/N)) with w the modulus of continuity of K."""
    if N < 1:
        raise KernelDomainError("N must be >= 1.")
    step = T / N
    w = modulus_bound(kernel, T, step)
    root = math.sqrt(step)
    return root * (1.0 + N * w), root + w


# Coupled studies


@dataclass(frozen=True)
class StudySetup:
    """Everything a coupled study needs besides the grid ladder."""

    kernel: Kernel
    coeffs: ModelCoefficients
    X0: float
    T: float
    n_sub: int
    driver: StableDriverParams
    threads: int = 1
    block_size: int = DEFAULT_BLOCK_SIZE
    max_flag_rate: float = MAX_FLAG_RATE


def _coupled_noise(
    master_seed: int, finest: FineGrid, driver: StableDriverParams, factor: int, block: range
) -> NoiseBundle:
    return aggregate_noise(derive_noise_bundle(master_seed, block, finest, driver), factor)


@dataclass
class ConvergenceRow:
    N: int
    n_sub: int
    xi_xhat: float
    xhat_xbar: float
    xi_xbar: float
    cauchy: Optional[float]
    moment_xi: float
    moment_xhat: float
    rate_inner: float
    rate_recombination: float
    se_xi_xhat: float
    se_xhat_xbar: float
    se_xi_xbar: float
    se_cauchy: Optional[float]
    flagged: int


@dataclass
class ConvergenceTable:
    rows: List[ConvergenceRow]
    metadata: Dict[str, Any] = field(default_factory=dict)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([vars(row) for row in self.rows])

    @property
    def cauchy_non_increasing(self) -> bool:
        """Consecutive Cauchy distances never grow by more than 2 SE."""
        pairs = [(r.cauchy, r.se_cauchy) for r in self.rows if r.cauchy is not None]
        for (prev, prev_se), (cur, cur_se) in zip(pairs, pairs[1:]):
            if cur > prev + 2.0 * max(prev_se or 0.0, cur_se or 0.0):
                return False
        return True

    @property
    def moment_variation(self) -> float:
        """Largest sup-moment across N relative to the value at the coarsest N, minus one."""
        if not self.rows:
            return 0.0
        base = max(self.rows[0].moment_xi, self.rows[0].moment_xhat)
        top = max(max(r.moment_xi, r.moment_xhat) for r in self.rows)
        return top / base - 1.0 if base > 0 else 0.0

    def as_dict(self) -> Dict[str, Any]:
        return {
            "rows": [vars(row) for row in self.rows],
            "cauchy_non_increasing": self.cauchy_non_increasing,
            "moment_variation": self.moment_variation,
            "metadata": self.metadata,
        }


def _check_flags(flag_rate: float, limit: float, what: str) -> None:
    if flag_rate >= limit:
        raise ConvergenceStudyError(f"{what}: flagged-path rate {flag_rate:.4%} reaches the {limit:.2%} limit.")


def convergence_study(setup: StudySetup, N_list: Sequence[int], n_paths: int, master_seed: int) -> ConvergenceTable:
    """Coupled runs at every N of ``N_list``, all driven by noise of the finest grid."""
    levels = [int(n) for n in N_list]
    if not levels or any(n < 1 for n in levels) or levels != sorted(set(levels)):
        raise ValueError(f"N_list must be strictly ascending positive integers, got {list(N_list)}.")
    finest = levels[-1]
    if any(finest % n for n in levels):
        raise ValueError("Every N must divide the largest N for coupling.")
    finest_grid = FineGrid(T=setup.T, n_steps=finest * setup.n_sub)

    rows: List[ConvergenceRow] = []
    with tracer.start_as_current_span("convergence_study") as span:
        span.set_attribute("study.levels", len(levels))
        span.set_attribute("study.n_paths", n_paths)
        previous_xbar: Optional[FloatArray] = None
        for N in levels:
            grid = SchemeGrid(T=setup.T, N=N, n_sub=setup.n_sub)
            paths = run_split_scheme(
                setup.kernel,
                setup.coeffs,
                setup.X0,
                grid,
                setup.driver,
                n_paths,
                master_seed,
                threads=setup.threads,
                block_size=setup.block_size,
                keep=("xi", "xhat", "xbar"),
                noise_source=partial(_coupled_noise, master_seed, finest_grid, setup.driver, finest // N),
            )
            _check_flags(paths.flag_rate, setup.max_flag_rate, f"N={N}")
            times = grid.fine_times
            xi, xhat, xbar = paths.require("xi"), paths.require("xhat"), paths.require("xbar")
            d_inner = l1_distance(xi, xhat, times)
            d_recomb = l1_distance(xhat, xbar, times)
            d_total = l1_distance(xi, xbar, times)
            if previous_xbar is not None:
                # the previous, coarser run lives on every ratio-th point of this grid
                ratio = (xbar.shape[1] - 1) // (previous_xbar.shape[1] - 1)
                cauchy = l1_distance(xbar[:, ::ratio], previous_xbar)
                rows[-1].cauchy, rows[-1].se_cauchy = cauchy.sup, cauchy.se
            inner_rate, recomb_rate = rate_profile(setup.kernel, setup.T, N)
            rows.append(
                ConvergenceRow(
                    N=N,
                    n_sub=setup.n_sub,
                    xi_xhat=d_inner.sup,
                    xhat_xbar=d_recomb.sup,
                    xi_xbar=d_total.sup,
                    cauchy=None,
                    moment_xi=float(np.max(paths.mean_curve("xi"))),
                    moment_xhat=float(np.max(paths.mean_curve("xhat"))),
                    rate_inner=inner_rate,
                    rate_recombination=recomb_rate,
                    se_xi_xhat=d_inner.se,
                    se_xhat_xbar=d_recomb.se,
                    se_xi_xbar=d_total.se,
                    se_cauchy=None,
                    flagged=paths.flag_count,
                )
            )
            previous_xbar = xbar
            logger.info("N=%d: xi-xhat %.4g, xhat-xbar %.4g", N, d_inner.sup, d_recomb.sup)

    table = ConvergenceTable(
        rows=rows,
        metadata={
            "N_list": levels,
            "n_sub": setup.n_sub,
            "n_paths": n_paths,
            "master_seed": master_seed,
            "finest_substeps": finest_grid.n_steps,
            "driver_mode": setup.driver.mode,
        },
    )
    if not table.cauchy_non_increasing:
        logger.warning("Cauchy column increases beyond 2 SE")
    return table


def _oracle_block(
    kernel: ExpSumKernel,
    coeffs: ModelCoefficients,
    X0: float,
    fine: FineGrid,
    source: Callable[[range], NoiseBundle],
    block: range,
) -> FloatArray:
    return run_markovian_oracle(kernel, coeffs, X0, fine, source(block)).x


@dataclass(frozen=True)
class OracleRefinementRow:
    N: int
    n_sub: int
    distance: float
    se: float
    argmax_time: float
    flagged: int


def oracle_refinement_study(
    setup: StudySetup, ladder: Sequence[Tuple[int, int]], n_paths: int, master_seed: int
) -> List[OracleRefinementRow]:
    """Split scheme against the Markovian factor oracle on shared noise for each (N, n_sub)."""
    if not ladder:
        raise ValueError("The refinement ladder is empty.")
    finest = max(N * n_sub for N, n_sub in ladder)
    if any(finest % (N * n_sub) for N, n_sub in ladder):
        raise ValueError("Every N * n_sub must divide the finest substep count.")
    finest_grid = FineGrid(T=setup.T, n_steps=finest)
    kernel = setup.kernel
    if not isinstance(kernel, ExpSumKernel):
        raise KernelDomainError("The oracle study needs a sum-of-exponentials kernel.")

    rows: List[OracleRefinementRow] = []
    with tracer.start_as_current_span("oracle_refinement_study") as span:
        span.set_attribute("study.levels", len(ladder))
        for N, n_sub in ladder:
            grid = SchemeGrid(T=setup.T, N=N, n_sub=n_sub)
            source = partial(_coupled_noise, master_seed, finest_grid, setup.driver, finest // grid.n_fine)
            paths = run_split_scheme(
                setup.kernel,
                setup.coeffs,
                setup.X0,
                grid,
                setup.driver,
                n_paths,
                master_seed,
                threads=setup.threads,
                block_size=setup.block_size,
                keep=("xhat",),
                noise_source=source,
            )

            oracle_block = partial(_oracle_block, kernel, setup.coeffs, setup.X0, grid.fine, source)
            oracle = np.concatenate(map_blocks(oracle_block, split_blocks(n_paths, setup.block_size), setup.threads))
            flagged = paths.flag_count + int(np.sum(~np.all(np.isfinite(oracle), axis=1)))
            _check_flags(flagged / n_paths, setup.max_flag_rate, f"oracle N={N} n_sub={n_sub}")
            distance = l1_distance(paths.require("xhat"), oracle, grid.fine_times)
            rows.append(
                OracleRefinementRow(
                    N=N,
                    n_sub=n_sub,
                    distance=distance.sup,
                    se=distance.se,
                    argmax_time=distance.argmax_time,
                    flagged=flagged,
                )
            )
            logger.info("Oracle distance N=%d n_sub=%d: %.4g (SE %.2g)", N, n_sub, distance.sup, distance.se)
    return rows

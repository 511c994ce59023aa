"""Convolution kernels and their property checkers.

A kernel K: R+ -> R+ enters every Volterra equation handled by this package.
The scheme only accepts kernels it can evaluate in closed form
(:class:`ExpSumKernel`); the checkers also accept sampled and user-supplied
kernels so that counterexamples can be explored.

Public API
- ExpSumKernel, SampledKernel, CallableKernel
- eval_kernel(kernel, t, order)
- kernel_sup_norms(kernel, T)
- modulus_bound(kernel, T, delta)
- check_complete_monotonicity(kernel, T, max_order, grid_size)
- check_nonneg_combination(kernel, times, coeffs, x0, scan_times)
- search_nonneg_counterexample(kernel, M, T, trials, seed)
- exhaustive_nonneg_search(kernel, time_lattice, x_lattice, M, T)
"""

from __future__ import annotations

import itertools
import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Any, Callable, ClassVar, Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.typing import ArrayLike, NDArray
from opentelemetry import trace
from scipy import integrate

logger: logging.Logger = logging.getLogger(__name__)
tracer = trace.get_tracer(__name__)

FloatArray = NDArray[np.float64]

NONNEG_TOL: float = 1e-12


class KernelDomainError(ValueError):
    """Raised when a kernel is built from invalid parameters or evaluated outside R+."""


@dataclass(frozen=True)
class KernelNorms:
    """Horizon-restricted norms of a kernel on [0, T]."""

    horizon: float
    max_value: float
    max_abs_deriv1: float
    l1_deriv2: float


def _as_time_array(t: ArrayLike) -> FloatArray:
    arr = np.asarray(t, dtype=np.float64)
    if np.any(arr < 0.0) or np.any(~np.isfinite(arr)):
        raise KernelDomainError("Kernel arguments must be finite and non-negative.")
    return arr


class Kernel(ABC):
    """Abstract convolution kernel with two derivatives.

    Subclasses implement :meth:`_evaluate` for orders 0, 1 and 2 on arrays of
    non-negative times. Scalars in give 0-d arrays out.
    """

    #: Whether run_split_scheme accepts this kernel.
    schemable: ClassVar[bool] = False

    @abstractmethod
    def _evaluate(self, t: FloatArray, order: int) -> FloatArray: ...

    @abstractmethod
    def describe(self) -> Dict[str, Any]:
        """JSON-friendly description used for config echoes and cache keys."""

    def eval(self, t: ArrayLike) -> FloatArray:
        return self._evaluate(_as_time_array(t), 0)

    def deriv1(self, t: ArrayLike) -> FloatArray:
        return self._evaluate(_as_time_array(t), 1)

    def deriv2(self, t: ArrayLike) -> FloatArray:
        return self._evaluate(_as_time_array(t), 2)

    @property
    def k0(self) -> float:
        return float(self.eval(0.0))

    def sup_norms(self, T: float) -> KernelNorms:
        grid = np.linspace(0.0, T, 4001)
        step = grid[1] - grid[0] if grid.size > 1 else 0.0
        d2 = np.abs(self.deriv2(grid))
        # grid maximum of |K'| corrected by half a step of the curvature
        max_d1 = float(np.max(np.abs(self.deriv1(grid)))) + 0.5 * step * float(np.max(d2))
        l1_d2, _ = integrate.quad(lambda s: float(np.abs(self.deriv2(s))), 0.0, T, limit=200)
        return KernelNorms(
            horizon=T,
            max_value=float(np.max(self.eval(grid))),
            max_abs_deriv1=max_d1,
            l1_deriv2=float(l1_d2),
        )

    def is_convex_nonincreasing(self, T: float, grid_size: int = 2001) -> bool:
        grid = np.linspace(0.0, T, grid_size)
        values = self.eval(grid)
        tol = NONNEG_TOL * (1.0 + self.k0)
        return bool(np.all(np.diff(values) <= tol) and np.all(np.diff(values, n=2) >= -4.0 * tol))


@dataclass(frozen=True)
class ExpSumKernel(Kernel):
    """K(t) = sum_i w_i exp(-lambda_i t) with w_i > 0 and distinct lambda_i >= 0."""

    weights: Tuple[float, ...]
    rates: Tuple[float, ...]
    schemable: ClassVar[bool] = True

    def __post_init__(self) -> None:
        object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
        object.__setattr__(self, "rates", tuple(float(r) for r in self.rates))
        if len(self.weights) < 1:
            raise KernelDomainError("ExpSumKernel needs at least one exponential.")
        if len(self.weights) != len(self.rates):
            raise KernelDomainError(
                f"weights and rates differ in length ({len(self.weights)} != {len(self.rates)})."
            )
        if any(not np.isfinite(w) or w <= 0.0 for w in self.weights):
            raise KernelDomainError("ExpSumKernel weights must be finite and > 0.")
        if any(not np.isfinite(r) or r < 0.0 for r in self.rates):
            raise KernelDomainError("ExpSumKernel rates must be finite and >= 0.")
        if len(set(self.rates)) != len(self.rates):
            raise KernelDomainError("ExpSumKernel rates must be distinct.")

    @property
    def w(self) -> FloatArray:
        return np.asarray(self.weights, dtype=np.float64)

    @property
    def lam(self) -> FloatArray:
        return np.asarray(self.rates, dtype=np.float64)

    @property
    def n_factors(self) -> int:
        return len(self.weights)

    def _evaluate(self, t: FloatArray, order: int) -> FloatArray:
        lam = self.lam
        coeff = self.w * (-lam) ** order
        return np.asarray(np.exp(-np.multiply.outer(t, lam)) @ coeff, dtype=np.float64)

    @property
    def k0(self) -> float:
        return float(np.sum(self.w))

    def sup_norms(self, T: float) -> KernelNorms:
        # K decreasing, |K'| decreasing and K'' >= 0 for a sum of exponentials
        k1_0 = float(self.deriv1(0.0))
        k1_T = float(self.deriv1(T))
        return KernelNorms(horizon=T, max_value=self.k0, max_abs_deriv1=abs(k1_0), l1_deriv2=k1_T - k1_0)

    def is_convex_nonincreasing(self, T: float, grid_size: int = 2001) -> bool:
        return True

    def describe(self) -> Dict[str, Any]:
        return {"type": "expsum", "w": list(self.weights), "lambda": list(self.rates)}


@dataclass(frozen=True)
class SampledKernel(Kernel):
    """Piecewise-linear kernel through (times, values), constant after the last sample.

    Only admissible in the checkers; derivatives are those of the interpolant.
    """

    times: Tuple[float, ...]
    values: Tuple[float, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "times", tuple(float(t) for t in self.times))
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        ts = np.asarray(self.times)
        vs = np.asarray(self.values)
        if ts.size < 2 or ts.size != vs.size:
            raise KernelDomainError("SampledKernel needs at least two (time, value) pairs of equal length.")
        if ts[0] != 0.0 or np.any(np.diff(ts) <= 0.0):
            raise KernelDomainError("SampledKernel times must start at 0 and increase strictly.")
        if np.any(vs < 0.0) or vs[0] <= 0.0:
            raise KernelDomainError("SampledKernel values must be >= 0 with K(0) > 0.")

    def _slopes(self) -> FloatArray:
        return np.diff(np.asarray(self.values)) / np.diff(np.asarray(self.times))

    def _evaluate(self, t: FloatArray, order: int) -> FloatArray:
        ts = np.asarray(self.times)
        if order == 0:
            return np.asarray(np.interp(t, ts, np.asarray(self.values)), dtype=np.float64)
        if order == 2:
            return np.zeros_like(t, dtype=np.float64)
        slopes = np.append(self._slopes(), 0.0)
        idx = np.clip(np.searchsorted(ts, t, side="right") - 1, 0, slopes.size - 1)
        return np.asarray(slopes[idx], dtype=np.float64)

    def sup_norms(self, T: float) -> KernelNorms:
        ts = np.asarray(self.times)
        slopes = np.append(self._slopes(), 0.0)
        active = ts <= T
        kinks = np.abs(np.diff(slopes))[ts[1:] < T]
        return KernelNorms(
            horizon=T,
            max_value=float(np.max(self.eval(np.linspace(0.0, T, 2001)))),
            max_abs_deriv1=float(np.max(np.abs(slopes[active]))),
            l1_deriv2=float(np.sum(kinks)),
        )

    def describe(self) -> Dict[str, Any]:
        return {"type": "sampled", "times": list(self.times), "values": list(self.values)}


class CallableKernel(Kernel):
    """Kernel defined by user functions; missing derivatives use central differences."""

    def __init__(
        self,
        func: Callable[[FloatArray], FloatArray],
        deriv1: Optional[Callable[[FloatArray], FloatArray]] = None,
        deriv2: Optional[Callable[[FloatArray], FloatArray]] = None,
        name: str = "callable",
    ) -> None:
        self._func = func
        self._d1 = deriv1
        self._d2 = deriv2
        self.name = name

    def _evaluate(self, t: FloatArray, order: int) -> FloatArray:
        if order == 0:
            return np.asarray(self._func(t), dtype=np.float64)
        h = 1e-4
        # shift the stencil right near the origin so it stays inside R+
        c = np.maximum(t, h)
        if order == 1:
            if self._d1 is not None:
                return np.asarray(self._d1(t), dtype=np.float64)
            return np.asarray((self._func(c + h) - self._func(c - h)) / (2 * h), dtype=np.float64)
        if self._d2 is not None:
            return np.asarray(self._d2(t), dtype=np.float64)
        return np.asarray((self._func(c + h) - 2 * self._func(c) + self._func(c - h)) / (h * h), dtype=np.float64)

    def describe(self) -> Dict[str, Any]:
        return {"type": "callable", "name": self.name}


def eval_kernel(kernel: Kernel, t: float, order: int = 0) -> float:
    """Return K(t), K'(t) or K''(t)."""
    if order not in (0, 1, 2):
        raise KernelDomainError(f"Unsupported derivative order {order}.")
    if t < 0:
        raise KernelDomainError(f"Kernel evaluated at negative time {t}.")
    return float(kernel._evaluate(_as_time_array(t), order))


def kernel_sup_norms(kernel: Kernel, T: float) -> KernelNorms:
    if T <= 0:
        raise KernelDomainError("Horizon must be positive.")
    return kernel.sup_norms(T)


def modulus_bound(kernel: Kernel, T: float, delta: float) -> float:
    """Upper bound of the modulus of continuity w_{K,T}(delta).

    For convex non-increasing kernels the largest decrement over a window of
    length delta sits at the origin, so K(0) - K(delta) is exact; the
    Lipschitz bound max|K'| * delta holds for any C^1 kernel.
    """
    if delta <= 0:
        raise KernelDomainError(f"delta must be positive, got {delta}.")
    if delta > T:
        raise KernelDomainError(f"delta={delta} exceeds the horizon T={T}.")
    lipschitz = kernel.sup_norms(T).max_abs_deriv1 * delta
    if kernel.is_convex_nonincreasing(T):
        return float(min(kernel.k0 - float(kernel.eval(delta)), lipschitz))
    return float(lipschitz)


@dataclass
class CMViolation:
    order: int
    time: float
    value: float


@dataclass
class CMReport:
    """Outcome of the complete-monotonicity scan."""

    passed: bool
    max_order: int
    grid_size: int
    step: float
    violations: List[CMViolation] = field(default_factory=list)

    @property
    def first_violation(self) -> Optional[CMViolation]:
        return self.violations[0] if self.violations else None

    def as_dict(self) -> Dict[str, Any]:
        first = self.first_violation
        return {
            "passed": self.passed,
            "max_order": self.max_order,
            "grid_size": self.grid_size,
            "step": self.step,
            "violation_count": len(self.violations),
            "first_violation": None if first is None else {"order": first.order, "time": first.time, "value": first.value},
        }


def check_complete_monotonicity(kernel: Kernel, T: float, max_order: int = 4, grid_size: int = 1001) -> CMReport:
    """Scan (-1)^k Delta_h^k K >= -tol on a uniform grid for k = 1..max_order."""
    if max_order < 1:
        raise KernelDomainError("max_order must be >= 1.")
    if grid_size < 2 or T <= 0:
        raise KernelDomainError("Need T > 0 and at least two grid points.")
    h = T / (grid_size - 1)
    with tracer.start_as_current_span("check_complete_monotonicity") as span:
        span.set_attribute("kernel.type", kernel.describe()["type"])
        span.set_attribute("cm.max_order", max_order)
        extended = h * np.arange(grid_size + max_order)
        values = kernel.eval(extended)
        base_tol = NONNEG_TOL * (1.0 + kernel.k0)
        violations: List[CMViolation] = []
        for k in range(1, max_order + 1):
            signed = (-1.0) ** k * np.diff(values, n=k)[:grid_size]
            bad = np.flatnonzero(signed < -(2.0**k) * base_tol)
            for i in bad:
                violations.append(CMViolation(order=k, time=float(extended[i]), value=float(signed[i])))
        violations.sort(key=lambda v: (v.time, v.order))
        report = CMReport(passed=not violations, max_order=max_order, grid_size=grid_size, step=h, violations=violations)
        span.set_attribute("cm.passed", report.passed)
    if not report.passed:
        first = report.first_violation
        assert first is not None
        logger.info("CM scan failed: order %d at t=%.6g (value %.3e)", first.order, first.time, first.value)
    return report


@dataclass(frozen=True)
class NonNegCertificate:
    """A counterexample to non-negativity preservation.

    Every partial sum x0 + sum_{j<=m} x_j K(t_m - t_j) is >= 0 while the
    recombined sum is negative at ``violation_time``.
    """

    times: Tuple[float, ...]
    coeffs: Tuple[float, ...]
    violation_time: float
    violation_value: float
    x0: float = 0.0

    def reverify(self, kernel: Kernel, tol: Optional[float] = None) -> bool:
        check = check_nonneg_combination(kernel, self.times, self.coeffs, self.x0, scan_times=[self.violation_time])
        tol = _search_tol(kernel, self.coeffs) if tol is None else tol
        return bool(check.min_partial >= -tol and check.min_value < -tol)

    def as_dict(self) -> Dict[str, Any]:
        return {
            "times": list(self.times),
            "coeffs": list(self.coeffs),
            "x0": self.x0,
            "violation_time": self.violation_time,
            "violation_value": self.violation_value,
        }


@dataclass
class NonNegCheck:
    partial_sums: FloatArray
    min_partial: float
    min_value: float
    argmin_time: float


def _search_tol(kernel: Kernel, coeffs: Sequence[float]) -> float:
    return NONNEG_TOL * (1.0 + kernel.k0) * (1.0 + float(np.sum(np.abs(coeffs))))


def _combination(kernel: Kernel, times: FloatArray, coeffs: FloatArray, x0: float, at: FloatArray) -> FloatArray:
    lag = np.subtract.outer(at, times)
    active = lag >= 0.0
    weights = np.where(active, kernel.eval(np.where(active, lag, 0.0)), 0.0)
    return np.asarray(x0 + weights @ coeffs, dtype=np.float64)


def check_nonneg_combination(
    kernel: Kernel,
    times: Sequence[float],
    coeffs: Sequence[float],
    x0: float = 0.0,
    scan_times: Optional[Sequence[float]] = None,
) -> NonNegCheck:
    """Recompute node partial sums and the minimum of the recombined sum.

    The scan always includes the nodes themselves and their left limits.
    """
    ts = np.asarray(times, dtype=np.float64)
    xs = np.asarray(coeffs, dtype=np.float64)
    partial = _combination(kernel, ts, xs, x0, ts)
    probes = [ts, np.nextafter(ts, -np.inf)[ts > 0.0]]
    if scan_times is not None:
        probes.append(np.asarray(scan_times, dtype=np.float64))
    scan = np.concatenate(probes)
    values = _combination(kernel, ts, xs, x0, scan)
    i = int(np.argmin(values))
    return NonNegCheck(
        partial_sums=partial,
        min_partial=float(np.min(partial)),
        min_value=float(values[i]),
        argmin_time=float(scan[i]),
    )


def search_nonneg_counterexample(
    kernel: Kernel,
    M: int,
    T: float,
    trials: int,
    seed: int,
    slack: float = 1.0,
    scan_points: int = 513,
) -> Optional[NonNegCertificate]:
    """Randomized search for a violation of non-negativity preservation.

    Coefficients are chosen greedily so that the m-th partial sum lands
    uniformly in [0, slack]; the recombined sum is then scanned on a uniform
    grid and at the left limits of the nodes.
    """
    if M < 1 or trials < 1:
        raise KernelDomainError("M and trials must be >= 1.")
    rng = np.random.default_rng(seed)
    scan = np.linspace(0.0, T, scan_points)
    k0 = kernel.k0
    with tracer.start_as_current_span("search_nonneg_counterexample") as span:
        span.set_attribute("search.M", M)
        span.set_attribute("search.trials", trials)
        for trial in range(trials):
            times = np.sort(rng.uniform(0.0, T, size=M))
            if np.any(np.diff(times) <= 0.0):
                continue
            coeffs = np.zeros(M)
            for m in range(M):
                prior = float(kernel.eval(times[m] - times[:m]) @ coeffs[:m]) if m else 0.0
                coeffs[m] = (rng.uniform(0.0, slack) - prior) / k0
            check = check_nonneg_combination(kernel, times, coeffs, scan_times=scan)
            tol = _search_tol(kernel, coeffs)
            if check.min_partial >= -tol and check.min_value < -tol:
                span.set_attribute("search.found_at_trial", trial)
                logger.info("Non-negativity counterexample found at trial %d (value %.3e)", trial, check.min_value)
                return NonNegCertificate(
                    times=tuple(times.tolist()),
                    coeffs=tuple(coeffs.tolist()),
                    violation_time=check.argmin_time,
                    violation_value=check.min_value,
                )
        span.set_attribute("search.found_at_trial", -1)
    return None


def exhaustive_nonneg_search(
    kernel: Kernel,
    time_lattice: Sequence[float],
    x_lattice: Sequence[float],
    M: int,
    T: float,
    scan_points: int = 401,
) -> Optional[NonNegCertificate]:
    """Enumerate every increasing M-subset of ``time_lattice`` and every x in ``x_lattice``^M."""
    scan = np.linspace(0.0, T, scan_points)
    for times in itertools.combinations(sorted(time_lattice), M):
        for coeffs in itertools.product(x_lattice, repeat=M):
            check = check_nonneg_combination(kernel, times, coeffs, scan_times=scan)
            tol = _search_tol(kernel, coeffs)
            if check.min_partial >= -tol and check.min_value < -tol:
                return NonNegCertificate(
                    times=tuple(float(t) for t in times),
                    coeffs=tuple(float(x) for x in coeffs),
                    violation_time=check.argmin_time,
                    violation_value=check.min_value,
                )
    return None

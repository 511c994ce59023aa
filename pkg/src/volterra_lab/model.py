"""Coefficient functions of the Volterra equation and their numerical validation.

The jump part is of the separable Levy form eta(x, u) = u * gamma(x); the
package therefore only carries mu, sigma, gamma and the stability index alpha.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import partial
from typing import Any, Callable, Dict, Optional

import numpy as np
from numpy.typing import ArrayLike, NDArray

logger: logging.Logger = logging.getLogger(__name__)

FloatArray = NDArray[np.float64]
Coefficient = Callable[[FloatArray], FloatArray]

# growth ratio at the edge of the grid may exceed the mid-range ratio by this factor
GROWTH_TREND_LIMIT: float = 1.5
ZERO_TOL: float = 1e-15


class ModelParameterError(ValueError):
    """Raised when model parameters fall outside their admissible domain."""


@dataclass(frozen=True)
class AffineParams:
    a: float
    kappa: float
    sigma: float
    eta: float
    alpha: float


@dataclass(frozen=True)
class ModelCoefficients:
    """mu, sigma, gamma as vectorised functions of the state, plus alpha."""

    mu: Coefficient
    sigma: Coefficient
    gamma: Coefficient
    alpha: float
    affine: Optional[AffineParams] = None
    name: str = "custom"

    def describe(self) -> Dict[str, Any]:
        if self.affine is not None:
            p = self.affine
            return {"model": "alpha_cir", "a": p.a, "kappa": p.kappa, "sigma": p.sigma, "eta": p.eta, "alpha": p.alpha}
        return {"model": self.name, "alpha": self.alpha}

    @property
    def is_zero(self) -> bool:
        return self.name == "zero"


def _affine_mu(a: float, kappa: float, x: ArrayLike) -> FloatArray:
    return np.asarray(a - kappa * np.asarray(x, dtype=np.float64), dtype=np.float64)


def _affine_sigma(sigma_bar: float, x: ArrayLike) -> FloatArray:
    return np.asarray(sigma_bar * np.sqrt(np.maximum(np.asarray(x, dtype=np.float64), 0.0)), dtype=np.float64)


def _affine_gamma(eta_bar: float, alpha: float, x: ArrayLike) -> FloatArray:
    arr = np.asarray(x, dtype=np.float64)
    return np.asarray(eta_bar * np.sign(arr) * np.abs(arr) ** (1.0 / alpha), dtype=np.float64)


def _zero(x: ArrayLike) -> FloatArray:
    return np.zeros_like(np.asarray(x, dtype=np.float64))


def check_alpha(alpha: float) -> float:
    if not 1.0 < alpha < 2.0:
        raise ModelParameterError(f"alpha must lie in (1, 2), got {alpha}.")
    return float(alpha)


def affine_coefficients(a: float, kappa: float, sigma: float, eta: float, alpha: float) -> ModelCoefficients:
    """Volterra alpha-CIR coefficients.

    mu(x) = a - kappa x, sigma(x) = sigma_bar sqrt(x+), gamma(x) = eta_bar sign(x)|x|^(1/alpha).
    """
    check_alpha(alpha)
    if a < 0:
        raise ModelParameterError(f"a must be >= 0, got {a}.")
    if sigma < 0:
        raise ModelParameterError(f"sigma must be >= 0, got {sigma}.")
    if eta < 0:
        raise ModelParameterError(f"eta must be >= 0, got {eta}.")
    if not np.isfinite(kappa):
        raise ModelParameterError("kappa must be finite.")
    return ModelCoefficients(
        mu=partial(_affine_mu, float(a), float(kappa)),
        sigma=partial(_affine_sigma, float(sigma)),
        gamma=partial(_affine_gamma, float(eta), float(alpha)),
        alpha=float(alpha),
        affine=AffineParams(a=float(a), kappa=float(kappa), sigma=float(sigma), eta=float(eta), alpha=float(alpha)),
        name="alpha_cir",
    )


def zero_coefficients(alpha: float = 1.5) -> ModelCoefficients:
    """mu = sigma = gamma = 0; every process stays at X0."""
    check_alpha(alpha)
    return ModelCoefficients(mu=_zero, sigma=_zero, gamma=_zero, alpha=float(alpha), name="zero")


def holder_constant(gamma: Coefficient, xs: ArrayLike, ys: ArrayLike) -> float:
    """Largest 1/2-Hoelder ratio |gamma(x) - gamma(y)| / |x - y|^(1/2) over the given pairs."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    gap = np.abs(x - y)
    keep = gap > 0.0
    if not np.any(keep):
        return 0.0
    return float(np.max(np.abs(gamma(x[keep]) - gamma(y[keep])) / np.sqrt(gap[keep])))


def default_growth_grid(x_max: float = 1e3, points: int = 400) -> FloatArray:
    positive = np.logspace(-6.0, np.log10(x_max), points)
    return np.concatenate([-positive[::-1], [0.0], positive])


@dataclass
class AssumptionReport:
    """Sampling-based verdict on the standing assumptions."""

    growth_constant: float
    local_constant: float
    holder_gamma: float
    checks: Dict[str, bool] = field(default_factory=dict)
    worst_points: Dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(self.checks.values())

    def as_dict(self) -> Dict[str, Any]:
        return {
            "passed": self.passed,
            "growth_constant": self.growth_constant,
            "local_constant": self.local_constant,
            "holder_gamma": self.holder_gamma,
            "checks": dict(self.checks),
            "worst_points": dict(self.worst_points),
        }


def validate_assumptions(
    coeffs: ModelCoefficients,
    x_grid: Optional[ArrayLike] = None,
    pair_samples: int = 2000,
    m: float = 5.0,
    seed: int = 0,
) -> AssumptionReport:
    """Check growth, boundary and local regularity conditions on samples."""
    grid = default_growth_grid() if x_grid is None else np.sort(np.asarray(x_grid, dtype=np.float64))
    if grid.size == 0:
        raise ModelParameterError("validate_assumptions needs a non-empty grid.")
    alpha = coeffs.alpha
    checks: Dict[str, bool] = {}
    worst: Dict[str, float] = {}

    with np.errstate(over="ignore", invalid="ignore"):
        ratio = (np.abs(coeffs.mu(grid)) + coeffs.sigma(grid) ** 2 + np.abs(coeffs.gamma(grid)) ** alpha) / (
            1.0 + np.abs(grid)
        )
    ratio = np.where(np.isfinite(ratio), ratio, np.inf)
    growth_constant = float(np.max(ratio))
    edge = float(np.max(np.abs(grid)))
    tail = np.abs(grid) >= 0.5 * edge
    mid = (np.abs(grid) >= 0.05 * edge) & (np.abs(grid) <= 0.1 * edge)
    if np.any(mid) and np.any(tail):
        trend = float(np.max(ratio[tail])) / max(float(np.max(ratio[mid])), ZERO_TOL)
        checks["linear_growth"] = bool(np.isfinite(growth_constant) and trend <= GROWTH_TREND_LIMIT)
    else:
        checks["linear_growth"] = bool(np.isfinite(growth_constant))
    if not checks["linear_growth"]:
        worst["linear_growth"] = float(grid[int(np.argmax(ratio))])

    zero = np.zeros(1)
    checks["mu_at_zero"] = bool(coeffs.mu(zero)[0] >= 0.0)
    checks["sigma_at_zero"] = bool(abs(coeffs.sigma(zero)[0]) <= ZERO_TOL)
    checks["gamma_at_zero"] = bool(abs(coeffs.gamma(zero)[0]) <= ZERO_TOL)
    for key in ("mu_at_zero", "sigma_at_zero", "gamma_at_zero"):
        if not checks[key]:
            worst[key] = 0.0

    rng = np.random.default_rng(seed)
    xs = rng.uniform(-m, m, size=pair_samples)
    ys = rng.uniform(-m, m, size=pair_samples)
    lo, hi = np.minimum(xs, ys), np.maximum(xs, ys)
    g_grid = coeffs.gamma(grid)
    grid_drop = np.diff(g_grid)
    pair_drop = coeffs.gamma(hi) - coeffs.gamma(lo)
    checks["gamma_monotone"] = bool(np.all(grid_drop >= -ZERO_TOL) and np.all(pair_drop >= -ZERO_TOL))
    if not checks["gamma_monotone"]:
        worst["gamma_monotone"] = float(grid[int(np.argmin(grid_drop))])

    def local_ratio(x: FloatArray, y: FloatArray) -> FloatArray:
        gap = np.abs(x - y)
        num = (
            np.abs(coeffs.mu(x) - coeffs.mu(y))
            + (coeffs.sigma(x) - coeffs.sigma(y)) ** 2
            + (coeffs.gamma(x) - coeffs.gamma(y)) ** 2
        )
        return np.asarray(num / gap, dtype=np.float64)

    keep = np.abs(xs - ys) > 0.0
    pair_ratio = local_ratio(xs[keep], ys[keep])
    scales = 10.0 ** -np.arange(1, 11, dtype=np.float64)
    probe_ratio = np.maximum(local_ratio(np.zeros_like(scales), scales), local_ratio(scales, 2.0 * scales))
    local_constant = float(max(np.max(pair_ratio, initial=0.0), np.max(probe_ratio)))
    checks["local_regularity"] = bool(
        np.isfinite(local_constant) and np.max(probe_ratio[-3:]) <= 10.0 * np.max(probe_ratio[:3]) + 1e-12
    )
    if not checks["local_regularity"]:
        worst["local_regularity"] = float(scales[int(np.argmax(probe_ratio))])

    report = AssumptionReport(
        growth_constant=growth_constant,
        local_constant=local_constant,
        holder_gamma=holder_constant(coeffs.gamma, xs, ys),
        checks=checks,
        worst_points=worst,
    )
    if not report.passed:
        logger.info("Assumption checks failed: %s", sorted(k for k, ok in checks.items() if not ok))
    return report

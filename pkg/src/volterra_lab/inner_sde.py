"""Constant-kernel jump SDE on one scheme interval.

On [t_k, t_{k+1}) the scheme needs the solution of

    xi_t = x_init + int_{t_k}^t K(0) (mu(xi_s) ds + sigma(xi_s) dB_s + gamma(xi_{s-}) dL_s),

which is stepped here with full-truncation Euler: coefficients are read at
x+ and the state is floored at 0 after every substep. Paths are vectorised
along the first axis.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Literal, Optional, Tuple

import numpy as np
from numpy.typing import ArrayLike, NDArray

from volterra_lab.levy import NoiseBundle
from volterra_lab.model import ModelCoefficients

logger: logging.Logger = logging.getLogger(__name__)

FloatArray = NDArray[np.float64]

OVERFLOW_GUARD: float = 1e12


@dataclass(frozen=True)
class InnerSolveConfig:
    n_sub: int
    positivity: Literal["full_truncation_floor"] = "full_truncation_floor"
    overflow_guard: float = OVERFLOW_GUARD

    def __post_init__(self) -> None:
        if self.n_sub < 1:
            raise ValueError(f"n_sub must be >= 1, got {self.n_sub}.")


@dataclass
class NegativityDiagnostics:
    """Per-path record of how far the raw Euler state dipped below zero."""

    prefloor_min: FloatArray
    floor_events: NDArray[np.int64]

    @classmethod
    def empty(cls, n_paths: int) -> "NegativityDiagnostics":
        return cls(prefloor_min=np.full(n_paths, np.inf), floor_events=np.zeros(n_paths, dtype=np.int64))

    def record(self, prefloor: FloatArray) -> None:
        with np.errstate(invalid="ignore"):
            self.prefloor_min = np.fmin(self.prefloor_min, prefloor)
            self.floor_events += prefloor < 0.0


@dataclass
class StepIncrement:
    cont: FloatArray
    increment: FloatArray
    jump_amounts: Optional[FloatArray] = None

    @property
    def dz(self) -> FloatArray:
        """Unweighted driver increment of the substep."""
        if self.jump_amounts is None:
            return self.cont
        return self.cont + self.jump_amounts.sum(axis=-1)


def substep_increment(
    coeffs: ModelCoefficients,
    x: FloatArray,
    scale: float,
    h: float,
    dB: FloatArray,
    dL: Optional[FloatArray] = None,
    jump_frac: Optional[FloatArray] = None,
    jump_size: Optional[FloatArray] = None,
    drift_rate: float = 0.0,
) -> StepIncrement:
    """One explicit substep of size ``h`` with kernel weight ``scale``.

    Exact mode applies gamma(x+) dL at the end of the substep. Thinned mode
    adds the compensating drift to the continuous part and applies each
    large jump at its event time, reading gamma at the interpolated left limit.
    """
    xp = np.maximum(x, 0.0)
    if dL is not None:
        cont = coeffs.mu(xp) * h + coeffs.sigma(xp) * dB + coeffs.gamma(xp) * dL
    else:
        cont = coeffs.mu(xp) * h + coeffs.sigma(xp) * dB - coeffs.gamma(xp) * (drift_rate * h)
    scaled = scale * cont
    if jump_size is None or jump_frac is None or jump_size.shape[-1] == 0:
        return StepIncrement(cont=cont, increment=scaled)
    acc = np.zeros_like(x)
    amounts = np.zeros_like(jump_size)
    for m in range(jump_size.shape[-1]):
        x_pre = x + jump_frac[:, m] * scaled + acc
        amounts[:, m] = coeffs.gamma(np.maximum(x_pre, 0.0)) * jump_size[:, m]
        acc = acc + scale * amounts[:, m]
    return StepIncrement(cont=cont, increment=scaled + acc, jump_amounts=amounts)


@dataclass
class InnerSolveResult:
    """``path[:, i]`` is xi at the i-th substep start; ``path[:, -1]`` the left limit at the interval end."""

    path: FloatArray
    terminal: FloatArray
    dz: FloatArray
    jump_amounts: Optional[FloatArray]
    flagged: NDArray[np.bool_]
    flagged_step: NDArray[np.int64]
    diagnostics: NegativityDiagnostics = field(repr=False)


def solve_inner(
    coeffs: ModelCoefficients,
    K0: float,
    x_init: ArrayLike,
    interval: Tuple[float, float],
    config: InnerSolveConfig,
    noise_slice: NoiseBundle,
    diagnostics: Optional[NegativityDiagnostics] = None,
) -> InnerSolveResult:
    """Step xi across one interval; NaN inputs are treated as already flagged paths."""
    t_start, t_end = interval
    n_sub = config.n_sub
    if K0 <= 0:
        raise ValueError("K(0) must be positive.")
    if t_end <= t_start:
        raise ValueError(f"Empty interval {interval}.")
    if noise_slice.grid.n_steps != n_sub:
        raise ValueError(f"Noise slice has {noise_slice.grid.n_steps} substeps, expected {n_sub}.")
    h = (t_end - t_start) / n_sub
    if not np.isclose(noise_slice.grid.step, h, rtol=1e-9, atol=0.0):
        raise ValueError("Noise slice step does not match the interval.")

    n_paths = noise_slice.n_paths
    x = np.array(np.broadcast_to(np.asarray(x_init, dtype=np.float64), (n_paths,)), dtype=np.float64)
    if np.any(x < 0.0):
        raise ValueError("Initial values of the inner SDE must be non-negative.")
    diag = NegativityDiagnostics.empty(n_paths) if diagnostics is None else diagnostics
    flagged = ~np.isfinite(x)
    flagged_step = np.full(n_paths, -1, dtype=np.int64)

    path = np.empty((n_paths, n_sub + 1))
    path[:, 0] = x
    dz = np.empty((n_paths, n_sub))
    offsets = noise_slice.jump_offsets(t_start)
    width = 0 if noise_slice.jump_sizes is None else noise_slice.jump_sizes.shape[2]
    amounts = np.zeros((n_paths, n_sub, width)) if noise_slice.mode == "thinned" else None

    with np.errstate(over="ignore", invalid="ignore"):
        for i in range(n_sub):
            step = substep_increment(
                coeffs,
                x,
                K0,
                h,
                noise_slice.dB[:, i],
                dL=None if noise_slice.dL is None else noise_slice.dL[:, i],
                jump_frac=None if offsets is None else offsets[:, i, :],
                jump_size=None if noise_slice.jump_sizes is None else noise_slice.jump_sizes[:, i, :],
                drift_rate=noise_slice.drift_rate,
            )
            x_new = x + step.increment
            bad = ~np.isfinite(x_new) | (np.abs(x_new) > config.overflow_guard)
            flagged_step[bad & ~flagged] = i
            flagged |= bad
            diag.record(np.where(flagged, np.nan, x_new))
            x = np.maximum(x_new, 0.0)
            x[flagged] = np.nan
            path[:, i + 1] = x
            dz[:, i] = step.cont
            if amounts is not None and step.jump_amounts is not None:
                amounts[:, i, :] = step.jump_amounts

    if np.any(flagged_step >= 0):
        logger.debug("%d paths overflowed on [%g, %g)", int(np.sum(flagged_step >= 0)), t_start, t_end)
    return InnerSolveResult(
        path=path,
        terminal=path[:, -1].copy(),
        dz=dz,
        jump_amounts=amounts,
        flagged=flagged,
        flagged_step=flagged_step,
        diagnostics=diag,
    )

"""Spectrally positive compensated alpha-stable drivers.

Two driver modes are supported:

* ``exact``: per-substep stable increments from a one-sided Chambers-Mallows-Stuck
  generator whose scale matches E[exp(u L_t)] = exp(t |u|^alpha / cos(pi (2 - alpha) / 2)), u <= 0.
* ``thinned``: jumps of size >= threshold from the truncated Levy measure placed
  at exact event times, smaller jumps replaced by their compensating drift.

Noise is derived per path from (master_seed, path_index, grid) with a Philox
counter-based generator, so the number of workers never changes any draw.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import List, Literal, Optional, Sequence, Union

import numpy as np
import pandas as pd
from numpy.typing import NDArray
from scipy import special

logger: logging.Logger = logging.getLogger(__name__)

FloatArray = NDArray[np.float64]
DriverMode = Literal["exact", "thinned"]


class StableParameterError(ValueError):
    """Raised for stability indices or thresholds outside their domain."""


def _check_alpha(alpha: float) -> None:
    if not 1.0 < alpha < 2.0:
        raise StableParameterError(f"alpha must lie strictly inside (1, 2), got {alpha}.")


def compensator_mass(alpha: float) -> float:
    """Integral of (u ^ u^2) against u^(-1-alpha) du over (0, inf)."""
    _check_alpha(alpha)
    return 1.0 / (2.0 - alpha) + 1.0 / (alpha - 1.0)


def laplace_denominator(alpha: float) -> float:
    """cos(pi (2 - alpha) / 2), positive on (1, 2)."""
    return math.cos(math.pi * (2.0 - alpha) / 2.0)


def stable_laplace_exponent(alpha: float, u: float, t: float = 1.0) -> float:
    """log E[exp(u L_t)] for u <= 0."""
    _check_alpha(alpha)
    if u > 0:
        raise StableParameterError("The Laplace transform is only finite for u <= 0.")
    return t * abs(u) ** alpha / laplace_denominator(alpha)


def consistent_measure_scale(alpha: float) -> float:
    """Multiplier c making c u^(-1-alpha) du share the exact-mode Laplace exponent.

    The compensated measure c u^(-1-alpha) du has Laplace exponent c Gamma(-alpha) |u|^alpha.
    """
    _check_alpha(alpha)
    return float(1.0 / (special.gamma(-alpha) * laplace_denominator(alpha)))


@dataclass(frozen=True)
class StableDriverParams:
    alpha: float
    mode: DriverMode = "exact"
    threshold: Optional[float] = None
    measure_scale: float = 1.0

    def __post_init__(self) -> None:
        _check_alpha(self.alpha)
        if self.mode not in ("exact", "thinned"):
            raise StableParameterError(f"Unknown driver mode {self.mode!r}.")
        if self.threshold is not None and self.threshold <= 0:
            raise StableParameterError("The large-jump threshold must be positive.")
        if self.measure_scale <= 0:
            raise StableParameterError("measure_scale must be positive.")

    def resolved_threshold(self, step: float) -> float:
        """Threshold in use; defaults to step^(1/alpha) for a substep of length ``step``."""
        if self.threshold is not None:
            return float(self.threshold)
        return float(step ** (1.0 / self.alpha))

    def jump_rate(self, threshold: float) -> float:
        return self.measure_scale * threshold ** (-self.alpha) / self.alpha

    def drift_rate(self, threshold: float) -> float:
        return self.measure_scale * threshold ** (1.0 - self.alpha) / (self.alpha - 1.0)


def sample_stable_increment(
    params: StableDriverParams,
    dt: float,
    rng: np.random.Generator,
    size: Union[int, Sequence[int], None] = None,
) -> Union[float, FloatArray]:
    """Draw L_{t+dt} - L_t.

    Chambers-Mallows-Stuck with skewness +1 in the S1 parameterisation, scale
    dt^(1/alpha); for alpha > 1 the location parameter of S1 is the mean, so
    zero location gives the compensated increment.
    """
    if dt <= 0:
        raise StableParameterError("dt must be positive.")
    alpha = params.alpha
    u = np.pi * (rng.random(size) - 0.5)
    w = -np.log1p(-rng.random(size))
    theta = math.atan(math.tan(math.pi * alpha / 2.0)) / alpha
    t1 = np.sin(alpha * (u + theta)) / (math.cos(alpha * theta) * np.cos(u)) ** (1.0 / alpha)
    t2 = (np.cos(alpha * theta + (alpha - 1.0) * u) / w) ** ((1.0 - alpha) / alpha)
    draw = dt ** (1.0 / alpha) * t1 * t2
    if size is None:
        return float(draw)
    return np.asarray(draw, dtype=np.float64)


@dataclass(frozen=True)
class JumpStream:
    """Large jumps on [0, T) plus the drift compensating them."""

    times: FloatArray
    sizes: FloatArray
    drift_rate: float
    threshold: float
    horizon: float

    @property
    def count(self) -> int:
        return int(self.times.size)

    def compensated_sum(self) -> float:
        return float(np.sum(self.sizes) - self.drift_rate * self.horizon)


def sample_large_jumps(
    params: StableDriverParams, T: float, rng: np.random.Generator, threshold: Optional[float] = None
) -> JumpStream:
    """Poisson thinning of the Levy measure above the threshold."""
    eps = params.resolved_threshold(T) if threshold is None else float(threshold)
    if eps <= 0:
        raise StableParameterError("The large-jump threshold must be positive.")
    count = int(rng.poisson(params.jump_rate(eps) * T))
    times = np.sort(rng.uniform(0.0, T, size=count))
    # inverse CDF of the Pareto tail above eps
    sizes = eps * (1.0 - rng.random(count)) ** (-1.0 / params.alpha)
    return JumpStream(times=times, sizes=sizes, drift_rate=params.drift_rate(eps), threshold=eps, horizon=T)


@dataclass(frozen=True)
class FineGrid:
    """Uniform substep grid of [0, T] with ``n_steps`` steps."""

    T: float
    n_steps: int

    def __post_init__(self) -> None:
        if self.T <= 0 or self.n_steps < 1:
            raise StableParameterError("A grid needs T > 0 and at least one step.")

    @property
    def step(self) -> float:
        return self.T / self.n_steps

    @property
    def times(self) -> FloatArray:
        return self.step * np.arange(self.n_steps + 1, dtype=np.float64)


@dataclass(frozen=True)
class DriverNoise:
    """Noise of one path on a fine grid."""

    master_seed: int
    path_index: int
    grid: FineGrid
    mode: DriverMode
    dB: FloatArray
    dL: Optional[FloatArray] = None
    jumps: Optional[JumpStream] = None


def path_rng(master_seed: int, path_index: int) -> np.random.Generator:
    """Counter-based generator owned by one path."""
    seq = np.random.SeedSequence(entropy=int(master_seed), spawn_key=(int(path_index),))
    return np.random.Generator(np.random.Philox(seq))


def derive_path_noise(master_seed: int, path_index: int, grid: FineGrid, params: StableDriverParams) -> DriverNoise:
    rng = path_rng(master_seed, path_index)
    h = grid.step
    dB = rng.standard_normal(grid.n_steps) * math.sqrt(h)
    if params.mode == "exact":
        dL = np.asarray(sample_stable_increment(params, h, rng, size=grid.n_steps), dtype=np.float64)
        return DriverNoise(master_seed, path_index, grid, "exact", dB=dB, dL=dL)
    jumps = sample_large_jumps(params, grid.T, rng, threshold=params.resolved_threshold(h))
    return DriverNoise(master_seed, path_index, grid, "thinned", dB=dB, jumps=jumps)


@dataclass(frozen=True)
class NoiseBundle:
    """Noise of many paths stacked for vectorised stepping.

    Thinned-mode jumps are binned per substep: ``jump_times[p, i, :]`` holds
    the absolute event times inside substep i (``inf`` for empty slots) and
    ``jump_sizes`` the matching sizes (0 for empty slots), sorted in time.
    """

    grid: FineGrid
    mode: DriverMode
    path_indices: NDArray[np.int64]
    dB: FloatArray
    dL: Optional[FloatArray] = None
    jump_times: Optional[FloatArray] = None
    jump_sizes: Optional[FloatArray] = None
    drift_rate: float = 0.0
    threshold: Optional[float] = None

    @property
    def n_paths(self) -> int:
        return int(self.dB.shape[0])

    def window(self, start: int, stop: int) -> "NoiseBundle":
        """Substeps [start, stop) of every path."""
        sub = FineGrid(T=self.grid.step * (stop - start), n_steps=stop - start)
        return NoiseBundle(
            grid=sub,
            mode=self.mode,
            path_indices=self.path_indices,
            dB=self.dB[:, start:stop],
            dL=None if self.dL is None else self.dL[:, start:stop],
            jump_times=None if self.jump_times is None else self.jump_times[:, start:stop, :],
            jump_sizes=None if self.jump_sizes is None else self.jump_sizes[:, start:stop, :],
            drift_rate=self.drift_rate,
            threshold=self.threshold,
        )

    def jump_offsets(self, origin: float) -> Optional[FloatArray]:
        """Event times as fractions of their substep, for a window starting at ``origin``."""
        if self.jump_times is None:
            return None
        h = self.grid.step
        starts = origin + h * np.arange(self.grid.n_steps)
        frac = (self.jump_times - starts[None, :, None]) / h
        return np.where(np.isfinite(frac), np.clip(frac, 0.0, 1.0), 1.0)


def _bin_jumps(streams: Sequence[JumpStream], grid: FineGrid) -> tuple[FloatArray, FloatArray]:
    n = grid.n_steps
    bins = [np.clip((s.times / grid.step).astype(np.int64), 0, n - 1) for s in streams]
    width = max((int(np.bincount(b, minlength=n).max()) if b.size else 0) for b in bins) if bins else 0
    times = np.full((len(streams), n, width), np.inf)
    sizes = np.zeros((len(streams), n, width))
    for p, (stream, b) in enumerate(zip(streams, bins)):
        if b.size == 0:
            continue
        rank = np.arange(b.size) - np.searchsorted(b, b, side="left")
        times[p, b, rank] = stream.times
        sizes[p, b, rank] = stream.sizes
    return times, sizes


def stack_noise(noises: Sequence[DriverNoise]) -> NoiseBundle:
    if not noises:
        raise StableParameterError("Cannot stack an empty noise list.")
    grid, mode = noises[0].grid, noises[0].mode
    indices = np.asarray([n.path_index for n in noises], dtype=np.int64)
    dB = np.stack([n.dB for n in noises])
    if mode == "exact":
        dL = np.stack([np.asarray(n.dL) for n in noises])
        return NoiseBundle(grid=grid, mode=mode, path_indices=indices, dB=dB, dL=dL)
    streams: List[JumpStream] = [n.jumps for n in noises if n.jumps is not None]
    times, sizes = _bin_jumps(streams, grid)
    return NoiseBundle(
        grid=grid,
        mode=mode,
        path_indices=indices,
        dB=dB,
        jump_times=times,
        jump_sizes=sizes,
        drift_rate=streams[0].drift_rate,
        threshold=streams[0].threshold,
    )


def derive_noise_bundle(
    master_seed: int, path_indices: Sequence[int], grid: FineGrid, params: StableDriverParams
) -> NoiseBundle:
    return stack_noise([derive_path_noise(master_seed, int(i), grid, params) for i in path_indices])


def aggregate_noise(bundle: NoiseBundle, factor: int) -> NoiseBundle:
    """Coarsen a bundle by merging ``factor`` consecutive substeps.

    Brownian and stable increments are summed; jump events keep their
    absolute times and sizes and are re-binned.
    """
    if factor < 1 or bundle.grid.n_steps % factor:
        raise StableParameterError(f"Cannot aggregate {bundle.grid.n_steps} substeps by {factor}.")
    if factor == 1:
        return bundle
    p, n = bundle.dB.shape
    coarse = FineGrid(T=bundle.grid.T, n_steps=n // factor)
    dB = bundle.dB.reshape(p, n // factor, factor).sum(axis=2)
    dL = None if bundle.dL is None else bundle.dL.reshape(p, n // factor, factor).sum(axis=2)
    times = sizes = None
    if bundle.jump_times is not None and bundle.jump_sizes is not None:
        width = bundle.jump_times.shape[2] * factor
        merged_t = bundle.jump_times.reshape(p, n // factor, width)
        merged_s = bundle.jump_sizes.reshape(p, n // factor, width)
        order = np.argsort(merged_t, axis=2, kind="stable")
        merged_t = np.take_along_axis(merged_t, order, axis=2)
        merged_s = np.take_along_axis(merged_s, order, axis=2)
        used = int(np.max(np.sum(np.isfinite(merged_t), axis=2), initial=0))
        times, sizes = merged_t[:, :, :used], merged_s[:, :, :used]
    return NoiseBundle(
        grid=coarse,
        mode=bundle.mode,
        path_indices=bundle.path_indices,
        dB=dB,
        dL=dL,
        jump_times=times,
        jump_sizes=sizes,
        drift_rate=bundle.drift_rate,
        threshold=bundle.threshold,
    )


def noise_to_frame(bundle: NoiseBundle) -> pd.DataFrame:
    """Rows (path, substep, dB, dL_or_jump_list) for the optional noise dump."""
    p, n = bundle.dB.shape
    frame = pd.DataFrame(
        {
            "path": np.repeat(bundle.path_indices, n),
            "substep": np.tile(np.arange(n), p),
            "dB": bundle.dB.ravel(),
        }
    )
    if bundle.dL is not None:
        frame["dL_or_jump_list"] = bundle.dL.ravel()
        return frame
    assert bundle.jump_times is not None and bundle.jump_sizes is not None
    cells: List[str] = []
    for times, sizes in zip(bundle.jump_times.reshape(p * n, -1), bundle.jump_sizes.reshape(p * n, -1)):
        live = np.isfinite(times)
        cells.append(";".join(f"{t!r}:{s!r}" for t, s in zip(times[live].tolist(), sizes[live].tolist())))
    frame["dL_or_jump_list"] = cells
    return frame

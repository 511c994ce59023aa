"""Run configuration.

A run is described by a single JSON document parsed into :class:`RunConfig`.
Every field has a default; the empty document ``{}`` is the desk
configuration (Volterra alpha-CIR, two-factor kernel, 1000 paths, seed 42).
"""

from __future__ import annotations

import logging
import os
from pathlib import Path
from typing import Annotated, Any, Dict, List, Literal, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from volterra_lab.analysis import StudySetup
from volterra_lab.kernels import ExpSumKernel, Kernel, SampledKernel
from volterra_lab.levy import StableDriverParams, consistent_measure_scale
from volterra_lab.model import ModelCoefficients, affine_coefficients, zero_coefficients
from volterra_lab.scheme import KEEP_OPTIONS, SchemeGrid
from volterra_lab.workers import DEFAULT_BLOCK_SIZE, default_threads

logger: logging.Logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Raised when a configuration document cannot be read or validated."""


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ExpSumKernelSpec(_Section):
    type: Literal["expsum"] = "expsum"
    w: List[float] = Field(default_factory=lambda: [0.7, 0.3], min_length=1)
    lam: List[float] = Field(default_factory=lambda: [0.5, 3.0], min_length=1, alias="lambda")

    model_config = ConfigDict(extra="forbid", frozen=True, populate_by_name=True)

    @model_validator(mode="after")
    def _same_length(self) -> "ExpSumKernelSpec":
        if len(self.w) != len(self.lam):
            raise ValueError("kernel.w and kernel.lambda must have the same length")
        return self

    def build(self) -> Kernel:
        return ExpSumKernel(weights=tuple(self.w), rates=tuple(self.lam))


class SampledKernelSpec(_Section):
    type: Literal["sampled"]
    times: List[float] = Field(min_length=2)
    values: List[float] = Field(min_length=2)

    def build(self) -> Kernel:
        return SampledKernel(times=tuple(self.times), values=tuple(self.values))


KernelSpec = Annotated[Union[ExpSumKernelSpec, SampledKernelSpec], Field(discriminator="type")]


class AlphaCirSpec(_Section):
    model: Literal["alpha_cir"] = "alpha_cir"
    a: float = Field(default=1.0, ge=0.0)
    kappa: float = 1.0
    sigma: float = Field(default=0.5, ge=0.0)
    eta: float = Field(default=0.3, ge=0.0)
    alpha: float = Field(default=1.5, gt=1.0, lt=2.0)
    X0: float = Field(default=1.0, ge=0.0)

    def build(self) -> ModelCoefficients:
        return affine_coefficients(self.a, self.kappa, self.sigma, self.eta, self.alpha)


class ZeroModelSpec(_Section):
    model: Literal["zero"]
    alpha: float = Field(default=1.5, gt=1.0, lt=2.0)
    X0: float = Field(default=1.0, ge=0.0)

    def build(self) -> ModelCoefficients:
        return zero_coefficients(self.alpha)


ModelSpec = Annotated[Union[AlphaCirSpec, ZeroModelSpec], Field(discriminator="model")]


class GridSpec(_Section):
    T: float = Field(default=1.0, gt=0.0)
    N: int = Field(default=64, ge=1)
    N_list: List[int] = Field(default_factory=lambda: [16, 32, 64])
    n_sub: int = Field(default=16, ge=1)

    @field_validator("N_list")
    @classmethod
    def _increasing(cls, value: List[int]) -> List[int]:
        if not value or any(n < 1 for n in value) or value != sorted(set(value)):
            raise ValueError("N_list must be a non-empty strictly increasing list of positive integers")
        return value


class DriverSpec(_Section):
    mode: Literal["exact", "thinned"] = "exact"
    threshold: Optional[float] = Field(default=None, gt=0.0)
    measure_scale: Union[float, Literal["consistent"]] = 1.0

    @field_validator("measure_scale")
    @classmethod
    def _positive(cls, value: Union[float, str]) -> Union[float, str]:
        if isinstance(value, float) and value <= 0.0:
            raise ValueError("measure_scale must be positive")
        return value


class SimulateSpec(_Section):
    keep: List[str] = Field(default_factory=lambda: ["xi", "xhat", "xbar"])
    dump_paths: int = Field(default=100, ge=0)
    write_noise: bool = False

    @field_validator("keep")
    @classmethod
    def _known(cls, value: List[str]) -> List[str]:
        unknown = set(value) - KEEP_OPTIONS
        if unknown:
            raise ValueError(f"unknown keep options {sorted(unknown)}")
        return value


class LaplaceSpec(_Section):
    u: float = Field(default=-0.5, le=0.0)
    f: Union[float, List[float]] = 0.0
    h: float = Field(default=1e-3, gt=0.0)
    monte_carlo: bool = True
    N: Optional[int] = Field(default=None, ge=1)

    @field_validator("f")
    @classmethod
    def _nonpositive(cls, value: Union[float, List[float]]) -> Union[float, List[float]]:
        values = value if isinstance(value, list) else [value]
        if any(v > 0.0 for v in values):
            raise ValueError("f must be <= 0")
        return value


class YWSpec(_Section):
    run: bool = True
    delta: float = Field(default=100.0, gt=1.0)
    eps: float = Field(default=0.01, gt=0.0)
    samples: int = Field(default=100_000, ge=1)
    c: float = Field(default=1.0, gt=0.0)
    m: float = Field(default=5.0, gt=0.0)


class StableTestSpec(_Section):
    u_values: List[float] = Field(default_factory=lambda: [-1.0, -0.5])
    draws: int = Field(default=1_000_000, ge=2)
    dt: float = Field(default=1.0, gt=0.0)
    ks_draws: int = Field(default=20_000, ge=2)

    @field_validator("u_values")
    @classmethod
    def _nonpositive(cls, value: List[float]) -> List[float]:
        if any(u > 0.0 for u in value):
            raise ValueError("u_values must be <= 0")
        return value


class ExhaustiveSpec(_Section):
    time_lattice: List[float] = Field(min_length=1)
    x_lattice: List[float] = Field(min_length=1)
    M: int = Field(default=3, ge=1)


class KernelCheckSpec(_Section):
    T: Optional[float] = Field(default=None, gt=0.0)
    max_order: int = Field(default=4, ge=1)
    grid_size: int = Field(default=1001, ge=2)
    M: int = Field(default=3, ge=1)
    trials: int = Field(default=2000, ge=1)
    search_seed: int = 0
    exhaustive: Optional[ExhaustiveSpec] = None


class OracleSpec(_Section):
    ladder: List[Tuple[int, int]] = Field(default_factory=list)
    n_paths: Optional[int] = Field(default=None, ge=2)


class RunConfig(_Section):
    kernel: KernelSpec = Field(default_factory=ExpSumKernelSpec)
    model: ModelSpec = Field(default_factory=AlphaCirSpec)
    grid: GridSpec = Field(default_factory=GridSpec)
    driver: DriverSpec = Field(default_factory=DriverSpec)
    n_paths: int = Field(default=1000, ge=1)
    seed: int = Field(default=42, ge=0, lt=2**64)
    threads: Optional[int] = Field(default=None, ge=1)
    block_size: int = Field(default=DEFAULT_BLOCK_SIZE, ge=1)
    max_flag_rate: float = Field(default=1e-3, gt=0.0, le=1.0)
    simulate: SimulateSpec = Field(default_factory=SimulateSpec)
    laplace: LaplaceSpec = Field(default_factory=LaplaceSpec)
    yw: YWSpec = Field(default_factory=YWSpec)
    stable_test: StableTestSpec = Field(default_factory=StableTestSpec)
    kernel_check: KernelCheckSpec = Field(default_factory=KernelCheckSpec)
    oracle: OracleSpec = Field(default_factory=OracleSpec)

    def with_overrides(self, seed: Optional[int] = None, threads: Optional[int] = None) -> "RunConfig":
        """Copy with the CLI flag values applied; re-validated."""
        data = self.model_dump(mode="json", by_alias=True)
        if seed is not None:
            data["seed"] = seed
        if threads is not None:
            data["threads"] = threads
        return parse_config(data)

    def echo(self) -> Dict[str, Any]:
        """The configuration embedded in every artifact, without the thread count."""
        return self.model_dump(mode="json", by_alias=True, exclude={"threads"})

    @property
    def X0(self) -> float:
        return self.model.X0

    @property
    def resolved_threads(self) -> int:
        return self.threads if self.threads is not None else default_threads()

    def to_kernel(self) -> Kernel:
        return self.kernel.build()

    def to_coeffs(self) -> ModelCoefficients:
        return self.model.build()

    def to_driver(self) -> StableDriverParams:
        alpha = self.model.alpha
        scale = self.driver.measure_scale
        resolved = consistent_measure_scale(alpha) if scale == "consistent" else float(scale)
        return StableDriverParams(alpha=alpha, mode=self.driver.mode, threshold=self.driver.threshold, measure_scale=resolved)

    def to_grid(self, N: Optional[int] = None) -> SchemeGrid:
        return SchemeGrid(T=self.grid.T, N=self.grid.N if N is None else N, n_sub=self.grid.n_sub)

    def to_setup(self) -> StudySetup:
        return StudySetup(
            kernel=self.to_kernel(),
            coeffs=self.to_coeffs(),
            X0=self.X0,
            T=self.grid.T,
            n_sub=self.grid.n_sub,
            driver=self.to_driver(),
            threads=self.resolved_threads,
            block_size=self.block_size,
            max_flag_rate=self.max_flag_rate,
        )


def format_validation_error(error: ValidationError) -> str:
    parts = []
    for item in error.errors():
        where = ".".join(str(p) for p in item["loc"]) or "<root>"
        parts.append(f"{where}: {item['msg']}")
    return "; ".join(parts)


def parse_config(data: Any) -> RunConfig:
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"Invalid configuration: {format_validation_error(e)}") from e


def load_config(path: Optional[Union[str, os.PathLike[str]]]) -> RunConfig:
    """Read and validate a JSON run document; ``None`` gives the desk defaults."""
    if path is None:
        return RunConfig()
    source = Path(path)
    try:
        text = source.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"Cannot read config {source}: {e}") from e
    try:
        config = RunConfig.model_validate_json(text)
    except ValidationError as e:
        raise ConfigError(f"Invalid configuration in {source}: {format_validation_error(e)}") from e
    logger.debug("Loaded config from %s", source)
    return config

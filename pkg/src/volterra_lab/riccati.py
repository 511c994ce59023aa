"""Riccati-Volterra equation and the Laplace transform of the Volterra alpha-CIR process.

For u <= 0 and f <= 0,

    E[exp(u X_T + int_0^T f(T - s) X_s ds)] = exp(Y0),

with psi(t) = u K(t) + int_0^t K(t - s) F(psi(s), f(s)) ds and
F(psi, f) = f - kappa psi + sigma^2 psi^2 / 2 + eta^alpha |psi|^alpha / cos(pi (2 - alpha) / 2).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np
from numpy.typing import ArrayLike, NDArray
from opentelemetry import trace
from scipy import integrate

from volterra_lab.kernels import ExpSumKernel, Kernel, KernelDomainError
from volterra_lab.levy import laplace_denominator
from volterra_lab.model import AffineParams, check_alpha
from volterra_lab.scheme import SchemePaths

logger: logging.Logger = logging.getLogger(__name__)
tracer = trace.get_tracer(__name__)

FloatArray = NDArray[np.float64]

PSI_GUARD: float = 1e6
CORRECTOR_TOL: float = 1e-10
CORRECTOR_MAX_ITER: int = 50
RESIDUAL_TOL: float = 1e-8


class RiccatiBlowUpError(RuntimeError):
    """Raised when |psi| leaves the guard, signalling a possible finite-time blow-up."""

    def __init__(self, time: float, value: float):
        super().__init__(f"psi reached {value:.6g} at t={time:.6g}")
        self.time = time
        self.value = value


class RiccatiConvergenceError(RuntimeError):
    """Raised when the corrector iteration does not settle at a node."""

    def __init__(self, time: float, iterations: int):
        super().__init__(f"corrector did not converge at t={time:.6g} after {iterations} iterations")
        self.time = time
        self.iterations = iterations


@dataclass(frozen=True)
class RiccatiProblem:
    """Inputs of the Riccati-Volterra equation on the uniform grid t_i = i h, i = 0..n."""

    u: float
    params: AffineParams
    kernel: Kernel
    T: float
    X0: float
    f: Union[float, Tuple[float, ...]] = 0.0
    h: float = 1e-3

    def __post_init__(self) -> None:
        check_alpha(self.params.alpha)
        if self.u > 0:
            raise ValueError(f"u must be <= 0, got {self.u}.")
        if self.T <= 0 or self.h <= 0 or self.h > self.T:
            raise ValueError(f"Need 0 < h <= T, got h={self.h}, T={self.T}.")
        n = self.n_steps
        if abs(n * self.h - self.T) > 1e-9 * self.T:
            raise ValueError(f"h={self.h} does not divide T={self.T}.")
        if not isinstance(self.f, (int, float)):
            object.__setattr__(self, "f", tuple(float(v) for v in self.f))
            if len(self.f) != n + 1:
                raise ValueError(f"f must have {n + 1} grid values, got {len(self.f)}.")
        if np.any(self.f_values > 0.0):
            raise ValueError("f must be <= 0 on the grid.")
        if self.X0 < 0:
            raise ValueError(f"X0 must be >= 0, got {self.X0}.")

    @property
    def n_steps(self) -> int:
        return int(round(self.T / self.h))

    @property
    def step(self) -> float:
        return self.T / self.n_steps

    @property
    def times(self) -> FloatArray:
        return self.step * np.arange(self.n_steps + 1, dtype=np.float64)

    @property
    def f_values(self) -> FloatArray:
        if isinstance(self.f, (int, float)):
            return np.full(self.n_steps + 1, float(self.f))
        return np.asarray(self.f, dtype=np.float64)


@dataclass
class RiccatiSolution:
    times: FloatArray
    psi: FloatArray
    rhs: FloatArray
    method: str
    iterations: int = 0
    max_node_iterations: int = 0
    residual: float = float("nan")
    nonpositive: bool = True
    extra: Dict[str, Any] = field(default_factory=dict)

    def as_dict(self) -> Dict[str, Any]:
        return {
            "method": self.method,
            "times": self.times.tolist(),
            "psi": self.psi.tolist(),
            "iterations": self.iterations,
            "max_node_iterations": self.max_node_iterations,
            "residual": self.residual,
            "psi_nonpositive": self.nonpositive,
        }


@dataclass(frozen=True)
class LaplaceResult:
    solution: RiccatiSolution
    Y0: float

    @property
    def transform(self) -> float:
        return float(np.exp(self.Y0))


def riccati_rhs(psi: ArrayLike, f_val: ArrayLike, params: AffineParams) -> FloatArray:
    """F(psi) = f - kappa psi + (sigma^2 / 2) psi^2 + (eta^alpha / cos(pi (2 - alpha) / 2)) |psi|^alpha."""
    p = np.asarray(psi, dtype=np.float64)
    jump = params.eta**params.alpha / laplace_denominator(params.alpha)
    return np.asarray(
        np.asarray(f_val, dtype=np.float64)
        - params.kappa * p
        + 0.5 * params.sigma**2 * p**2
        + jump * np.abs(p) ** params.alpha,
        dtype=np.float64,
    )


def _trapezoid_convolution(lags: FloatArray, values: FloatArray, h: float) -> FloatArray:
    """int_0^{t_i} K(t_i - s) g(s) ds by the trapezoid rule at every node."""
    full = np.convolve(lags, values)[: lags.size]
    conv = h * (full - 0.5 * lags * values[0] - 0.5 * lags[0] * values)
    conv[0] = 0.0
    return np.asarray(conv, dtype=np.float64)


def volterra_residual(problem: RiccatiProblem, psi: FloatArray) -> float:
    """Largest nodal defect of the discretised equation."""
    lags = np.asarray(problem.kernel.eval(problem.times), dtype=np.float64)
    rhs = riccati_rhs(psi, problem.f_values, problem.params)
    defect = psi - (problem.u * lags + _trapezoid_convolution(lags, rhs, problem.step))
    return float(np.max(np.abs(defect)))


def solve_psi(problem: RiccatiProblem) -> RiccatiSolution:
    """Trapezoid predictor-corrector for psi on the problem grid.

    The predictor is the left-rectangle rule; the corrector iterates the
    implicit trapezoid node equation to a fixed point.
    """
    with tracer.start_as_current_span("solve_psi") as span:
        n, h = problem.n_steps, problem.step
        span.set_attribute("riccati.n_steps", n)
        times = problem.times
        lags = np.asarray(problem.kernel.eval(times), dtype=np.float64)
        k0 = float(lags[0])
        f_vals = problem.f_values
        params = problem.params

        psi = np.zeros(n + 1)
        rhs = np.zeros(n + 1)
        psi[0] = problem.u * k0
        rhs[0] = float(riccati_rhs(psi[0], f_vals[0], params))
        total_iterations = 0
        worst_node = 0

        for i in range(1, n + 1):
            # sum_{j=1}^{i-1} K_{i-j} F_j
            history = float(np.dot(lags[i - 1 : 0 : -1], rhs[1:i])) if i > 1 else 0.0
            base = problem.u * lags[i] + h * (0.5 * lags[i] * rhs[0] + history)
            current = problem.u * lags[i] + h * (lags[i] * rhs[0] + history)
            for iteration in range(1, CORRECTOR_MAX_ITER + 1):
                if not np.isfinite(current) or abs(current) > PSI_GUARD:
                    span.set_attribute("riccati.blow_up_time", float(times[i]))
                    raise RiccatiBlowUpError(float(times[i]), float(current))
                updated = base + 0.5 * h * k0 * float(riccati_rhs(current, f_vals[i], params))
                converged = abs(updated - current) <= CORRECTOR_TOL * (1.0 + abs(updated))
                current = updated
                if converged:
                    break
            else:
                raise RiccatiConvergenceError(float(times[i]), CORRECTOR_MAX_ITER)
            if not np.isfinite(current) or abs(current) > PSI_GUARD:
                raise RiccatiBlowUpError(float(times[i]), float(current))
            psi[i] = current
            rhs[i] = float(riccati_rhs(current, f_vals[i], params))
            total_iterations += iteration
            worst_node = max(worst_node, iteration)

        residual = volterra_residual(problem, psi)
        nonpositive = bool(np.all(psi <= 0.0))
        span.set_attribute("riccati.residual", residual)
        if residual > RESIDUAL_TOL * (1.0 + abs(problem.u) * k0):
            logger.warning("Riccati residual %.3e above tolerance", residual)
        if not nonpositive:
            logger.warning("psi turned positive on the grid (max %.3e)", float(np.max(psi)))
        return RiccatiSolution(
            times=times,
            psi=psi,
            rhs=rhs,
            method="volterra_trapezoid",
            iterations=total_iterations,
            max_node_iterations=worst_node,
            residual=residual,
            nonpositive=nonpositive,
        )


def laplace_exponent(problem: RiccatiProblem, solution: RiccatiSolution) -> float:
    """Y0 = u X0 + X0 int_0^T F(psi) ds + a int_0^T psi ds, both by the trapezoid rule."""
    rhs = riccati_rhs(solution.psi, problem.f_values, problem.params)
    int_rhs = float(integrate.trapezoid(rhs, solution.times))
    int_psi = float(integrate.trapezoid(solution.psi, solution.times))
    return problem.u * problem.X0 + problem.X0 * int_rhs + problem.params.a * int_psi


def laplace_transform(problem: RiccatiProblem) -> LaplaceResult:
    solution = solve_psi(problem)
    return LaplaceResult(solution=solution, Y0=laplace_exponent(problem, solution))


def solve_psi_factor_ode(problem: RiccatiProblem, rtol: float = 1e-11, atol: float = 1e-13) -> RiccatiSolution:
    """Integrate psi = sum_i w_i psi^i with psi^i' = -lambda_i psi^i + F(psi), psi^i(0) = u."""
    kernel = problem.kernel
    if not isinstance(kernel, ExpSumKernel):
        raise KernelDomainError("The factor ODE needs a sum-of-exponentials kernel.")
    times = problem.times
    f_vals = problem.f_values
    weights, rates = kernel.w, kernel.lam
    params = problem.params

    def rhs(t: float, state: FloatArray) -> FloatArray:
        f_t = float(np.interp(t, times, f_vals))
        drive = float(riccati_rhs(float(weights @ state), f_t, params))
        return np.asarray(-rates * state + drive, dtype=np.float64)

    with tracer.start_as_current_span("solve_psi_factor_ode"):
        sol = integrate.solve_ivp(
            rhs,
            (0.0, problem.T),
            np.full(kernel.n_factors, problem.u),
            method="DOP853",
            t_eval=times,
            rtol=rtol,
            atol=atol,
        )
    if not sol.success:
        raise RiccatiConvergenceError(float(sol.t[-1]) if sol.t.size else 0.0, int(sol.nfev))
    psi = np.asarray(weights @ sol.y, dtype=np.float64)
    if np.any(np.abs(psi) > PSI_GUARD):
        i = int(np.argmax(np.abs(psi) > PSI_GUARD))
        raise RiccatiBlowUpError(float(times[i]), float(psi[i]))
    return RiccatiSolution(
        times=times,
        psi=psi,
        rhs=riccati_rhs(psi, f_vals, params),
        method="factor_ode",
        iterations=int(sol.nfev),
        nonpositive=bool(np.all(psi <= 0.0)),
    )


def cir_laplace_closed_form(a: float, kappa: float, sigma: float, X0: float, u: float, T: float) -> float:
    """E[exp(u X_T)] for the classical CIR process dX = (a - kappa X) dt + sigma sqrt(X) dB."""
    if u > 0:
        raise ValueError("u must be <= 0.")
    growth = -np.expm1(-kappa * T) / kappa if kappa != 0.0 else T
    denom = 1.0 - 0.5 * sigma**2 * u * growth
    B = u * np.exp(-kappa * T) / denom
    A = -(2.0 * a / sigma**2) * np.log(denom) if sigma > 0.0 else a * u * growth
    return float(np.exp(A + B * X0))


def mc_laplace(
    paths: SchemePaths,
    u: float,
    f: Union[float, ArrayLike] = 0.0,
    f_times: Optional[ArrayLike] = None,
) -> Tuple[float, float]:
    """Mean and standard error of exp(u Xhat_T + sum_j f(T - s_j) Xhat_{s_j} h) over unflagged paths.

    ``paths`` must carry ``xhat``; an array ``f`` is interpolated from ``f_times``.
    """
    if u > 0:
        raise ValueError("u must be <= 0.")
    xhat = paths.require("xhat")[paths.valid]
    if xhat.shape[0] == 0:
        raise ValueError("No unflagged paths to average.")
    grid = paths.grid
    s = grid.fine_times[:-1]
    if np.ndim(f) == 0:
        f_at = np.full(s.size, float(np.asarray(f)))
    else:
        if f_times is None:
            raise ValueError("An array f needs its sample times.")
        f_at = np.interp(grid.T - s, np.asarray(f_times, dtype=np.float64), np.asarray(f, dtype=np.float64))
    if np.any(f_at > 0.0):
        raise ValueError("f must be <= 0.")
    exponent = u * xhat[:, -1]
    if np.any(f_at != 0.0):
        exponent = exponent + (xhat[:, :-1] @ f_at) * grid.fine_step
    values = np.exp(exponent)
    estimate = float(np.mean(values))
    se = float(np.std(values, ddof=1) / np.sqrt(values.size)) if values.size > 1 else 0.0
    return estimate, se

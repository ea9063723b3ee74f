"""Weighted nonlinear least squares (damped Gauss-Newton / Levenberg-Marquardt).

The engine minimises ``sum(r_i**2)`` where ``r`` is a *weighted* residual
vector supplied by the caller, i.e. ``r_i = (y_i - f_i) / sigma_i`` for the
usual curve-fitting case.  :class:`CurveModel` wraps that common case.

No box constraints are supported.  Callers that need positivity should fit
the logarithm of the parameter.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Optional

import numpy as np

__all__ = [
    "FitError",
    "FitOptions",
    "FitOutcome",
    "Model",
    "CurveModel",
    "BootstrapResult",
    "least_squares",
    "numerical_jacobian",
    "bootstrap_errors",
]


class FitError(RuntimeError):
    """Raised when a fit cannot even be started (non-finite residuals, bad input)."""


@dataclass(frozen=True)
class FitOptions:
    max_iterations: int = 200
    step_tolerance: float = 1e-8
    gradient_tolerance: float = 1e-10
    initial_damping: float = 1e-3
    damping_increase: float = 10.0
    damping_decrease: float = 0.3
    max_damping: float = 1e16
    # undamped trial step is attempted while damping is below this value
    gauss_newton_threshold: float = 1e-2
    fd_relative_step: float = 1e-6
    scale_covariance: bool = True


@dataclass
class Model:
    """Residual model for :func:`least_squares`.

    ``residual(params, data)`` returns the weighted residual vector and
    ``jacobian(params, data)`` (optional) its derivative, shape ``(m, p)``.
    """

    residual: Callable[[np.ndarray, Any], np.ndarray]
    n_params: int
    data: Any = None
    jacobian: Optional[Callable[[np.ndarray, Any], np.ndarray]] = None

    def r(self, params: np.ndarray) -> np.ndarray:
        return np.asarray(self.residual(params, self.data), dtype=float)

    def jac(self, params: np.ndarray, relative_step: float = 1e-6) -> np.ndarray:
        if self.jacobian is not None:
            return np.asarray(self.jacobian(params, self.data), dtype=float)
        return numerical_jacobian(self.r, params, relative_step)


@dataclass
class CurveModel:
    """``y ~ func(x, params)`` with per-point uncertainties ``sigma``."""

    func: Callable[[np.ndarray, np.ndarray], np.ndarray]
    x: np.ndarray
    y: np.ndarray
    sigma: np.ndarray
    jac: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None
    n_params: Optional[int] = None

    def __post_init__(self) -> None:
        self.x = np.asarray(self.x, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        self.sigma = np.broadcast_to(np.asarray(self.sigma, dtype=float), self.y.shape).copy()
        if np.any(self.sigma <= 0):
            raise ValueError("sigma must be strictly positive")

    def predict(self, params: np.ndarray) -> np.ndarray:
        return np.asarray(self.func(self.x, params), dtype=float)

    def with_data(self, y: np.ndarray) -> "CurveModel":
        return CurveModel(self.func, self.x, y, self.sigma, self.jac, self.n_params)

    def as_model(self, n_params: int) -> Model:
        def residual(p, _):
            return (self.y - self.predict(p)) / self.sigma

        jacobian = None
        if self.jac is not None:
            def jacobian(p, _):
                return -np.asarray(self.jac(self.x, p), dtype=float) / self.sigma[:, None]

        return Model(residual, n_params, None, jacobian)


@dataclass
class FitOutcome:
    params: np.ndarray
    covariance: np.ndarray
    chi2_reduced: float
    iterations: int
    converged: bool
    message: str
    cost_history: list[float] = field(default_factory=list)
    n_points: int = 0

    @property
    def stderr(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.covariance), 0.0, None))

    @property
    def cost(self) -> float:
        return self.cost_history[-1]

    def to_dict(self) -> dict:
        return {
            "params": [float(v) for v in self.params],
            "stderr": [float(v) for v in self.stderr],
            "covariance": [[float(v) for v in row] for row in self.covariance],
            "chi2_reduced": float(self.chi2_reduced),
            "iterations": int(self.iterations),
            "converged": bool(self.converged),
            "message": self.message,
        }


def numerical_jacobian(fun: Callable[[np.ndarray], np.ndarray], params: np.ndarray,
                       relative_step: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian with a per-parameter relative step."""
    params = np.asarray(params, dtype=float)
    cols = []
    for j, value in enumerate(params):
        h = relative_step * abs(value) if value != 0 else relative_step
        up = params.copy()
        down = params.copy()
        up[j] += h
        down[j] -= h
        cols.append((np.asarray(fun(up), dtype=float) - np.asarray(fun(down), dtype=float)) / (up[j] - down[j]))
    return np.column_stack(cols)


def _solve_damped(A: np.ndarray, g: np.ndarray, scale: np.ndarray, lam: float) -> Optional[np.ndarray]:
    M = A + lam * np.diag(scale)
    try:
        step = np.linalg.solve(M, -g)
    except np.linalg.LinAlgError:
        return None
    if not np.all(np.isfinite(step)):
        return None
    return step


def _covariance(J: np.ndarray, cost: float, scale: bool) -> tuple[np.ndarray, float]:
    m, p = J.shape
    chi2_red = cost / (m - p) if m > p else float("nan")
    A = J.T @ J
    if not np.all(np.isfinite(A)):
        return np.full((p, p), np.nan), chi2_red
    try:
        inv = np.linalg.inv(A)
        if not np.all(np.isfinite(inv)):
            raise np.linalg.LinAlgError
    except np.linalg.LinAlgError:
        inv = np.linalg.pinv(A)
    cov = inv * chi2_red if (scale and np.isfinite(chi2_red)) else inv
    return 0.5 * (cov + cov.T), chi2_red


def _trial_residual(model: Model, params: np.ndarray) -> Optional[np.ndarray]:
    # a non-finite trial point counts as a rejected step
    with np.errstate(all="ignore"):
        r = model.r(params)
        if not np.all(np.isfinite(r)) or not np.isfinite(r @ r):
            return None
    return r


def least_squares(model: Model, initial, options: FitOptions | None = None) -> FitOutcome:
    """Minimise the squared norm of ``model``'s weighted residuals.

    Damping follows a multiplicative schedule (``x10`` on a rejected step,
    ``x0.3`` on an accepted one) on Marquardt-scaled normal equations.  While
    the damping is small an undamped Gauss-Newton step is tried first and kept
    if it reduces the objective by a reasonable fraction of the predicted
    amount; this makes linear problems terminate after a single step.
    """
    opts = options or FitOptions()
    x = np.array(initial, dtype=float)
    if x.shape != (model.n_params,):
        raise FitError(f"initial has shape {x.shape}, expected ({model.n_params},)")
    if not np.all(np.isfinite(x)):
        raise FitError(f"initial parameters not finite: {x.tolist()}")

    r = model.r(x)
    if not np.all(np.isfinite(r)):
        raise FitError(f"residual is not finite at parameters {x.tolist()}")
    cost = float(r @ r)
    history = [cost]
    J = model.jac(x, opts.fd_relative_step)
    lam = opts.initial_damping
    iterations = 0
    converged = False
    message = "maximum iterations reached"

    while iterations < opts.max_iterations:
        if not np.all(np.isfinite(J)):
            message = "Jacobian is not finite at the current parameters"
            break
        g = J.T @ r
        A = J.T @ J
        colnorm = np.sqrt(np.diag(A))
        if cost == 0.0:
            converged, message = True, "zero residual"
            break
        active = colnorm > 0
        gnorm = np.max(np.abs(g[active]) / (colnorm[active] * np.sqrt(cost))) if active.any() else 0.0
        if gnorm <= opts.gradient_tolerance:
            converged, message = True, "relative gradient below tolerance"
            break

        iterations += 1
        diag = np.diag(A).copy()
        floor = max(diag.max(), 1e-300) * 1e-12
        scale = np.maximum(diag, floor)

        step = None
        if lam < opts.gauss_newton_threshold:
            trial, *_ = np.linalg.lstsq(J, -r, rcond=None)
            if np.all(np.isfinite(trial)):
                r_trial = _trial_residual(model, x + trial)
                if r_trial is not None:
                    new_cost = float(r_trial @ r_trial)
                    lin = r + J @ trial
                    predicted = cost - float(lin @ lin)
                    if new_cost < cost and predicted > 0 and (cost - new_cost) >= 0.25 * predicted:
                        step, r_new, cost_new = trial, r_trial, new_cost

        while step is None:
            trial = _solve_damped(A, g, scale, lam)
            if trial is not None:
                r_trial = _trial_residual(model, x + trial)
                if r_trial is not None:
                    new_cost = float(r_trial @ r_trial)
                    if new_cost < cost:
                        step, r_new, cost_new = trial, r_trial, new_cost
                        break
            lam *= opts.damping_increase
            if lam > opts.max_damping:
                break

        if step is None:
            # no descent direction left; either at the minimum or stuck
            if gnorm < 1e-6:
                converged, message = True, "no further reduction possible (at numerical minimum)"
            else:
                message = "damping exceeded maximum without reducing the objective"
            break

        lam = max(lam * opts.damping_decrease, 1e-15)
        x = x + step
        r = r_new
        rel_change = (cost - cost_new) / cost
        cost = cost_new
        history.append(cost)
        J = model.jac(x, opts.fd_relative_step)

        if np.linalg.norm(step) <= opts.step_tolerance * (np.linalg.norm(x) + opts.step_tolerance):
            converged, message = True, "relative step below tolerance"
            break
        if rel_change < 1e-15:
            converged, message = True, "objective stationary"
            break

    cov, chi2_red = _covariance(J, cost, opts.scale_covariance)
    return FitOutcome(
        params=x,
        covariance=cov,
        chi2_reduced=chi2_red,
        iterations=iterations,
        converged=converged,
        message=message,
        cost_history=history,
        n_points=len(r),
    )


@dataclass
class BootstrapResult:
    std: np.ndarray
    samples: np.ndarray
    n_failed: int
    flagged: bool

    def to_dict(self) -> dict:
        return {
            "std": [float(v) for v in self.std],
            "n_resamples": int(len(self.samples) + self.n_failed),
            "n_failed": int(self.n_failed),
            "flagged": bool(self.flagged),
        }


def bootstrap_errors(model: CurveModel, fit: FitOutcome, n_resamples: int,
                     rng: np.random.Generator, options: FitOptions | None = None) -> BootstrapResult:
    """Residual-resampling bootstrap of a converged curve fit.

    Standardised residuals ``(y - f) / sigma`` at the solution are resampled
    with replacement, rescaled by each point's sigma and added back onto the
    fitted curve; every synthetic data set is refitted from the original
    solution.  The result is flagged if more than 10% of refits fail.
    """
    if not fit.converged:
        raise ValueError("bootstrap requires a converged fit")
    if n_resamples < 100:
        raise ValueError("n_resamples must be at least 100")
    p = len(fit.params)
    fitted = model.predict(fit.params)
    std_resid = (model.y - fitted) / model.sigma

    samples = []
    failed = 0
    for _ in range(n_resamples):
        draw = rng.choice(std_resid, size=std_resid.size, replace=True)
        synthetic = model.with_data(fitted + draw * model.sigma)
        try:
            out = least_squares(synthetic.as_model(p), fit.params, options)
        except FitError:
            failed += 1
            continue
        if not out.converged:
            failed += 1
            continue
        samples.append(out.params)

    samples_arr = np.array(samples).reshape(-1, p)
    std = samples_arr.std(axis=0, ddof=1) if len(samples_arr) > 1 else np.full(p, np.nan)
    return BootstrapResult(std=std, samples=samples_arr, n_failed=failed,
                           flagged=failed > 0.1 * n_resamples)

"""Controlled state recursions driven by fGn, and their first variations.

The state equation is the exact recursion

    X_{n+1} = X_n + b(n, X_n, u_n) + sigma(n, X_n, u_n) * xi_n,    X_0 = x,

simulated pathwise over a NoiseEnsemble; there is no discretization error to
manage, the recursion is the model.  The ensemble axis provides the
vectorization: coefficient callables receive per-path arrays and must
broadcast.

The first variation along a base trajectory (X*, u*) in direction v solves

    Xh_{n+1} = Xh_n + b_x*(n) Xh_n + b_u*(n) v_n
               + (sigma_x*(n) Xh_n + sigma_u*(n) v_n) * xi_n,      Xh_0 = 0,

with all partials evaluated along the base pair, and the convex perturbation
u^eps = (1 - eps) u* + eps u~ = u* + eps (u~ - u*) stays admissible for
eps in [0, 1] whenever both endpoints are.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import ContractError, NumericalError
from .fracnoise import NoiseEnsemble

__all__ = [
    "CoefficientSet",
    "ControlProcess",
    "StatePath",
    "simulate_state",
    "simulate_variation",
    "perturb_control",
    "check_partials",
    "write_trajectory_csv",
]


@dataclass(frozen=True)
class CoefficientSet:
    """Drift/noise coefficients b, sigma with their partials in x and u.

    Each callable takes (n, x, u) with x, u per-path arrays and returns a
    broadcastable array.  ``lipschitz`` is the declared joint constant in
    (x, u); check_partials spot-checks the declared partials by finite
    differences.
    """

    b: Callable
    sigma: Callable
    b_x: Callable
    b_u: Callable
    sigma_x: Callable
    sigma_u: Callable
    lipschitz: Optional[float] = None


@dataclass
class ControlProcess:
    """A control: fixed per-step values or a feedback rule.

    ``values`` has shape (n_steps,) or (n_paths, n_steps) with column n the
    control applied at step n.  ``rule(n, x, xi_hist)`` receives the current
    state and the noise observed so far (shape (n_paths, n)) and returns the
    per-path control.  ``bounds``, when given, is a fixed closed interval
    [lo, hi]; fixed values are validated against it at construction.
    """

    values: Optional[np.ndarray] = None
    rule: Optional[Callable] = None
    bounds: Optional[tuple] = None

    def __post_init__(self):
        if (self.values is None) == (self.rule is None):
            raise ContractError("exactly one of values/rule must be given")
        if self.values is not None:
            self.values = np.atleast_1d(np.asarray(self.values, dtype=float))
            if self.values.ndim > 2:
                raise ContractError(f"values must be 1- or 2-dimensional, got shape {self.values.shape}")
            if self.bounds is not None:
                lo, hi = self.bounds
                if np.any(self.values < lo) or np.any(self.values > hi):
                    raise ContractError(f"control values leave the admissible interval [{lo}, {hi}]")

    @property
    def n_steps(self) -> Optional[int]:
        return None if self.values is None else self.values.shape[-1]

    def at(self, n: int, x: np.ndarray, xi_hist: np.ndarray) -> np.ndarray:
        if self.rule is not None:
            return np.broadcast_to(np.asarray(self.rule(n, x, xi_hist), dtype=float), x.shape)
        if n >= self.values.shape[-1]:
            raise ContractError(f"control has {self.values.shape[-1]} steps, step {n} requested")
        col = self.values[..., n]
        return np.broadcast_to(col, x.shape)


@dataclass(frozen=True)
class StatePath:
    """A simulated trajectory bundle: states, realized controls, noise."""

    values: np.ndarray  # (n_paths, horizon + 1)
    controls: np.ndarray  # (n_paths, horizon)
    x0: object
    noise: NoiseEnsemble

    @property
    def horizon(self) -> int:
        return self.values.shape[1] - 1

    @property
    def n_paths(self) -> int:
        return self.values.shape[0]


def _initial_states(x0, n_paths: int) -> np.ndarray:
    if callable(x0):
        x = np.asarray(x0(n_paths), dtype=float)
    else:
        x = np.asarray(x0, dtype=float)
    if x.ndim == 0:
        return np.full(n_paths, float(x))
    if x.shape != (n_paths,):
        raise ContractError(f"x0 must be scalar or shape ({n_paths},), got {x.shape}")
    return x.copy()


def simulate_state(
    coeffs: CoefficientSet, control: ControlProcess, noise: NoiseEnsemble, x0
) -> StatePath:
    """Run the state recursion over the ensemble; exact, no discretization.

    Raises NumericalError naming the first offending path and step if the
    recursion produces a non-finite value.
    """
    xi = noise.xi
    n_paths, n_steps = xi.shape
    values = np.empty((n_paths, n_steps + 1))
    controls = np.empty((n_paths, n_steps))
    values[:, 0] = _initial_states(x0, n_paths)
    for n in range(n_steps):
        x = values[:, n]
        u = control.at(n, x, xi[:, :n])
        controls[:, n] = u
        x_next = x + coeffs.b(n, x, u) + coeffs.sigma(n, x, u) * xi[:, n]
        if not np.all(np.isfinite(x_next)):
            bad = int(np.flatnonzero(~np.isfinite(x_next))[0])
            raise NumericalError(
                f"state became non-finite at step {n + 1} on path {bad}", detail={"path": bad, "step": n + 1}
            )
        values[:, n + 1] = x_next
    return StatePath(values=values, controls=controls, x0=x0, noise=noise)


def simulate_variation(coeffs: CoefficientSet, state: StatePath, direction) -> StatePath:
    """First variation along ``state`` in control direction v; starts at 0.

    ``direction`` has shape (horizon,) or (n_paths, horizon).  Partials are
    evaluated along the realized (X*, u*) stored in ``state``.
    """
    xi = state.noise.xi
    n_paths, n_steps = xi.shape
    v = np.asarray(direction, dtype=float)
    if v.ndim == 1:
        v = np.broadcast_to(v, (n_paths, v.shape[0]))
    if v.shape[1] < n_steps:
        raise ContractError(f"direction has {v.shape[1]} steps, horizon needs {n_steps}")
    values = np.zeros((n_paths, n_steps + 1))
    for n in range(n_steps):
        x, u = state.values[:, n], state.controls[:, n]
        xh = values[:, n]
        drift = coeffs.b_x(n, x, u) * xh + coeffs.b_u(n, x, u) * v[:, n]
        noise_load = coeffs.sigma_x(n, x, u) * xh + coeffs.sigma_u(n, x, u) * v[:, n]
        values[:, n + 1] = xh + drift + noise_load * xi[:, n]
    return StatePath(values=values, controls=v[:, :n_steps].copy(), x0=0.0, noise=state.noise)


def _control_values(u) -> np.ndarray:
    if isinstance(u, ControlProcess):
        if u.values is None:
            raise ContractError("perturbation needs value-based controls; realize the rule first")
        return u.values
    return np.asarray(u, dtype=float)


def perturb_control(u_star, u_tilde, eps: float) -> ControlProcess:
    """Convex perturbation (1 - eps) u* + eps u~ for eps in [0, 1]."""
    eps = float(eps)
    if not 0.0 <= eps <= 1.0:
        raise ValueError(f"eps must lie in [0, 1], got {eps}")
    a, b = _control_values(u_star), _control_values(u_tilde)
    if a.shape[-1] != b.shape[-1]:
        raise ContractError(f"control lengths differ: {a.shape[-1]} vs {b.shape[-1]}")
    bounds = None
    if isinstance(u_star, ControlProcess) and isinstance(u_tilde, ControlProcess):
        if u_star.bounds == u_tilde.bounds:
            bounds = u_star.bounds
    return ControlProcess(values=(1.0 - eps) * a + eps * b, bounds=bounds)


def check_partials(coeffs: CoefficientSet, n: int, x, u, step: float = 1e-6) -> dict:
    """Central-difference spot check of the declared partials at (n, x, u)."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    u = np.atleast_1d(np.asarray(u, dtype=float))
    report = {}
    for name, func, partial, wrt in (
        ("b_x", coeffs.b, coeffs.b_x, "x"),
        ("b_u", coeffs.b, coeffs.b_u, "u"),
        ("sigma_x", coeffs.sigma, coeffs.sigma_x, "x"),
        ("sigma_u", coeffs.sigma, coeffs.sigma_u, "u"),
    ):
        if wrt == "x":
            fd = (func(n, x + step, u) - func(n, x - step, u)) / (2 * step)
        else:
            fd = (func(n, x, u + step) - func(n, x, u - step)) / (2 * step)
        declared = np.broadcast_to(np.asarray(partial(n, x, u), dtype=float), x.shape)
        report[name] = float(np.max(np.abs(declared - fd)))
    return report


def write_trajectory_csv(state: StatePath, path) -> None:
    """Dump (path_id, n, X, u, xi) rows, one per step, 17 digits."""
    xi = state.noise.xi
    with open(path, "w", newline="") as fh:
        fh.write("path_id,n,X,u,xi\n")
        for i in range(state.n_paths):
            for n in range(state.horizon):
                fh.write(
                    f"{i},{n},{state.values[i, n]:.17g},{state.controls[i, n]:.17g},{xi[i, n]:.17g}\n"
                )

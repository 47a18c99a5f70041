"""Truncated backward equations under super-geometric discounting.

The backward pair (Y, Z) solves, step by step for n = N-1, ..., 0,

    Y_n + Z_n eta_n = d_{n+1} * [ Y_{n+1} + f(n+1, X_{n+1}, Y_{n+1}, Z_{n+1}, u_{n+1}) ]
                      + d_{n+1} * g(n+1, ...) * E[xi_{n+1} | F_{n+1}],

    d_{n+1} = exp(-lam * ((n+1)^gamma_exp - n^gamma_exp)),

with terminal condition Y_N = 0 and the terminal step using the reduced driver
f1 (default: f evaluated at z = 0, flagged in diagnostics).  The equation holds
in projection: Y_n is the conditional expectation of the right side given F_n
and Z_n the conditional expectation of eta_n times it, eta_n being the step-n
innovation.  This is the discounted change of variables solved in place; the
per-step ratio form keeps every intermediate at the scale of Y itself, which
matters because exp(+lam * n^gamma_exp) overflows float64 long before the
horizons of interest when the discount is steep.

Two backends realize the conditional expectations:

    exact        targets must be constant across paths (deterministic
                 problems); the constant is the expectation and Z vanishes.
    regression   least-squares projection on a polynomial basis in a sliding
                 window of recent increments (default degree 2, window 3).

The truncation diagnostic re-solves at increasing horizons and reports
backward-direction weighted norms of the differences, which should form a
Cauchy sequence.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations_with_replacement
from typing import Callable, Optional

import numpy as np

from .errors import ContractError, NumericalError
from .forward import StatePath
from .fracnoise import InnovationSystem, prediction_matrix
from .spaces import WeightedNormParams, weighted_norm

__all__ = [
    "DriverSpec",
    "BsdeSolution",
    "conditional_expectation",
    "solve_truncated",
    "cauchy_diagnostic",
    "write_solution_csv",
]


@dataclass(frozen=True)
class DriverSpec:
    """Driver of a backward equation.

    ``f(n, x, y, z, u)`` is the generator; the optional ``g(n, x, y, z, u)``
    multiplies the predicted next increment.  ``f1(n, y)`` and ``g1(n, y)``
    are the reduced terminal drivers; when absent the terminal step evaluates
    f (and g) at z = 0, which is recorded in the solution diagnostics.
    Optional partials f_x, f_y, f_z, f_u follow the signature of f.
    """

    f: Callable
    g: Optional[Callable] = None
    f1: Optional[Callable] = None
    g1: Optional[Callable] = None
    f_x: Optional[Callable] = None
    f_y: Optional[Callable] = None
    f_z: Optional[Callable] = None
    f_u: Optional[Callable] = None
    lipschitz: Optional[float] = None


@dataclass(frozen=True)
class BsdeSolution:
    """Backward pair on a truncated horizon: y over 0..N, z over 0..N-1."""

    y: np.ndarray
    z: np.ndarray
    truncation: int
    lam: float
    gamma_exp: float
    backend: str
    diagnostics: dict = field(default_factory=dict)

    @property
    def n_paths(self) -> int:
        return self.y.shape[0]


def _poly_design(features: np.ndarray, degree: int):
    """Monomial design matrix up to total ``degree``; returns (matrix, names)."""
    m = features.shape[0]
    cols, names = [np.ones(m)], ["1"]
    for d in range(1, degree + 1):
        for combo in combinations_with_replacement(range(features.shape[1]), d):
            cols.append(np.prod(features[:, combo], axis=1))
            names.append("*".join(f"x{i}" for i in combo))
    return np.column_stack(cols), names


def conditional_expectation(targets, features, backend: str, degree: int = 2) -> np.ndarray:
    """Project per-path ``targets`` onto step-n information.

    exact: requires the targets to be constant across paths and returns that
    constant.  regression: least-squares fit on the polynomial basis of the
    given feature columns (shape (n_paths, window)).
    """
    targets = np.asarray(targets, dtype=float)
    if backend == "exact":
        lo, hi = float(np.min(targets)), float(np.max(targets))
        scale = max(1.0, abs(lo), abs(hi))
        if hi - lo > 1e-10 * scale:
            raise ContractError(
                "exact backend requires deterministic targets; spread "
                f"{hi - lo:.3e} across paths (use the regression backend)"
            )
        return np.full(targets.shape[0], 0.5 * (lo + hi))
    if backend != "regression":
        raise ValueError(f"backend must be 'exact' or 'regression', got {backend!r}")
    features = np.asarray(features, dtype=float)
    design, names = _poly_design(features, degree)
    if targets.shape[0] < design.shape[1]:
        raise ContractError(
            f"{targets.shape[0]} paths cannot support a {design.shape[1]}-column basis"
        )
    coef, _, rank, singular = np.linalg.lstsq(design, targets, rcond=None)
    if rank < design.shape[1]:
        raise NumericalError(
            f"regression design is rank-deficient ({rank} < {design.shape[1]})",
            detail={"basis": names, "singular_values": singular.tolist()},
        )
    return design @ coef


def _control_at(control_values: Optional[np.ndarray], n: int, n_paths: int) -> np.ndarray:
    # NaN poisons drivers that genuinely need an out-of-range control value;
    # the non-finite check below then points at the offending step.
    if control_values is None or n >= control_values.shape[-1]:
        return np.full(n_paths, np.nan)
    return np.broadcast_to(control_values[..., n], (n_paths,))


def solve_truncated(
    driver: DriverSpec,
    state: Optional[StatePath],
    sys: Optional[InnovationSystem],
    truncation: int,
    lam: float,
    gamma_exp: float,
    backend: str = "regression",
    control_values=None,
    window: int = 3,
    degree: int = 2,
) -> BsdeSolution:
    """Solve the truncated backward pair along ``state``.

    ``state`` may be None for deterministic problems on the exact backend (a
    single synthetic path is used).  ``sys`` is required whenever the driver
    has a g-term, and must extend one row past the truncation so the
    prediction at prefix length N exists.  ``control_values`` defaults to the
    controls realized in ``state``.
    """
    n_trunc = int(truncation)
    if n_trunc < 1:
        raise ValueError(f"truncation must be >= 1, got {n_trunc}")
    if lam <= 0 or gamma_exp <= 1:
        raise ValueError(f"need lam > 0 and gamma_exp > 1, got {lam}, {gamma_exp}")
    if state is None:
        if backend != "exact":
            raise ContractError("the regression backend needs a simulated state ensemble")
        n_paths = 1
        x_all = np.zeros((1, n_trunc + 1))
        xi = eta = None
    else:
        if state.horizon < n_trunc:
            raise ContractError(
                f"state horizon {state.horizon} is shorter than truncation {n_trunc}"
            )
        n_paths = state.n_paths
        x_all = state.values
        xi, eta = state.noise.xi, state.noise.eta
    if control_values is None and state is not None:
        control_values = state.controls
    if control_values is not None:
        control_values = np.asarray(control_values, dtype=float)

    predictions = None
    if driver.g is not None or driver.g1 is not None:
        if sys is None:
            raise ContractError("a g-term needs the innovation system for predictions")
        if sys.horizon < n_trunc + 1:
            raise ContractError(
                f"prediction at prefix length {n_trunc} needs system horizon "
                f">= {n_trunc + 1}, got {sys.horizon}"
            )
        if xi is None:
            raise ContractError("a g-term needs noise paths; solve along a simulated state")
        predictions = prediction_matrix(sys, xi, n_trunc)

    steps = np.arange(n_trunc + 1, dtype=float)
    ratios = np.exp(-lam * np.diff(steps**gamma_exp))  # d_1, ..., d_N

    y = np.zeros((n_paths, n_trunc + 1))
    z = np.zeros((n_paths, n_trunc))
    zeros = np.zeros(n_paths)
    for n in range(n_trunc - 1, -1, -1):
        m = n + 1
        x_m = x_all[:, m]
        u_m = _control_at(control_values, m, n_paths)
        y_m = y[:, m]
        z_m = z[:, m] if m < n_trunc else zeros
        if m == n_trunc:
            f_val = driver.f1(m, y_m) if driver.f1 is not None else driver.f(m, x_m, y_m, zeros, u_m)
            if driver.g1 is not None:
                g_val = driver.g1(m, y_m)
            elif driver.g is not None:
                g_val = driver.g(m, x_m, y_m, zeros, u_m)
            else:
                g_val = None
        else:
            f_val = driver.f(m, x_m, y_m, z_m, u_m)
            g_val = driver.g(m, x_m, y_m, z_m, u_m) if driver.g is not None else None
        target = ratios[n] * (y_m + f_val)
        if g_val is not None:
            target = target + ratios[n] * np.broadcast_to(g_val, (n_paths,)) * predictions[:, m]
        target = np.broadcast_to(target, (n_paths,))
        if not np.all(np.isfinite(target)):
            raise NumericalError(
                f"backward target became non-finite at step {n} (a NaN here often "
                "means the terminal step needed a control value past the horizon)",
            )
        if backend == "exact":
            y[:, n] = conditional_expectation(target, None, "exact")
            z[:, n] = 0.0
        else:
            feats = xi[:, max(0, n - window) : n]
            y[:, n] = conditional_expectation(target, feats, "regression", degree)
            z[:, n] = conditional_expectation(eta[:, n] * target, feats, "regression", degree)

    diagnostics = {
        "used_default_terminal": driver.f1 is None,
        "used_default_terminal_noise": driver.g is not None and driver.g1 is None,
        "window": window,
        "degree": degree,
    }
    return BsdeSolution(
        y=y, z=z, truncation=n_trunc, lam=lam, gamma_exp=gamma_exp, backend=backend,
        diagnostics=diagnostics,
    )


def _difference_arrays(long: BsdeSolution, short: BsdeSolution):
    """Tail-extension differences: Y^N - Y^M below M, Y^N itself on [M, N]."""
    n_lo = short.truncation
    dy = long.y.copy()
    dy[:, : n_lo + 1] -= short.y
    dz = long.z.copy()
    dz[:, :n_lo] -= short.z
    return dy, dz


def cauchy_diagnostic(
    driver: DriverSpec,
    state: Optional[StatePath],
    sys: Optional[InnovationSystem],
    n_list,
    norm_params: WeightedNormParams,
    backend: str = "exact",
    control_values=None,
    window: int = 3,
    degree: int = 2,
) -> list[dict]:
    """Weighted-norm differences between consecutive truncations.

    Solves at each horizon in ``n_list`` (ascending) on the same ensemble and
    reports, per consecutive pair, the backward-direction weighted norms of
    the Y and Z differences with the tail term of the Y-norm.
    """
    n_list = sorted(int(n) for n in n_list)
    if len(n_list) < 2:
        raise ValueError("need at least two truncation levels")
    solutions = {
        n: solve_truncated(
            driver, state, sys, n, norm_params.lam, norm_params.gamma_exp,
            backend=backend, control_values=control_values, window=window, degree=degree,
        )
        for n in n_list
    }
    rows = []
    for n_lo, n_hi in zip(n_list, n_list[1:]):
        dy, dz = _difference_arrays(solutions[n_hi], solutions[n_lo])
        ny = weighted_norm(dy, norm_params)
        nz = weighted_norm(dz, norm_params)
        rows.append(
            {
                "n_low": n_lo,
                "n_high": n_hi,
                "norm_y": ny.value,
                "norm_z": nz.value,
                "tail_term": ny.tail_term,
            }
        )
    return rows


def write_solution_csv(solution: BsdeSolution, path) -> None:
    """Dump (path_id, n, Y, Z) rows, 17 digits; Z is empty at the terminal."""
    with open(path, "w", newline="") as fh:
        fh.write("path_id,n,Y,Z\n")
        for i in range(solution.n_paths):
            for n in range(solution.truncation + 1):
                z_txt = f"{solution.z[i, n]:.17g}" if n < solution.truncation else ""
                fh.write(f"{i},{n},{solution.y[i, n]:.17g},{z_txt}\n")

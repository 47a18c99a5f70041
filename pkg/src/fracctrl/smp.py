"""Adjoint processes, Hamiltonian, and first-order optimality checks.

Along a candidate optimal pair (X*, u*) three adjoint objects are built:

    k      cost-propagation chain: k_0 = 0, k_1 = -1, and for n >= 1
           k_{n+1} = k_n (1 + f_y*(n) + f_z*(n) eta_n);
    (p,q)  a backward pair with generator
           f(m, y, z) = b_x*(m) y + beta(m,m) sigma_x*(m) z - f_x*(m) k_m
           and noise-prediction coefficient g(m, y) = sigma_x*(m) y.

First-order optimality of u* is the pointwise inequality

    bracket_n * (u_n - u*_n) >= 0,
    bracket_n = b_u*(n) p_n + sigma_u*(n) p_n E[xi_n | F_n]
                + beta(n,n) sigma_u*(n) q_n - f_u*(n) k_n,

for every admissible u, which check_necessary_condition probes with random
admissible deviations.  The Hamiltonian aggregates the same ingredients but
carries the running cost with the opposite sign,

    H = b p + sigma p E[xi | F] + beta(n,n) sigma q + f k,

so H_u and the bracket differ by 2 f_u k; both are provided because each is
the quantity its respective check reports on, and the sign difference is
deliberate, not a bug.

The duality identity ties the bracket to the first variation of the cost:
with (p, q) and the variational pair (Yhat, Zhat) solved at the same
truncation N (so p_N = 0, q_N treated as 0),

    E sum_{n=0}^{N} e^{-lam n^gamma} bracket_n v_n  =  Yhat_0,

including the degenerate terminal term -f_u*(N) k_N v_N.  The identity is
exact under exact conditional expectations; under the regression backend it
holds in expectation because least squares with an intercept preserves
target means and the variational driver is linear with deterministic
per-step coefficients.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .backward import BsdeSolution, DriverSpec, solve_truncated
from .errors import ContractError
from .forward import CoefficientSet, StatePath
from .fracnoise import InnovationSystem, prediction_matrix

__all__ = [
    "solve_adjoint_k",
    "solve_adjoint_pq",
    "hamiltonian",
    "hamiltonian_u",
    "necessary_bracket",
    "bracket_values",
    "check_necessary_condition",
    "verify_convexity",
    "solve_variational",
    "duality_gap",
]


def _at(values, n: int):
    """Per-step lookup for scalar-or-array coefficient tables."""
    arr = np.asarray(values, dtype=float)
    return arr if arr.ndim == 0 else arr[..., n]


def solve_adjoint_k(f_y, f_z, n_steps: int, eta=None) -> np.ndarray:
    """Cost-propagation chain k over steps 0..n_steps.

    ``f_y``/``f_z`` are scalars or per-step tables indexed by n (only indices
    1..n_steps-1 are read).  A nonzero f_z makes the chain noise-driven and
    requires ``eta`` of shape (M, >= n_steps); the result is then (M,
    n_steps+1), otherwise (n_steps+1,).
    """
    if n_steps < 0:
        raise ValueError(f"n_steps must be >= 0, got {n_steps}")
    fy = np.asarray(f_y, dtype=float)
    fz = np.asarray(f_z, dtype=float)
    used = slice(1, n_steps)
    fz_active = bool(np.any(fz != 0.0)) if fz.ndim == 0 else bool(np.any(fz[..., used] != 0.0))
    if fz_active and n_steps > 1 and eta is None:
        raise ContractError("a nonzero f_z makes k noise-driven; pass the innovation array")
    if eta is not None:
        eta = np.asarray(eta, dtype=float)
        if eta.ndim != 2 or eta.shape[1] < n_steps:
            raise ContractError(
                f"eta must have shape (n_paths, >= {n_steps}), got {eta.shape}"
            )
        k = np.zeros((eta.shape[0], n_steps + 1))
    else:
        k = np.zeros(n_steps + 1)
    if n_steps >= 1:
        k[..., 1] = -1.0
    for n in range(1, n_steps):
        growth = 1.0 + _at(fy, n)
        if eta is not None:
            growth = growth + _at(fz, n) * eta[:, n]
        k[..., n + 1] = k[..., n] * growth
    return k


def solve_adjoint_pq(
    b_x,
    sigma_x,
    f_x,
    k,
    truncation: int,
    lam: float,
    gamma_exp: float,
    state: StatePath | None = None,
    sys: InnovationSystem | None = None,
    backend: str = "exact",
    window: int = 3,
    degree: int = 2,
) -> BsdeSolution:
    """Backward adjoint pair (p, q) = (y, z) of the returned solution.

    ``b_x``, ``sigma_x``, ``f_x`` are scalars or per-step tables of the state
    and cost partials along the candidate pair; ``k`` is the chain from
    solve_adjoint_k.  A nonzero sigma_x brings in the prediction term and
    therefore needs ``sys``; otherwise the solve is free of the innovation
    system and, for deterministic tables, of any simulated state.
    """
    beta_diag = (
        np.array([sys.conditional_std(m) for m in range(truncation + 1)])
        if sys is not None
        else np.ones(truncation + 1)
    )
    need_g = bool(np.any(np.asarray(sigma_x, dtype=float) != 0.0))
    if need_g and sys is None:
        raise ContractError("a nonzero sigma_x needs the innovation system for predictions")

    def f(m, x, y, z, u):
        return _at(b_x, m) * y + beta_diag[m] * _at(sigma_x, m) * z - _at(f_x, m) * _at(k, m)

    g = (lambda m, x, y, z, u: _at(sigma_x, m) * y) if need_g else None
    return solve_truncated(
        DriverSpec(f=f, g=g), state, sys, truncation, lam, gamma_exp,
        backend=backend, window=window, degree=degree,
    )


def hamiltonian(coeffs: CoefficientSet, cost: DriverSpec, n, x, y, z, u, p, q, k, pred, beta_nn):
    """H = b p + sigma p pred + beta(n,n) sigma q + f k at one step."""
    sig = coeffs.sigma(n, x, u)
    return coeffs.b(n, x, u) * p + sig * p * pred + beta_nn * sig * q + cost.f(n, x, y, z, u) * k


def hamiltonian_u(coeffs: CoefficientSet, cost: DriverSpec, n, x, y, z, u, p, q, k, pred, beta_nn):
    """Control derivative of the Hamiltonian (cost term with plus sign)."""
    if cost.f_u is None:
        raise ContractError("hamiltonian_u needs the declared cost partial f_u")
    sig_u = coeffs.sigma_u(n, x, u)
    return coeffs.b_u(n, x, u) * p + sig_u * (p * pred + beta_nn * q) + cost.f_u(n, x, y, z, u) * k


def necessary_bracket(coeffs: CoefficientSet, cost: DriverSpec, n, x, y, z, u, p, q, k, pred, beta_nn):
    """First-order coefficient of the optimality inequality (cost term minus)."""
    if cost.f_u is None:
        raise ContractError("necessary_bracket needs the declared cost partial f_u")
    sig_u = coeffs.sigma_u(n, x, u)
    return coeffs.b_u(n, x, u) * p + sig_u * (p * pred + beta_nn * q) - cost.f_u(n, x, y, z, u) * k


def bracket_values(
    coeffs: CoefficientSet,
    cost: DriverSpec,
    state: StatePath,
    adjoint: BsdeSolution,
    k,
    sys: InnovationSystem,
    controls=None,
    cost_solution: BsdeSolution | None = None,
    truncation: int | None = None,
) -> np.ndarray:
    """Necessary-condition bracket per (path, step) over n = 0..truncation.

    ``truncation`` defaults to the adjoint's; pass a shorter horizon when the
    adjoint was solved past the simulated range.  p is read off the adjoint
    wherever defined and q wherever it exists (0 at the adjoint's own
    terminal), so at matched truncation the last column degenerates to
    -f_u*(N) k_N.  ``controls`` defaults to the controls realized in
    ``state``; provide an array covering the last step when the cost partials
    need the terminal control.  ``cost_solution`` supplies (Y*, Z*) for cost
    partials that read them (zeros otherwise).
    """
    n_trunc = adjoint.truncation if truncation is None else int(truncation)
    if n_trunc > adjoint.truncation:
        raise ContractError(
            f"bracket through step {n_trunc} needs an adjoint solved at least "
            f"that far, got truncation {adjoint.truncation}"
        )
    if state.horizon < n_trunc:
        raise ContractError(
            f"state horizon {state.horizon} is shorter than the bracket range {n_trunc}"
        )
    n_paths = state.n_paths
    if controls is None:
        controls = state.controls
    controls = np.asarray(controls, dtype=float)
    pred = prediction_matrix(sys, state.noise.xi, n_trunc)
    beta_diag = np.array([sys.conditional_std(m) for m in range(n_trunc + 1)])
    out = np.empty((n_paths, n_trunc + 1))
    zeros = np.zeros(n_paths)
    for n in range(n_trunc + 1):
        x_n = state.values[:, n]
        u_n = (
            np.broadcast_to(controls[..., n], (n_paths,))
            if n < controls.shape[-1]
            else np.full(n_paths, np.nan)
        )
        y_n = cost_solution.y[:, n] if cost_solution is not None else zeros
        z_n = (
            cost_solution.z[:, n]
            if cost_solution is not None and n < cost_solution.z.shape[1]
            else zeros
        )
        p_n = adjoint.y[..., n]
        q_n = adjoint.z[..., n] if n < adjoint.z.shape[-1] else 0.0
        out[:, n] = necessary_bracket(
            coeffs, cost, n, x_n, y_n, z_n, u_n, p_n, q_n, _at(k, n), pred[:, n], beta_diag[n]
        )
    return out


def _worker_count(n_tasks: int) -> int:
    raw = os.environ.get("FRACCTRL_THREADS", "1")
    try:
        workers = int(raw)
    except ValueError:
        raise ValueError(f"FRACCTRL_THREADS must be an integer, got {raw!r}") from None
    return max(1, min(workers, n_tasks))


def check_necessary_condition(
    bracket,
    u_star,
    lower,
    upper,
    n_trials: int = 100,
    seed: int = 0,
    tolerance: float = 1e-8,
) -> dict:
    """Probe bracket * (u - u*) >= 0 with random admissible controls.

    Each trial draws u uniformly from the per-entry interval [lower, upper]
    and records every product below -tolerance.  Trials use independently
    spawned generators, so the report is identical for any FRACCTRL_THREADS
    setting (the variable only caps the worker threads).
    """
    bracket = np.asarray(bracket, dtype=float)
    u_star = np.asarray(u_star, dtype=float)
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    shape = np.broadcast_shapes(bracket.shape, u_star.shape, lower.shape, upper.shape)
    if np.any(upper < lower):
        raise ValueError("upper bound below lower bound somewhere in the admissible box")
    b = np.broadcast_to(bracket, shape)
    us = np.broadcast_to(u_star, shape)
    lo = np.broadcast_to(lower, shape)
    hi = np.broadcast_to(upper, shape)
    seeds = np.random.SeedSequence(seed).spawn(n_trials)

    def run_trial(t: int):
        rng = np.random.default_rng(seeds[t])
        u = lo + rng.uniform(size=shape) * (hi - lo)
        prod = b * (u - us)
        bad = np.argwhere(prod < -tolerance)
        return float(prod.min()), [(idx, float(prod[tuple(idx)])) for idx in bad[:10]]

    workers = _worker_count(n_trials)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_trial, range(n_trials)))
    else:
        results = [run_trial(t) for t in range(n_trials)]

    min_product = min(r[0] for r in results) if results else 0.0
    violations = []
    n_violations = 0
    for t, (_, bad) in enumerate(results):
        n_violations += len(bad)
        for idx, val in bad:
            if len(violations) < 10:
                record = {"trial": t, "value": val}
                if len(idx) == 2:
                    record["path"], record["step"] = int(idx[0]), int(idx[1])
                else:
                    record["index"] = [int(i) for i in idx]
                violations.append(record)
    return {
        "trials": n_trials,
        "tolerance": tolerance,
        "min_bracket_product": min_product,
        "n_violations": n_violations,
        "violations": violations,
        "passed": n_violations == 0,
    }


def verify_convexity(fn, sampler, n_pairs: int = 256, seed: int = 0, tolerance: float = 1e-10) -> dict:
    """Midpoint-convexity probe of ``fn(x, u)`` over sampled argument pairs.

    ``sampler(rng, size)`` returns per-pair (x, u) arrays.  A positive gap
    fn(midpoint) - (fn(a) + fn(b)) / 2 beyond ``tolerance`` is a violation;
    the report states what was found either way.
    """
    rng = np.random.default_rng(seed)
    x1, u1 = sampler(rng, n_pairs)
    x2, u2 = sampler(rng, n_pairs)
    gap = fn(0.5 * (x1 + x2), 0.5 * (u1 + u2)) - 0.5 * (fn(x1, u1) + fn(x2, u2))
    gap = np.asarray(gap, dtype=float)
    bad = np.flatnonzero(gap > tolerance)
    return {
        "pairs": n_pairs,
        "tolerance": tolerance,
        "max_gap": float(gap.max()),
        "n_violations": int(bad.size),
        "violations": [{"pair": int(i), "gap": float(gap[i])} for i in bad[:10]],
        "convex": bad.size == 0,
    }


def solve_variational(
    f_x,
    f_y,
    f_z,
    f_u,
    variation: StatePath,
    directions,
    truncation: int,
    lam: float,
    gamma_exp: float,
    backend: str = "regression",
    window: int = 3,
    degree: int = 2,
) -> BsdeSolution:
    """First variation (Yhat, Zhat) of the cost along a control deviation.

    ``variation`` is the first-variation state from simulate_variation (its
    noise ensemble supplies the regression features), ``directions`` the
    deviation v with step N included (the terminal cost term reads v_N).
    The per-step cost partials are scalars or tables evaluated along the
    base pair; the generator is f_x Xhat + f_y Yhat + f_z Zhat + f_u v.
    """
    xhat = variation.values
    v = np.asarray(directions, dtype=float)
    n_paths = variation.n_paths

    def f(m, x, y, z, u):
        v_m = (
            np.broadcast_to(v[..., m], (n_paths,))
            if m < v.shape[-1]
            else np.full(n_paths, np.nan)
        )
        return _at(f_x, m) * xhat[:, m] + _at(f_y, m) * y + _at(f_z, m) * z + _at(f_u, m) * v_m

    return solve_truncated(
        DriverSpec(f=f), variation, None, truncation, lam, gamma_exp,
        backend=backend, window=window, degree=degree,
    )


def duality_gap(bracket, directions, variational: BsdeSolution) -> dict:
    """Compare E sum_n e^{-lam n^gamma} bracket_n v_n against Yhat_0.

    ``bracket`` and ``directions`` cover n = 0..truncation (the bracket from
    bracket_values already carries the degenerate terminal column).
    """
    bracket = np.atleast_2d(np.asarray(bracket, dtype=float))
    v = np.asarray(directions, dtype=float)
    n_cols = bracket.shape[-1]
    if n_cols != variational.truncation + 1:
        raise ContractError(
            f"bracket covers {n_cols} steps but the variational solve has "
            f"truncation {variational.truncation}"
        )
    grid = np.arange(n_cols, dtype=float)
    weights = np.exp(-variational.lam * grid**variational.gamma_exp)
    lhs = float(np.mean(np.sum(weights * bracket * v, axis=-1)))
    rhs = float(np.mean(variational.y[:, 0]))
    return {"lhs": lhs, "rhs": rhs, "gap": abs(lhs - rhs)}

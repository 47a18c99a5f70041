"""Optimal investment with periodic consumption under fractional noise.

Wealth follows

    X_{n+1} = (1 + r)(X_n - c X_n chi_n) + (mu - r) v_n + sigma v_n xi_n,

where chi_n indicates the consumption times, v_n is the amount held in the
risky asset, and the admissible set at step n is [0, X_n (1 - c chi_n)]
(no shorting, no leverage beyond post-consumption wealth).  Running cost

    f(n, x, y, z, v) = (lam / 2) y - Q x chi_n + R v^beta_exp

rewards wealth at consumption times and penalises the risky position, both
discounted by exp(-lam n^gamma_exp).

The first-order chain is k_0 = 0, k_n = -(1 + lam/2)^{n-1} for n >= 1, and
the adjoint pair (p, q) solves a deterministic backward recursion whose
truncated solution has q identically zero.  The candidate control is

    v_n = (0 max [(mu - r) p_n + sigma p_n pred_n] / (beta_exp k_n R))
              ^ (1 / (beta_exp - 1))   capped at  X_n (1 - c chi_n),

with the max-with-zero applied before the exponent (the interior root only
exists when the bracket at zero is negative; a fractional exponent of a
negative base is meaningless).  At n = 0 the chain gives k_0 = 0 and the
bracket no longer depends on v, so the rule degenerates to bang-bang: the
full cap when the bracket slope is negative, zero otherwise.

The adjoint is solved past the run horizon (consumption dates beyond the
horizon still pull on p_n for n inside it); run_experiment then checks the
bracket inequality along the realized paths against random admissible
controls and writes byte-deterministic CSV/JSON outputs plus a standalone
plot script.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .backward import BsdeSolution, DriverSpec
from .errors import ContractError
from .forward import CoefficientSet, ControlProcess, StatePath, simulate_state
from .fracnoise import (
    InnovationSystem,
    NoiseEnsemble,
    build_innovation_system,
    predict_next,
    sample_ensemble,
)
from .smp import bracket_values, check_necessary_condition, solve_adjoint_k, solve_adjoint_pq

__all__ = [
    "InvestConfig",
    "InvestAdjoint",
    "InvestResult",
    "consumption_indicator",
    "coefficient_set",
    "cost_driver",
    "solve_adjoint",
    "closed_form_control",
    "control_rule",
    "run_experiment",
    "write_wealth_csv",
    "write_adjoint_csv",
]


@dataclass(frozen=True)
class InvestConfig:
    """Market, cost, and sampling parameters of the investment problem.

    Consumption happens at every positive multiple of ``consumption_period``
    unless ``consumption_times`` pins an explicit finite set of steps (the
    period is then ignored).  ``wealth_weight`` is the reward loading Q on
    consumption-time wealth, ``risk_weight`` the penalty loading R on the
    risky position raised to ``beta_exp``.
    """

    mu: float = 0.15
    r: float = 0.05
    sigma: float = 0.2
    lam: float = 1.0
    gamma_exp: float = 2.0
    beta_exp: float = 2.0
    c: float = 0.5
    wealth_weight: float = 1.0
    risk_weight: float = 0.01
    consumption_period: int = 10
    consumption_times: Optional[tuple] = None
    hurst: float = 0.75
    x0: float = 1.0
    horizon: int = 50
    paths: int = 10000
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.hurst < 1:
            raise ValueError(f"hurst must lie in (0, 1), got {self.hurst}")
        if self.r <= 0:
            raise ValueError(f"r must be > 0, got {self.r}")
        if self.mu <= self.r:
            raise ValueError(f"mu must exceed r, got mu={self.mu}, r={self.r}")
        if self.sigma <= 0:
            raise ValueError(f"sigma must be > 0, got {self.sigma}")
        if self.lam <= 0:
            raise ValueError(f"lam must be > 0, got {self.lam}")
        if self.gamma_exp <= 1:
            raise ValueError(f"gamma_exp must be > 1, got {self.gamma_exp}")
        if self.beta_exp <= 1:
            raise ValueError(f"beta_exp must be > 1, got {self.beta_exp}")
        if not 0 < self.c < 1:
            raise ValueError(f"c must lie in (0, 1), got {self.c}")
        if self.wealth_weight <= 0:
            raise ValueError(f"wealth_weight must be > 0, got {self.wealth_weight}")
        if self.risk_weight <= 0:
            raise ValueError(f"risk_weight must be > 0, got {self.risk_weight}")
        if self.consumption_times is not None:
            times = tuple(sorted({int(t) for t in self.consumption_times}))
            if not times:
                raise ValueError("consumption_times must not be empty; omit it for the periodic set")
            if times[0] < 1:
                raise ValueError(f"consumption times must be positive steps, got {times[0]}")
            object.__setattr__(self, "consumption_times", times)
        elif self.consumption_period < 1:
            raise ValueError(f"consumption_period must be >= 1, got {self.consumption_period}")
        if not np.isfinite(self.x0):
            raise ValueError(f"x0 must be finite, got {self.x0}")
        if self.horizon < 1:
            raise ValueError(f"horizon must be >= 1, got {self.horizon}")
        if self.paths < 1:
            raise ValueError(f"paths must be >= 1, got {self.paths}")

    def is_consumption_time(self, n: int) -> bool:
        if self.consumption_times is not None:
            return n in self.consumption_times
        return n >= self.consumption_period and n % self.consumption_period == 0

    def adjoint_truncation(self) -> int:
        """Default solve horizon for (p, q): past every consumption date that
        can still move p on the run horizon."""
        if self.consumption_times is not None:
            return max(max(self.consumption_times), self.horizon) + 20
        return self.horizon + max(2 * self.consumption_period, 20)


def consumption_indicator(config: InvestConfig, n_max: int) -> np.ndarray:
    """0/1 table chi_n for n = 0, ..., n_max."""
    return np.array([1.0 if config.is_consumption_time(n) else 0.0 for n in range(n_max + 1)])


def coefficient_set(config: InvestConfig) -> CoefficientSet:
    """Wealth drift/noise coefficients with their exact partials."""
    mu, r, sig, c = config.mu, config.r, config.sigma, config.c

    def chi(n):
        return 1.0 if config.is_consumption_time(n) else 0.0

    return CoefficientSet(
        b=lambda n, x, u: ((1 + r) * (1 - c * chi(n)) - 1) * x + (mu - r) * u,
        sigma=lambda n, x, u: sig * u,
        b_x=lambda n, x, u: (1 + r) * (1 - c * chi(n)) - 1,
        b_u=lambda n, x, u: mu - r,
        sigma_x=lambda n, x, u: 0.0,
        sigma_u=lambda n, x, u: sig,
        lipschitz=max(abs((1 + r) * (1 - c) - 1), r) + max(mu - r, sig),
    )


def cost_driver(config: InvestConfig) -> DriverSpec:
    """Running cost (lam/2) y - Q x chi_n + R v^beta with declared partials."""
    lam, q_w, r_w, beta = config.lam, config.wealth_weight, config.risk_weight, config.beta_exp

    def chi(n):
        return 1.0 if config.is_consumption_time(n) else 0.0

    return DriverSpec(
        f=lambda n, x, y, z, u: 0.5 * lam * y - q_w * x * chi(n) + r_w * u**beta,
        f_x=lambda n, x, y, z, u: -q_w * chi(n),
        f_y=lambda n, x, y, z, u: 0.5 * lam,
        f_z=lambda n, x, y, z, u: 0.0,
        f_u=lambda n, x, y, z, u: beta * r_w * u ** (beta - 1),
    )


@dataclass(frozen=True)
class InvestAdjoint:
    """First-order quantities of the investment problem.

    ``p`` and ``k`` are per-step tables over 0..truncation; ``q`` is the
    martingale coefficient table over 0..truncation-1 and is identically
    zero because the adjoint recursion is deterministic.  ``solution`` keeps
    the underlying backward solve for reuse in bracket evaluations.
    """

    p: np.ndarray
    q: np.ndarray
    k: np.ndarray
    truncation: int
    solution: BsdeSolution

    def rows(self):
        """(n, p_n, q_n or None, k_n) tuples over the full table."""
        for n in range(self.truncation + 1):
            q_n = float(self.q[n]) if n < self.truncation else None
            yield n, float(self.p[n]), q_n, float(self.k[n])


def solve_adjoint(config: InvestConfig, truncation: Optional[int] = None) -> InvestAdjoint:
    """Solve the chain k and the pair (p, q) on an extended horizon.

    The recursion is deterministic (coefficients do not depend on the state),
    so the exact backend applies and q vanishes identically.
    """
    n_trunc = config.adjoint_truncation() if truncation is None else int(truncation)
    if n_trunc < config.horizon:
        raise ContractError(
            f"adjoint truncation {n_trunc} must reach the run horizon {config.horizon}"
        )
    k = solve_adjoint_k(0.5 * config.lam, 0.0, n_trunc)
    chi = consumption_indicator(config, n_trunc)
    b_x = (1 + config.r) * (1 - config.c * chi) - 1
    f_x = -config.wealth_weight * chi
    solution = solve_adjoint_pq(
        b_x, 0.0, f_x, k, n_trunc, config.lam, config.gamma_exp, backend="exact"
    )
    return InvestAdjoint(
        p=solution.y[0].copy(),
        q=solution.z[0].copy(),
        k=k,
        truncation=n_trunc,
        solution=solution,
    )


def closed_form_control(config: InvestConfig, n: int, x, p_n: float, k_n: float, pred):
    """Candidate optimal risky position at step n.

    Interior root of the bracket, floored at zero before the 1/(beta-1)
    power and capped at post-consumption wealth.  k_0 = 0 removes v from the
    bracket, so step 0 is bang-bang on the sign of the slope.
    """
    x = np.asarray(x, dtype=float)
    chi = 1.0 if config.is_consumption_time(n) else 0.0
    cap = np.maximum(x * (1 - config.c * chi), 0.0)
    slope = (config.mu - config.r + config.sigma * np.asarray(pred, dtype=float)) * p_n
    if k_n == 0.0:
        if n != 0:
            raise ContractError(f"k vanishes at step {n}; only step 0 admits that")
        return np.where(slope < 0, cap, 0.0)
    base = slope / (config.beta_exp * config.risk_weight * k_n)
    interior = np.maximum(base, 0.0) ** (1.0 / (config.beta_exp - 1.0))
    return np.minimum(interior, cap)


def control_rule(config: InvestConfig, sys: InnovationSystem, adjoint: InvestAdjoint):
    """Feedback rule (n, x, xi_hist) -> v_n built on the adjoint tables."""

    def rule(n: int, x, xi_hist):
        if n > adjoint.truncation:
            raise ContractError(
                f"step {n} is past the adjoint truncation {adjoint.truncation}"
            )
        pred = predict_next(sys, xi_hist)
        return closed_form_control(config, n, x, adjoint.p[n], adjoint.k[n], pred)

    return rule


@dataclass(frozen=True)
class InvestResult:
    """One full experiment: paths, controls, first-order checks, outputs."""

    config: InvestConfig
    system: InnovationSystem
    adjoint: InvestAdjoint
    state: StatePath
    controls: np.ndarray  # (n_paths, horizon + 1), terminal step included
    bracket: np.ndarray  # (n_paths, horizon + 1)
    check: dict
    clamp_stats: dict
    out_dir: Optional[Path] = None

    @property
    def noise(self) -> NoiseEnsemble:
        return self.state.noise


def _clamp_stats(controls: np.ndarray, caps: np.ndarray) -> dict:
    """Fractions of (path, step) entries at each clamp, plus the invariant.

    The rule writes the clamps by np.minimum/np.maximum, so equality tests
    are exact: v == 0 at the floor, v == cap at the ceiling.
    """
    at_floor = controls == 0.0
    at_cap = (controls == caps) & ~at_floor
    total = controls.size
    violation = max(
        float(np.max(controls - caps, initial=0.0)), float(np.max(-controls, initial=0.0))
    )
    return {
        "floor_fraction": float(np.count_nonzero(at_floor)) / total,
        "cap_fraction": float(np.count_nonzero(at_cap)) / total,
        "interior_fraction": float(np.count_nonzero(~at_floor & ~at_cap)) / total,
        "max_bound_violation": violation,
    }


def write_wealth_csv(result: InvestResult, path) -> None:
    """Dump (path_id, n, X, v) rows over n = 0..horizon, 17 digits."""
    with open(path, "w", newline="") as fh:
        fh.write("path_id,n,X,v\n")
        for i in range(result.state.n_paths):
            for n in range(result.state.horizon + 1):
                fh.write(
                    f"{i},{n},{result.state.values[i, n]:.17g},{result.controls[i, n]:.17g}\n"
                )


def write_adjoint_csv(adjoint: InvestAdjoint, path) -> None:
    """Dump (n, p, q, k) rows, 17 digits; q is empty at the terminal."""
    with open(path, "w", newline="") as fh:
        fh.write("n,p,q,k\n")
        for n, p_n, q_n, k_n in adjoint.rows():
            q_txt = f"{q_n:.17g}" if q_n is not None else ""
            fh.write(f"{n},{p_n:.17g},{q_txt},{k_n:.17g}\n")


_PLOT_SCRIPT = """\
#!/usr/bin/env python3
\"\"\"Plot wealth paths and the adjoint tables from the CSVs next to this file.\"\"\"

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

here = Path(__file__).resolve().parent


def read_columns(name, fields):
    rows = {f: [] for f in fields}
    with open(here / name, newline="") as fh:
        for row in csv.DictReader(fh):
            for f in fields:
                rows[f].append(float(row[f]) if row[f] != "" else np.nan)
    return {f: np.asarray(v) for f, v in rows.items()}


wealth = read_columns("wealth.csv", ("path_id", "n", "X", "v"))
n_steps = int(wealth["n"].max()) + 1
n_paths = int(wealth["path_id"].max()) + 1
X = wealth["X"].reshape(n_paths, n_steps)
v = wealth["v"].reshape(n_paths, n_steps)
steps = np.arange(n_steps)

fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(8, 8), sharex=True)
shown = min(n_paths, 40)
for i in range(shown):
    ax1.plot(steps, X[i], lw=0.6, alpha=0.5)
    ax2.plot(steps, v[i], lw=0.6, alpha=0.5)
ax1.plot(steps, X.mean(axis=0), "k-", lw=2, label="mean wealth")
ax2.plot(steps, v.mean(axis=0), "k-", lw=2, label="mean position")
ax1.set_ylabel("wealth X_n")
ax2.set_ylabel("risky position v_n")
ax2.set_xlabel("step n")
ax1.legend(loc="best")
ax2.legend(loc="best")
fig.tight_layout()
fig.savefig(here / "wealth.png", dpi=150)

adj = read_columns("adjoint.csv", ("n", "p", "q", "k"))
fig2, ax = plt.subplots(figsize=(8, 4))
ax.plot(adj["n"], adj["p"], label="p_n")
ax.plot(adj["n"], adj["k"], label="k_n")
ax.set_xlabel("step n")
ax.legend(loc="best")
fig2.tight_layout()
fig2.savefig(here / "adjoint.png", dpi=150)
print(f"wrote {here / 'wealth.png'} and {here / 'adjoint.png'}")
"""


def run_experiment(
    config: InvestConfig, out_dir=None, n_trials: int = 100, tolerance: float = 1e-8
) -> InvestResult:
    """Simulate the candidate control and check it first-order.

    Runs the wealth recursion under the closed-form rule, evaluates the
    necessary-condition bracket along the realized paths (terminal step
    included), and probes it against ``n_trials`` random admissible controls.
    With ``out_dir`` set, writes wealth.csv, adjoint.csv, a resolved-config
    snapshot, and a standalone plot script; outputs are byte-identical for
    equal configs.
    """
    sys = build_innovation_system(config.hurst, config.horizon + 1)
    noise = sample_ensemble(sys, config.seed, config.paths, n_steps=config.horizon)
    adjoint = solve_adjoint(config)
    rule = control_rule(config, sys, adjoint)
    coeffs = coefficient_set(config)
    state = simulate_state(coeffs, ControlProcess(rule=rule), noise, config.x0)

    terminal_v = rule(config.horizon, state.values[:, -1], noise.xi)
    controls = np.hstack([state.controls, np.asarray(terminal_v)[:, None]])

    bracket = bracket_values(
        coeffs,
        cost_driver(config),
        state,
        adjoint.solution,
        adjoint.k,
        sys,
        controls=controls,
        truncation=config.horizon,
    )
    chi = consumption_indicator(config, config.horizon)
    caps = np.maximum(state.values * (1 - config.c * chi[None, :]), 0.0)
    check = check_necessary_condition(
        bracket, controls, 0.0, caps, n_trials=n_trials, seed=config.seed, tolerance=tolerance
    )
    stats = _clamp_stats(controls, caps)

    result = InvestResult(
        config=config,
        system=sys,
        adjoint=adjoint,
        state=state,
        controls=controls,
        bracket=bracket,
        check=check,
        clamp_stats=stats,
        out_dir=None if out_dir is None else Path(out_dir),
    )
    if out_dir is not None:
        _write_outputs(result)
    return result


def _write_outputs(result: InvestResult) -> None:
    out = result.out_dir
    out.mkdir(parents=True, exist_ok=True)
    write_wealth_csv(result, out / "wealth.csv")
    write_adjoint_csv(result.adjoint, out / "adjoint.csv")

    resolved = asdict(result.config)
    resolved["consumption_times_resolved"] = [
        n for n in range(result.config.horizon + 1) if result.config.is_consumption_time(n)
    ]
    resolved["adjoint_truncation"] = result.adjoint.truncation
    resolved["check_passed"] = result.check["passed"]
    resolved["clamp_stats"] = result.clamp_stats
    with open(out / "config.resolved.json", "w") as fh:
        json.dump(resolved, fh, indent=2, sort_keys=True)
        fh.write("\n")

    with open(out / "plot_wealth.py", "w", newline="") as fh:
        fh.write(_PLOT_SCRIPT)

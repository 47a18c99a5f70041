"""Fractional Gaussian noise: covariance, innovation representation, prediction.

The unit-step increments xi_n = B^H(n+1) - B^H(n) of fractional Brownian motion
with Hurst index H in (0, 1) form a stationary Gaussian sequence with

    rho_H(k) = 0.5 * (|k+1|^{2H} - 2|k|^{2H} + |k-1|^{2H}),

unit variance at lag 0, and lag independence exactly at H = 1/2.  For H != 1/2
the increments are correlated, so conditioning on the past matters everywhere
downstream.  This module provides the innovation representation that the rest
of the package consumes:

    xi  = beta @ eta     beta:  lower-triangular Cholesky factor of the
                                Toeplitz covariance of (xi_0, ..., xi_{N-1})
    eta = alpha @ xi     alpha = beta^{-1}, eta iid standard normal

and the one-step prediction coefficients

    gamma(n, k) = sum_{l=k}^{n-1} beta(n, l) alpha(l, k),   k < n,

so that E[xi_n | F_n] = sum_{k<n} gamma(n, k) xi_k, where F_n is the sigma-field
generated by the first n increments.  Convention fixed package-wide: a prefix of
length n predicts the next unseen increment xi_n; beta(n, n) is the conditional
standard deviation of that prediction.

Sampling is deterministic given the seed.  Innovations come from numpy's PCG64
generator (ziggurat standard normals), fixed for this build so that identical
(system, seed) pairs reproduce identical paths bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular, toeplitz
from scipy.linalg.lapack import dpotrf

from .errors import ContractError, NumericalError

__all__ = [
    "InnovationSystem",
    "NoisePath",
    "NoiseEnsemble",
    "fgn_autocovariance",
    "autocovariance_matrix",
    "build_innovation_system",
    "sample_path",
    "sample_ensemble",
    "predict_next",
    "prediction_matrix",
    "whiten",
    "gaussian_abs_moment",
    "write_loadings_csv",
]


def _check_hurst(h: float) -> float:
    h = float(h)
    if not 0.0 < h < 1.0:
        raise ValueError(f"Hurst index must lie in (0, 1), got {h}")
    return h


def fgn_autocovariance(h: float, lag):
    """Autocovariance rho_H(lag) of unit-step fractional Gaussian noise.

    ``lag`` may be a nonnegative integer or an array of them.  rho_H(0) = 1 for
    every H, and rho_H(k) = 0 for all k >= 1 iff H = 1/2.
    """
    h = _check_hurst(h)
    k = np.asarray(lag, dtype=float)
    if np.any(k < 0) or np.any(k != np.floor(k)):
        raise ValueError("lag must be a nonnegative integer")
    two_h = 2.0 * h
    rho = 0.5 * (np.abs(k + 1) ** two_h - 2.0 * np.abs(k) ** two_h + np.abs(k - 1) ** two_h)
    if np.isscalar(lag) or np.ndim(lag) == 0:
        return float(rho)
    return rho


def autocovariance_matrix(h: float, n: int) -> np.ndarray:
    """Toeplitz covariance matrix of (xi_0, ..., xi_{n-1})."""
    if n < 1:
        raise ValueError(f"matrix order must be >= 1, got {n}")
    return toeplitz(fgn_autocovariance(h, np.arange(n)))


@dataclass(frozen=True)
class InnovationSystem:
    """Innovation representation of fGn over a finite horizon.

    beta is the lower-triangular Cholesky factor of the covariance, alpha its
    inverse, and gamma the strictly lower-triangular prediction coefficients:
    row n of gamma gives E[xi_n | F_n] = gamma[n, :n] @ xi[:n].
    """

    hurst: float
    horizon: int
    covariance: np.ndarray
    beta: np.ndarray
    alpha: np.ndarray
    gamma: np.ndarray

    def conditional_std(self, n: int) -> float:
        """Std of xi_n given the first n increments; equals beta(n, n)."""
        return float(self.beta[n, n])

    def __repr__(self):
        return f"InnovationSystem(hurst={self.hurst}, horizon={self.horizon})"


def build_innovation_system(h: float, horizon: int) -> InnovationSystem:
    """Factor the fGn covariance over ``horizon`` steps.

    Raises NumericalError with the offending pivot index if the Toeplitz
    matrix loses positive definiteness to rounding.
    """
    h = _check_hurst(h)
    horizon = int(horizon)
    if horizon < 1:
        raise ValueError(f"horizon must be >= 1, got {horizon}")
    cov = autocovariance_matrix(h, horizon)
    beta, info = dpotrf(cov, lower=1, clean=1)
    if info != 0:
        raise NumericalError(
            f"Cholesky factorization of the fGn covariance failed at pivot {info} "
            f"(H={h}, horizon={horizon})",
            pivot_index=int(info),
        )
    alpha = solve_triangular(beta, np.eye(horizon), lower=True)
    # gamma(n, k) = sum_{l<n} beta(n, l) alpha(l, k); zeroing the diagonal of
    # beta truncates the sum at l = n-1 for every row at once.
    gamma = np.tril(beta, -1) @ alpha
    return InnovationSystem(
        hurst=h, horizon=horizon, covariance=cov, beta=beta, alpha=alpha, gamma=gamma
    )


@dataclass(frozen=True)
class NoisePath:
    """One fGn trajectory with the innovations that generated it."""

    seed: int
    eta: np.ndarray
    xi: np.ndarray

    @property
    def n_steps(self) -> int:
        return self.xi.shape[0]


@dataclass(frozen=True)
class NoiseEnsemble:
    """A batch of fGn trajectories, one row per path."""

    seed: int
    eta: np.ndarray
    xi: np.ndarray

    @property
    def n_paths(self) -> int:
        return self.xi.shape[0]

    @property
    def n_steps(self) -> int:
        return self.xi.shape[1]

    def path(self, i: int) -> NoisePath:
        return NoisePath(seed=self.seed, eta=self.eta[i].copy(), xi=self.xi[i].copy())


def sample_path(system: InnovationSystem, seed: int) -> NoisePath:
    """Draw one trajectory xi = beta @ eta; bit-identical for equal seeds."""
    rng = np.random.default_rng(seed)
    eta = rng.standard_normal(system.horizon)
    return NoisePath(seed=int(seed), eta=eta, xi=system.beta @ eta)


def sample_ensemble(
    system: InnovationSystem, seed: int, n_paths: int, n_steps: int | None = None
) -> NoiseEnsemble:
    """Draw ``n_paths`` trajectories over the first ``n_steps`` increments.

    The first k increments depend only on the leading k x k block of beta, so
    truncating to n_steps < horizon samples from exactly the same law as the
    full system restricted to those steps.
    """
    if n_paths < 1:
        raise ValueError(f"n_paths must be >= 1, got {n_paths}")
    if n_steps is None:
        n_steps = system.horizon
    if not 1 <= n_steps <= system.horizon:
        raise ContractError(
            f"n_steps must lie in [1, horizon={system.horizon}], got {n_steps}"
        )
    rng = np.random.default_rng(seed)
    eta = rng.standard_normal((n_paths, n_steps))
    xi = eta @ system.beta[:n_steps, :n_steps].T
    return NoiseEnsemble(seed=int(seed), eta=eta, xi=xi)


def predict_next(system: InnovationSystem, prefix) -> float | np.ndarray:
    """E[xi_n | xi_0, ..., xi_{n-1}] where n is the prefix length.

    ``prefix`` is one path (shape (n,)) or an ensemble (shape (M, n)); the
    empty prefix yields the unconditional mean 0.  Requires n <= horizon - 1
    so that prediction row n exists.
    """
    prefix = np.asarray(prefix, dtype=float)
    if prefix.ndim not in (1, 2):
        raise ContractError(f"prefix must be 1- or 2-dimensional, got shape {prefix.shape}")
    n = prefix.shape[-1]
    if n > system.horizon - 1:
        raise ContractError(
            f"prefix of length {n} needs prediction row {n}; system horizon "
            f"{system.horizon} only provides rows up to {system.horizon - 1}"
        )
    if n == 0:
        return 0.0 if prefix.ndim == 1 else np.zeros(prefix.shape[0])
    out = prefix @ system.gamma[n, :n]
    return float(out) if prefix.ndim == 1 else out


def prediction_matrix(system: InnovationSystem, xi, n_max: int) -> np.ndarray:
    """Stack predict_next over all prefix lengths n = 0, ..., n_max.

    Column n of the result is E[xi_n | xi_0, ..., xi_{n-1}] for each path in
    ``xi`` (shape (M, >= n_max)); column 0 is the unconditional mean 0.
    """
    xi = np.atleast_2d(np.asarray(xi, dtype=float))
    if n_max > system.horizon - 1:
        raise ContractError(
            f"prefix of length {n_max} needs prediction row {n_max}; system "
            f"horizon {system.horizon} only provides rows up to {system.horizon - 1}"
        )
    if xi.shape[1] < n_max:
        raise ContractError(f"need {n_max} increments per path, got {xi.shape[1]}")
    out = np.zeros((xi.shape[0], n_max + 1))
    for n in range(1, n_max + 1):
        out[:, n] = xi[:, :n] @ system.gamma[n, :n]
    return out


def whiten(system: InnovationSystem, xi: np.ndarray) -> np.ndarray:
    """Recover innovations eta = alpha @ xi (rows are paths if xi is 2D)."""
    xi = np.asarray(xi, dtype=float)
    if xi.shape[-1] != system.horizon:
        raise ContractError(
            f"xi has {xi.shape[-1]} steps but the system horizon is {system.horizon}"
        )
    return xi @ system.alpha.T


def gaussian_abs_moment(m: float) -> float:
    """E|xi|^m for xi standard normal: 2^{m/2} Gamma((m+1)/2) / sqrt(pi).

    For even integer m this reduces exactly to the double factorial
    (m-1)!! = 1 * 3 * ... * (m-1), which is returned via integer arithmetic so
    the classical values (m=2 -> 1, m=4 -> 3) are exact.  Other m > 0 use the
    log-Gamma form, stable far beyond m = 200.
    """
    m = float(m)
    if m <= 0:
        raise ValueError(f"moment order must be > 0, got {m}")
    if m == math.floor(m) and int(m) % 2 == 0:
        prod = 1
        for i in range(1, int(m), 2):
            prod *= i
        return float(prod)
    return math.exp(0.5 * m * math.log(2.0) + math.lgamma(0.5 * (m + 1.0)) - 0.5 * math.log(math.pi))


def write_loadings_csv(system: InnovationSystem, path) -> None:
    """Dump beta, alpha, gamma as (matrix, row, col, value) rows, 17 digits."""
    with open(path, "w", newline="") as fh:
        fh.write("matrix,row,col,value\n")
        for name, mat in (("beta", system.beta), ("alpha", system.alpha), ("gamma", system.gamma)):
            rows, cols = np.nonzero(mat)
            for i, j in zip(rows, cols):
                fh.write(f"{name},{i},{j},{mat[i, j]:.17g}\n")

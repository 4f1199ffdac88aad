"""Preconditioned Crank-Nicolson Metropolis sampling.

Targets exp(-Phi(theta)) N(theta; mu, Sigma). The proposal

    theta' = mu + sqrt(1 - beta^2) (theta - mu) + beta L xi,   L L^T = Sigma

leaves the Gaussian reference invariant, so the acceptance ratio only
involves the potential.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable

import numpy as np

Potential = Callable[[np.ndarray], float]


class InsufficientDataError(ValueError):
    pass


class ChainInitError(RuntimeError):
    pass


def default_jitter(cov: np.ndarray) -> float:
    """1e-6 times the average variance; floored so an all-zero covariance still factorizes."""
    p = cov.shape[0]
    return max(1e-6 * float(np.trace(cov)) / p, 1e-12)


@dataclass(frozen=True, eq=False)
class GaussianState:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if cov.shape != (mean.size, mean.size):
            raise ValueError(f"covariance shape {cov.shape} does not match mean length {mean.size}")
        if not np.allclose(cov, cov.T, rtol=1e-10, atol=1e-14):
            raise ValueError("covariance must be symmetric")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return self.mean.size

    @cached_property
    def factor(self) -> np.ndarray:
        """Lower Cholesky factor of the covariance."""
        try:
            return np.linalg.cholesky(self.cov)
        except np.linalg.LinAlgError as exc:
            raise np.linalg.LinAlgError("covariance is not positive definite; add jitter") from exc

    def with_jitter(self, c2: float) -> "GaussianState":
        return GaussianState(self.mean, self.cov + c2 * np.eye(self.dim))

    def sample(self, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
        n = 1 if size is None else size
        draws = self.mean + rng.standard_normal((n, self.dim)) @ self.factor.T
        return draws[0] if size is None else draws

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "cov": self.cov.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "GaussianState":
        return cls(np.array(d["mean"]), np.array(d["cov"]))


def gaussian_moments(samples, jitter: float | None = None, add_jitter: bool = True) -> GaussianState:
    """Sample mean and unbiased (n - 1) covariance, plus a small diagonal jitter."""
    X = np.asarray(samples, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[0] < 2:
        raise InsufficientDataError(f"need at least 2 samples for a covariance, got {X.shape[0]}")
    mu = X.mean(axis=0)
    C = np.atleast_2d(np.cov(X, rowvar=False, ddof=1))
    C = 0.5 * (C + C.T)
    if add_jitter:
        C = C + (default_jitter(C) if jitter is None else jitter) * np.eye(C.shape[0])
    return GaussianState(mu, C)


@dataclass
class ChainConfig:
    steps: int = 5000
    beta: float = 0.008
    burn_in: float = 0.2
    thin: int = 10
    seed: int = 0
    theta0: np.ndarray | None = None

    def __post_init__(self):
        if not 0 < self.beta <= 1:
            raise ValueError("beta must lie in (0, 1]")
        if not 0 <= self.burn_in < 1:
            raise ValueError("burn-in fraction must lie in [0, 1)")
        if self.steps < 1 or self.thin < 1:
            raise ValueError("steps and thinning stride must be positive")

    @property
    def n_burn(self) -> int:
        return int(self.burn_in * self.steps)

    @property
    def n_kept(self) -> int:
        return (self.steps - self.n_burn) // self.thin

    def replace(self, **kw) -> "ChainConfig":
        d = {k: getattr(self, k) for k in ("steps", "beta", "burn_in", "thin", "seed", "theta0")}
        d.update(kw)
        return ChainConfig(**d)


@dataclass
class ChainResult:
    samples: np.ndarray
    acceptance_rate: float
    potentials: np.ndarray
    accepted: np.ndarray = field(repr=False)

    @property
    def mean(self) -> np.ndarray:
        return self.samples.mean(axis=0)

    def __eq__(self, other):
        if not isinstance(other, ChainResult):
            return NotImplemented
        return (
            np.array_equal(self.samples, other.samples)
            and self.acceptance_rate == other.acceptance_rate
            and np.array_equal(self.potentials, other.potentials)
            and np.array_equal(self.accepted, other.accepted)
        )

    def write_trace(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "phi", "accepted"])
            for i, (phi, acc) in enumerate(zip(self.potentials, self.accepted), start=1):
                w.writerow([i, repr(float(phi)), int(acc)])


def pcn_propose(theta, prior: GaussianState, beta: float, rng: np.random.Generator | None = None, xi=None) -> np.ndarray:
    if not 0 < beta <= 1:
        raise ValueError("beta must lie in (0, 1]")
    if xi is None:
        xi = rng.standard_normal(prior.dim)
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    return prior.mean + math.sqrt(1.0 - beta * beta) * (theta - prior.mean) + beta * (prior.factor @ xi)


def pcn_accept(phi_current: float, phi_proposed: float, rng: np.random.Generator) -> bool:
    """Metropolis test with probability min(1, exp(phi_current - phi_proposed)).

    Always consumes one uniform so the random stream does not depend on
    the outcome.
    """
    u = rng.random()
    log_ratio = phi_current - phi_proposed
    if log_ratio >= 0:
        return True
    return bool(math.log(u) < log_ratio) if u > 0 else True


def run_chain(potential: Potential, prior: GaussianState, cfg: ChainConfig) -> ChainResult:
    """Run a pCN chain; starts at the prior mean unless ``cfg.theta0`` is set."""
    rng = np.random.default_rng(cfg.seed)
    theta = prior.mean.copy() if cfg.theta0 is None else np.array(cfg.theta0, dtype=float)
    if theta.shape != (prior.dim,):
        raise ChainInitError(f"initial state has shape {theta.shape}, expected ({prior.dim},)")
    phi = float(potential(theta))
    if not math.isfinite(phi):
        raise ChainInitError(f"potential at the initial state is not finite ({phi})")

    L = prior.factor
    mu = prior.mean
    rho = math.sqrt(1.0 - cfg.beta**2)
    n_burn, thin = cfg.n_burn, cfg.thin
    kept = np.empty((cfg.n_kept, prior.dim))
    potentials = np.empty(cfg.steps)
    accepted = np.zeros(cfg.steps, dtype=bool)
    k = 0
    for step in range(cfg.steps):
        xi = rng.standard_normal(prior.dim)
        proposal = mu + rho * (theta - mu) + cfg.beta * (L @ xi)
        phi_new = float(potential(proposal))
        # non-finite proposals (e.g. solver failure far out) are rejected
        if math.isfinite(phi_new) and pcn_accept(phi, phi_new, rng):
            theta, phi = proposal, phi_new
            accepted[step] = True
        elif not math.isfinite(phi_new):
            rng.random()
        potentials[step] = phi
        if step >= n_burn and (step - n_burn + 1) % thin == 0 and k < kept.shape[0]:
            kept[k] = theta
            k += 1
    return ChainResult(kept, float(accepted.mean()), potentials, accepted)

"""Gaussian-process parameterization of the log-permeability field.

The parameter vector theta holds ln(a) at a fixed set of anchor nodes.
The field at any other point is the GP posterior mean conditioned on
those anchor values, and a = exp(mean) is positive by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
from scipy.spatial.distance import cdist

DEFAULT_JITTER = 1e-8


class ConditioningError(np.linalg.LinAlgError):
    """Kernel matrix could not be factorized; try a larger jitter."""


@dataclass(frozen=True)
class KernelConfig:
    gamma: float = 1.0
    ell: float = 0.5

    def __post_init__(self):
        if not (self.gamma > 0 and self.ell > 0):
            raise ValueError(f"kernel needs gamma > 0 and ell > 0, got {self}")


def kernel(x, x_prime, cfg: KernelConfig) -> float:
    """gamma * exp(-|x' - x| / (2 ell^2)).

    The exponent uses the plain Euclidean distance, not its square.
    """
    r = np.linalg.norm(np.asarray(x_prime, dtype=float) - np.asarray(x, dtype=float))
    return float(cfg.gamma * np.exp(-r / (2.0 * cfg.ell**2)))


def kernel_matrix(xa: np.ndarray, xb: np.ndarray, cfg: KernelConfig) -> np.ndarray:
    r = cdist(np.atleast_2d(xa), np.atleast_2d(xb))
    return cfg.gamma * np.exp(-r / (2.0 * cfg.ell**2))


def grid_nodes(domain, per_side: int) -> np.ndarray:
    """``per_side`` x ``per_side`` anchors spanning the closed rectangle, row-major."""
    (x0, y0), (x1, y1) = domain
    gx, gy = np.meshgrid(np.linspace(x0, x1, per_side), np.linspace(y0, y1, per_side))
    return np.column_stack([gx.ravel(), gy.ravel()])


def _check_nodes(nodes: np.ndarray) -> np.ndarray:
    nodes = np.atleast_2d(np.asarray(nodes, dtype=float))
    if nodes.shape[0] < 1 or nodes.shape[1] != 2:
        raise ValueError("need at least one 2D anchor")
    if nodes.shape[0] > 1:
        d = cdist(nodes, nodes)
        np.fill_diagonal(d, np.inf)
        if d.min() == 0:
            raise ValueError("anchor locations must be pairwise distinct")
    return nodes


def prior_covariance(nodes: np.ndarray, cfg: KernelConfig, jitter: float = DEFAULT_JITTER) -> np.ndarray:
    """K(X*, X*) + jitter * I. This is the covariance of the Gaussian prior on theta."""
    nodes = _check_nodes(nodes)
    K = kernel_matrix(nodes, nodes, cfg)
    K[np.diag_indices_from(K)] += jitter
    try:
        np.linalg.cholesky(K)
    except np.linalg.LinAlgError as exc:
        raise ConditioningError(
            f"kernel matrix over {nodes.shape[0]} anchors is not positive definite at jitter={jitter:g}"
        ) from exc
    return K


class GPRInterpolant:
    """GP posterior mean through fixed anchors, frozen after construction."""

    def __init__(self, theta, nodes, cfg: KernelConfig, jitter: float = DEFAULT_JITTER):
        self.nodes = _check_nodes(nodes)
        self.cfg = cfg
        self.jitter = jitter
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.nodes.shape[0],):
            raise ValueError(f"theta has shape {theta.shape}, expected ({self.nodes.shape[0]},)")
        if not np.all(np.isfinite(theta)):
            raise ValueError("theta must be finite")
        self.theta = theta
        K = prior_covariance(self.nodes, cfg, jitter)
        self._factor = scipy.linalg.cho_factor(K, lower=True)
        self.weights = scipy.linalg.cho_solve(self._factor, theta)

    def mean(self, x: np.ndarray) -> np.ndarray:
        return kernel_matrix(x, self.nodes, self.cfg) @ self.weights

    def variance(self, x: np.ndarray) -> np.ndarray:
        """Pointwise GP posterior variance k(x, x) - k(x, X*) K^-1 k(X*, x)."""
        kx = kernel_matrix(x, self.nodes, self.cfg)
        v = scipy.linalg.cho_solve(self._factor, kx.T)
        return self.cfg.gamma - np.einsum("ij,ji->i", kx, v)

    def coefficient(self, x: np.ndarray) -> np.ndarray:
        return np.exp(self.mean(x))


def fit_interpolant(theta, nodes, cfg: KernelConfig, jitter: float = DEFAULT_JITTER) -> GPRInterpolant:
    return GPRInterpolant(theta, nodes, cfg, jitter)


def eval_coefficient(interp: GPRInterpolant, x) -> np.ndarray | float:
    pts = np.atleast_2d(np.asarray(x, dtype=float))
    out = interp.coefficient(pts)
    return float(out[0]) if np.ndim(x) == 1 else out


class GPRField:
    """Linear map theta -> ln(a) at a fixed set of evaluation points.

    Precomputes K(points, X*) K(X*, X*)^-1 so each forward evaluation is a
    single matrix-vector product.
    """

    def __init__(self, nodes, cfg: KernelConfig, jitter: float = DEFAULT_JITTER):
        self.nodes = _check_nodes(nodes)
        self.cfg = cfg
        self.jitter = jitter
        self._factor = scipy.linalg.cho_factor(prior_covariance(self.nodes, cfg, jitter), lower=True)

    @property
    def dim(self) -> int:
        return self.nodes.shape[0]

    def prior_covariance(self) -> np.ndarray:
        return prior_covariance(self.nodes, self.cfg, self.jitter)

    def operator(self, points: np.ndarray) -> np.ndarray:
        kx = kernel_matrix(points, self.nodes, self.cfg)
        return scipy.linalg.cho_solve(self._factor, kx.T).T

    def interpolant(self, theta) -> GPRInterpolant:
        return GPRInterpolant(theta, self.nodes, self.cfg, self.jitter)


class InterfaceSplit:
    """Two independent GP fields split by the circle |x|^2 = radius^2.

    Anchors with |x|^2 <= radius^2 parameterize the inside field, the rest
    the outside field. A point is evaluated with the field of the region it
    falls in, so the coefficient may jump across the interface.
    """

    def __init__(self, nodes, cfg: KernelConfig, radius: float, jitter: float = DEFAULT_JITTER):
        self.nodes = _check_nodes(nodes)
        self.cfg = cfg
        self.radius = float(radius)
        self.jitter = jitter
        self.inside_mask = self.region(self.nodes)
        self.inside = np.flatnonzero(self.inside_mask)
        self.outside = np.flatnonzero(~self.inside_mask)
        if self.inside.size == 0 or self.outside.size == 0:
            raise ValueError("interface radius leaves one region without anchors")
        self.field_in = GPRField(self.nodes[self.inside], cfg, jitter)
        self.field_out = GPRField(self.nodes[self.outside], cfg, jitter)

    @property
    def dim(self) -> int:
        return self.nodes.shape[0]

    def region(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(points)
        return np.sum(pts**2, axis=1) <= self.radius**2

    def prior_covariance(self) -> np.ndarray:
        """Block-diagonal: the two regions are a priori independent."""
        C = np.zeros((self.dim, self.dim))
        C[np.ix_(self.inside, self.inside)] = self.field_in.prior_covariance()
        C[np.ix_(self.outside, self.outside)] = self.field_out.prior_covariance()
        return C

    def operator(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(points)
        inside = self.region(pts)
        T = np.zeros((pts.shape[0], self.dim))
        if inside.any():
            T[np.ix_(inside, self.inside)] = self.field_in.operator(pts[inside])
        if (~inside).any():
            T[np.ix_(~inside, self.outside)] = self.field_out.operator(pts[~inside])
        return T

    def interpolants(self, theta) -> tuple[GPRInterpolant, GPRInterpolant]:
        theta = np.asarray(theta, dtype=float)
        return (
            self.field_in.interpolant(theta[self.inside]),
            self.field_out.interpolant(theta[self.outside]),
        )


def eval_coefficient_interface(split: InterfaceSplit, theta, x) -> np.ndarray | float:
    pts = np.atleast_2d(np.asarray(x, dtype=float))
    if np.asarray(theta).shape != (split.dim,):
        raise ValueError(f"theta must have length {split.dim}")
    out = np.exp(split.operator(pts) @ np.asarray(theta, dtype=float))
    return float(out[0]) if np.ndim(x) == 1 else out

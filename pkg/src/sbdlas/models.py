"""Parameters-to-observations maps with call accounting.

Every model here maps a parameter vector theta in R^p to an observation
vector in R^d and counts how many times it was evaluated. The fine-solver
count is the cost currency of the whole method.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import fem
from .gpr import GPRField, InterfaceSplit


class ForwardModel:
    """Base class: subclasses implement ``_evaluate``.

    The counter is guarded by a lock so workers may share one instance.
    """

    name = "model"

    def __init__(self, input_dim: int, output_dim: int):
        self.input_dim = int(input_dim)
        self.output_dim = int(output_dim)
        self._calls = 0
        self._lock = threading.Lock()

    @property
    def calls(self) -> int:
        return self._calls

    def reset_calls(self) -> None:
        with self._lock:
            self._calls = 0

    def __call__(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.input_dim,):
            raise ValueError(f"{self.name}: expected theta of shape ({self.input_dim},), got {theta.shape}")
        with self._lock:
            self._calls += 1
        out = np.asarray(self._evaluate(theta), dtype=float)
        if out.shape != (self.output_dim,):
            raise RuntimeError(f"{self.name}: produced shape {out.shape}, expected ({self.output_dim},)")
        return out

    def evaluate_many(self, thetas: np.ndarray, workers: int = 1) -> np.ndarray:
        thetas = np.atleast_2d(thetas)
        if workers > 1:
            from concurrent.futures import ThreadPoolExecutor

            with ThreadPoolExecutor(workers) as pool:
                return np.array(list(pool.map(self, thetas)))
        return np.array([self(t) for t in thetas])

    def _evaluate(self, theta: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class FunctionModel(ForwardModel):
    """Wrap a plain callable."""

    def __init__(self, fn: Callable[[np.ndarray], np.ndarray], input_dim: int, output_dim: int, name: str = "function"):
        super().__init__(input_dim, output_dim)
        self._fn = fn
        self.name = name

    def _evaluate(self, theta):
        return self._fn(theta)


class ZeroModel(ForwardModel):
    """Always returns zeros. Used as the 'coarse' part of a pure-network surrogate."""

    name = "zero"

    def _evaluate(self, theta):
        return np.zeros(self.output_dim)


class DarcyModel(ForwardModel):
    """theta -> GPR log-field -> P1 Darcy solve -> point observations.

    ``field`` is a :class:`GPRField` or :class:`InterfaceSplit`; its linear
    operator onto the mesh nodes is precomputed at construction.
    """

    def __init__(
        self,
        mesh: fem.StructuredMesh,
        field: GPRField | InterfaceSplit,
        grid: fem.ObservationGrid,
        source: Callable[[np.ndarray], np.ndarray] = fem.darcy_source,
        name: str = "darcy",
    ):
        super().__init__(field.dim, grid.size)
        self.name = name
        self.mesh = mesh
        self.field = field
        self.grid = grid
        self._assembler = fem.DarcyAssembler(mesh)
        self._rhs = self._assembler.load(source)
        self._to_nodes = field.operator(mesh.nodes)
        self._observe = fem.observation_matrix(mesh, grid.locations)

    def log_coefficient(self, theta) -> np.ndarray:
        return self._to_nodes @ np.asarray(theta, dtype=float)

    def solve(self, theta) -> np.ndarray:
        """Nodal pressure for ``theta``; does not touch the call counter."""
        return self._assembler.solve(np.exp(self.log_coefficient(theta)), self._rhs)

    def _evaluate(self, theta):
        return self._observe @ self.solve(theta)


def darcy_forward(theta, mesh: fem.StructuredMesh, field: GPRField | InterfaceSplit, grid: fem.ObservationGrid) -> np.ndarray:
    """One-shot convenience wrapper; build a :class:`DarcyModel` for repeated use."""
    return DarcyModel(mesh, field, grid)(theta)


ODE_POINTS = np.linspace(0.0, np.pi, 20)


def ode_toy_forward(theta) -> np.ndarray:
    """Closed-form solution u(x) = (theta sin(x) / 2)^2 of u' = theta sqrt(u) cos(x), u(0)=u(pi)=0.

    Evaluated at 20 equispaced points on [0, pi].
    """
    t = float(np.asarray(theta).reshape(-1)[0])
    if not t > 0:
        raise fem.DomainError(f"ODE coefficient must be positive, got {t}")
    return (t * np.sin(ODE_POINTS) / 2.0) ** 2


def algebraic_toy_forward(theta) -> np.ndarray:
    t1, t2 = np.asarray(theta, dtype=float)
    return np.array([t1 + t2 + t1 * t2, t1 + t2 - t1 * t2])


class OdeToyModel(FunctionModel):
    def __init__(self):
        super().__init__(ode_toy_forward, 1, ODE_POINTS.size, name="ode-toy")


class AlgebraicToyModel(FunctionModel):
    def __init__(self):
        super().__init__(algebraic_toy_forward, 2, 2, name="algebraic-toy")


@dataclass(frozen=True)
class Observation:
    """Data vector y with per-component noise standard deviations.

    ``sigma`` of all zeros means noise-free data; the potential then falls
    back to the unweighted Euclidean misfit.
    """

    y: np.ndarray
    sigma: np.ndarray
    locations: np.ndarray | None = None

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).reshape(-1)
        sigma = np.broadcast_to(np.asarray(self.sigma, dtype=float), y.shape).copy()
        if np.any(sigma < 0):
            raise ValueError("noise standard deviations must be non-negative")
        if np.any(sigma == 0) and np.any(sigma > 0):
            raise ValueError("mixed zero and positive noise levels are not supported")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "sigma", sigma)

    @property
    def noise_free(self) -> bool:
        return bool(np.all(self.sigma == 0))

    @property
    def weights(self) -> np.ndarray:
        """Diagonal of the inverse noise covariance (ones when noise-free)."""
        return np.ones_like(self.y) if self.noise_free else 1.0 / self.sigma**2

    def with_sigma(self, sigma) -> "Observation":
        return Observation(self.y, sigma, self.locations)


def synthesize_observation(model: ForwardModel, theta_star, delta: float, seed: int) -> Observation:
    """y = G(theta*) + eta with eta ~ N(0, delta^2 I) drawn from ``seed``."""
    if delta < 0:
        raise ValueError("delta must be non-negative")
    clean = model(theta_star)
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, 1.0, size=clean.shape) * delta
    locs = model.grid.locations if isinstance(model, DarcyModel) else None
    return Observation(clean + noise, np.full(clean.shape, float(delta)), locs)


def misfit(prediction: np.ndarray, obs: Observation) -> float:
    r = obs.y - prediction
    return 0.5 * float(np.sum(obs.weights * r * r))


def potential(theta, model: Callable[[np.ndarray], np.ndarray], obs: Observation) -> float:
    """Phi = 1/2 |y - G(theta)|^2 weighted by the inverse noise covariance."""
    return misfit(model(theta), obs)

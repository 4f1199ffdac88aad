"""P1 finite elements for the Darcy problem on structured triangular meshes.

Solves -div(a grad u) = f with u = 0 on the boundary of an axis-aligned
rectangle. The mesh is an n x n node grid, each cell cut into two
triangles. Assembly reuses a precomputed sparsity pattern so repeated
solves with different coefficients only pay for a sparse product and a
factorization.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

Rectangle = tuple[tuple[float, float], tuple[float, float]]

UNIT_SQUARE: Rectangle = ((0.0, 0.0), (1.0, 1.0))
CENTERED_SQUARE: Rectangle = ((-1.0, -1.0), (1.0, 1.0))

# Below this many free nodes a dense Cholesky beats SuperLU.
_DENSE_LIMIT = 400
RESIDUAL_TOL = 1e-10


class MeshError(ValueError):
    """Invalid mesh resolution or geometry."""


class DomainError(ValueError):
    """Input outside the admissible set (non-positive coefficient, point outside the domain)."""


class SolverError(RuntimeError):
    """The linear system could not be solved to tolerance."""


@dataclass(frozen=True)
class StructuredMesh:
    domain: Rectangle
    nodes_per_side: int
    nodes: np.ndarray = field(repr=False)
    triangles: np.ndarray = field(repr=False)
    boundary_mask: np.ndarray = field(repr=False)

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_triangles(self) -> int:
        return self.triangles.shape[0]

    @property
    def spacing(self) -> tuple[float, float]:
        (x0, y0), (x1, y1) = self.domain
        m = self.nodes_per_side - 1
        return (x1 - x0) / m, (y1 - y0) / m

    def signed_areas(self) -> np.ndarray:
        p = self.nodes[self.triangles]
        e1 = p[:, 1] - p[:, 0]
        e2 = p[:, 2] - p[:, 0]
        return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])

    def contains(self, points: np.ndarray, strict: bool = False) -> np.ndarray:
        pts = np.atleast_2d(points)
        (x0, y0), (x1, y1) = self.domain
        if strict:
            return (pts[:, 0] > x0) & (pts[:, 0] < x1) & (pts[:, 1] > y0) & (pts[:, 1] < y1)
        return (pts[:, 0] >= x0) & (pts[:, 0] <= x1) & (pts[:, 1] >= y0) & (pts[:, 1] <= y1)


def build_mesh(domain: Rectangle, n: int) -> StructuredMesh:
    """Build an n x n node mesh over ``domain``.

    Nodes are numbered row-major (x fastest). Cell (i, j) with corners
    v00, v10, v11, v01 is split along the v00-v11 diagonal into
    (v00, v10, v11) and (v00, v11, v01), both counter-clockwise.
    """
    if int(n) != n or n < 2:
        raise MeshError(f"nodes_per_side must be an integer >= 2, got {n!r}")
    n = int(n)
    (x0, y0), (x1, y1) = domain
    if not (x1 > x0 and y1 > y0):
        raise MeshError(f"degenerate domain {domain!r}")

    xs = np.linspace(x0, x1, n)
    ys = np.linspace(y0, y1, n)
    gx, gy = np.meshgrid(xs, ys)
    nodes = np.column_stack([gx.ravel(), gy.ravel()])

    i, j = np.meshgrid(np.arange(n - 1), np.arange(n - 1))
    v00 = (j * n + i).ravel()
    v10 = v00 + 1
    v01 = v00 + n
    v11 = v01 + 1
    lower = np.column_stack([v00, v10, v11])
    upper = np.column_stack([v00, v11, v01])
    triangles = np.empty((2 * lower.shape[0], 3), dtype=np.int64)
    triangles[0::2] = lower
    triangles[1::2] = upper

    ii, jj = np.meshgrid(np.arange(n), np.arange(n))
    boundary = ((ii == 0) | (ii == n - 1) | (jj == 0) | (jj == n - 1)).ravel()
    return StructuredMesh(((x0, y0), (x1, y1)), n, nodes, triangles, boundary)


def _p1_gradients(mesh: StructuredMesh) -> tuple[np.ndarray, np.ndarray]:
    """Per-triangle area and barycentric gradients (n_tri, 3, 2)."""
    p = mesh.nodes[mesh.triangles]
    area = mesh.signed_areas()
    # grad(lambda_i) = perp(p_k - p_j) / (2A) for (i, j, k) cyclic
    grads = np.empty((mesh.n_triangles, 3, 2))
    for a, (b, c) in enumerate(((1, 2), (2, 0), (0, 1))):
        grads[:, a, 0] = p[:, b, 1] - p[:, c, 1]
        grads[:, a, 1] = p[:, c, 0] - p[:, b, 0]
    grads /= (2.0 * area)[:, None, None]
    return area, grads


class DarcyAssembler:
    """Reusable P1 assembly of the Darcy stiffness matrix on a fixed mesh.

    The element coefficient is the mean of the three vertex values of ``a``.
    Dirichlet rows and columns are eliminated, so the unknowns are the
    interior nodes only.
    """

    def __init__(self, mesh: StructuredMesh):
        self.mesh = mesh
        self.area, grads = _p1_gradients(mesh)
        if np.any(self.area <= 0):
            raise MeshError("mesh has non-positive triangle areas")
        local = self.area[:, None, None] * np.einsum("eik,ejk->eij", grads, grads)

        free = np.flatnonzero(~mesh.boundary_mask)
        self.free = free
        dof = np.full(mesh.n_nodes, -1, dtype=np.int64)
        dof[free] = np.arange(free.size)
        self._dof = dof
        nf = free.size

        tri = mesh.triangles
        rows = np.repeat(dof[tri], 3, axis=1).ravel()
        cols = np.tile(dof[tri], (1, 3)).ravel()
        elems = np.repeat(np.arange(mesh.n_triangles), 9)
        vals = local.reshape(-1)
        keep = (rows >= 0) & (cols >= 0)
        rows, cols, elems, vals = rows[keep], cols[keep], elems[keep], vals[keep]

        keys = rows * nf + cols
        uniq, pos = np.unique(keys, return_inverse=True)
        self._indices = (uniq % nf).astype(np.int32)
        counts = np.bincount(uniq // nf, minlength=nf)
        self._indptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int32)
        # csr.data = scatter @ a_elem
        self._scatter = sp.csr_matrix((vals, (pos, elems)), shape=(uniq.size, mesh.n_triangles))
        self._vertex_mean = sp.csr_matrix(
            (np.full(tri.size, 1.0 / 3.0), (np.repeat(np.arange(mesh.n_triangles), 3), tri.ravel())),
            shape=(mesh.n_triangles, mesh.n_nodes),
        )
        self.n_free = nf

    def element_coefficients(self, a_nodes: np.ndarray) -> np.ndarray:
        return self._vertex_mean @ a_nodes

    def stiffness(self, a_nodes: np.ndarray) -> sp.csr_matrix:
        a_nodes = np.asarray(a_nodes, dtype=float)
        if a_nodes.shape != (self.mesh.n_nodes,):
            raise DomainError(f"coefficient has shape {a_nodes.shape}, expected ({self.mesh.n_nodes},)")
        if not np.all(np.isfinite(a_nodes)) or np.any(a_nodes <= 0):
            raise DomainError("permeability must be finite and strictly positive at every node")
        data = self._scatter @ self.element_coefficients(a_nodes)
        return sp.csr_matrix((data, self._indices, self._indptr), shape=(self.n_free, self.n_free))

    def load(self, f: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
        """Centroid-rule load vector on the free nodes."""
        centroids = self.mesh.nodes[self.mesh.triangles].mean(axis=1)
        fc = np.broadcast_to(np.asarray(f(centroids), dtype=float), (self.mesh.n_triangles,))
        contrib = np.repeat(fc * self.area / 3.0, 3)
        full = np.bincount(self.mesh.triangles.ravel(), weights=contrib, minlength=self.mesh.n_nodes)
        return full[self.free]

    def solve(self, a_nodes: np.ndarray, rhs: np.ndarray) -> np.ndarray:
        """Solve for nodal pressure given the free-node load vector ``rhs``."""
        A = self.stiffness(a_nodes)
        if self.n_free <= _DENSE_LIMIT:
            try:
                c = scipy.linalg.cho_factor(A.toarray(), lower=True, check_finite=False)
            except np.linalg.LinAlgError as exc:
                raise SolverError("stiffness matrix is not positive definite") from exc
            x = scipy.linalg.cho_solve(c, rhs, check_finite=False)
        else:
            try:
                x = spla.splu(A.tocsc()).solve(rhs)
            except RuntimeError as exc:
                raise SolverError("stiffness matrix is singular") from exc
        res = np.linalg.norm(A @ x - rhs)
        scale = np.linalg.norm(rhs)
        if not np.all(np.isfinite(x)) or (scale > 0 and res > RESIDUAL_TOL * scale):
            raise SolverError(f"linear solve residual {res:.3e} exceeds tolerance")
        u = np.zeros(self.mesh.n_nodes)
        u[self.free] = x
        return u


def assemble_and_solve(
    mesh: StructuredMesh,
    a: np.ndarray,
    f: Callable[[np.ndarray], np.ndarray],
    assembler: DarcyAssembler | None = None,
) -> np.ndarray:
    """P1 Galerkin solution of -div(a grad u) = f, u = 0 on the boundary.

    ``a`` holds the permeability at mesh nodes and ``f`` maps an (m, 2)
    array of points to m source values. Pass a prebuilt ``assembler`` to
    skip pattern construction on repeated calls.
    """
    asm = assembler if assembler is not None else DarcyAssembler(mesh)
    return asm.solve(a, asm.load(f))


def darcy_source(points: np.ndarray) -> np.ndarray:
    """The source term sin(pi x1) sin(pi x2) used for all Darcy experiments."""
    pts = np.atleast_2d(points)
    return np.sin(np.pi * pts[:, 0]) * np.sin(np.pi * pts[:, 1])


@dataclass(frozen=True)
class ObservationGrid:
    locations: np.ndarray
    delta: float = 0.0

    def __post_init__(self):
        locs = np.atleast_2d(np.asarray(self.locations, dtype=float))
        if locs.ndim != 2 or locs.shape[1] != 2 or locs.shape[0] < 1:
            raise ValueError("observation grid needs at least one 2D location")
        if self.delta < 0:
            raise ValueError("noise standard deviation must be non-negative")
        object.__setattr__(self, "locations", locs)

    @property
    def size(self) -> int:
        return self.locations.shape[0]

    @classmethod
    def interior(cls, domain: Rectangle, per_side: int, delta: float = 0.0) -> "ObservationGrid":
        """Equispaced ``per_side`` x ``per_side`` grid strictly inside ``domain``."""
        (x0, y0), (x1, y1) = domain
        xs = np.linspace(x0, x1, per_side + 2)[1:-1]
        ys = np.linspace(y0, y1, per_side + 2)[1:-1]
        gx, gy = np.meshgrid(xs, ys)
        return cls(np.column_stack([gx.ravel(), gy.ravel()]), delta)


def observation_matrix(mesh: StructuredMesh, locations: np.ndarray) -> sp.csr_matrix:
    """Sparse (d, n_nodes) operator doing P1 interpolation at ``locations``."""
    pts = np.atleast_2d(np.asarray(locations, dtype=float))
    if not np.all(mesh.contains(pts)):
        bad = pts[~mesh.contains(pts)]
        raise DomainError(f"observation location(s) outside the domain: {bad.tolist()}")
    (x0, y0), _ = mesh.domain
    hx, hy = mesh.spacing
    n = mesh.nodes_per_side
    sx = (pts[:, 0] - x0) / hx
    sy = (pts[:, 1] - y0) / hy
    ci = np.clip(np.floor(sx).astype(int), 0, n - 2)
    cj = np.clip(np.floor(sy).astype(int), 0, n - 2)
    lx = sx - ci
    ly = sy - cj
    v00 = cj * n + ci
    v10, v01, v11 = v00 + 1, v00 + n, v00 + n + 1
    lower = ly <= lx
    # lower triangle (v00, v10, v11): u = (1-lx) u00 + (lx-ly) u10 + ly u11
    # upper triangle (v00, v11, v01): u = (1-ly) u00 + lx u11 + (ly-lx) u01
    w = np.where(
        lower[:, None],
        np.column_stack([1 - lx, lx - ly, ly, np.zeros_like(lx)]),
        np.column_stack([1 - ly, np.zeros_like(lx), lx, ly - lx]),
    )
    cols = np.column_stack([v00, v10, v11, v01])
    rows = np.repeat(np.arange(pts.shape[0]), 4)
    return sp.csr_matrix((w.ravel(), (rows, cols.ravel())), shape=(pts.shape[0], mesh.n_nodes))


def observe(u: np.ndarray, mesh: StructuredMesh, grid: ObservationGrid | np.ndarray) -> np.ndarray:
    locations = grid.locations if isinstance(grid, ObservationGrid) else grid
    return observation_matrix(mesh, locations) @ np.asarray(u, dtype=float)


def l2_error(mesh: StructuredMesh, u_h: np.ndarray, exact: Callable[[np.ndarray], np.ndarray]) -> float:
    """L2 norm of u_h - exact using the 3-point edge-midpoint rule per triangle."""
    area = mesh.signed_areas()
    p = mesh.nodes[mesh.triangles]
    uh = u_h[mesh.triangles]
    total = 0.0
    for a, b in ((0, 1), (1, 2), (2, 0)):
        mid = 0.5 * (p[:, a] + p[:, b])
        diff = 0.5 * (uh[:, a] + uh[:, b]) - exact(mid)
        total += np.sum(area / 3.0 * diff**2)
    return float(np.sqrt(total))

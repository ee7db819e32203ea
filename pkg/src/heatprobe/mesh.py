"""Structured space-time meshes: P1 triangles in 2D, trilinear boxes in 3D.

All solvers in this package run on axis-aligned box grids.  The physical body
occupies a box ``omega`` and every field that has to exist outside the body
(special solutions, screened potentials) lives on an enlarged box ``omega_ext``
sharing the same grid spacing, so restriction between the two is an exact
index injection.  The 2D triangulation splits every grid square into two right
triangles, which keeps the stiffness matrix of an isotropic conductivity an
M-matrix (discrete maximum principle with lumped mass).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp


@dataclass(frozen=True)
class Box:
    """Axis-aligned box [lo_i, hi_i] in 2 or 3 dimensions."""

    lo: tuple
    hi: tuple

    @property
    def dim(self) -> int:
        return len(self.lo)

    def diameter(self) -> float:
        return float(np.linalg.norm(np.asarray(self.hi) - np.asarray(self.lo)))

    def contains(self, x, tol: float = 1e-12) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= np.asarray(self.lo) - tol) and np.all(x <= np.asarray(self.hi) + tol))


class Grid:
    """Tensor grid over a box with FEM connectivity and assembly helpers.

    2D: continuous piecewise-linear elements on right triangles.
    3D: trilinear elements on hexahedral cells (2x2x2 Gauss assembly).
    """

    def __init__(self, box: Box, cells_per_axis):
        self.box = box
        self.dim = box.dim
        if self.dim not in (2, 3):
            raise ValueError("grid dimension must be 2 or 3")
        n = np.broadcast_to(np.asarray(cells_per_axis, dtype=int), (self.dim,)).copy()
        if np.any(n < 2):
            raise ValueError("need at least 2 cells per axis")
        self.ncells_axis = tuple(int(k) for k in n)
        lo = np.asarray(box.lo, dtype=float)
        hi = np.asarray(box.hi, dtype=float)
        self.h_axis = (hi - lo) / n
        self.h = float(np.max(self.h_axis))

        axes = [np.linspace(lo[i], hi[i], n[i] + 1) for i in range(self.dim)]
        mesh = np.meshgrid(*axes, indexing="ij")
        self.nodes = np.stack([m.ravel() for m in mesh], axis=1)
        self.nnodes = self.nodes.shape[0]
        self._node_shape = tuple(k + 1 for k in self.ncells_axis)

        self.cells = self._build_cells()
        self.ncells = self.cells.shape[0]
        self.cell_centroids = self.nodes[self.cells].mean(axis=1)
        self.cell_volumes = self._cell_volumes()
        self._grads = self._reference_gradients()

        bmask = np.zeros(self._node_shape, dtype=bool)
        for ax in range(self.dim):
            idx = [slice(None)] * self.dim
            idx[ax] = 0
            bmask[tuple(idx)] = True
            idx[ax] = -1
            bmask[tuple(idx)] = True
        self.boundary_mask = bmask.ravel()
        self.boundary_nodes = np.nonzero(self.boundary_mask)[0]
        self.interior_nodes = np.nonzero(~self.boundary_mask)[0]
        self.boundary_normals = self._outward_normals()

    # -- connectivity -------------------------------------------------------

    def node_index(self, multi) -> int:
        return int(np.ravel_multi_index(multi, self._node_shape))

    def _build_cells(self) -> np.ndarray:
        n = self.ncells_axis
        if self.dim == 2:
            i, j = np.meshgrid(np.arange(n[0]), np.arange(n[1]), indexing="ij")
            v00 = np.ravel_multi_index((i, j), self._node_shape).ravel()
            v10 = np.ravel_multi_index((i + 1, j), self._node_shape).ravel()
            v01 = np.ravel_multi_index((i, j + 1), self._node_shape).ravel()
            v11 = np.ravel_multi_index((i + 1, j + 1), self._node_shape).ravel()
            # two right triangles per square, diagonal v00-v11
            tri1 = np.stack([v00, v10, v11], axis=1)
            tri2 = np.stack([v00, v11, v01], axis=1)
            return np.vstack([tri1, tri2]).astype(np.int64)
        i, j, k = np.meshgrid(*(np.arange(m) for m in n), indexing="ij")
        corners = []
        for di in (0, 1):
            for dj in (0, 1):
                for dk in (0, 1):
                    corners.append(np.ravel_multi_index((i + di, j + dj, k + dk), self._node_shape).ravel())
        # vertex order: (0,0,0),(0,0,1),(0,1,0),(0,1,1),(1,0,0),(1,0,1),(1,1,0),(1,1,1)
        return np.stack(corners, axis=1).astype(np.int64)

    def _cell_volumes(self) -> np.ndarray:
        if self.dim == 2:
            area = 0.5 * self.h_axis[0] * self.h_axis[1]
            return np.full(self.ncells, area)
        return np.full(self.ncells, float(np.prod(self.h_axis)))

    def _reference_gradients(self):
        if self.dim == 2:
            # constant P1 gradients per triangle
            x = self.nodes[self.cells]
            e1 = x[:, 1] - x[:, 0]
            e2 = x[:, 2] - x[:, 0]
            det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
            g = np.empty((self.ncells, 3, 2))
            g[:, 1, 0] = e2[:, 1] / det
            g[:, 1, 1] = -e2[:, 0] / det
            g[:, 2, 0] = -e1[:, 1] / det
            g[:, 2, 1] = e1[:, 0] / det
            g[:, 0] = -(g[:, 1] + g[:, 2])
            return g
        # trilinear: gradients at the 2x2x2 Gauss points on the reference cell
        gp = (np.array([-1.0, 1.0]) / np.sqrt(3.0) + 1.0) / 2.0
        pts = np.array([(a, b, c) for a in gp for b in gp for c in gp])
        hx, hy, hz = self.h_axis
        grads = np.empty((8, 8, 3))  # (gauss pt, shape fn, deriv)
        for q, (u, v, w) in enumerate(pts):
            for s, (du, dv, dw) in enumerate([(i, j, k) for i in (0, 1) for j in (0, 1) for k in (0, 1)]):
                fu, fv, fw = (u if du else 1 - u), (v if dv else 1 - v), (w if dw else 1 - w)
                gu = (1.0 if du else -1.0) / hx
                gv = (1.0 if dv else -1.0) / hy
                gw = (1.0 if dw else -1.0) / hz
                grads[q, s] = (gu * fv * fw, fu * gv * fw, fu * fv * gw)
        return grads

    def _outward_normals(self) -> np.ndarray:
        """Unit outward normal per boundary node (averaged at corners)."""
        lo = np.asarray(self.box.lo)
        hi = np.asarray(self.box.hi)
        nrm = np.zeros((self.nnodes, self.dim))
        xb = self.nodes[self.boundary_nodes]
        for ax in range(self.dim):
            at_lo = np.isclose(xb[:, ax], lo[ax])
            at_hi = np.isclose(xb[:, ax], hi[ax])
            nrm[self.boundary_nodes[at_lo], ax] -= 1.0
            nrm[self.boundary_nodes[at_hi], ax] += 1.0
        lengths = np.linalg.norm(nrm[self.boundary_nodes], axis=1)
        nrm[self.boundary_nodes] /= lengths[:, None]
        return nrm

    # -- assembly -----------------------------------------------------------

    def stiffness(self, cellwise_matrix) -> sp.csr_matrix:
        """Assemble int grad(phi_i) . m grad(phi_j) for a cellwise-constant matrix field.

        ``cellwise_matrix``: array (ncells, dim, dim), or (dim, dim) for a
        spatially constant coefficient.
        """
        m = np.asarray(cellwise_matrix, dtype=float)
        if m.ndim == 2:
            m = np.broadcast_to(m, (self.ncells, self.dim, self.dim))
        if self.dim == 2:
            g = self._grads
            ke = np.einsum("cid,cde,cje->cij", g, m, g) * self.cell_volumes[:, None, None]
        else:
            g = self._grads  # (8 gauss, 8 shape, 3)
            wq = self.cell_volumes[0] / 8.0
            ke = np.einsum("qid,cde,qje->cij", g, m, g) * wq
        rows = np.repeat(self.cells, self.cells.shape[1], axis=1).ravel()
        cols = np.tile(self.cells, (1, self.cells.shape[1])).ravel()
        K = sp.coo_matrix((ke.ravel(), (rows, cols)), shape=(self.nnodes, self.nnodes))
        return K.tocsr()

    def lumped_mass(self) -> np.ndarray:
        """Diagonal of the lumped mass matrix (nodal quadrature weights)."""
        w = np.zeros(self.nnodes)
        share = self.cell_volumes[:, None] / self.cells.shape[1]
        np.add.at(w, self.cells.ravel(), np.repeat(share, self.cells.shape[1], axis=1).ravel()[: self.cells.size])
        return w

    def boundary_measure(self) -> np.ndarray:
        """Lumped surface measure carried by each boundary node."""
        w = np.zeros(self.nnodes)
        shape = self._node_shape
        for ax in range(self.dim):
            other = [a for a in range(self.dim) if a != ax]
            # weight of a node on a face = product of 1D lumped weights
            w1d = []
            for a in other:
                wa = np.full(shape[a], self.h_axis[a])
                wa[0] = wa[-1] = self.h_axis[a] / 2.0
                w1d.append(wa)
            face_w = w1d[0] if len(other) == 1 else np.multiply.outer(w1d[0], w1d[1])
            for side in (0, shape[ax] - 1):
                idx = [np.arange(s) for s in shape]
                idx[ax] = np.array([side])
                mesh = np.meshgrid(*idx, indexing="ij")
                nodes = np.ravel_multi_index([m.ravel() for m in mesh], shape)
                np.add.at(w, nodes, face_w.ravel())
        return w

    # -- geometry queries ---------------------------------------------------

    def nodes_within(self, center, radius: float) -> np.ndarray:
        d = np.linalg.norm(self.nodes - np.asarray(center, dtype=float), axis=1)
        return np.nonzero(d <= radius)[0]

    def cells_within(self, center, radius: float) -> np.ndarray:
        d = np.linalg.norm(self.cell_centroids - np.asarray(center, dtype=float), axis=1)
        return np.nonzero(d <= radius)[0]

    def cell_gradient(self, values: np.ndarray) -> np.ndarray:
        """Gradient of a nodal field per cell (P1: exact; trilinear: centroid value)."""
        v = values[self.cells]
        if self.dim == 2:
            return np.einsum("ci,cid->cd", v, self._grads)
        gmid = self._grads.mean(axis=0)
        return np.einsum("ci,cid->cd", v, gmid)

    def cell_average(self, values: np.ndarray) -> np.ndarray:
        return values[self.cells].mean(axis=1)


def _is_multiple(value: float, step: float, tol: float = 1e-9) -> bool:
    r = value / step
    return abs(r - round(r)) < tol


@dataclass
class SpaceTimeMesh:
    """Enlarged-box grid + body subgrid + shared uniform time grid.

    The time grid spans [-ext_before, horizon + ext_after] and is required to
    contain 0, theta and the horizon T as grid points.  ``omega`` is the body,
    ``omega_ext`` the computational box for free-space-like solves.
    """

    omega: Box
    cells_per_axis: int
    horizon: float
    nsteps_horizon: int
    margin: float = 0.5
    ext_before: float = 1.0
    ext_after: float = 1.0
    grid: Grid = field(init=False)
    grid_ext: Grid = field(init=False)
    times: np.ndarray = field(init=False)

    def __post_init__(self):
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")
        self.dt = self.horizon / self.nsteps_horizon
        for name, span in (("ext_before", self.ext_before), ("ext_after", self.ext_after),
                           ("margin", self.margin)):
            if span < 0:
                raise ValueError(f"{name} must be nonnegative")
        if not (_is_multiple(self.ext_before, self.dt) and _is_multiple(self.ext_after, self.dt)):
            raise ValueError("time extensions must be multiples of dt")
        n_before = round(self.ext_before / self.dt)
        n_after = round(self.ext_after / self.dt)
        self.ntimes = n_before + self.nsteps_horizon + n_after + 1
        self.times = -self.ext_before + self.dt * np.arange(self.ntimes)
        self.idx_t0 = n_before
        self.idx_T = n_before + self.nsteps_horizon

        self.grid = Grid(self.omega, self.cells_per_axis)
        h = self.grid.h_axis
        if not all(_is_multiple(self.margin, hi) for hi in h):
            raise ValueError("margin must be a multiple of the grid spacing")
        mlo = tuple(l - self.margin for l in self.omega.lo)
        mhi = tuple(u + self.margin for u in self.omega.hi)
        next_ = tuple(int(round((mhi[i] - mlo[i]) / h[i])) for i in range(self.grid.dim))
        self.grid_ext = Grid(Box(mlo, mhi), next_)
        self.ext_to_omega, self.omega_to_ext = self._node_maps()

    def _node_maps(self):
        """Index injection omega -> omega_ext (grids are aligned by construction)."""
        ge, g = self.grid_ext, self.grid
        offs = np.round((np.asarray(g.box.lo) - np.asarray(ge.box.lo)) / ge.h_axis).astype(int)
        shape_e = ge._node_shape
        mult = []
        for multi in np.ndindex(*g._node_shape):
            mult.append(np.ravel_multi_index(tuple(m + o for m, o in zip(multi, offs)), shape_e))
        omega_to_ext = np.asarray(mult, dtype=np.int64)
        ext_to_omega = np.full(ge.nnodes, -1, dtype=np.int64)
        ext_to_omega[omega_to_ext] = np.arange(g.nnodes)
        return ext_to_omega, omega_to_ext

    def index_of_time(self, t: float) -> int:
        k = (t - self.times[0]) / self.dt
        ki = int(round(k))
        if abs(k - ki) > 1e-9 or not (0 <= ki < self.ntimes):
            raise ValueError(f"time {t} is not on the grid")
        return ki

    def restrict(self, field_ext: np.ndarray) -> np.ndarray:
        """Restrict an omega_ext nodal field (or time-stack) onto omega nodes."""
        return field_ext[..., self.omega_to_ext]

    def d_omega(self) -> float:
        return self.omega.diameter()

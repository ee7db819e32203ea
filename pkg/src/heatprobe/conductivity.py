"""Cellwise matrix conductivity fields: background b and perturbed field a.

The perturbed field equals the background outside the inclusion and a
prescribed symmetric positive definite fill inside.  The builder computes the
ellipticity constant, classifies the jump case by eigenvalue checks on both
matrix-order clauses and reports the binding jump constant.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import MovingInclusion
from .mesh import Grid


class HypothesisError(ValueError):
    """A structural hypothesis on the conductivities fails."""


def _as_matrix(value, dim: int) -> np.ndarray:
    m = np.asarray(value, dtype=float)
    if m.ndim == 0:
        m = float(m) * np.eye(dim)
    if m.shape != (dim, dim):
        raise ValueError(f"expected scalar or {dim}x{dim} matrix")
    if not np.allclose(m, m.T, atol=1e-12):
        raise ValueError("conductivity matrices must be symmetric")
    if np.linalg.eigvalsh(m)[0] <= 0:
        raise ValueError("conductivity matrices must be positive definite")
    return m


class BackgroundField:
    """Piecewise-constant symmetric matrix field over grid cells.

    ``pieces`` is a list of (indicator, matrix) pairs evaluated in order on
    cell centroids; the last match wins.  ``base`` applies where nothing
    matches (and outside the body on enlarged grids).
    """

    def __init__(self, base, pieces=(), dim: int = 2):
        self.dim = dim
        self.base = _as_matrix(base, dim)
        self.pieces = [(ind, _as_matrix(m, dim)) for ind, m in pieces]

    def on_grid(self, grid: Grid) -> np.ndarray:
        field = np.broadcast_to(self.base, (grid.ncells, self.dim, self.dim)).copy()
        for ind, m in self.pieces:
            mask = np.fromiter((bool(ind(c)) for c in grid.cell_centroids), bool, grid.ncells)
            field[mask] = m
        return field

    def label(self) -> str:
        return f"bg[{len(self.pieces)} pieces]"


@dataclass
class ConductivityPair:
    """Snapshot of (a, b) on a grid at one time, with certified constants."""

    b_cells: np.ndarray
    a_cells: np.ndarray
    inclusion_mask: np.ndarray
    gamma_inf: float
    delta_1: float
    case: str  # "H0a" | "H0b" | "none"

    @property
    def jump_cells(self) -> np.ndarray:
        return np.nonzero(self.inclusion_mask)[0]


def ellipticity_constant(cells: np.ndarray) -> float:
    ev = np.linalg.eigvalsh(cells)
    return float(max(ev.max(), (1.0 / ev.min(axis=1)).max()))


def inclusion_cell_mask(incl: MovingInclusion, grid: Grid, t: float) -> np.ndarray:
    mask = np.zeros(grid.ncells, dtype=bool)
    if incl is None or incl.is_empty(t):
        return mask
    for s in incl.active_shapes(t):
        off = s.offset(t)
        rb = s.shape.bounding_radius()
        near = grid.cells_within(off, rb + grid.h)
        for c in near:
            if s.shape.signed_distance(grid.cell_centroids[c] - off) <= 0.0:
                mask[c] = True
    return mask


def build_conductivity(background: BackgroundField, incl: MovingInclusion | None,
                       fill, t: float, grid: Grid,
                       jump_band: float | None = None) -> ConductivityPair:
    """Materialize (a, b) at time t and classify the jump.

    ``jump_band``: when set, the jump clauses are only enforced on inclusion
    cells within that distance of the inclusion boundary (the relaxed
    near-boundary variant); default checks every inclusion cell.
    """
    b_cells = background.on_grid(grid)
    mask = inclusion_cell_mask(incl, grid, t)
    a_cells = b_cells.copy()
    if mask.any():
        fill_m = _as_matrix(fill, grid.dim)
        a_cells[mask] = fill_m
    gamma = max(ellipticity_constant(b_cells), ellipticity_constant(a_cells))

    if not mask.any():
        return ConductivityPair(b_cells, a_cells, mask, gamma, 0.0, "none")

    check = mask.copy()
    if jump_band is not None and incl is not None:
        for c in np.nonzero(mask)[0]:
            din, dout = incl.distance_pair(grid.cell_centroids[c], t)
            if max(din, dout) > jump_band:
                check[c] = False
        if not check.any():
            raise HypothesisError("jump band leaves no inclusion cells to certify")

    idx = np.nonzero(check)[0]
    diff = b_cells[idx] - a_cells[idx]
    diff_inv = np.linalg.inv(b_cells[idx]) - np.linalg.inv(a_cells[idx])
    ev_diff = np.linalg.eigvalsh(diff)
    ev_inv = np.linalg.eigvalsh(diff_inv)

    # H0a: b - a >= delta > 0 and b^-1 - a^-1 <= -delta;  H0b mirrored
    h0a_delta = min(ev_diff[:, 0].min(), (-ev_inv[:, -1]).min())
    h0b_delta = min((-ev_diff[:, -1]).min(), ev_inv[:, 0].min())
    if h0a_delta > 0 and h0a_delta >= h0b_delta:
        return ConductivityPair(b_cells, a_cells, mask, gamma, float(h0a_delta), "H0a")
    if h0b_delta > 0:
        return ConductivityPair(b_cells, a_cells, mask, gamma, float(h0b_delta), "H0b")
    bad = int(idx[np.argmin(np.maximum(ev_diff[:, 0], -ev_diff[:, -1]))])
    raise HypothesisError(
        f"jump is sign-indefinite or vanishing on cell {bad} "
        f"(centroid {grid.cell_centroids[bad]}): neither matrix-order clause holds")


def homogeneous_background(dim: int = 2) -> BackgroundField:
    return BackgroundField(np.eye(dim), dim=dim)


def contrast_background(region, contrast: float = 4.0, dim: int = 2) -> BackgroundField:
    """Background with a scalar contrast piece on ``region(x) -> bool``."""
    return BackgroundField(np.eye(dim), [(region, contrast * np.eye(dim))], dim=dim)

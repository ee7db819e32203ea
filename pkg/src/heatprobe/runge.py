"""Runge approximation: fit boundary-driven global solutions to a special
solution on a neighborhood of the inclusion.

The approximant is an exact discrete solution of the damped background
equation on the body: an offset part pinning the shared initial (or terminal)
condition plus a combination of boundary modes.  Because the stepping
operator is autonomous, the response to any temporal profile is a time
convolution of one per-step impulse response, so a single parabolic solve per
spatial mode covers the whole tensor basis; temporal hats are optionally
modulated by the source envelope exp(-tau mu |t-theta|), which is what makes
modest bases reach percent-level residuals on sharply concentrated targets.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .geometry import MovingInclusion, ProbeCurve
from .mesh import Grid
from .pde import ImplicitStepper, march


class RungeError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# boundary basis
# ---------------------------------------------------------------------------


def _boundary_cycle(grid: Grid) -> np.ndarray:
    """Boundary nodes of a 2D box grid in perimeter order."""
    nx, ny = grid._node_shape
    idx = []
    for i in range(nx):
        idx.append(grid.node_index((i, 0)))
    for j in range(1, ny):
        idx.append(grid.node_index((nx - 1, j)))
    for i in range(nx - 2, -1, -1):
        idx.append(grid.node_index((i, ny - 1)))
    for j in range(ny - 2, 0, -1):
        idx.append(grid.node_index((0, j)))
    return np.asarray(idx, dtype=np.int64)


def time_hats(times: np.ndarray, n_time: int, modulation: np.ndarray | None = None) -> np.ndarray:
    """(n_time, ntimes) tent profiles at uniform knots in (0, T], optionally
    multiplied by a per-time modulation; every profile vanishes at t=0."""
    times = np.asarray(times, dtype=float)
    nsteps = times.size - 1
    if nsteps % n_time != 0:
        raise RungeError(f"n_time = {n_time} must divide the number of steps {nsteps}")
    s = nsteps // n_time
    out = np.zeros((n_time, times.size))
    for m in range(1, n_time + 1):
        center = m * s
        for k in range(max(0, center - s), min(times.size, center + s + 1)):
            out[m - 1, k] = 1.0 - abs(k - center) / s
    if modulation is not None:
        out = out * np.asarray(modulation, dtype=float)[None, :]
    return out


@dataclass
class BoundaryBasis:
    """Tensor basis on the lateral boundary: space modes x time profiles.

    Space modes are discrete Fourier modes along the boundary cycle in 2D
    (eigenvectors of the cycle graph Laplacian) and Lanczos eigenmodes of the
    surface graph Laplacian in 3D, orthonormal against the lumped boundary
    measure.  Nested prefixes of either factor give nested spans.
    """

    grid: Grid
    space_modes: np.ndarray    # (n_space, nb)
    time_profiles: np.ndarray  # (n_time, ntimes), all vanish at index 0
    times: np.ndarray

    @property
    def n_space(self) -> int:
        return self.space_modes.shape[0]

    @property
    def n_time(self) -> int:
        return self.time_profiles.shape[0]

    def size(self) -> int:
        return self.n_space * self.n_time

    def boundary_data(self, coeffs: np.ndarray) -> np.ndarray:
        """(ntimes, nb) trace history of the coefficient combination."""
        c = np.asarray(coeffs, dtype=float).reshape(self.n_space, self.n_time)
        return np.einsum("sb,mn,sm->nb", self.space_modes, self.time_profiles, c)


def boundary_space_modes(grid: Grid, n_space: int) -> np.ndarray:
    """Deterministic orthonormal trace modes (truncated to the trace space)."""
    nb_nodes = grid.boundary_nodes
    w = grid.boundary_measure()[nb_nodes]
    if grid.dim == 2:
        cyc = _boundary_cycle(grid)
        pos = {node: k for k, node in enumerate(cyc)}
        order = np.asarray([pos[n] for n in nb_nodes])
        nbn = cyc.size
        n_space = min(n_space, nbn)
        theta = 2 * np.pi * order / nbn
        modes = [np.ones(nb_nodes.size)]
        k = 1
        while len(modes) < n_space:
            modes.append(np.cos(k * theta))
            if len(modes) < n_space:
                modes.append(np.sin(k * theta))
            k += 1
        space = np.asarray(modes)
    else:
        import scipy.sparse.linalg as spla
        adj = _surface_graph(grid)
        lap = sp.diags(np.asarray(adj.sum(axis=1)).ravel()) - adj
        k = min(n_space, nb_nodes.size - 2)
        vals, vecs = spla.eigsh(lap.asfptype(), k=k, sigma=-1e-6, which="LM",
                                v0=np.ones(nb_nodes.size))
        space = vecs.T[np.argsort(vals)]
    ortho = []
    for v in space:
        u = v.astype(float)
        for q in ortho:
            u = u - (w * q) @ u * q
        nrm = math.sqrt(float((w * u) @ u))
        if nrm < 1e-12:
            continue
        ortho.append(u / nrm)
    return np.asarray(ortho)


def boundary_basis(grid: Grid, n_space: int, n_time: int, times: np.ndarray,
                   modulation: np.ndarray | None = None) -> BoundaryBasis:
    """Build the tensor basis (counts >= 1; oversized counts are truncated)."""
    if n_space < 1 or n_time < 1:
        raise RungeError("basis counts must be >= 1")
    times = np.asarray(times, dtype=float)
    return BoundaryBasis(grid=grid, space_modes=boundary_space_modes(grid, n_space),
                         time_profiles=time_hats(times, n_time, modulation),
                         times=times)


def _surface_graph(grid: Grid) -> sp.csr_matrix:
    nb = grid.boundary_nodes
    pos = -np.ones(grid.nnodes, dtype=np.int64)
    pos[nb] = np.arange(nb.size)
    rows, cols = [], []
    shape = grid._node_shape
    for node in nb:
        multi = np.unravel_index(node, shape)
        for ax in range(grid.dim):
            for d in (-1, 1):
                m2 = list(multi)
                m2[ax] += d
                if 0 <= m2[ax] < shape[ax]:
                    n2 = grid.node_index(tuple(m2))
                    if pos[n2] >= 0:
                        rows.append(pos[node])
                        cols.append(pos[n2])
    data = np.ones(len(rows))
    return sp.coo_matrix((data, (rows, cols)), shape=(nb.size, nb.size)).tocsr()


# ---------------------------------------------------------------------------
# Runge region
# ---------------------------------------------------------------------------


@dataclass
class RungeRegion:
    """Space-time neighborhood of the inclusion: one cell mask per time index.

    Built by inflating each time slice of the inclusion; admissible only when
    the working tube keeps a positive distance from every slab.
    """

    cell_masks: np.ndarray  # (ntimes, ncells) boolean
    margin: float
    min_tube_gap: float
    complement_connected: bool

    @property
    def nonempty(self) -> bool:
        return bool(self.cell_masks.any())


def runge_region(incl: MovingInclusion, grid: Grid, times: np.ndarray,
                 curve: ProbeCurve, tau: float,
                 margin: float | None = None) -> RungeRegion:
    if margin is None:
        margin = max(2.0 / tau, 2.0 * grid.h)
    times = np.asarray(times, dtype=float)
    masks = np.zeros((times.size, grid.ncells), dtype=bool)
    gap = np.inf
    for n, t in enumerate(times):
        if incl.is_empty(t):
            continue
        for s in incl.active_shapes(t):
            off = s.offset(t)
            rb = s.shape.bounding_radius() + margin
            near = grid.cells_within(off, rb + grid.h)
            sub = grid.cell_centroids[near] - off
            inside = np.fromiter((s.shape.signed_distance(p) <= margin for p in sub),
                                 bool, near.size)
            masks[n, near[inside]] = True
        if masks[n].any():
            y = curve(t)
            d = np.linalg.norm(grid.cell_centroids[masks[n]] - y, axis=1).min()
            gap = min(gap, d - 1.0 / tau)
    if not masks.any():
        raise RungeError("inclusion is empty over the whole window; nothing to fit")
    if gap <= 2.0 * grid.h:
        raise RungeError(
            f"tube radius 1/tau = {1/tau:.4g} comes within {gap:.4g} of the fit "
            "region; raise tau, shrink the margin or move the curve")
    connected = _slab_complement_connected(masks, grid)
    return RungeRegion(cell_masks=masks, margin=margin, min_tube_gap=float(gap),
                       complement_connected=connected)


def _slab_complement_connected(masks, grid: Grid) -> bool:
    nx = grid.ncells_axis
    idxs = np.unique(np.linspace(0, masks.shape[0] - 1, 5).astype(int))
    for n in idxs:
        free = ~masks[n]
        if free.all():
            continue
        if grid.dim == 2:
            tri = free.reshape(2, nx[0], nx[1])
            sq_free = tri[0] & tri[1]
        else:
            sq_free = free.reshape(nx)
        seen = np.zeros_like(sq_free)
        start = (0,) * grid.dim
        if not sq_free[start]:
            return False
        seen[start] = True
        stack = [start]
        while stack:
            cur = stack.pop()
            for ax in range(grid.dim):
                for d in (-1, 1):
                    nxt = list(cur)
                    nxt[ax] += d
                    if 0 <= nxt[ax] < sq_free.shape[ax]:
                        nxt = tuple(nxt)
                        if sq_free[nxt] and not seen[nxt]:
                            seen[nxt] = True
                            stack.append(nxt)
        if np.any(sq_free & ~seen):
            return False
    return True


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------


@dataclass
class RungeApproximant:
    """Global-solution approximant: pinned offset part + basis combination."""

    coeffs: np.ndarray
    residual: float
    target_norm: float
    lambda_reg: float
    basis: BoundaryBasis
    field: np.ndarray          # (ntimes, nnodes) full history
    direction: str = "forward"
    truncated_modes: int = 0

    @property
    def relative_residual(self) -> float:
        return self.residual / self.target_norm if self.target_norm > 0 else 0.0

    def boundary_data(self) -> np.ndarray:
        return self.basis.boundary_data(self.coeffs)


def impulse_responses(space_modes: np.ndarray, stepper: ImplicitStepper,
                      ntimes: int) -> np.ndarray:
    """(n_space, ntimes, nnodes) responses to a single-step boundary impulse."""
    grid = stepper.grid
    out = np.empty((space_modes.shape[0], ntimes, grid.nnodes))
    for s_i, mode in enumerate(space_modes):
        out[s_i] = march(stepper, ntimes - 1, np.zeros(grid.nnodes),
                         boundary_at=lambda n: mode if n == 1 else None, keep="all")
    return out


class _RestrictedOps:
    """Cell-average / gradient / volume operators on a node subset, cached by
    region mask (static inclusions reuse one op for every time)."""

    def __init__(self, grid: Grid, node_union: np.ndarray):
        self.grid = grid
        self.nodes = node_union
        self._pos = -np.ones(grid.nnodes, dtype=np.int64)
        self._pos[node_union] = np.arange(node_union.size)
        self._cache = {}

    def get(self, mask: np.ndarray):
        key = mask.tobytes()
        got = self._cache.get(key)
        if got is not None:
            return got
        grid = self.grid
        cells = np.nonzero(mask)[0]
        vol = grid.cell_volumes[cells]
        nloc = grid.cells.shape[1]
        rows = np.repeat(np.arange(cells.size), nloc)
        cols = self._pos[grid.cells[cells].ravel()]
        if np.any(cols < 0):
            raise RungeError("region mask escapes the node union")
        avg = sp.coo_matrix((np.full(rows.size, 1.0 / nloc), (rows, cols)),
                            shape=(cells.size, self.nodes.size)).tocsr()
        if grid.dim == 2:
            g = grid._grads[cells]
        else:
            g = np.broadcast_to(grid._grads.mean(axis=0), (cells.size, nloc, 3))
        gops = [sp.coo_matrix((g[:, :, d].ravel(), (rows, cols)),
                              shape=(cells.size, self.nodes.size)).tocsr()
                for d in range(grid.dim)]
        got = (avg, gops, vol)
        self._cache[key] = got
        return got


def runge_fit(target: np.ndarray, basis: BoundaryBasis, region: RungeRegion,
              stepper: ImplicitStepper, lambda_reg: float = 1e-8,
              direction: str = "forward", pinned: np.ndarray | None = None,
              impulses: np.ndarray | None = None,
              cond_threshold: float = 1e13) -> RungeApproximant:
    """Tikhonov least squares for the approximant coefficients.

    Fit functional: sum_n dt sum_{cells in U_n} vol (e^2 + |grad e|^2) plus
    the squared per-step differences (discrete H^{1,0} and H^{0,1}
    surrogates).  ``pinned`` is the history of the offset solve carrying the
    exact initial (forward) or terminal (backward) condition; for the
    backward direction pass time-reversed histories and the returned field is
    in the reversed order handed in.  ``lambda_reg`` scales the largest
    normal-matrix eigenvalue; ill-conditioning beyond ``cond_threshold``
    falls back to a truncated spectral solve (flagged).
    """
    grid = basis.grid
    ntimes = basis.times.size
    if target.shape != (ntimes, grid.nnodes):
        raise RungeError("target must be (ntimes, nnodes)")
    if impulses is None:
        impulses = impulse_responses(basis.space_modes, stepper, ntimes)
    if pinned is None:
        pinned = np.zeros_like(target)
    dt = float(basis.times[1] - basis.times[0])

    node_union = np.unique(grid.cells[region.cell_masks.any(axis=0)].ravel())
    ops = _RestrictedOps(grid, node_union)
    imp_r = impulses[:, :, node_union]
    ns, nt = basis.n_space, basis.n_time
    K = ns * nt
    profiles = basis.time_profiles
    supports = [np.nonzero(profiles[m])[0] for m in range(nt)]

    def slab_at(n: int) -> np.ndarray:
        out = np.zeros((K, node_union.size))
        for m in range(nt):
            js = supports[m]
            js = js[(js >= 1) & (js <= n)]
            if js.size == 0:
                continue
            qs = profiles[m, js]
            # response at time n to profile m = sum_j q_j * impulse[n - j + 1]
            block = np.einsum("j,sjx->sx", qs, imp_r[:, n - js + 1, :])
            out[m::nt] = block
        return out

    err = target - pinned
    err_r = err[:, node_union]
    G = np.zeros((K, K))
    b = np.zeros(K)
    tt = 0.0
    prev_slab = None
    prev_has = False
    for n in range(ntimes):
        if not region.cell_masks[n].any():
            prev_has = False
            continue
        avg, gops, vol = ops.get(region.cell_masks[n])
        slab = slab_at(n)
        wv = np.sqrt(dt * vol)
        blocks = [wv[:, None] * (avg @ slab.T)]
        tblocks = [wv * (avg @ err_r[n])]
        for gop in gops:
            blocks.append(wv[:, None] * (gop @ slab.T))
            tblocks.append(wv * (gop @ err_r[n]))
        if n > 0:
            ps = prev_slab if (prev_has and prev_slab is not None) else slab_at(n - 1)
            dv = np.sqrt(vol)
            blocks.append(dv[:, None] * (avg @ (slab - ps).T))
            tblocks.append(dv * (avg @ (err_r[n] - err_r[n - 1])))
        X = np.vstack(blocks)
        y = np.concatenate(tblocks)
        G += X.T @ X
        b += X.T @ y
        tt += float(y @ y)
        prev_slab = slab
        prev_has = True

    lam_scale = float(np.max(np.linalg.eigvalsh(G)))
    lam = lambda_reg * max(lam_scale, 1e-300)
    truncated = 0
    A = G + lam * np.eye(K)
    if np.linalg.cond(A) > cond_threshold:
        vals, vecs = np.linalg.eigh(A)
        keep = vals > vals.max() / cond_threshold
        truncated = int(np.sum(~keep))
        c = vecs[:, keep] @ ((vecs[:, keep].T @ b) / vals[keep])
    else:
        c = np.linalg.solve(A, b)

    res2 = float(c @ (G @ c) - 2.0 * (c @ b) + tt)
    residual = math.sqrt(max(res2, 0.0))

    # rebuild the full approximant with one march over its boundary data
    cmat = c.reshape(ns, nt)
    trace = np.einsum("sm,mn,sb->nb", cmat, profiles, basis.space_modes)
    combo = march(stepper, ntimes - 1, np.zeros(grid.nnodes),
                  boundary_at=lambda n: trace[n], keep="all")
    approx = pinned + combo
    return RungeApproximant(coeffs=c, residual=residual, target_norm=math.sqrt(tt),
                            lambda_reg=lam, basis=basis, field=approx,
                            direction=direction, truncated_modes=truncated)


def fit_special_pair(u_target: np.ndarray, u_star_target: np.ndarray,
                     basis: BoundaryBasis, region: RungeRegion,
                     stepper: ImplicitStepper, lambda_reg: float = 1e-8):
    """Fit forward and backward approximants with shared impulse responses.

    ``u_target``/``u_star_target`` are histories over the same window; the
    forward fit pins u(0) exactly, the backward fit pins u*(T) exactly (the
    backward problem is the forward one in reversed time).
    """
    from .pde import solve_damped
    grid = basis.grid
    times = basis.times
    ntimes = times.size
    impulses = impulse_responses(basis.space_modes, stepper, ntimes)
    pinned_f = march(stepper, ntimes - 1, u_target[0], keep="all")
    fit_f = runge_fit(u_target, basis, region, stepper, lambda_reg=lambda_reg,
                      pinned=pinned_f, impulses=impulses)
    region_rev = RungeRegion(cell_masks=region.cell_masks[::-1].copy(),
                             margin=region.margin, min_tube_gap=region.min_tube_gap,
                             complement_connected=region.complement_connected)
    pinned_b = march(stepper, ntimes - 1, u_star_target[-1], keep="all")
    fit_b = runge_fit(u_star_target[::-1].copy(), basis, region_rev, stepper,
                      lambda_reg=lambda_reg, pinned=pinned_b, impulses=impulses,
                      direction="backward")
    fit_b.field = fit_b.field[::-1].copy()
    return fit_f, fit_b

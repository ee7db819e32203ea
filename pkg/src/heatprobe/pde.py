"""Space-time solvers: heat equation, damped forward/backward equations,
screened elliptic equation, weak Neumann traces and the damped D-N map.

Discretization: lumped-mass P1 (2D) / trilinear (3D) in space, implicit Euler
in time,

    (M + dt (K + tau^2 M)) u^n = M u^{n-1} + dt F^n.

Treating the damping term implicitly (rather than by an exponential
integrating factor) matters: the quasi-static limit of this scheme is exactly
the screened operator K + tau^2 M, so the damped fields keep the e^{-tau r}
spatial decay at large tau that every indicator estimate rests on.  The
discrete forward/backward adjoint duality and nonnegativity for nonnegative
data are exact; the conjugation of the damped solve to an undamped solve of
exponentially rescaled data holds analytically and is O(tau^4 dt) discretely.
All linear systems are solved by sparse LU; iterative tolerances would swamp
the exponentially small far-field values the indicators live on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import Grid


class SolverError(RuntimeError):
    """Fatal assembly or factorization failure."""


def as_cellwise(cond, grid: Grid) -> np.ndarray:
    m = np.asarray(cond, dtype=float)
    if m.ndim == 2:
        m = np.broadcast_to(m, (grid.ncells, grid.dim, grid.dim))
    if m.shape != (grid.ncells, grid.dim, grid.dim):
        raise SolverError("conductivity must be (dim,dim) or (ncells,dim,dim)")
    return m


class ImplicitStepper:
    """Factored implicit-Euler step operator for one (conductivity, tau).

    Reusable across many solves with different data; this is what makes
    basis sweeps cheap.
    """

    def __init__(self, grid: Grid, cond, tau: float, dt: float):
        self.grid = grid
        self.tau = float(tau)
        self.dt = float(dt)
        self.K = grid.stiffness(as_cellwise(cond, grid))
        self.mass = grid.lumped_mass()
        self.bn = grid.boundary_nodes
        self.inn = grid.interior_nodes
        A = sp.diags((1.0 + self.dt * self.tau**2) * self.mass) + self.dt * self.K
        A = A.tocsr()
        self._A_ii = A[self.inn][:, self.inn].tocsc()
        self._A_ib = A[self.inn][:, self.bn].tocsr()
        try:
            self._lu = spla.splu(self._A_ii)
        except RuntimeError as exc:  # pragma: no cover - ellipticity rules this out
            raise SolverError(f"singular implicit system: {exc}") from exc

    def step(self, u_prev: np.ndarray, load: np.ndarray | None,
             g_new: np.ndarray | None) -> np.ndarray:
        """One step; ``load`` is a full load vector, ``g_new`` boundary values."""
        rhs = self.mass[self.inn] * u_prev[self.inn]
        if load is not None:
            rhs = rhs + self.dt * load[self.inn]
        u = np.empty_like(u_prev)
        if g_new is None:
            u[self.bn] = 0.0
        else:
            u[self.bn] = g_new
        if g_new is not None and np.any(g_new):
            rhs = rhs - self._A_ib @ u[self.bn]
        u[self.inn] = self._lu.solve(rhs)
        return u

    def residual(self, u_new: np.ndarray, u_prev: np.ndarray,
                 load: np.ndarray | None) -> np.ndarray:
        """Scheme residual M(u^n - u^{n-1})/dt + tau^2 M u^n + K u^n - F^n.

        Vanishes on interior rows of a solve; its boundary rows are the weak
        (variational) Neumann flux functional coefficients.
        """
        r = (self.mass * (u_new - u_prev) / self.dt
             + self.tau**2 * (self.mass * u_new) + self.K @ u_new)
        if load is not None:
            r = r - load
        return r


def march(stepper: ImplicitStepper, nsteps: int, initial: np.ndarray,
          load_at=None, boundary_at=None, keep: str = "all", observer=None):
    """Run ``nsteps`` implicit steps from ``initial``.

    ``load_at(n)`` and ``boundary_at(n)`` supply the load vector and boundary
    values of step n (1-based).  ``keep``: "all" returns the (nsteps+1,
    nnodes) history, "last" only the final state.  ``observer(n, u)`` is
    called for every state including n=0.
    """
    u = np.array(initial, dtype=float, copy=True)
    if observer is not None:
        observer(0, u)
    hist = None
    if keep == "all":
        hist = np.empty((nsteps + 1, u.size))
        hist[0] = u
    for n in range(1, nsteps + 1):
        load = load_at(n) if load_at is not None else None
        g = boundary_at(n) if boundary_at is not None else None
        u = stepper.step(u, load, g)
        if observer is not None:
            observer(n, u)
        if hist is not None:
            hist[n] = u
    return hist if hist is not None else u


def solve_heat(cond, grid: Grid, times: np.ndarray, boundary, v0,
               source=None, keep: str = "all"):
    """Forward heat solve on [times[0], times[-1]] with Dirichlet data.

    ``boundary``: None, array (ntimes, nb) or callable n -> boundary values;
    ``source``: None or callable n -> nodal values (multiplied by the lumped
    mass to form the load).
    """
    return solve_damped(cond, 0.0, grid, times, boundary=boundary,
                        endpoint=v0, source=source, direction="forward", keep=keep)


def _normalize_boundary(boundary, grid):
    if boundary is None:
        return None
    if callable(boundary):
        return boundary
    arr = np.asarray(boundary, dtype=float)
    return lambda n: arr[n]


def solve_damped(cond, tau: float, grid: Grid, times: np.ndarray,
                 boundary=None, endpoint=None, source=None,
                 direction: str = "forward", keep: str = "all",
                 stepper: ImplicitStepper | None = None, observer=None):
    """Solve (+-d/dt + tau^2 - div(cond grad)) u = source with Dirichlet data.

    Forward marches from times[0] (endpoint = initial value), backward from
    times[-1] (endpoint = terminal value); the backward march mirrors the
    forward one exactly, preserving the discrete adjoint identity.  Nodal
    ``source`` values are turned into loads with the lumped mass.
    """
    times = np.asarray(times, dtype=float)
    nsteps = times.size - 1
    dt = float(times[1] - times[0])
    if stepper is None:
        stepper = ImplicitStepper(grid, cond, tau, dt)
    elif abs(stepper.tau - tau) > 1e-12 or abs(stepper.dt - dt) > 1e-14:
        raise SolverError("stepper was factored for a different (tau, dt)")
    mass = stepper.mass
    bfun = _normalize_boundary(boundary, grid)
    if endpoint is None:
        endpoint = np.zeros(grid.nnodes)

    if direction == "forward":
        load_at = None if source is None else (lambda n: mass * source(n))
        out = march(stepper, nsteps, endpoint, load_at=load_at,
                    boundary_at=bfun, keep="all" if keep == "all" else "last",
                    observer=observer)
        return out

    if direction != "backward":
        raise ValueError("direction must be forward or backward")
    # march in reversed index m = nsteps-n; step m of the reversed problem
    # corresponds to original index nsteps-m
    load_at = None if source is None else (lambda m: mass * source(nsteps - m))
    bfun_rev = None if bfun is None else (lambda m: bfun(nsteps - m))
    out = march(stepper, nsteps, endpoint, load_at=load_at, boundary_at=bfun_rev,
                keep="all" if keep == "all" else "last",
                observer=None if observer is None else (lambda m, u: observer(nsteps - m, u)))
    if keep == "all":
        return out[::-1].copy()
    return out


def solve_screened(cond, tau: float, grid: Grid, rhs_values=None,
                   rhs_load=None) -> np.ndarray:
    """(-div(cond grad) + tau^2) P = rhs, zero Dirichlet on the grid boundary.

    ``rhs_values`` are nodal values (lumped-mass quadrature); alternatively a
    preassembled ``rhs_load`` vector may be given.
    """
    if tau <= 0:
        raise SolverError("tau must be positive for the screened solve")
    K = grid.stiffness(as_cellwise(cond, grid))
    mass = grid.lumped_mass()
    A = (K + sp.diags(tau**2 * mass)).tocsr()
    if rhs_load is None:
        if rhs_values is None:
            return np.zeros(grid.nnodes)
        rhs_load = mass * np.asarray(rhs_values, dtype=float)
    inn = grid.interior_nodes
    lu = spla.splu(A[inn][:, inn].tocsc())
    out = np.zeros(grid.nnodes)
    out[inn] = lu.solve(rhs_load[inn])
    return out


def screened_operator(cond, tau: float, grid: Grid):
    """Factored screened solve for repeated right-hand sides."""
    K = grid.stiffness(as_cellwise(cond, grid))
    mass = grid.lumped_mass()
    A = (K + sp.diags(tau**2 * mass)).tocsr()
    inn = grid.interior_nodes
    lu = spla.splu(A[inn][:, inn].tocsc())

    def apply(rhs_values):
        out = np.zeros(grid.nnodes)
        out[inn] = lu.solve((mass * rhs_values)[inn])
        return out

    return apply


def neumann_trace(history: np.ndarray, cond, tau: float, grid: Grid,
                  times: np.ndarray, source=None) -> np.ndarray:
    """Weak Neumann flux coefficients of a forward solve history.

    Returns (nsteps, nb): row n-1 carries the residual-based boundary
    functional of step n (pairing a boundary test hat with
    cond grad(u) . nu in the scheme-consistent sense).  Integrals against a
    boundary trace g are `dt * sum_n flux[n-1] . g[n]`.
    """
    times = np.asarray(times, dtype=float)
    dt = float(times[1] - times[0])
    stepper = ImplicitStepper(grid, cond, tau, dt)
    mass = stepper.mass
    nb = grid.boundary_nodes
    out = np.empty((times.size - 1, nb.size))
    for n in range(1, times.size):
        load = None if source is None else mass * source(n)
        r = stepper.residual(history[n], history[n - 1], load)
        out[n - 1] = r[nb]
    return out


def boundary_flux_values(flux_coeffs: np.ndarray, grid: Grid) -> np.ndarray:
    """Convert weak flux coefficients to pointwise flux values (per node)."""
    w = grid.boundary_measure()[grid.boundary_nodes]
    return flux_coeffs / w


@dataclass
class DampedDNMap:
    """Damped-coordinate Dirichlet-to-Neumann applier.

    Affine: apply(f) = linear part + offset from the damped initial value
    exp(-tau^2 T) v0 (clamped to zero when it underflows).  Boundary data and
    flux histories are arrays (ntimes, nb) / (ntimes-1, nb) over [0, T].
    """

    cond_tag: str
    tau: float
    grid: Grid
    times: np.ndarray
    _stepper: ImplicitStepper
    v0_damped: np.ndarray

    def apply(self, f_boundary: np.ndarray | None, keep_field: bool = False):
        """Boundary trace history -> weak Neumann flux coefficients.

        Row 0 of the trace history is ignored: the initial state is the
        damped initial value everywhere (its own trace included), boundary
        data acts from the first step on.  This keeps the map exactly affine.
        """
        times = self.times
        nsteps = times.size - 1
        init = self.v0_damped.copy()
        bfun = None
        if f_boundary is not None:
            f_boundary = np.asarray(f_boundary, dtype=float)
            if f_boundary.shape != (times.size, self.grid.boundary_nodes.size):
                raise SolverError("boundary data must be (ntimes, n_boundary_nodes)")
            bfun = lambda n: f_boundary[n]
        hist = march(self._stepper, nsteps, init, boundary_at=bfun, keep="all")
        nb = self.grid.boundary_nodes
        flux = np.empty((nsteps, nb.size))
        for n in range(1, nsteps + 1):
            flux[n - 1] = self._stepper.residual(hist[n], hist[n - 1], None)[nb]
        if keep_field:
            return flux, hist
        return flux


def assemble_damped_dn(cond, v0, tau: float, grid: Grid, times: np.ndarray,
                       horizon: float | None = None, tag: str = "a") -> DampedDNMap:
    """Build the damped D-N applier for boundary data on [0, T]."""
    times = np.asarray(times, dtype=float)
    dt = float(times[1] - times[0])
    T = horizon if horizon is not None else float(times[-1] - times[0])
    with np.errstate(under="ignore"):
        scale = math.exp(-(tau**2) * T) if tau**2 * T < 700 else 0.0
    v0_damped = scale * np.asarray(v0, dtype=float) if scale > 0.0 else np.zeros(grid.nnodes)
    stepper = ImplicitStepper(grid, cond, tau, dt)
    return DampedDNMap(cond_tag=tag, tau=tau, grid=grid, times=times,
                       _stepper=stepper, v0_damped=v0_damped)


def duality_pairing(forward_sources, backward_history, mass, dt, nsteps) -> float:
    """<f, w> = dt * sum_{n=1..N} f(n)^T M w^n (the exact adjoint pairing)."""
    total = 0.0
    for n in range(1, nsteps + 1):
        total += forward_sources(n) @ (mass * backward_history[n])
    return dt * total

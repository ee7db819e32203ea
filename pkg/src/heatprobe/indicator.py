"""Indicator functionals, tau sweeps, log-slope estimates, the far/touching
classification and the two-map mismatch detector.

Both indicator routes are computed entirely in damped coordinates (the
exponential rescalings cancel exactly in every product that appears).  The
volume indicator is implemented as the exact discrete counterpart of the
boundary pairing: for any global background solutions the two agree to
rounding, so their gap on fitted approximants is controlled by the fit
residual alone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .conductivity import ConductivityPair
from .geometry import DistanceProfile, MovingInclusion, ProbeCurve
from .mesh import SpaceTimeMesh
from .pde import (ImplicitStepper, assemble_damped_dn, neumann_trace,
                  solve_damped)
from .runge import (RungeError, boundary_basis, fit_special_pair,
                    runge_region)
from .special import (KernelConstants, SpecialSolutionSet,
                      compute_special_set, mollifier_on_grid)

NOISE_FLOOR_FACTOR = 1e-9  # values below this times the |integrand| reference
                           # count as nonpositive for logarithm purposes


@dataclass
class IndicatorSample:
    tau: float
    value: float
    abs_reference: float     # integral of the absolute integrand (noise scale)
    residual_bound: float    # temporal-tail envelope for this tau
    usable: bool = True
    note: str = ""

    @property
    def floor(self) -> float:
        return NOISE_FLOOR_FACTOR * self.abs_reference

    @property
    def positive(self) -> bool:
        return self.usable and self.value > self.floor


@dataclass
class IndicatorSamples:
    samples: list
    mode: str = "volume"     # "volume" | "boundary"
    curve_id: str = ""
    cond_id: str = ""

    def __post_init__(self):
        taus = [s.tau for s in self.samples]
        if any(t2 <= t1 for t1, t2 in zip(taus, taus[1:])):
            raise ValueError("tau values must be strictly increasing")

    @property
    def taus(self) -> np.ndarray:
        return np.asarray([s.tau for s in self.samples])

    @property
    def values(self) -> np.ndarray:
        return np.asarray([s.value for s in self.samples])


@dataclass
class SlopeEstimate:
    slope_lo: float
    slope_hi: float
    slope_lsq: float
    window: tuple
    n_used: int

    @property
    def finite(self) -> bool:
        return np.isfinite(self.slope_lo) and np.isfinite(self.slope_hi)


@dataclass
class Verdict:
    verdict: str             # "different" | "indistinguishable" | "inconclusive"
    evidence: list = field(default_factory=list)
    thresholds: dict = field(default_factory=dict)


def residual_envelope(v0_norm: float, d_omega: float, tau: float, mu: float,
                      horizon: float, theta: float) -> float:
    """Temporal-tail bound on the indicator residual terms."""
    return 10.0 * (v0_norm**2 + d_omega) * math.exp(-tau * mu * min(horizon - theta, theta))


# ---------------------------------------------------------------------------
# volume indicator
# ---------------------------------------------------------------------------


def volume_indicator(pair: ConductivityPair, special: SpecialSolutionSet,
                     v0: np.ndarray | None, stm: SpaceTimeMesh,
                     curve: ProbeCurve, d_omega: float | None = None):
    """Energy-type indicator from the known conductivity pair.

    Solves the perturbed damped equation driven by the special solution's
    trace, then evaluates the discrete integration-by-parts form

        dt sum_n u*_n . (K_a - K_b) v_n
        + u*_N . ((1 + tau^2 dt) M + dt K_b) w_N - u*_1 . M w_0,

    whose continuum limit is the (a-b) gradient pairing plus the endpoint
    bracket of the difference field w = v - u.  Returns the sample with the
    absolute-integrand reference used for the positivity floor.
    """
    grid = stm.grid
    tau, mu, theta = special.tau, special.mu, special.theta
    i0, iT = stm.idx_t0, stm.idx_T
    N = iT - i0
    dt = stm.dt
    tms = stm.times[i0:iT + 1]
    u = special.u_tilde[i0:iT + 1, stm.omega_to_ext]
    us = special.u_star_tilde[i0:iT + 1, stm.omega_to_ext]
    w = special.weight

    with np.errstate(under="ignore"):
        scale = math.exp(-tau**2 * (tms[-1] - tms[0])) if tau**2 * (tms[-1] - tms[0]) < 700 else 0.0
    init = scale * v0 if (v0 is not None and scale > 0.0) else np.zeros(grid.nnodes)

    def src(n):
        k = i0 + n
        return w[k] * mollifier_on_grid(grid, curve, tau, stm.times[k])

    v = solve_damped(pair.a_cells, tau, grid, tms, boundary=u[:, grid.boundary_nodes],
                     endpoint=init, source=src)
    K_diff = grid.stiffness(pair.a_cells - pair.b_cells)
    K_b = grid.stiffness(pair.b_cells)
    mass = grid.lumped_mass()
    wt = v - u
    gam = 1.0 + tau**2 * dt

    core = 0.0
    abs_core = 0.0
    for n in range(1, N + 1):
        term = us[n] @ (K_diff @ v[n])
        core += term
        abs_core += _abs_gradient_pairing(grid, pair, v[n], us[n])
    core *= dt
    abs_core *= dt
    end_T = gam * (us[N] @ (mass * wt[N])) + dt * (us[N] @ (K_b @ wt[N]))
    end_0 = us[1] @ (mass * wt[0])
    value = core + end_T - end_0
    abs_ref = abs_core + abs(end_T) + abs(end_0)

    v0n = 0.0 if v0 is None else math.sqrt(float((v0**2 * mass).sum()))
    dom = d_omega if d_omega is not None else stm.d_omega()
    bound = residual_envelope(v0n, dom, tau, mu, float(tms[-1] - tms[0]), theta)
    return IndicatorSample(tau=tau, value=float(value), abs_reference=float(abs_ref),
                           residual_bound=bound)


def _abs_gradient_pairing(grid, pair, v_n, us_n) -> float:
    cells = pair.jump_cells
    if cells.size == 0:
        return 0.0
    gv = grid.cell_gradient(v_n)[cells]
    gu = grid.cell_gradient(us_n)[cells]
    diff = pair.a_cells[cells] - pair.b_cells[cells]
    prod = np.einsum("cd,cde,ce->c", gv, diff, gu)
    return float(np.abs(prod) @ grid.cell_volumes[cells])


# ---------------------------------------------------------------------------
# boundary (pre-)indicator
# ---------------------------------------------------------------------------


@dataclass
class ProbeContext:
    """Everything needed to evaluate indicators along one curve."""

    stm: SpaceTimeMesh
    pair: ConductivityPair
    b_ext: np.ndarray
    incl: MovingInclusion | None
    curve: ProbeCurve
    theta: float
    mu: float
    v0: np.ndarray | None = None
    kappa_hat: float | None = None
    n_space: int = 24
    n_time: int = 16
    lambda_reg: float = 1e-8
    residual_gate: float = 0.10
    enforce_mu_floor: bool = True

    def window_times(self):
        return self.stm.times[self.stm.idx_t0:self.stm.idx_T + 1]


def pre_indicator(ctx: ProbeContext, tau: float, dn_map=None,
                  special: SpecialSolutionSet | None = None):
    """Boundary-data indicator through the damped D-N map.

    Fits forward/backward approximants of the special solutions, applies the
    D-N map to the forward trace and pairs the flux deficit with the backward
    approximant.  Returns (IndicatorSample, forward fit, backward fit).
    """
    stm = ctx.stm
    grid = stm.grid
    if special is None:
        special = compute_special_set(ctx.b_ext, ctx.curve, tau, ctx.mu, ctx.theta,
                                      stm, kappa_hat=ctx.kappa_hat,
                                      enforce_mu_floor=ctx.enforce_mu_floor)
    i0, iT = stm.idx_t0, stm.idx_T
    N = iT - i0
    dt = stm.dt
    tms = ctx.window_times()
    u = special.u_tilde[i0:iT + 1, stm.omega_to_ext].copy()
    us = special.u_star_tilde[i0:iT + 1, stm.omega_to_ext].copy()

    if ctx.incl is None:
        raise RungeError("boundary mode needs the (hypothesized) inclusion geometry")
    region = runge_region(ctx.incl, grid, tms, ctx.curve, tau)
    modulation = np.exp(-tau * ctx.mu * np.abs(tms - ctx.theta))
    basis = boundary_basis(grid, ctx.n_space, ctx.n_time, tms, modulation=modulation)
    stepper = ImplicitStepper(grid, ctx.pair.b_cells, tau, dt)
    fit_f, fit_b = fit_special_pair(u, us, basis, region, stepper,
                                    lambda_reg=ctx.lambda_reg)

    u_j, us_j = fit_f.field, fit_b.field
    if dn_map is None:
        dn_map = assemble_damped_dn(ctx.pair.a_cells, ctx.v0 if ctx.v0 is not None
                                    else np.zeros(grid.nnodes), tau, grid, tms,
                                    horizon=float(tms[-1] - tms[0]))
    flux_v = dn_map.apply(u_j[:, grid.boundary_nodes])
    flux_u = neumann_trace(u_j, ctx.pair.b_cells, tau, grid, tms)
    bn = grid.boundary_nodes
    value = 0.0
    abs_ref = 0.0
    for n in range(1, N + 1):
        d = flux_v[n - 1] - flux_u[n - 1]
        value += d @ us_j[n][bn]
        abs_ref += np.abs(d) @ np.abs(us_j[n][bn])
    value *= dt
    abs_ref *= dt

    v0n = 0.0 if ctx.v0 is None else math.sqrt(float((ctx.v0**2 * grid.lumped_mass()).sum()))
    bound = residual_envelope(v0n, stm.d_omega(), tau, ctx.mu,
                              float(tms[-1] - tms[0]), ctx.theta)
    usable = (fit_f.relative_residual <= ctx.residual_gate
              and fit_b.relative_residual <= ctx.residual_gate)
    note = "" if usable else (f"runge residual {fit_f.relative_residual:.3f}/"
                              f"{fit_b.relative_residual:.3f} above gate {ctx.residual_gate}")
    sample = IndicatorSample(tau=tau, value=float(value), abs_reference=float(abs_ref),
                             residual_bound=bound, usable=usable, note=note)
    return sample, fit_f, fit_b


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------


def indicator_sweep(ctx: ProbeContext, tau_grid, mode: str = "volume",
                    dn_maps: dict | None = None) -> IndicatorSamples:
    """One indicator value per tau; per-tau failures are recorded, the sweep
    continues.  Evaluation order never affects values (each tau independent)."""
    samples = []
    for tau in sorted(float(t) for t in tau_grid):
        try:
            if mode == "volume":
                special = compute_special_set(ctx.b_ext, ctx.curve, tau, ctx.mu,
                                              ctx.theta, ctx.stm, kappa_hat=ctx.kappa_hat,
                                              enforce_mu_floor=ctx.enforce_mu_floor)
                s = volume_indicator(ctx.pair, special, ctx.v0, ctx.stm, ctx.curve)
            elif mode == "boundary":
                dn = None if dn_maps is None else dn_maps.get(tau)
                s, _, _ = pre_indicator(ctx, tau, dn_map=dn)
            else:
                raise ValueError("mode must be volume or boundary")
        except Exception as exc:  # noqa: BLE001 - per-tau failures are data
            s = IndicatorSample(tau=tau, value=math.nan, abs_reference=math.nan,
                                residual_bound=math.nan, usable=False, note=str(exc))
        samples.append(s)
    return IndicatorSamples(samples=samples, mode=mode, curve_id=ctx.curve.label)


# ---------------------------------------------------------------------------
# slopes and classification
# ---------------------------------------------------------------------------


def log_slope(samples: IndicatorSamples, window_frac: float = 0.4,
              k_min: int = 5, signed: float = +1.0) -> SlopeEstimate:
    """Least-squares and extreme secant slopes of ln I over the top window.

    ``signed``: +1 studies I itself, -1 studies -I (the mirrored jump case).
    Values below the per-sample positivity floor count as nonpositive and
    propagate -inf, matching the extended-logarithm convention.
    """
    usable = [s for s in samples.samples if s.usable and np.isfinite(s.value)]
    if not usable:
        return SlopeEstimate(-math.inf, -math.inf, -math.inf, (math.nan, math.nan), 0)
    k = max(k_min, int(math.ceil(window_frac * len(usable))))
    window = usable[-k:] if len(usable) >= k else usable
    taus = np.asarray([s.tau for s in window])
    vals = np.asarray([signed * s.value for s in window])
    floors = np.asarray([s.floor for s in window])
    if np.any(vals <= floors):
        return SlopeEstimate(-math.inf, -math.inf, -math.inf,
                             (float(taus[0]), float(taus[-1])), len(window))
    ln = np.log(vals)
    if len(window) < 2:
        return SlopeEstimate(-math.inf, math.inf, math.nan,
                             (float(taus[0]), float(taus[-1])), len(window))
    secants = np.diff(ln) / np.diff(taus)
    A = np.vstack([taus, np.ones_like(taus)]).T
    lsq = float(np.linalg.lstsq(A, ln, rcond=None)[0][0])
    return SlopeEstimate(float(secants.min()), float(secants.max()), lsq,
                         (float(taus[0]), float(taus[-1])), len(window))


@dataclass
class Classification:
    label: str               # "far" | "touching" | "inconclusive"
    far_threshold: float
    touch_threshold: float
    tol: float
    slopes: SlopeEstimate


def classify_curve(slopes: SlopeEstimate, kc: KernelConstants,
                   profile: DistanceProfile | None, alpha: float | None,
                   epsilon: float | None, mu: float, tol: float = 0.25,
                   eps_sigma: float | None = None) -> Classification:
    """Far/touching dichotomy with recorded thresholds.

    Far:      slope_hi <= -2 kappa eps_sigma (1 - tol)
    Touching: slope_lo >= -(8 / kappa / alpha^3 + 4 mu) epsilon (1 + tol)
    """
    kappa = kc.kappa_hat
    es = eps_sigma if eps_sigma is not None else (
        profile.eps_sigma if profile is not None else math.inf)
    far_thr = -2.0 * kappa * es * (1.0 - tol) if np.isfinite(es) else -math.inf
    if alpha is not None and epsilon is not None:
        touch_thr = -(8.0 / (kappa * alpha**3) + 4.0 * mu) * epsilon * (1.0 + tol)
    else:
        touch_thr = -math.inf
    if slopes.slope_lo == -math.inf and slopes.slope_hi == -math.inf:
        label = "far"
    elif np.isfinite(es) and slopes.slope_hi <= far_thr:
        label = "far"
    elif np.isfinite(touch_thr) and slopes.slope_lo >= touch_thr:
        label = "touching"
    else:
        label = "inconclusive"
    return Classification(label=label, far_threshold=far_thr,
                          touch_threshold=touch_thr, tol=tol, slopes=slopes)


# ---------------------------------------------------------------------------
# mismatch detection
# ---------------------------------------------------------------------------


@dataclass
class ProbePlan:
    """One probing curve plus the thresholds its construction certifies."""

    curve: ProbeCurve
    alpha: float
    epsilon: float
    label: str = ""


def detect_mismatch(ctx_a: ProbeContext, ctx_b: ProbeContext, probes: list,
                    tau_grid, kc: KernelConstants, tol: float = 0.25,
                    separation_factor: float = 3.0) -> Verdict:
    """Compare two damped D-N maps along shared probing curves.

    For every probe both maps' boundary-mode indicator sweeps are computed
    with identical approximants as far as the background allows; a probe
    certifies "different" when one map classifies touching, the other far,
    and the slope intervals are separated by more than the combined secant
    spread times ``separation_factor``.  Probes with unusable fits are
    reported, never silently classified.
    """
    evidence = []
    any_usable = False
    different = False
    for plan in probes:
        row = {"probe": plan.label or plan.curve.label}
        sweeps = {}
        slopes = {}
        for name, ctx in (("a", ctx_a), ("b", ctx_b)):
            c = _with_curve(ctx, plan.curve)
            sw = indicator_sweep(c, tau_grid, mode="boundary")
            sweeps[name] = sw
            usable = [s for s in sw.samples if s.usable]
            row[f"usable_{name}"] = len(usable)
            sl_pos = log_slope(sw)
            sl_neg = log_slope(sw, signed=-1.0)
            slopes[name] = sl_pos if sl_pos.finite or not sl_neg.finite else sl_neg
            row[f"slope_{name}"] = (slopes[name].slope_lo, slopes[name].slope_hi,
                                    slopes[name].slope_lsq)
        if row["usable_a"] < 2 or row["usable_b"] < 2:
            row["status"] = "unusable"
            evidence.append(row)
            continue
        any_usable = True
        far_thr = -kc.kappa_hat * plan.alpha * (1.0 - tol)
        touch_thr = -(8.0 / (kc.kappa_hat * plan.alpha**3) + 4.0 * ctx_a.mu) \
            * plan.epsilon * (1.0 + tol)
        row["far_threshold"] = far_thr
        row["touch_threshold"] = touch_thr
        for near, farn in (("a", "b"), ("b", "a")):
            s_near, s_far = slopes[near], slopes[farn]
            gap = s_near.slope_lo - s_far.slope_hi
            spread = max(s_near.slope_hi - s_near.slope_lo,
                         s_far.slope_hi - s_far.slope_lo, 1e-12)
            touching = s_near.slope_lo >= touch_thr and np.isfinite(s_near.slope_lo)
            far = (s_far.slope_hi <= far_thr) or not s_far.finite
            if touching and far and (not s_far.finite or gap > separation_factor * spread / 3.0):
                row["status"] = f"different ({near} touching, {farn} far, gap {gap:.3f})"
                different = True
                break
        else:
            row["status"] = "consistent"
        evidence.append(row)
    if different:
        verdict = "different"
    elif any_usable:
        verdict = "indistinguishable"
    else:
        verdict = "inconclusive"
    return Verdict(verdict=verdict, evidence=evidence,
                   thresholds={"tol": tol, "kappa_hat": kc.kappa_hat,
                               "separation_factor": separation_factor})


def _with_curve(ctx: ProbeContext, curve: ProbeCurve) -> ProbeContext:
    import copy
    c = copy.copy(ctx)
    c.curve = curve
    return c

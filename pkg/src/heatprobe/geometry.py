"""Body, moving inclusion, probing curves and geometric-hypothesis validators.

Inclusions are finite unions of moving primitive shapes (disc/ball, ellipse,
convex polygon, chord-clipped disc) with exact point-to-set distances.  The
regularity certificates estimated here (time-Lipschitz constant of the
distance functions, exterior-cone height, boundary density constant) feed the
hypothesis guards of the probing and verification modules.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field

import numpy as np

from .mesh import Box


class GeometryError(ValueError):
    """Raised when a geometric precondition cannot be satisfied."""


class ConstructionError(GeometryError):
    """Raised when no admissible probing curve can be constructed."""


# ---------------------------------------------------------------------------
# primitive shapes: signed distance < 0 inside, > 0 outside
# ---------------------------------------------------------------------------


class Shape:
    dim = 2

    def signed_distance(self, x: np.ndarray) -> float:
        raise NotImplementedError

    def boundary_points(self, n: int) -> np.ndarray:
        raise NotImplementedError

    def volume(self) -> float:
        raise NotImplementedError

    def bounding_radius(self) -> float:
        raise NotImplementedError

    def interior_point(self) -> np.ndarray:
        raise NotImplementedError


class Disc(Shape):
    """Disc (2D) or ball (3D) centered at the origin of its local frame."""

    def __init__(self, radius: float, dim: int = 2):
        if radius <= 0:
            raise GeometryError("radius must be positive")
        self.r = float(radius)
        self.dim = dim

    def signed_distance(self, x):
        return float(np.linalg.norm(x) - self.r)

    def boundary_points(self, n):
        if self.dim == 2:
            ang = 2 * np.pi * np.arange(n) / n
            return self.r * np.stack([np.cos(ang), np.sin(ang)], axis=1)
        # Fibonacci sphere
        i = np.arange(n) + 0.5
        phi = np.arccos(1 - 2 * i / n)
        th = np.pi * (1 + 5**0.5) * i
        return self.r * np.stack([np.sin(phi) * np.cos(th), np.sin(phi) * np.sin(th), np.cos(phi)], axis=1)

    def volume(self):
        return math.pi * self.r**2 if self.dim == 2 else 4.0 / 3.0 * math.pi * self.r**3

    def bounding_radius(self):
        return self.r

    def interior_point(self):
        return np.zeros(self.dim)


class Ellipse(Shape):
    """Axis-aligned ellipse; exact distance by bisection on the edge equation."""

    def __init__(self, a: float, b: float):
        if a <= 0 or b <= 0:
            raise GeometryError("semi-axes must be positive")
        self.a, self.b = float(a), float(b)

    def _closest_boundary(self, x):
        # work in the first quadrant; robust bisection on
        # f(t) = (a p0 / (t + a^2))^2 + (b p1 / (t + b^2))^2 - 1
        p = np.abs(np.asarray(x, dtype=float))
        a, b = self.a, self.b
        if p[0] < 1e-15 and p[1] < 1e-15:
            return np.array([0.0, b]) if a >= b else np.array([a, 0.0])
        t_lo = -min(a, b) ** 2 + 1e-30
        t_hi = max(a, b) * float(np.linalg.norm(p)) + max(a, b) ** 2

        def f(t):
            with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
                val = (a * p[0] / (t + a * a)) ** 2 + (b * p[1] / (t + b * b)) ** 2 - 1.0
            return math.inf if np.isnan(val) else val

        while f(t_lo) < 0:  # point extremely close to the center
            t_lo = -min(a, b) ** 2 + (t_lo + min(a, b) ** 2) / 2.0
        for _ in range(200):
            t = 0.5 * (t_lo + t_hi)
            if f(t) > 0:
                t_lo = t
            else:
                t_hi = t
        t = 0.5 * (t_lo + t_hi)
        q = np.array([a * a * p[0] / (t + a * a), b * b * p[1] / (t + b * b)])
        return np.copysign(q, np.asarray(x, dtype=float) + 0.0)

    def signed_distance(self, x):
        x = np.asarray(x, dtype=float)
        q = self._closest_boundary(x)
        d = float(np.linalg.norm(x - q))
        inside = (x[0] / self.a) ** 2 + (x[1] / self.b) ** 2 <= 1.0
        return -d if inside else d

    def boundary_points(self, n):
        ang = 2 * np.pi * np.arange(n) / n
        return np.stack([self.a * np.cos(ang), self.b * np.sin(ang)], axis=1)

    def volume(self):
        return math.pi * self.a * self.b

    def bounding_radius(self):
        return max(self.a, self.b)

    def interior_point(self):
        return np.zeros(2)


class ConvexPolygon(Shape):
    def __init__(self, vertices):
        v = np.asarray(vertices, dtype=float)
        if v.ndim != 2 or v.shape[0] < 3 or v.shape[1] != 2:
            raise GeometryError("need at least 3 planar vertices")
        # enforce counter-clockwise orientation
        area2 = np.sum(v[:, 0] * np.roll(v[:, 1], -1) - np.roll(v[:, 0], -1) * v[:, 1])
        if area2 < 0:
            v = v[::-1].copy()
            area2 = -area2
        e = np.roll(v, -1, axis=0) - v
        cross = e[:, 0] * np.roll(e, -1, axis=0)[:, 1] - e[:, 1] * np.roll(e, -1, axis=0)[:, 0]
        if np.any(cross < -1e-12 * np.max(np.abs(v))):
            raise GeometryError("polygon is not convex")
        self.v = v
        self._area = 0.5 * area2

    def signed_distance(self, x):
        x = np.asarray(x, dtype=float)
        v = self.v
        w = np.roll(v, -1, axis=0)
        e = w - v
        # distance to each edge segment
        t = np.clip(np.einsum("ij,ij->i", x - v, e) / np.einsum("ij,ij->i", e, e), 0.0, 1.0)
        proj = v + t[:, None] * e
        dmin = float(np.min(np.linalg.norm(x - proj, axis=1)))
        inside = bool(np.all(e[:, 0] * (x[1] - v[:, 1]) - e[:, 1] * (x[0] - v[:, 0]) >= -1e-14))
        return -dmin if inside else dmin

    def boundary_points(self, n):
        v = self.v
        w = np.roll(v, -1, axis=0)
        lens = np.linalg.norm(w - v, axis=1)
        total = lens.sum()
        pts = []
        for s in np.arange(n) * total / n:
            k = int(np.searchsorted(np.cumsum(lens), s, side="right"))
            s0 = s - (np.cumsum(lens)[k] - lens[k])
            pts.append(v[k] + (w[k] - v[k]) * (s0 / lens[k]))
        return np.asarray(pts)

    def volume(self):
        return self._area

    def bounding_radius(self):
        return float(np.max(np.linalg.norm(self.v, axis=1)))

    def interior_point(self):
        return self.v.mean(axis=0)


class ClippedDisc(Shape):
    """Disc intersected with the half-plane n.x <= cut (n a unit vector)."""

    def __init__(self, radius: float, normal, cut: float):
        if radius <= 0:
            raise GeometryError("radius must be positive")
        n = np.asarray(normal, dtype=float)
        n = n / np.linalg.norm(n)
        if not (-radius < cut < radius):
            raise GeometryError("cut plane must intersect the disc")
        self.r, self.n, self.cut = float(radius), n, float(cut)
        half = math.sqrt(radius**2 - cut**2)
        tang = np.array([-n[1], n[0]])
        self._c1 = cut * n + half * tang
        self._c2 = cut * n - half * tang

    def signed_distance(self, x):
        x = np.asarray(x, dtype=float)
        s_disc = float(np.linalg.norm(x) - self.r)
        s_half = float(self.n @ x - self.cut)
        if max(s_disc, s_half) <= 0.0:  # inside: nearest boundary is arc or chord line
            return max(s_disc, s_half)
        # outside: min distance to the arc segment and to the chord segment
        cands = []
        r_x = np.linalg.norm(x)
        if r_x > 0:
            p_arc = x * (self.r / r_x)
            if self.n @ p_arc <= self.cut + 1e-15:
                cands.append(np.linalg.norm(x - p_arc))
        cands += [np.linalg.norm(x - self._c1), np.linalg.norm(x - self._c2)]
        e = self._c2 - self._c1
        t = np.clip((x - self._c1) @ e / (e @ e), 0.0, 1.0)
        cands.append(np.linalg.norm(x - (self._c1 + t * e)))
        return float(min(cands))

    def boundary_points(self, n):
        a1 = math.atan2(self._c1[1], self._c1[0])
        a2 = math.atan2(self._c2[1], self._c2[0])
        if a2 < a1:
            a2 += 2 * math.pi
        arc_len = (a2 - a1) * self.r
        chord_len = float(np.linalg.norm(self._c2 - self._c1))
        n_arc = max(2, int(round(n * arc_len / (arc_len + chord_len))))
        n_ch = max(1, n - n_arc)
        ang = a1 + (a2 - a1) * np.arange(n_arc) / n_arc
        pts = [self.r * np.stack([np.cos(ang), np.sin(ang)], axis=1)]
        t = (np.arange(n_ch) + 0.5) / n_ch
        pts.append(self._c2 + t[:, None] * (self._c1 - self._c2))
        return np.vstack(pts)

    def volume(self):
        # disc area minus the circular segment beyond the cut
        r, c = self.r, self.cut
        seg = r * r * math.acos(c / r) - c * math.sqrt(r * r - c * c)
        return math.pi * r * r - seg

    def bounding_radius(self):
        return self.r

    def interior_point(self):
        return self.n * 0.5 * (self.cut - self.r)


# ---------------------------------------------------------------------------
# moving inclusion
# ---------------------------------------------------------------------------


@dataclass
class MovingShape:
    """A primitive following a piecewise-linear translation path.

    ``path`` is a list of (time, offset) waypoints; between waypoints the
    offset is interpolated linearly, outside their span it is clamped.  The
    shape exists only for t inside ``active`` (closed interval).
    """

    shape: Shape
    path: list
    active: tuple | None = None

    def __post_init__(self):
        ts = [float(t) for t, _ in self.path]
        if sorted(ts) != ts or len(set(ts)) != len(ts):
            raise GeometryError("path times must be strictly increasing")
        self._ts = np.asarray(ts)
        self._ys = np.asarray([np.asarray(y, dtype=float) for _, y in self.path])

    def offset(self, t: float) -> np.ndarray:
        ts, ys = self._ts, self._ys
        if t <= ts[0]:
            return ys[0]
        if t >= ts[-1]:
            return ys[-1]
        k = int(np.searchsorted(ts, t, side="right")) - 1
        lam = (t - ts[k]) / (ts[k + 1] - ts[k])
        return (1 - lam) * ys[k] + lam * ys[k + 1]

    def active_at(self, t: float) -> bool:
        if self.active is None:
            return True
        return self.active[0] - 1e-12 <= t <= self.active[1] + 1e-12

    def speed_bound(self) -> float:
        if len(self.path) < 2:
            return 0.0
        seg = np.linalg.norm(np.diff(self._ys, axis=0), axis=1)
        dts = np.diff(self._ts)
        return float(np.max(seg / dts))


@dataclass
class MovingInclusion:
    """Time-indexed region D_t: union of moving primitives, pairwise disjoint."""

    shapes: list
    time_span: tuple = (0.0, 1.0)

    @property
    def dim(self) -> int:
        return self.shapes[0].shape.dim if self.shapes else 2

    def active_shapes(self, t: float):
        return [s for s in self.shapes if s.active_at(t)]

    def is_empty(self, t: float) -> bool:
        return len(self.active_shapes(t)) == 0

    def signed_distance(self, x, t: float) -> float:
        """min over active shapes; +inf when D_t is empty."""
        x = np.asarray(x, dtype=float)
        best = np.inf
        for s in self.active_shapes(t):
            best = min(best, s.shape.signed_distance(x - s.offset(t)))
        return best

    def distance_pair(self, x, t: float):
        s = self.signed_distance(x, t)
        if not np.isfinite(s):
            return np.inf, 0.0
        return (max(s, 0.0), max(-s, 0.0))

    def boundary_points(self, t: float, n_per_shape: int = 64) -> np.ndarray:
        pts = [s.shape.boundary_points(n_per_shape) + s.offset(t) for s in self.active_shapes(t)]
        if not pts:
            return np.zeros((0, self.dim))
        return np.vstack(pts)

    def volume(self, t: float) -> float:
        return sum(s.shape.volume() for s in self.active_shapes(t))

    def empty_intervals(self, times) -> list:
        """Maximal sampled intervals where D_t is empty."""
        times = np.asarray(times, dtype=float)
        empty = np.array([self.is_empty(t) for t in times])
        out = []
        start = None
        for t, e in zip(times, empty):
            if e and start is None:
                start = t
            if not e and start is not None:
                out.append((start, prev))
                start = None
            prev = t
        if start is not None:
            out.append((start, times[-1]))
        return out

    def check_disjoint(self, times, n_boundary: int = 128) -> None:
        for t in times:
            act = self.active_shapes(t)
            for i in range(len(act)):
                for j in range(i + 1, len(act)):
                    bi = act[i].shape.boundary_points(n_boundary) + act[i].offset(t)
                    sj = [act[j].shape.signed_distance(p - act[j].offset(t)) for p in bi]
                    ci = act[i].shape.interior_point() + act[i].offset(t)
                    inside_j = act[j].shape.signed_distance(ci - act[j].offset(t)) < 0
                    if min(sj) < 1e-9 or inside_j:
                        raise GeometryError(f"shapes {i} and {j} overlap at t={t}")


# ---------------------------------------------------------------------------
# domain
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Domain:
    """The body: an axis-aligned box with its boundary and diameter."""

    box: Box

    @property
    def dim(self) -> int:
        return self.box.dim

    @property
    def d_omega(self) -> float:
        return self.box.diameter()

    def contains(self, x, tol: float = 1e-12) -> bool:
        return self.box.contains(x, tol)

    def boundary_distance(self, x) -> float:
        """Distance from an interior point to the boundary (0 outside)."""
        x = np.asarray(x, dtype=float)
        lo = np.asarray(self.box.lo)
        hi = np.asarray(self.box.hi)
        if not self.contains(x):
            return 0.0
        return float(min(np.min(x - lo), np.min(hi - x)))


# ---------------------------------------------------------------------------
# probing curve + distance profile
# ---------------------------------------------------------------------------


@dataclass
class ProbeCurve:
    """Lipschitz curve t -> y(t), constant-extended outside its sample range.

    The tube of working radius 1/tau around the curve is where the moving
    mollified source lives; ``speed_bound`` certifies |y(t)-y(s)| <= M |t-s|.
    """

    times: np.ndarray
    points: np.ndarray
    theta: float | None = None
    alpha: float | None = None
    epsilon: float | None = None
    mu: float | None = None
    seed_point: np.ndarray | None = None
    label: str = "curve"
    bands_checked: bool = False

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.points = np.asarray(self.points, dtype=float)
        if self.times.ndim != 1 or self.points.shape[0] != self.times.size:
            raise GeometryError("times/points size mismatch")
        if np.any(np.diff(self.times) <= 0):
            raise GeometryError("curve sample times must increase")

    def __call__(self, t: float) -> np.ndarray:
        ts = self.times
        if t <= ts[0]:
            return self.points[0]
        if t >= ts[-1]:
            return self.points[-1]
        k = int(np.searchsorted(ts, t, side="right")) - 1
        lam = (t - ts[k]) / (ts[k + 1] - ts[k])
        return (1 - lam) * self.points[k] + lam * self.points[k + 1]

    def at_times(self, times) -> np.ndarray:
        return np.asarray([self(t) for t in np.asarray(times, dtype=float)])

    def speed_bound(self) -> float:
        seg = np.linalg.norm(np.diff(self.points, axis=0), axis=1)
        dts = np.diff(self.times)
        return float(np.max(seg / dts)) if seg.size else 0.0

    @staticmethod
    def static(point, t0: float, t1: float, **kw) -> "ProbeCurve":
        p = np.asarray(point, dtype=float)
        return ProbeCurve(np.array([t0, t1]), np.stack([p, p]), **kw)


@dataclass
class DistanceProfile:
    """Sampled t -> d(y(t), D_t) with the +inf convention on empty slices."""

    times: np.ndarray
    d_of_t: np.ndarray

    @property
    def eps_sigma(self) -> float:
        return float(np.min(self.d_of_t))

    @property
    def met_inclusion(self) -> bool:
        return bool(np.any(np.isfinite(self.d_of_t)))


def inclusion_distance(x, t: float, incl: MovingInclusion, dom: Domain | None = None):
    """(d(x, D_t), d(x, complement of D_t)) with exact primitive formulas."""
    if dom is not None and not dom.contains(x):
        raise GeometryError(f"point {x} outside the closed body")
    return incl.distance_pair(x, t)


def curve_profile(curve: ProbeCurve, incl: MovingInclusion, times=None) -> DistanceProfile:
    if times is None:
        t0, t1 = incl.time_span
        base = curve.times[(curve.times >= t0) & (curve.times <= t1)]
        times = np.unique(np.concatenate([[t0], base, [t1]]))
    times = np.asarray(times, dtype=float)
    d = np.array([incl.distance_pair(curve(t), t)[0] for t in times])
    return DistanceProfile(times, d)


# ---------------------------------------------------------------------------
# hypothesis validation
# ---------------------------------------------------------------------------


@dataclass
class GeometryReport:
    k_d: float
    rho: float
    l_d: float
    h1_ok: bool
    h2_ok: bool
    h3a_ok: bool
    h3b_ok: bool
    notes: list = field(default_factory=list)

    @property
    def all_ok(self) -> bool:
        return self.h1_ok and self.h2_ok and self.h3a_ok and self.h3b_ok


def _cone_points(z, axis, rho, dim, n=60, rng=None):
    """Deterministic sample of the open cone with apex z, height rho and
    volume rho^dim (half-width chosen accordingly)."""
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    if dim == 2:
        halfw = 1.0  # triangle area rho^2  => half-width = rho at depth rho
        t = np.linspace(0.08, 1.0, 8)
        pts = []
        for ti in t:
            for s in np.linspace(-0.95, 0.95, 7):
                perp = np.array([-axis[1], axis[0]])
                pts.append(z + ti * rho * axis + s * halfw * ti * rho * perp)
        return np.asarray(pts)
    halfw = math.sqrt(3.0 / math.pi)  # cone volume rho^3
    pts = []
    perp1 = np.array([axis[1] - axis[2], axis[2] - axis[0], axis[0] - axis[1]])
    if np.linalg.norm(perp1) < 1e-12:
        perp1 = np.array([1.0, -1.0, 0.0])
    perp1 /= np.linalg.norm(perp1)
    perp2 = np.cross(axis, perp1)
    for ti in np.linspace(0.1, 1.0, 6):
        for ang in np.linspace(0, 2 * np.pi, 8, endpoint=False):
            for rr in (0.4, 0.9):
                off = rr * halfw * ti * rho * (math.cos(ang) * perp1 + math.sin(ang) * perp2)
                pts.append(z + ti * rho * axis + off)
    return np.asarray(pts)


def _region_volume_fraction(incl, t, center, r, dim, seed):
    """|D_t ∩ B(center, r)| by midpoint quadrature (2D) or seeded MC (3D)."""
    if dim == 2:
        n = 48
        g = (np.arange(n) + 0.5) / n * 2 * r - r
        gx, gy = np.meshgrid(g, g, indexing="ij")
        pts = np.stack([gx.ravel(), gy.ravel()], axis=1) + center
        inside_ball = (gx.ravel() ** 2 + gy.ravel() ** 2) <= r * r
        cell = (2 * r / n) ** 2
        hit = 0
        for p, ib in zip(pts, inside_ball):
            if ib and incl.signed_distance(p, t) <= 0:
                hit += 1
        return hit * cell
    rng = np.random.default_rng(seed)
    n = 100_000
    pts = rng.uniform(-r, r, size=(n, 3)) + center
    rad = np.linalg.norm(pts - center, axis=1)
    keep = pts[rad <= r]
    hit = sum(1 for p in keep if incl.signed_distance(p, t) <= 0)
    return hit / n * (2 * r) ** 3


def validate_inclusion(incl: MovingInclusion, dom: Domain, n_time: int = 33,
                       n_space: int = 12, n_boundary: int = 24, seed: int = 0) -> GeometryReport:
    """Estimate (K_D, rho, L_D) on sampled grids and flag each hypothesis.

    Deterministic given the seed.  An inclusion leaving the body flags the
    containment hypothesis rather than raising.
    """
    t0, t1 = incl.time_span
    times = np.linspace(t0, t1, n_time)
    notes = []

    incl.check_disjoint(times[:: max(1, n_time // 8)])

    # H1': containment + connected complement (flood fill on a coarse grid)
    h1_ok = True
    for t in times:
        for p in incl.boundary_points(t, 32):
            if not dom.contains(p) or dom.boundary_distance(p) <= 1e-9:
                h1_ok = False
                notes.append(f"inclusion touches/leaves the body at t={t:.4g}")
                break
        if not h1_ok:
            break
    if h1_ok:
        h1_ok = _complement_connected(incl, dom, times)
        if not h1_ok:
            notes.append("complement of the inclusion is disconnected at some time")

    # H2: Lipschitz quotients of both distance functions on a space-time sample
    lo = np.asarray(dom.box.lo)
    hi = np.asarray(dom.box.hi)
    axes = [np.linspace(lo[i], hi[i], n_space) for i in range(dom.dim)]
    mesh = np.meshgrid(*axes, indexing="ij")
    xs = np.stack([m.ravel() for m in mesh], axis=1)
    k_d = 0.0
    for x in xs:
        prev = None
        for t in times:
            din, dout = incl.distance_pair(x, t)
            if prev is not None:
                dt = t - prev[0]
                if np.isfinite(din) and np.isfinite(prev[1]):
                    k_d = max(k_d, abs(din - prev[1]) / dt)
                k_d = max(k_d, abs(dout - prev[2]) / dt)
            prev = (t, din, dout)
    h2_ok = np.isfinite(k_d)

    # H3a: exterior cone height at sampled boundary points
    rho = np.inf
    any_nonempty = False
    for t in times[:: max(1, n_time // 8)]:
        if incl.is_empty(t):
            continue
        any_nonempty = True
        for z in incl.boundary_points(t, n_boundary):
            eps = 1e-6 * max(1.0, dom.d_omega)
            g = np.array([(incl.signed_distance(z + eps * e, t) - incl.signed_distance(z - eps * e, t))
                          / (2 * eps) for e in np.eye(dom.dim)])
            nrm = np.linalg.norm(g)
            axis = g / nrm if nrm > 1e-9 else np.ones(dom.dim) / math.sqrt(dom.dim)
            best = 0.0
            for rot in _axis_candidates(axis, dom.dim):
                lo_r, hi_r = 0.0, dom.d_omega
                for _ in range(24):
                    mid = 0.5 * (lo_r + hi_r)
                    pts = _cone_points(z, rot, mid, dom.dim)
                    ok = all(incl.signed_distance(p, t) > 0 for p in pts)
                    if ok:
                        lo_r = mid
                    else:
                        hi_r = mid
                best = max(best, lo_r)
            rho = min(rho, best)
    if not any_nonempty:
        rho = 0.0
    h3a_ok = (not any_nonempty) or rho > 1e-6

    # H3b: density constant over sampled boundary points and small radii
    # (the touching analysis only invokes the density bound at radii well
    # below the shape scale, so the certificate samples that regime)
    l_d = 1.0
    for t in times[:: max(1, n_time // 8)]:
        if incl.is_empty(t):
            continue
        vol_d = incl.volume(t)
        for z in incl.boundary_points(t, max(8, n_boundary // 2)):
            for r in np.geomspace(0.04, 0.3, 5) * max(s.shape.bounding_radius()
                                                      for s in incl.active_shapes(t)):
                inter = _region_volume_fraction(incl, t, z, r, dom.dim, seed)
                ball = math.pi * r * r if dom.dim == 2 else 4.0 / 3.0 * math.pi * r**3
                denom = min(vol_d, ball)
                if denom > 0:
                    l_d = min(l_d, inter / denom)
    h3b_ok = l_d > 0.0
    return GeometryReport(k_d=k_d, rho=float(rho), l_d=float(l_d), h1_ok=h1_ok,
                          h2_ok=h2_ok, h3a_ok=h3a_ok, h3b_ok=h3b_ok, notes=notes)


def _axis_candidates(axis, dim):
    if dim == 2:
        out = [axis]
        for ang in (0.35, -0.35):
            c, s = math.cos(ang), math.sin(ang)
            out.append(np.array([c * axis[0] - s * axis[1], s * axis[0] + c * axis[1]]))
        return out
    return [axis]


def _complement_connected(incl: MovingInclusion, dom: Domain, times, n: int = 40) -> bool:
    lo = np.asarray(dom.box.lo)
    hi = np.asarray(dom.box.hi)
    for t in times[:: max(1, len(times) // 8)]:
        axes = [np.linspace(lo[i], hi[i], n) for i in range(dom.dim)]
        mesh = np.meshgrid(*axes, indexing="ij")
        pts = np.stack([m.ravel() for m in mesh], axis=1)
        free = np.array([incl.signed_distance(p, t) > 0 for p in pts]).reshape((n,) * dom.dim)
        seed_idx = (0,) * dom.dim
        if not free[seed_idx]:
            return False
        seen = np.zeros_like(free)
        stack = [seed_idx]
        seen[seed_idx] = True
        while stack:
            cur = stack.pop()
            for ax in range(dom.dim):
                for dlt in (-1, 1):
                    nxt = list(cur)
                    nxt[ax] += dlt
                    if 0 <= nxt[ax] < n:
                        nxt = tuple(nxt)
                        if free[nxt] and not seen[nxt]:
                            seen[nxt] = True
                            stack.append(nxt)
        if np.any(free & ~seen):
            return False
    return True


# ---------------------------------------------------------------------------
# Vitali cover
# ---------------------------------------------------------------------------


def vitali_cover(incl: MovingInclusion, t: float, tau: float,
                 audit_points: int = 10_000, seed: int = 0) -> np.ndarray:
    """Greedy maximal packing of D_t by balls of radius 1/tau.

    Returns centers x_i in D_t with pairwise distances >= 2/tau whose 3/tau
    balls cover closure(D_t); both properties are audited before returning.
    """
    if tau <= 0:
        raise GeometryError("tau must be positive")
    if incl.is_empty(t):
        raise GeometryError("D_t is empty")
    dim = incl.dim
    act = incl.active_shapes(t)
    lo = np.min([s.offset(t) - s.shape.bounding_radius() for s in act], axis=0)
    hi = np.max([s.offset(t) + s.shape.bounding_radius() for s in act], axis=0)
    step = 0.4 / tau
    axes = [np.arange(lo[i], hi[i] + step, step) for i in range(dim)]
    mesh = np.meshgrid(*axes, indexing="ij")
    cand = np.stack([m.ravel() for m in mesh], axis=1)
    cand = np.asarray([p for p in cand if incl.signed_distance(p, t) <= 0.0])
    if cand.size == 0:
        cand = np.asarray([s.shape.interior_point() + s.offset(t) for s in act])
    centers = []
    min_d2 = (2.0 / tau) ** 2
    for p in cand:
        if all(np.sum((p - c) ** 2) >= min_d2 for c in centers):
            centers.append(p)
    centers = np.asarray(centers)

    # packing audit
    if len(centers) > 1:
        dists = np.linalg.norm(centers[:, None] - centers[None, :], axis=2)
        np.fill_diagonal(dists, np.inf)
        if dists.min() < 2.0 / tau - 1e-12:
            raise GeometryError("packing audit failed")
    # covering audit by rejection sampling
    rng = np.random.default_rng(seed)
    got = 0
    while got < audit_points:
        block = rng.uniform(lo, hi, size=(audit_points, dim))
        for p in block:
            if incl.signed_distance(p, t) <= 0.0:
                got += 1
                if np.min(np.linalg.norm(centers - p, axis=1)) > 3.0 / tau:
                    raise GeometryError("covering audit failed")
                if got >= audit_points:
                    break
        else:
            continue
    return centers


# ---------------------------------------------------------------------------
# probing-curve family
# ---------------------------------------------------------------------------


def _clearance(p, t_window, incl: MovingInclusion | None, times):
    if incl is None:
        return np.inf
    return min(incl.distance_pair(p, t)[0] for t in times)


def _escape_path(z, theta, incl, other, dom: Domain, alpha, window_times, step=None):
    """Piecewise-linear path from z on the inclusion boundary to outside the body.

    Graph search on a coarse grid with clearance penalties, then greedy
    line-of-sight smoothing.
    """
    dim = dom.dim
    lo = np.asarray(dom.box.lo) - 0.2 * alpha
    hi = np.asarray(dom.box.hi) + 0.2 * alpha
    if step is None:
        step = max(alpha / 6.0, dom.d_omega / 160.0)
    ns = np.maximum(((hi - lo) / step).astype(int) + 1, 4)
    axes = [np.linspace(lo[i], hi[i], ns[i]) for i in range(dim)]

    def node_pt(idx):
        return np.array([axes[i][idx[i]] for i in range(dim)])

    def passable(p):
        if incl.distance_pair(p, theta)[0] <= 0.45 * step:
            return False
        if other is not None:
            if _clearance(p, None, other, window_times) < 0.5 * alpha + 0.25 * step:
                return False
        return True

    # leave the boundary along the outward distance gradient first
    eps = 1e-6 * max(1.0, dom.d_omega)
    g = np.array([(incl.signed_distance(z + eps * e, theta) - incl.signed_distance(z - eps * e, theta))
                  / (2 * eps) for e in np.eye(dim)])
    nrm = np.linalg.norm(g)
    if nrm < 1e-9:
        raise ConstructionError("cannot determine outward direction at the seed point")
    out_dir = g / nrm
    launch = z + out_dir * 1.5 * step
    if not passable(launch):
        for scale in (2.5, 3.5):
            launch = z + out_dir * scale * step
            if passable(launch):
                break
        else:
            raise ConstructionError("seed point has no clear outward launch")

    start_idx = tuple(int(np.clip(round((launch[i] - lo[i]) / (axes[i][1] - axes[i][0])), 0, ns[i] - 1))
                      for i in range(dim))
    if not passable(node_pt(start_idx)):
        # look for the nearest passable node around the launch point
        found = None
        for radius in range(1, 4):
            for off in np.ndindex(*(2 * radius + 1,) * dim):
                idx = tuple(np.clip(start_idx[i] + off[i] - radius, 0, ns[i] - 1) for i in range(dim))
                if passable(node_pt(idx)):
                    found = idx
                    break
            if found:
                break
        if not found:
            raise ConstructionError("no passable node near the launch point")
        start_idx = found

    def outside(pt):
        return not dom.contains(pt, tol=-1e-12) or dom.boundary_distance(pt) < 0.5 * step

    # Dijkstra with mild low-clearance penalty; deterministic tie-breaking
    dist = {start_idx: 0.0}
    prev = {}
    heap = [(0.0, start_idx)]
    goal = None
    neighbor_offsets = [off for off in np.ndindex(*(3,) * dim) if any(o != 1 for o in off)]
    while heap:
        d, cur = heapq.heappop(heap)
        if d > dist.get(cur, np.inf):
            continue
        pt = node_pt(cur)
        if outside(pt):
            goal = cur
            break
        for off in neighbor_offsets:
            nxt = tuple(cur[i] + off[i] - 1 for i in range(dim))
            if any(not (0 <= nxt[i] < ns[i]) for i in range(dim)):
                continue
            npt = node_pt(nxt)
            if not passable(npt) and not outside(npt):
                continue
            clear = incl.distance_pair(npt, theta)[0]
            pen = 1.0 + 0.5 * step / max(clear, 0.25 * step)
            nd = d + float(np.linalg.norm(npt - pt)) * pen
            if nd < dist.get(nxt, np.inf) - 1e-15:
                dist[nxt] = nd
                prev[nxt] = cur
                heapq.heappush(heap, (nd, nxt))
    if goal is None:
        raise ConstructionError("no escape path found (containment hypothesis violated?)")
    chain = [goal]
    while chain[-1] != start_idx:
        chain.append(prev[chain[-1]])
    pts = [z, launch] + [node_pt(i) for i in reversed(chain)]
    # push the endpoint clearly outside the body
    end = pts[-1]
    outward = end - np.clip(end, dom.box.lo, dom.box.hi)
    if np.linalg.norm(outward) < 1e-12:
        lo_d = np.asarray(dom.box.lo)
        hi_d = np.asarray(dom.box.hi)
        gaps = np.concatenate([end - lo_d, hi_d - end])
        k = int(np.argmin(gaps))
        outward = -np.eye(dim)[k] if k < dim else np.eye(dim)[k - dim]
    else:
        outward = outward / np.linalg.norm(outward)
    pts.append(end + outward * max(2 * step, 0.05 * dom.d_omega))

    # greedy shortcutting with clearance checks
    def segment_clear(a, b):
        n = max(2, int(np.linalg.norm(b - a) / (0.3 * step)) + 1)
        for lam in np.linspace(0.0, 1.0, n):
            p = (1 - lam) * a + lam * b
            if lam > 1e-9 and incl.distance_pair(p, theta)[0] <= 0.0:
                return False
            if other is not None and _clearance(p, None, other, window_times) < 0.5 * alpha:
                return False
        return True

    smoothed = [pts[0]]
    k = 0
    while k < len(pts) - 1:
        j = len(pts) - 1
        while j > k + 1 and not segment_clear(smoothed[-1], pts[j]):
            j -= 1
        smoothed.append(pts[j])
        k = j
    return np.asarray(smoothed)


def build_curve_family(z, theta: float, alpha: float, epsilon: float,
                       incl: MovingInclusion, dom: Domain,
                       other: MovingInclusion | None = None,
                       sample_times=None, mu: float | None = None,
                       k_d: float | None = None,
                       boundary_tol: float = 1e-6) -> ProbeCurve:
    """Construct the probing curve touching the inclusion at time theta.

    The curve follows the escape path at dilated speed (plateau of width
    epsilon around theta), so that its distance profile obeys the four
    admissibility bands; when a second inclusion is supplied the curve keeps
    clearance alpha/2 from it at all times.
    """
    z = np.asarray(z, dtype=float)
    t0, t1 = incl.time_span
    if not (t0 < theta < t1):
        raise ConstructionError("theta must lie strictly inside the time span")
    s_z = incl.signed_distance(z, theta)
    if abs(s_z) > max(boundary_tol, 1e-9):
        raise ConstructionError(f"seed point is not on the inclusion boundary (signed distance {s_z:.3g})")
    if epsilon <= 0 or epsilon > alpha**2:
        raise ConstructionError("need 0 < epsilon <= alpha^2")

    # cap on alpha: stay below the body-boundary gap and the motion scale
    caps = [1.0]
    times_chk = np.linspace(t0, t1, 17)
    for inc in [incl] + ([other] if other is not None else []):
        gap = np.inf
        for t in times_chk:
            for p in inc.boundary_points(t, 24):
                gap = min(gap, dom.boundary_distance(p))
        if np.isfinite(gap):
            caps.append(gap)
    if k_d is not None and k_d > 0:
        caps.append(1.0 / (2 * k_d))
    if alpha > min(caps) + 1e-12:
        raise ConstructionError(f"alpha={alpha} exceeds the admissible cap {min(caps):.4g}")

    window_times = np.linspace(t0, t1, 33)
    path = _escape_path(z, theta, incl, other, dom, alpha, window_times)
    seg = np.linalg.norm(np.diff(path, axis=0), axis=1)
    m_tilde = float(seg.sum())
    cum = np.concatenate([[0.0], np.cumsum(seg)]) / m_tilde

    def y_tilde(s):
        s = min(max(s, 0.0), 1.0)
        k = int(np.searchsorted(cum, s, side="right")) - 1
        k = min(k, len(seg) - 1)
        lam = (s - cum[k]) / (cum[k + 1] - cum[k])
        return (1 - lam) * path[k] + lam * path[k + 1]

    def y0(t):
        return y_tilde(abs(t - theta) / alpha**2)

    def y(t):
        if abs(t - theta) <= epsilon:
            return y0(theta + epsilon)
        return y0(t)

    if sample_times is None:
        sample_times = np.linspace(t0, t1, 257)
    breaks = [theta - alpha**2, theta - epsilon, theta, theta + epsilon, theta + alpha**2]
    ts = np.unique(np.clip(np.concatenate([np.asarray(sample_times, dtype=float), breaks]), t0, t1))
    pts = np.asarray([y(t) for t in ts])
    curve = ProbeCurve(ts, pts, theta=theta, alpha=alpha, epsilon=epsilon, mu=mu,
                       seed_point=z, label=f"family_eps{epsilon:g}")

    _check_family_bands(curve, incl, other, alpha, epsilon, theta, m_tilde)
    curve.bands_checked = True
    return curve


def _check_family_bands(curve, incl, other, alpha, epsilon, theta, m_tilde, rtol=1e-6):
    """Assert the four admissibility bands of the constructed family."""
    m_cap = m_tilde / alpha**2
    if curve.speed_bound() > m_cap * (1 + 1e-9):
        raise ConstructionError("curve speed exceeds the dilated path bound")
    viol = []
    for t in curve.times:
        d = incl.distance_pair(curve(t), t)[0]
        u = abs(t - theta)
        if u <= epsilon + 1e-12:
            if d > 2 * epsilon / alpha**3 * (1 + rtol) + 1e-12:
                viol.append(("near", t, d))
        elif u <= alpha**2 + 1e-12:
            lo_b = u / (2 * alpha)
            hi_b = 2 * u / alpha**3
            if not (lo_b * (1 - rtol) - 1e-12 <= d <= hi_b * (1 + rtol) + 1e-12):
                viol.append(("mid", t, d))
        else:
            if d < alpha / 2 * (1 - rtol) - 1e-12:
                viol.append(("far", t, d))
    if other is not None:
        for t in curve.times:
            if other.distance_pair(curve(t), t)[0] < alpha / 2 - 1e-9:
                viol.append(("other", t, None))
    if viol:
        raise ConstructionError(f"admissibility bands violated at {len(viol)} samples; first: {viol[0]}")

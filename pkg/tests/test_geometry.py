import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from heatprobe.geometry import (ClippedDisc, ConstructionError, ConvexPolygon,
                                Disc, Domain, Ellipse, GeometryError,
                                MovingInclusion, MovingShape, ProbeCurve,
                                build_curve_family, curve_profile,
                                inclusion_distance, validate_inclusion,
                                vitali_cover)
from heatprobe.mesh import Box


def incl_of(shape, center, span=(0.0, 1.0), **kw):
    return MovingInclusion([MovingShape(shape, [(0.0, center)], **kw)], span)


class TestInclusionDistance:
    def test_disc_center(self):
        incl = incl_of(Disc(0.15), (0.5, 0.5))
        assert inclusion_distance((0.5, 0.5), 0.3, incl) == (0.0, 0.15)

    def test_empty_slice_convention(self):
        incl = incl_of(Disc(0.1), (0.5, 0.5), active=(0.0, 0.2))
        d_in, d_out = inclusion_distance((0.5, 0.5), 0.7, incl)
        assert d_in == math.inf and d_out == 0.0

    def test_exact_disc_distance(self):
        incl = incl_of(Disc(1.0), (0.0, 0.0), span=(0.0, 1.0))
        d_in, d_out = inclusion_distance((2.0, 0.0), 0.5, incl)
        assert d_in == pytest.approx(1.0, abs=1e-14)
        assert d_out == 0.0

    def test_outside_domain_rejected(self, unit_domain):
        incl = incl_of(Disc(0.15), (0.5, 0.5))
        with pytest.raises(GeometryError):
            inclusion_distance((2.0, 0.0), 0.5, incl, unit_domain)

    def test_polygon_and_ellipse_distances(self):
        sq = ConvexPolygon([(-1, -1), (1, -1), (1, 1), (-1, 1)])
        assert sq.signed_distance(np.array([0.0, 0.0])) == pytest.approx(-1.0)
        assert sq.signed_distance(np.array([2.0, 0.0])) == pytest.approx(1.0)
        assert sq.signed_distance(np.array([2.0, 2.0])) == pytest.approx(math.sqrt(2))
        ell = Ellipse(2.0, 1.0)
        assert ell.signed_distance(np.array([3.0, 0.0])) == pytest.approx(1.0, abs=1e-10)
        assert ell.signed_distance(np.array([0.0, 2.0])) == pytest.approx(1.0, abs=1e-10)
        assert ell.signed_distance(np.array([0.0, 0.0])) == pytest.approx(-1.0, abs=1e-10)

    @settings(max_examples=60, deadline=None)
    @given(st.tuples(st.floats(0, 1), st.floats(0, 1)),
           st.tuples(st.floats(0, 1), st.floats(0, 1)),
           st.floats(0, 1))
    def test_one_lipschitz_in_space(self, p, q, t):
        incl = MovingInclusion([
            MovingShape(Disc(0.12), [(0.0, (0.35, 0.4)), (1.0, (0.55, 0.4))]),
            MovingShape(Ellipse(0.1, 0.06), [(0.0, (0.7, 0.75))]),
        ], (0.0, 1.0))
        d_p = incl.distance_pair(np.asarray(p), t)[0]
        d_q = incl.distance_pair(np.asarray(q), t)[0]
        assert abs(d_p - d_q) <= np.linalg.norm(np.asarray(p) - np.asarray(q)) + 1e-12


class TestValidateInclusion:
    def test_stationary_disc_kd_zero(self, unit_domain):
        rep = validate_inclusion(incl_of(Disc(0.15), (0.5, 0.5)), unit_domain,
                                 n_time=9, n_space=6, n_boundary=8)
        assert rep.k_d == 0.0
        assert rep.all_ok

    def test_translating_disc_kd_matches_speed(self, unit_domain):
        # oracle: difference quotients of the exact disc distance on a fine
        # time grid give K_D = |velocity| for a rigid translation
        speed = 0.3
        incl = MovingInclusion([MovingShape(
            Disc(0.1), [(0.0, (0.3, 0.5)), (1.0, (0.3 + speed, 0.5))])], (0.0, 1.0))
        rep = validate_inclusion(incl, unit_domain, n_time=65, n_space=8, n_boundary=8)
        assert 0.9 * speed <= rep.k_d <= 1.1 * speed

    def test_kd_monotone_under_nested_refinement(self, unit_domain):
        incl = MovingInclusion([MovingShape(
            Disc(0.1), [(0.0, (0.3, 0.5)), (0.5, (0.5, 0.7)), (1.0, (0.6, 0.4))])],
            (0.0, 1.0))
        kds = [validate_inclusion(incl, unit_domain, n_time=n, n_space=6,
                                  n_boundary=6).k_d for n in (9, 17, 33)]
        assert kds[0] <= kds[1] + 1e-12 <= kds[2] + 2e-12

    def test_clipped_disc_density_constant(self, unit_domain):
        # flat-boundary density ratio is exactly 1/2 in the small-radius
        # limit; the shallow clip keeps corner ratios above 0.45
        shape = ClippedDisc(0.15, (1.0, 0.0), 0.99 * 0.15)
        rep = validate_inclusion(incl_of(shape, (0.5, 0.5)), unit_domain,
                                 n_time=3, n_space=4, n_boundary=16)
        assert 0.45 <= rep.l_d <= 0.52

    def test_escape_flagged_not_raised(self):
        dom = Domain(Box((0.0, 0.0), (1.0, 1.0)))
        rep = validate_inclusion(incl_of(Disc(0.3), (0.9, 0.5)), dom,
                                 n_time=5, n_space=4, n_boundary=8)
        assert not rep.h1_ok
        assert rep.notes


class TestCurveProfile:
    def test_constant_point_exact_distance(self, static_disc):
        curve = ProbeCurve.static(np.array([0.45, 0.85]), -1.0, 2.0)
        prof = curve_profile(curve, static_disc)
        assert np.allclose(prof.d_of_t, 0.35)
        assert prof.eps_sigma == pytest.approx(0.35)

    def test_empty_inclusion_reports_no_encounter(self):
        incl = incl_of(Disc(0.1), (0.5, 0.5), active=(2.0, 3.0))
        curve = ProbeCurve.static(np.array([0.2, 0.2]), -1.0, 2.0)
        prof = curve_profile(curve, incl)
        assert not prof.met_inclusion
        assert prof.eps_sigma == math.inf

    def test_curve_clamps_outside_samples(self):
        curve = ProbeCurve(np.array([0.0, 1.0]), np.array([[0.0, 0.0], [1.0, 0.0]]))
        assert np.allclose(curve(-5.0), [0.0, 0.0])
        assert np.allclose(curve(5.0), [1.0, 0.0])

    def test_speed_bound_is_lipschitz_certificate(self):
        rng = np.random.default_rng(1)
        ts = np.sort(rng.uniform(0, 1, 12))
        ts[0], ts[-1] = 0.0, 1.0
        pts = rng.uniform(0, 1, (12, 2))
        curve = ProbeCurve(ts, pts)
        M = curve.speed_bound()
        for t in rng.uniform(0, 1, 30):
            for s in rng.uniform(0, 1, 5):
                assert np.linalg.norm(curve(t) - curve(s)) <= M * abs(t - s) + 1e-12


class TestCurveFamily:
    def test_bands_hold_and_d_theta_scales(self, unit_domain):
        incl = incl_of(Disc(0.15), (0.45, 0.35))
        z = np.array([0.45, 0.35 + 0.15])
        alpha = 0.18  # admissibility cap: the inclusion sits 0.2 from the wall
        d_thetas = {}
        for eps in (0.02, 0.01):
            curve = build_curve_family(z, 0.5, alpha, eps, incl, unit_domain)
            assert curve.bands_checked
            d_thetas[eps] = incl.distance_pair(curve(0.5), 0.5)[0]
            assert d_thetas[eps] <= 2 * eps / alpha**3 + 1e-9
            prof = curve_profile(curve, incl)
            far = prof.d_of_t[np.abs(prof.times - 0.5) >= alpha**2]
            assert np.all(far >= alpha / 2 - 1e-9)
        # halving epsilon halves the touching distance (same escape path)
        assert d_thetas[0.01] == pytest.approx(0.5 * d_thetas[0.02], rel=0.05)

    def test_avoids_second_inclusion(self, unit_domain):
        incl_a = incl_of(Disc(0.12), (0.3, 0.5))
        incl_b = incl_of(Disc(0.12), (0.72, 0.5))
        z = np.array([0.3 - 0.12, 0.5])
        alpha = 0.15
        curve = build_curve_family(z, 0.5, alpha, 0.01, incl_a, unit_domain,
                                   other=incl_b)
        # brute-force clearance audit along the returned polyline
        worst = min(incl_b.distance_pair(curve(t), t)[0]
                    for t in np.linspace(0, 1, 400))
        assert worst >= alpha / 2 - 1e-9

    def test_rejects_bad_seed_point(self, unit_domain, static_disc):
        with pytest.raises(ConstructionError):
            build_curve_family(np.array([0.9, 0.9]), 0.5, 0.2, 0.01,
                               static_disc, unit_domain)

    def test_rejects_oversized_alpha(self, unit_domain, static_disc):
        z = np.array([0.45, 0.5])
        with pytest.raises(ConstructionError):
            build_curve_family(z, 0.5, 0.9, 0.01, static_disc, unit_domain)


class TestVitaliCover:
    def test_single_small_ball_one_center(self):
        incl = incl_of(Disc(0.1), (0.5, 0.5))
        centers = vitali_cover(incl, 0.5, 10.0, audit_points=2000)
        assert len(centers) == 1

    def test_packing_and_covering_audit(self, static_disc):
        tau = 10.0
        centers = vitali_cover(static_disc, 0.5, tau, audit_points=10_000)
        if len(centers) > 1:
            d = np.linalg.norm(centers[:, None] - centers[None, :], axis=2)
            np.fill_diagonal(d, np.inf)
            assert d.min() >= 2.0 / tau - 1e-12
        # independent rejection-sampling audit with a different seed
        rng = np.random.default_rng(99)
        hits = 0
        while hits < 10_000:
            pts = rng.uniform(0.2, 0.8, size=(4000, 2))
            for p in pts:
                if static_disc.signed_distance(p, 0.5) <= 0:
                    hits += 1
                    assert np.linalg.norm(centers - p, axis=1).min() <= 3.0 / tau
                    if hits >= 10_000:
                        break

    def test_empty_slice_rejected(self):
        incl = incl_of(Disc(0.1), (0.5, 0.5), active=(0.0, 0.1))
        with pytest.raises(GeometryError):
            vitali_cover(incl, 0.9, 10.0)

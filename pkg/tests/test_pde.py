import math

import numpy as np
import pytest

from heatprobe.mesh import Box, Grid
from heatprobe.pde import (ImplicitStepper, SolverError, assemble_damped_dn,
                           boundary_flux_values, neumann_trace, solve_damped,
                           solve_heat, solve_screened)


@pytest.fixture(scope="module")
def grid64():
    return Grid(Box((0.0, 0.0), (1.0, 1.0)), 64)


@pytest.fixture(scope="module")
def grid16():
    return Grid(Box((0.0, 0.0), (1.0, 1.0)), 16)


class TestHeat:
    def test_constants_are_exact_solutions(self, grid64):
        times = np.linspace(0.0, 0.25, 33)
        bdata = np.full((33, grid64.boundary_nodes.size), 3.0)
        hist = solve_heat(np.eye(2), grid64, times, boundary=bdata,
                          v0=np.full(grid64.nnodes, 3.0))
        assert np.abs(hist - 3.0).max() < 1e-12

    def test_eigenfunction_decay(self, grid64):
        # analytic oracle: sin(pi x) sin(pi y) decays like exp(-2 pi^2 t)
        times = np.linspace(0.0, 0.125, 65)  # dt = 1/512
        x, y = grid64.nodes[:, 0], grid64.nodes[:, 1]
        v0 = np.sin(np.pi * x) * np.sin(np.pi * y)
        hist = solve_heat(np.eye(2), grid64, times, boundary=None, v0=v0)
        exact = math.exp(-2 * np.pi**2 * 0.125) * v0
        m = grid64.lumped_mass()
        err = np.sqrt(((hist[-1] - exact)**2 * m).sum() / ((exact**2 * m).sum()))
        assert err <= 0.05

    def test_maximum_principle(self, grid64):
        rng = np.random.default_rng(0)
        times = np.linspace(0.0, 0.5, 65)
        bdata = rng.uniform(0, 1, (65, grid64.boundary_nodes.size))
        v0 = rng.uniform(0, 1, grid64.nnodes)
        hist = solve_heat(np.eye(2), grid64, times, boundary=bdata, v0=v0)
        assert hist.min() >= -1e-10
        assert hist.max() <= 1.0 + 1e-10


class TestDamped:
    def test_zero_data_zero_solution(self, grid64):
        times = np.linspace(0.0, 1.0, 33)
        hist = solve_damped(np.eye(2), 8.0, grid64, times)
        assert np.abs(hist).max() == 0.0

    def test_steady_state_matches_screened(self, grid16):
        # tau^2 dt = 64 >= 50: the transient dies in a couple of steps and
        # the discrete steady state solves the screened system exactly
        tau, dt = 80.0, 0.01
        times = np.linspace(0.0, 10 * dt, 11)
        s0 = np.sin(np.pi * grid16.nodes[:, 0]) * np.sin(2 * np.pi * grid16.nodes[:, 1])
        hist = solve_damped(np.eye(2), tau, grid16, times, source=lambda n: s0)
        P = solve_screened(np.eye(2), tau, grid16, rhs_values=s0)
        gap = np.linalg.norm(hist[-1] - P) / np.linalg.norm(P)
        assert gap <= 0.10

    def test_forward_backward_duality(self, grid64):
        times = np.linspace(0, 1.0, 129)
        dt = times[1] - times[0]
        tau = 5.0
        st = ImplicitStepper(grid64, np.eye(2), tau, dt)
        rng = np.random.default_rng(3)
        fA = rng.standard_normal(grid64.nnodes)
        fB = rng.standard_normal(grid64.nnodes)
        fA[grid64.boundary_nodes] = fB[grid64.boundary_nodes] = 0.0
        srcA = lambda n: fA * np.sin(0.3 * n)
        srcB = lambda n: fB * np.cos(0.2 * n)
        wA = solve_damped(np.eye(2), tau, grid64, times, source=srcA, stepper=st)
        wB = solve_damped(np.eye(2), tau, grid64, times, source=srcB,
                          direction="backward", stepper=st)
        m = grid64.lumped_mass()
        N = 128
        lhs = dt * sum((m * srcA(n)) @ wB[n] for n in range(1, N + 1))
        rhs = dt * sum((m * srcB(n)) @ wA[n] for n in range(0, N))
        assert abs(lhs - rhs) <= 1e-8 * abs(lhs)

    def test_positivity_for_nonnegative_data(self, grid16):
        rng = np.random.default_rng(5)
        times = np.linspace(0.0, 1.0, 65)
        src = np.abs(rng.standard_normal(grid16.nnodes))
        src[grid16.boundary_nodes] = 0.0
        hist = solve_damped(np.eye(2), 6.0, grid16, times, source=lambda n: src)
        assert hist.min() >= 0.0

    def test_stepper_mismatch_rejected(self, grid16):
        times = np.linspace(0.0, 1.0, 17)
        st = ImplicitStepper(grid16, np.eye(2), 5.0, times[1] - times[0])
        with pytest.raises(SolverError):
            solve_damped(np.eye(2), 3.0, grid16, times, stepper=st)


class TestScreened:
    def test_zero_rhs(self, grid64):
        assert np.abs(solve_screened(np.eye(2), 4.0, grid64,
                                     rhs_values=np.zeros(grid64.nnodes))).max() == 0.0

    def test_l2_damping_bound(self, grid64):
        # against the exact constant solution of the free-space problem
        m = grid64.lumped_mass()
        for tau in (4.0, 12.0):
            P = solve_screened(np.eye(2), tau, grid64, rhs_values=np.ones(grid64.nnodes))
            assert tau**2 * np.sqrt((P**2 * m).sum()) <= np.sqrt(m.sum())
        # interior plateau: P -> rhs/tau^2 once the wall layer e^{-tau/2} dies
        center = grid64.node_index((32, 32))
        assert P[center] == pytest.approx(1.0 / 144.0, rel=0.02)

    def test_monotone_damping_in_tau(self, grid64):
        m = grid64.lumped_mass()
        rhs = np.ones(grid64.nnodes)
        norms = [np.sqrt((solve_screened(np.eye(2), t, grid64, rhs_values=rhs)**2
                          * m).sum()) for t in (4.0, 6.0, 9.0, 14.0)]
        assert all(b <= a for a, b in zip(norms, norms[1:]))


class TestNeumannTrace:
    def test_constant_field_zero_flux(self, grid16):
        times = np.linspace(0.0, 1.0, 5)
        hist = np.full((5, grid16.nnodes), 7.0)
        flux = neumann_trace(hist, np.eye(2), 0.0, grid16, times)
        assert np.abs(flux).max() < 1e-12

    def test_linear_profile_recovers_normal(self, grid16):
        times = np.linspace(0.0, 1.0, 3)
        hist = np.tile(grid16.nodes[:, 0], (3, 1))
        flux = neumann_trace(hist, np.eye(2), 0.0, grid16, times)
        vals = boundary_flux_values(flux, grid16)[0]
        nx = grid16.boundary_normals[grid16.boundary_nodes][:, 0]
        xb = grid16.nodes[grid16.boundary_nodes]
        corner = (np.isclose(np.abs(2 * xb[:, 0] - 1), 1)
                  & np.isclose(np.abs(2 * xb[:, 1] - 1), 1))
        assert np.abs(vals - nx)[~corner].max() < 1e-12

    def test_divergence_audit(self, grid16):
        # discrete conservation: total boundary flux = d/dt int u + tau^2 int u - int f
        tau = 3.0
        times = np.linspace(0.0, 1.0, 65)
        dt = times[1] - times[0]
        rng = np.random.default_rng(7)
        f = rng.standard_normal(grid16.nnodes)
        f[grid16.boundary_nodes] = 0.0
        src = lambda n: f * np.sin(0.1 * n)
        hist = solve_damped(np.eye(2), tau, grid16, times, source=src)
        flux = neumann_trace(hist, np.eye(2), tau, grid16, times, source=src)
        m = grid16.lumped_mass()
        for n in (1, 20, 64):
            lhs = flux[n - 1].sum()
            rhs = (m @ (hist[n] - hist[n - 1])) / dt + tau**2 * (m @ hist[n]) \
                - m @ src(n)
            assert abs(lhs - rhs) <= 1e-8 * max(1.0, abs(rhs))


class TestDampedDN:
    def test_zero_data_zero_flux(self, grid16):
        times = np.linspace(0.0, 1.0, 17)
        dn = assemble_damped_dn(np.eye(2), np.zeros(grid16.nnodes), 6.0, grid16, times)
        assert np.abs(dn.apply(None)).max() == 0.0

    def test_affine_linearity(self, grid16):
        times = np.linspace(0.0, 1.0, 17)
        rng = np.random.default_rng(11)
        v0 = rng.uniform(0, 1, grid16.nnodes)
        dn = assemble_damped_dn(np.eye(2), v0, 2.0, grid16, times)
        nb = grid16.boundary_nodes.size
        f1 = rng.standard_normal((17, nb))
        f2 = rng.standard_normal((17, nb))
        o = dn.apply(None)
        lhs = dn.apply(f1 + f2) - o
        rhs = (dn.apply(f1) - o) + (dn.apply(f2) - o)
        assert np.abs(lhs - rhs).max() <= 1e-10 * max(1.0, np.abs(lhs).max())

    def test_conjugation_to_undamped_first_order(self, grid16):
        # the damped applier equals the exponentially conjugated undamped map
        # analytically; the discrete gap is O(tau^4 dt) and must halve with dt
        tau, T = 1.0, 1.0
        rng = np.random.default_rng(13)
        v0 = rng.uniform(0, 1, grid16.nnodes)
        errs = []
        for nst in (64, 128, 256):
            times = np.linspace(0, T, nst + 1)
            f = np.sin(2 * np.pi * times)[:, None] \
                * np.cos(3 * grid16.nodes[grid16.boundary_nodes, 0])[None, :]
            dn = assemble_damped_dn(np.eye(2), v0, tau, grid16, times)
            fluxA = dn.apply(f)
            sc = np.exp(tau**2 * (times + T))
            hist = solve_heat(np.eye(2), grid16, times, boundary=f * sc[:, None], v0=v0)
            fluxB = neumann_trace(hist, np.eye(2), 0.0, grid16, times) \
                * np.exp(-tau**2 * (times[1:] + T))[:, None]
            errs.append(np.abs(fluxA - fluxB).max() / np.abs(fluxA).max())
        assert errs[-1] <= 5e-3
        for e1, e2 in zip(errs, errs[1:]):
            assert 1.6 <= e1 / e2 <= 2.4  # first-order consistency

    def test_underflow_clamps_initial_offset(self, grid16):
        times = np.linspace(0.0, 1.0, 17)
        dn = assemble_damped_dn(np.eye(2), np.full(grid16.nnodes, 1e3), 40.0,
                                grid16, times)
        assert np.all(dn.v0_damped == 0.0)

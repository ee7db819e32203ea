import numpy as np
import pytest

from heatprobe.conductivity import (BackgroundField, HypothesisError,
                                    build_conductivity, contrast_background,
                                    homogeneous_background)
from heatprobe.geometry import Disc, MovingInclusion, MovingShape
from heatprobe.mesh import Box, Grid


@pytest.fixture(scope="module")
def grid():
    return Grid(Box((0.0, 0.0), (1.0, 1.0)), 32)


@pytest.fixture(scope="module")
def disc():
    return MovingInclusion([MovingShape(Disc(0.2), [(0.0, (0.5, 0.5))])], (0.0, 1.0))


def test_double_fill_is_h0b_with_half_jump(grid, disc):
    # b - a = -I, b^{-1} - a^{-1} = I/2: the inverse clause binds
    pair = build_conductivity(homogeneous_background(2), disc, 2.0 * np.eye(2), 0.5, grid)
    assert pair.case == "H0b"
    assert pair.delta_1 == pytest.approx(0.5)
    assert pair.gamma_inf == pytest.approx(2.0)


def test_half_fill_is_h0a(grid, disc):
    pair = build_conductivity(homogeneous_background(2), disc, 0.5 * np.eye(2), 0.5, grid)
    assert pair.case == "H0a"
    assert pair.delta_1 == pytest.approx(0.5)


def test_anisotropic_background_gamma(grid, disc):
    # diag(1,2) on half of the body with a 3I fill: direct eigenvalue oracle
    bg = BackgroundField(np.eye(2), [(lambda x: x[0] > 0.5, np.diag([1.0, 2.0]))])
    pair = build_conductivity(bg, disc, 3.0 * np.eye(2), 0.5, grid)
    assert pair.gamma_inf >= 3.0
    # jump against b = I: b - a = -2I; against diag(1,2): eig(b-a) = (-2,-1)
    assert pair.case == "H0b"
    assert pair.delta_1 > 0


def test_fill_equal_background_rejected(grid, disc):
    with pytest.raises(HypothesisError):
        build_conductivity(homogeneous_background(2), disc, np.eye(2), 0.5, grid)


def test_sign_indefinite_jump_rejected(grid, disc):
    with pytest.raises(HypothesisError, match="cell"):
        build_conductivity(homogeneous_background(2), disc, np.diag([2.0, 0.5]),
                           0.5, grid)


def test_gamma_bounds_rayleigh_quotients(grid, disc):
    # contrast region kept clear of the inclusion so the jump stays one-signed
    bg = contrast_background(lambda x: x[1] < 0.2, contrast=4.0)
    pair = build_conductivity(bg, disc, 2.0 * np.eye(2), 0.5, grid)
    rng = np.random.default_rng(0)
    for _ in range(100):
        xi = rng.standard_normal(2)
        xi /= np.linalg.norm(xi)
        c = rng.integers(0, grid.ncells)
        for m in (pair.a_cells[c], pair.b_cells[c]):
            q = xi @ m @ xi
            assert 1.0 / pair.gamma_inf - 1e-12 <= q <= pair.gamma_inf + 1e-12


def test_equal_outside_inclusion(grid, disc):
    pair = build_conductivity(homogeneous_background(2), disc, 2.0 * np.eye(2), 0.5, grid)
    outside = ~pair.inclusion_mask
    assert np.array_equal(pair.a_cells[outside], pair.b_cells[outside])
    assert not np.array_equal(pair.a_cells[pair.inclusion_mask],
                              pair.b_cells[pair.inclusion_mask])


def test_near_boundary_jump_band(grid, disc):
    # the relaxed variant only certifies cells near the inclusion boundary
    pair = build_conductivity(homogeneous_background(2), disc, 2.0 * np.eye(2),
                              0.5, grid, jump_band=0.05)
    assert pair.case == "H0b"
    with pytest.raises(HypothesisError):
        build_conductivity(homogeneous_background(2), disc, 2.0 * np.eye(2),
                           0.5, grid, jump_band=1e-9)


def test_empty_inclusion_degenerates(grid):
    pair = build_conductivity(homogeneous_background(2), None, 2.0 * np.eye(2), 0.5, grid)
    assert pair.case == "none"
    assert pair.delta_1 == 0.0

import numpy as np
import pytest

from heatprobe.conductivity import build_conductivity, homogeneous_background
from heatprobe.geometry import Disc, Domain, MovingInclusion, MovingShape, ProbeCurve
from heatprobe.mesh import Box, SpaceTimeMesh


@pytest.fixture(scope="session")
def unit_domain():
    return Domain(Box((0.0, 0.0), (1.0, 1.0)))


@pytest.fixture(scope="session")
def static_disc():
    return MovingInclusion([MovingShape(Disc(0.15), [(0.0, (0.45, 0.35))])], (0.0, 1.0))


@pytest.fixture(scope="session")
def small_stm():
    """Coarse space-time mesh for cheap structural tests."""
    return SpaceTimeMesh(Box((0.0, 0.0), (1.0, 1.0)), 24, horizon=1.0,
                         nsteps_horizon=32, margin=0.25)


@pytest.fixture(scope="session")
def desk_stm():
    """Desk-scale mesh shared by the heavier numerical tests."""
    return SpaceTimeMesh(Box((0.0, 0.0), (1.0, 1.0)), 64, horizon=1.0,
                         nsteps_horizon=128, margin=0.5)


@pytest.fixture(scope="session")
def h0b_pair(static_disc, desk_stm):
    bg = homogeneous_background(2)
    return build_conductivity(bg, static_disc, 2.0 * np.eye(2), 0.5, desk_stm.grid)


@pytest.fixture(scope="session")
def far_curve():
    return ProbeCurve.static(np.array([0.45, 0.85]), -1.0, 2.0, theta=0.5,
                             label="far035")

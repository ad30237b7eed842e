import math

import numpy as np
import pytest

from demagopt import fem, geometry, machine, materials, optimizer
from demagopt.penalty import PenaltyConfig


@pytest.fixture(scope="session")
def coarse_geom():
    return geometry.SectorGeometry(h=0.004)


@pytest.fixture(scope="session")
def coarse_mesh(coarse_geom):
    return geometry.generate_sector_mesh(coarse_geom)


@pytest.fixture(scope="session")
def coarse_space(coarse_mesh):
    cons = fem.build_constraints(coarse_mesh)
    return fem.FemSpace(coarse_mesh, cons)


@pytest.fixture(scope="session")
def matset_linear():
    return materials.MaterialSet(magnet_law="linear")


@pytest.fixture(scope="session")
def matset_nonlinear():
    return materials.MaterialSet(magnet_law="nonlinear")


# winding that actually produces torque (60-degree belts over one pole)
BELT_PATTERN = (("A", -1), ("A", -1), ("C", 1), ("C", 1), ("B", -1), ("B", -1))


@pytest.fixture(scope="session")
def belt_source():
    return machine.SourceConfig(phase_pattern=BELT_PATTERN)


def uniform_assignment(mesh, law):
    code, row = law.code_params()
    n = mesh.n_triangles
    codes = np.full(n, code, dtype=np.int8)
    params = np.broadcast_to(row, (n, materials.PARAM_WIDTH)).copy()
    return codes, params

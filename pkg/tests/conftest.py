import numpy as np
import pytest

from sofo._jit import HAS_NUMBA
from sofo.engine import AlgorithmConfig, World
from sofo.model import ComplianceModel, DisturbanceGenerator, MeasurementModel, PhiDistribution, PlantModel
from sofo.objectives import StageObjective
from sofo.projections import Ball

BACKENDS = ["numpy"] + (["numba"] if HAS_NUMBA else [])


def toy_plant(r=(2.0, 1.0)):
    return PlantModel(np.diag([-1.0, -2.0]), np.eye(2), DisturbanceGenerator.constant(r))


@pytest.fixture
def toy():
    """C = diag(-1,-2), D r = [2,1], phi ~ U[0,1], g_y = ||y||^2, g_x = 0."""
    comp = ComplianceModel.diagonal(2, PhiDistribution("uniform", 0.0, 1.0))
    world = World(comp, toy_plant(), MeasurementModel())
    obj = StageObjective.from_weights(np.eye(2), np.zeros((2, 2)))
    return world, obj


@pytest.fixture
def ball3():
    return Ball(np.zeros(2), 3.0)


@pytest.fixture(params=BACKENDS)
def backend(request):
    return request.param


def algo(alpha=2e-3, eta=0.0, variant="sofo", horizon=100, recovery="exact"):
    return AlgorithmConfig(alpha, eta, variant, horizon, recovery)

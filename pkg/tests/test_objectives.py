import numpy as np
import pytest

from sofo.model import ComplianceModel, DisturbanceGenerator, PhiDistribution, PlantModel
from sofo.objectives import QuadraticForm, StageObjective, expected_gradient, expected_quadratic, grad_gx, grad_gy
from sofo.rng import RandomStream

from conftest import toy_plant


class TestGradients:
    def test_grad_gy_identity(self):
        obj = StageObjective.from_weights(np.eye(2), np.zeros((2, 2)))
        np.testing.assert_array_equal(grad_gy(obj, [1.0, 2.0], 0), [2, 4])
        np.testing.assert_array_equal(grad_gy(obj, [0.0, 0.0], 0), [0, 0])

    def test_grad_gy_voltage_weights(self):
        obj = StageObjective.from_weights(np.diag([8.0, 8.0]), np.zeros((2, 2)), y_ref=[1.0, 1.0])
        np.testing.assert_allclose(grad_gy(obj, [1.05, 0.95], 0), [0.8, -0.8])

    def test_grad_gx(self):
        obj = StageObjective.from_weights(np.eye(2), np.diag([4.0, 1.0]), x_ref=[2.0, 0.0])
        np.testing.assert_array_equal(grad_gx(obj, [1.0, 1.0], 0), [-8, 2])
        np.testing.assert_array_equal(grad_gx(obj, [2.0, 0.0], 0), [0, 0])
        zero = StageObjective.from_weights(np.eye(2), np.zeros((2, 2)))
        np.testing.assert_array_equal(grad_gx(zero, [5.0, -1.0], 0), [0, 0])

    def test_shape_checks(self):
        obj = StageObjective.from_weights(np.eye(2), np.zeros((2, 2)))
        with pytest.raises(ValueError):
            grad_gy(obj, [1.0, 2.0, 3.0], 0)

    def test_scheduled_reference(self):
        q = QuadraticForm(np.eye(1), np.array([[0.0], [1.0]]))
        np.testing.assert_array_equal(q.grad([1.0], 1), [0.0])
        with pytest.raises(IndexError):
            q.ref_at(2)

    def test_weight_validation(self):
        with pytest.raises(ValueError):
            QuadraticForm([[1.0, 1.0], [0.0, 1.0]])
        with pytest.raises(ValueError):
            QuadraticForm(-np.eye(2))
        with pytest.raises(ValueError):
            StageObjective.from_weights(np.eye(1), np.eye(1), eta=-1.0)

    def test_semidefinite_flag(self):
        obj = StageObjective.from_weights(np.eye(2), np.zeros((2, 2)))
        assert obj.semidefinite == ("g_x",)
        assert obj.mu_y == 2.0


class TestExpectedGradient:
    def setup_method(self):
        self.comp = ComplianceModel.diagonal(2, PhiDistribution())
        self.plant = toy_plant()
        self.obj = StageObjective.from_weights(np.eye(2), np.zeros((2, 2)))

    def test_closed_form_point(self):
        np.testing.assert_allclose(expected_gradient(self.obj, self.comp, self.plant, [3.0, 3.0], 0), [0, 6], atol=1e-12)

    def test_stationary_at_minimizer(self):
        np.testing.assert_allclose(expected_gradient(self.obj, self.comp, self.plant, [3.0, 0.75], 0), [0, 0], atol=1e-12)

    def test_matches_monte_carlo(self):
        u = np.array([1.3, -0.4])
        phi = self.comp.sample_phi(RandomStream(0), 200_000)
        x = phi * u
        y = x @ self.plant.C.T + np.array([2.0, 1.0])
        g = phi * ((2.0 * y) @ self.plant.C)
        mc = g.mean(axis=0)
        se = g.std(axis=0) / np.sqrt(len(g))
        exact = expected_gradient(self.obj, self.comp, self.plant, u, 0)
        assert np.all(np.abs(mc - exact) < 4 * se)

    def test_identity_reduces_to_deterministic(self):
        obj = StageObjective.from_weights(np.eye(2), np.diag([1.0, 2.0]), x_ref=[0.5, 0.5])
        u = np.array([0.2, -1.0])
        y = self.plant.C @ u + np.array([2.0, 1.0])
        direct = self.plant.C.T @ obj.g_y.grad(y, 0) + obj.g_x.grad(u, 0)
        np.testing.assert_allclose(expected_gradient(obj, ComplianceModel.identity(2), self.plant, u, 0), direct)

    def test_value_finite_difference(self):
        eq = expected_quadratic(StageObjective.from_weights(np.eye(2), np.eye(2), eta=0.3), self.comp, self.plant)
        u = np.array([0.7, -0.2])
        h = 1e-6
        fd = [(eq.value(u + h * e, 0) - eq.value(u - h * e, 0)) / (2 * h) for e in np.eye(2)]
        np.testing.assert_allclose(eq.gradient(u, 0), fd, atol=1e-6)

    def test_value_matches_monte_carlo(self):
        eq = expected_quadratic(self.obj, self.comp, self.plant)
        u = np.array([1.0, 2.0])
        phi = self.comp.sample_phi(RandomStream(7), 400_000)
        y = (phi * u) @ self.plant.C.T + np.array([2.0, 1.0])
        np.testing.assert_allclose(eq.value(u, 0), np.mean(np.sum(y**2, axis=1)), rtol=5e-3)

    def test_time_varying_linear_terms(self):
        plant = PlantModel(np.eye(1), np.eye(1), DisturbanceGenerator.from_table([[0.0], [1.0], [2.0]]))
        eq = expected_quadratic(StageObjective.from_weights(np.eye(1), np.zeros((1, 1))), ComplianceModel.identity(1), plant)
        np.testing.assert_allclose(eq.linear_terms(3)[:, 0], [0.0, 2.0, 4.0])

import numpy as np
import pytest

from sofo.model import (
    ComplianceModel,
    DisturbanceGenerator,
    MeasurementModel,
    PhiDistribution,
    PlantModel,
    UnsupportedMomentsError,
    compliance_moments,
    measure,
    plant_output,
    sample_compliance,
    sigma_delta,
    square_wave,
    triangle_wave,
)
from sofo.rng import RandomStream


class TestPhiDistribution:
    def test_uniform_moments(self):
        p = PhiDistribution("uniform", 0.0, 1.0)
        assert p.mean == 0.5
        np.testing.assert_allclose(p.second_moment, 1 / 3)

    def test_beta_shifted_mean(self):
        p = PhiDistribution("beta", -0.5, 1.0, 4.0, 2.0)
        np.testing.assert_allclose(p.mean, -0.5 + 1.5 * 4 / 6)
        draws = p.sample(RandomStream(3), 100_000)
        assert abs(draws.mean() - 0.5) < 0.01
        assert draws.min() >= -0.5 and draws.max() <= 1.0

    def test_beta_second_moment_matches_sampling(self):
        p = PhiDistribution("beta", -1.0, 1.0, 2.0, 4.0)
        draws = p.sample(RandomStream(4), 200_000)
        np.testing.assert_allclose(np.mean(draws**2), p.second_moment, atol=5e-3)

    @pytest.mark.parametrize("kw", [dict(kind="normal"), dict(lo=1.0, hi=0.0), dict(kind="beta", a=0.0)])
    def test_rejects_invalid(self, kw):
        with pytest.raises(ValueError):
            PhiDistribution(**kw)


class TestCompliance:
    def test_identity_draw(self):
        A, b = sample_compliance(ComplianceModel.identity(3), RandomStream(0))
        np.testing.assert_array_equal(A, np.eye(3))
        np.testing.assert_array_equal(b, np.zeros(3))

    def test_diagonal_uniform_mean(self):
        m = ComplianceModel.diagonal(2, PhiDistribution())
        A, _ = m.sample_many(RandomStream(1), 100_000)
        np.testing.assert_allclose(A.mean(axis=0), np.diag([0.5, 0.5]), atol=0.01)

    def test_moments_identity(self):
        Abar, bbar, S = compliance_moments(ComplianceModel.identity(2))
        np.testing.assert_array_equal(Abar, np.eye(2))
        np.testing.assert_array_equal(S, np.ones((2, 2)))

    def test_moments_uniform(self):
        Abar, _, S = compliance_moments(ComplianceModel.diagonal(2, PhiDistribution()))
        np.testing.assert_allclose(Abar, 0.5 * np.eye(2))
        np.testing.assert_allclose(np.diag(S), [1 / 3, 1 / 3])
        np.testing.assert_allclose(S[0, 1], 0.25)

    def test_moments_symmetric_support(self):
        Abar, _, S = compliance_moments(ComplianceModel.diagonal(2, PhiDistribution("uniform", -1.0, 1.0)))
        np.testing.assert_allclose(Abar, 0.0)
        np.testing.assert_allclose(np.diag(S), [1 / 3, 1 / 3])

    def test_inactive_coordinates_comply(self):
        m = ComplianceModel.diagonal(3, PhiDistribution(), active=[True, False, True])
        phi = m.sample_phi(RandomStream(2), 50)
        np.testing.assert_array_equal(phi[:, 1], 1.0)
        np.testing.assert_allclose(m.mean_diag(), [0.5, 1.0, 0.5])

    def test_affine_without_moments(self):
        m = ComplianceModel(2, "affine", sampler=lambda r: (np.eye(2), np.zeros(2)), sup_norm=1.0)
        A, b = sample_compliance(m, RandomStream(0))
        np.testing.assert_array_equal(A, np.eye(2))
        with pytest.raises(UnsupportedMomentsError):
            compliance_moments(m)

    def test_draws_are_reproducible(self):
        m = ComplianceModel.diagonal(2, PhiDistribution())
        np.testing.assert_array_equal(m.sample_phi(RandomStream(9), 10), m.sample_phi(RandomStream(9), 10))


class TestDisturbance:
    def test_constant(self):
        d = DisturbanceGenerator.constant([2, 1])
        np.testing.assert_array_equal(d.values(3), [[2, 1]] * 3)
        assert d.total_length is None

    def test_waves(self):
        th = np.array([0.5, 2.0, 4.0])
        np.testing.assert_array_equal(square_wave(th), [1, 1, -1])
        assert np.all(np.abs(triangle_wave(np.linspace(0, 20, 200))) <= 1 + 1e-12)

    def test_segments_partition_horizon(self):
        d = DisturbanceGenerator.even_segments(["sine", "square", "triangle"], [1e-3, 2e-3], [[1, 2], [3, 4], [5, 6]], 100)
        assert d.total_length == 100
        assert sum(s.length for s in d.segments) == 100
        v = d.values(100)
        np.testing.assert_allclose(v[0], [np.sin(1e-3), 2 * np.sin(2e-3)])
        np.testing.assert_allclose(np.abs(v[40]), [3, 4])
        with pytest.raises(IndexError):
            d.values(1, start=100)

    def test_values_slice_matches_full(self):
        d = DisturbanceGenerator.even_segments(["square", "sine"], [0.01], [[2], [3]], 50)
        np.testing.assert_array_equal(d.values(10, start=20), d.values(50)[20:30])

    def test_table(self):
        tab = np.arange(6.0).reshape(3, 2)
        d = DisturbanceGenerator.from_table(tab)
        np.testing.assert_array_equal(d.at(1), [2, 3])
        np.testing.assert_allclose(d.sup_norm(), np.hypot(4, 5))


class TestPlant:
    def test_identity_plant(self):
        p = PlantModel(np.eye(2), np.eye(2), DisturbanceGenerator.constant([0, 0]))
        np.testing.assert_array_equal(plant_output(p, [1, 2], 0), [1, 2])

    def test_arithmetic(self):
        p = PlantModel(np.diag([-1, -2]), np.eye(2), DisturbanceGenerator.constant([2, 1]))
        np.testing.assert_array_equal(plant_output(p, [3, 3], 0), [-1, -5])

    def test_zero_C(self):
        p = PlantModel(np.zeros((2, 2)), np.eye(2), DisturbanceGenerator.constant([2, 1]))
        np.testing.assert_array_equal(plant_output(p, [7, -3], 5), [2, 1])

    def test_dimension_checks(self):
        with pytest.raises(ValueError):
            PlantModel(np.eye(2), np.eye(3), DisturbanceGenerator.constant([1, 1, 1]))
        with pytest.raises(ValueError):
            PlantModel(np.eye(2), np.eye(2), DisturbanceGenerator.constant([1, 1, 1]))

    def test_sigma_delta(self):
        p = PlantModel(np.eye(2), np.eye(2), DisturbanceGenerator.constant([3, 4]))
        assert sigma_delta(ComplianceModel.identity(2), p) == 5.0


class TestMeasurement:
    def test_noiseless(self):
        x, y = np.array([1.0, 2.0]), np.array([3.0])
        xh, yh = measure(MeasurementModel(), x, y, RandomStream(0))
        np.testing.assert_array_equal(xh, x)
        np.testing.assert_array_equal(yh, y)
        assert MeasurementModel().epsilon_m == 0.0

    def test_gaussian_y_mean_square(self):
        m = MeasurementModel(y_cov=np.eye(3))
        _, wy = m.draw(RandomStream(1), RandomStream(2), 100_000, 2, 3)
        np.testing.assert_allclose(np.mean(np.sum(wy**2, axis=1)), 3.0, rtol=0.02)

    def test_x_exact_when_only_y_noisy(self):
        m = MeasurementModel(y_cov=0.1 * np.eye(2))
        x = np.array([0.3, -0.2])
        xh, yh = measure(m, x, np.zeros(2), RandomStream(5))
        np.testing.assert_array_equal(xh, x)
        assert not np.allclose(yh, 0.0)

    def test_epsilon_m_fourth_moment(self):
        cov = np.diag([1.0, 2.0])
        m = MeasurementModel(y_cov=cov)
        w = m.draw(RandomStream(0), RandomStream(1), 400_000, 1, 2)[1]
        emp = np.mean(np.sum(w**2, axis=1) ** 2) ** 0.25
        np.testing.assert_allclose(m.epsilon_m, emp, rtol=0.01)
        assert MeasurementModel(y_cov=cov, declared_epsilon_m=0.3).epsilon_m == 0.3

    def test_rejects_bad_covariance(self):
        with pytest.raises(ValueError):
            MeasurementModel(y_cov=[[1.0, 2.0], [0.0, 1.0]])
        with pytest.raises(ValueError):
            MeasurementModel(y_cov=-np.eye(2))

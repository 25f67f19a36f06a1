import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sofo import kernels as K
from sofo.projections import Ball, Box, InfeasibleSetError, Intersection, InverterDisks, dykstra, project, uniform_bound
from sofo.rng import RandomStream

from oracles import feasible_samples, grid_project, vi_violation

SETS = {
    "ball": Ball(np.array([0.5, -0.5]), 2.0),
    "box": Box([-1.0, -2.0], [1.0, 2.0]),
    "inverter": InverterDisks([1.0], [0.6]),
    "intersection": Intersection((Ball(np.zeros(2), 1.5), Box([-1.0, -2.0], [2.0, 0.5]))),
}

points = arrays(np.float64, 2, elements=st.floats(-10, 10, allow_nan=False))


class TestExamples:
    def test_ball_interior(self):
        np.testing.assert_array_equal(project(Ball(np.zeros(2), 3.0), [1.0, 1.0]), [1, 1])

    def test_ball_radial(self):
        np.testing.assert_allclose(project(Ball(np.zeros(2), 3.0), [6.0, 0.0]), [3, 0])

    def test_inverter_face(self):
        np.testing.assert_allclose(project(InverterDisks([1.0], [1.0]), [-1.0, 0.0]), [0, 0])

    def test_inverter_corner_vs_grid(self):
        s = InverterDisks([1.0], [0.6])
        np.testing.assert_allclose(s.project([1.0, 1.0]), grid_project(s, np.array([1.0, 1.0])), atol=1e-3)

    def test_inverter_zero_pbar_is_segment(self):
        s = InverterDisks([1.0], [0.0])
        np.testing.assert_allclose(s.project([0.4, 2.0]), [0.0, 1.0])

    def test_inverter_pbar_above_rating(self):
        s = InverterDisks([1.0], [5.0])
        np.testing.assert_allclose(s.project([3.0, 4.0]), [0.6, 0.8])

    def test_bounds(self):
        assert uniform_bound(Ball(np.zeros(2), 3.0)) == 3.0
        np.testing.assert_allclose(uniform_bound(InverterDisks([2.0] * 6, [1.0] * 6)), 2.0 * np.sqrt(6))
        np.testing.assert_allclose(uniform_bound(Box([-1.0, -2.0], [1.0, 2.0])), np.sqrt(5))

    def test_intersection_bound_is_conservative(self):
        s = SETS["intersection"]
        V = feasible_samples(s, 5000, RandomStream(0))
        assert np.linalg.norm(V, axis=1).max() <= s.bound() + 1e-12


class TestErrors:
    def test_negative_pbar(self):
        with pytest.raises(InfeasibleSetError):
            InverterDisks([1.0, 1.0], [[0.5, 0.5], [0.2, -0.1]])

    def test_empty_intersection(self):
        s = Intersection((Ball(np.zeros(2), 1.0), Ball(np.array([5.0, 0.0]), 1.0)))
        with pytest.raises(InfeasibleSetError):
            s.project(np.zeros(2))

    def test_bad_box(self):
        with pytest.raises((InfeasibleSetError, ValueError)):
            Box([1.0], [0.0])

    def test_shape_check(self):
        with pytest.raises(ValueError):
            Ball(np.zeros(2), 1.0).project([1.0, 2.0, 3.0])

    def test_schedule_end(self):
        s = InverterDisks([1.0], [[0.5], [0.4]])
        np.testing.assert_allclose(s.project([1.0, 0.0], n=1), [0.4, 0.0])
        with pytest.raises(IndexError):
            s.project([1.0, 0.0], n=2)


@pytest.mark.parametrize("name", sorted(SETS))
class TestProperties:
    @settings(max_examples=60, deadline=None)
    @given(u=points)
    def test_feasible_and_idempotent(self, name, u):
        s = SETS[name]
        p = s.project(u)
        assert s.contains(p, tol=1e-8)
        np.testing.assert_allclose(s.project(p), p, atol=1e-8)

    @settings(max_examples=60, deadline=None)
    @given(u=points, v=points)
    def test_nonexpansive(self, name, u, v):
        s = SETS[name]
        assert np.linalg.norm(s.project(u) - s.project(v)) <= np.linalg.norm(u - v) + 1e-7

    def test_grid_oracle_and_vi(self, name):
        s = SETS[name]
        rng = RandomStream(11)
        V = feasible_samples(s, 4000, rng)
        lo, hi = s.bounding_box()
        for u in rng.uniform(lo - 1.5, hi + 1.5, (15, 2)):
            p = s.project(u)
            np.testing.assert_allclose(p, grid_project(s, u), atol=1e-3)
            assert vi_violation(s, u, p, V) <= 1e-9


class TestDykstra:
    def test_matches_closed_form_inverter(self):
        # disk cap halfplanes reproduces the inverter projection
        inv = InverterDisks([1.0], [0.6])
        parts = (Ball(np.zeros(2), 1.0), Box([0.0, -10.0], [0.6, 10.0]))
        for u in RandomStream(3).uniform(-2, 2, (50, 2)):
            np.testing.assert_allclose(dykstra(parts, u), inv.project(u), atol=1e-7)

    def test_kernel_batch_matches_scalar(self):
        s = InverterDisks([1.0, 0.5, 2.0], [0.6, 0.0, 3.0])
        U = RandomStream(4).uniform(-3, 3, (200, 6))
        batch = K.project_batch_np(U, K.INVERTER, None, None, None, None, s.smax, s.pbar)
        np.testing.assert_allclose(batch, np.array([s.project(u) for u in U]), atol=0)

    def test_contains_many_matches_contains(self):
        U = RandomStream(5).uniform(-3, 3, (300, 2))
        for s in SETS.values():
            np.testing.assert_array_equal(s.contains_many(U), [s.contains(u) for u in U])

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pdm2.bench import TABLE_I_N, TABLE_I_V, TABLE_I_XR
from pdm2.errors import DegeneratePoints, InvalidParameter
from pdm2.geometry import (Edge, Rotation, angle_between, fit_direction, make_edge,
                           point_edge_distance, point_on_edge_residual, recover_point,
                           rotate_about, rotation_matrix, unit, wrap_angle)

seeds = st.integers(0, 2 ** 32 - 1)
PROP = settings(max_examples=100, deadline=None)


def rand_unit(rng):
    return unit(rng.normal(size=3))


def line_points(rng, k=10):
    p0 = rng.uniform(-50, 50, 3)
    q = rand_unit(rng)
    return p0, q, p0 + np.outer(rng.uniform(-20, 20, k), q)


class TestRecoverPoint:
    def test_examples(self):
        np.testing.assert_allclose(recover_point((0, 0, 0), 10, (0, 1, 0)), (0, 10, 0))
        np.testing.assert_allclose(recover_point((0, 0, 0), 10, TABLE_I_V),
                                   (0.656, 9.955, -0.678), atol=1e-12)

    def test_zero_depth_rejected(self):
        with pytest.raises(InvalidParameter):
            recover_point((1, 2, 3), 0.0, (0, 1, 0))


class TestFitDirection:
    def test_examples(self):
        np.testing.assert_allclose(fit_direction([(0, 0, 0), (0, 1, 0), (0, 2, 0)]), (0, 1, 0),
                                   atol=1e-15)
        np.testing.assert_allclose(fit_direction([(0, 0, 0), (3, 4, 0)]), (0.6, 0.8, 0), atol=1e-15)

    def test_degenerate(self):
        with pytest.raises(DegeneratePoints):
            fit_direction([(1, 1, 1), (1, 1, 1)])
        with pytest.raises(DegeneratePoints):
            fit_direction([(1, 1, 1)])

    def test_noisy_line_accuracy(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            p0, q, pts = line_points(rng, 50)
            pts = pts + rng.normal(0, 0.01, pts.shape)
            assert np.degrees(angle_between(fit_direction(pts), q, oriented=False)) < 0.1

    @pytest.mark.invariant
    @PROP
    @given(seeds)
    def test_invariances(self, seed):
        rng = np.random.default_rng(seed)
        _, _, pts = line_points(rng, 8)
        pts = pts + rng.normal(0, 0.5, pts.shape)
        u = fit_direction(pts)
        np.testing.assert_allclose(fit_direction(pts[rng.permutation(len(pts))]), u, atol=1e-9)
        np.testing.assert_allclose(fit_direction(pts + rng.uniform(-100, 100, 3)), u, atol=1e-9)
        c = pts.mean(axis=0)
        np.testing.assert_allclose(fit_direction(c + rng.uniform(0.1, 10) * (pts - c)), u,
                                   atol=1e-9)
        # minimizes the perpendicular scatter against random trial directions
        cost = lambda w: np.sum(np.cross(pts - c, w) ** 2)  # noqa: E731
        assert all(cost(u) <= cost(rand_unit(rng)) + 1e-9 for _ in range(5))


class TestEdges:
    def test_examples(self):
        e = make_edge([(0, 0, -1), (0, 0, 0), (0, 0, 2)])
        np.testing.assert_allclose(e.q, (0, 0, 1))
        np.testing.assert_allclose(e.m, (0, 0, 0), atol=1e-15)
        e = make_edge([(1, -1, 0), (1, 0, 0), (1, 3, 0)])
        np.testing.assert_allclose(e.q, (0, 1, 0))
        np.testing.assert_allclose(e.m, (0, 0, 1), atol=1e-15)

    def test_plucker_validation(self):
        with pytest.raises(InvalidParameter):
            Edge((0, 0, 1), (0, 0, 1))
        with pytest.raises(InvalidParameter):
            Edge((0, 0, 2), (0, 0, 0))

    def test_distance_examples(self):
        e = Edge((0, 0, 1), (0, 0, 0))
        assert point_edge_distance(e, (1, 0, 5)) == pytest.approx(1.0)
        np.testing.assert_allclose(point_on_edge_residual(e, (0, 0, 7)), 0.0)

    def test_noisy_filament(self):
        rng = np.random.default_rng(2)
        sigma = 0.05
        p0, q, pts = line_points(rng, 40)
        noisy = pts + rng.normal(0, sigma, pts.shape)
        e = make_edge(noisy)
        rms = np.sqrt(np.mean(point_edge_distance(e, noisy) ** 2))
        assert rms < 2 * sigma

    @pytest.mark.invariant
    @PROP
    @given(seeds)
    def test_plucker_constraint_and_distance_oracle(self, seed):
        rng = np.random.default_rng(seed)
        _, _, pts = line_points(rng, int(rng.integers(2, 12)))
        e = make_edge(pts + rng.normal(0, 0.3, pts.shape))
        assert abs(e.q @ e.m) <= 1e-9
        p = rng.uniform(-80, 80, 3)
        oracle = np.linalg.norm(np.cross(p - e.point, e.q))
        assert point_edge_distance(e, p) == pytest.approx(oracle, rel=1e-12, abs=1e-12)

    @pytest.mark.invariant
    @PROP
    @given(seeds, st.floats(-np.pi, np.pi))
    def test_refit_after_rotation(self, seed, theta):
        rng = np.random.default_rng(seed)
        _, q, pts = line_points(rng, 6)
        rot = Rotation(rand_unit(rng), theta)
        c = rng.uniform(-10, 10, 3)
        moved = np.array([rotate_about(rot, c, p) for p in pts])
        q2 = make_edge(moved).q
        rq = rotation_matrix(rot.axis, rot.angle) @ q
        assert min(np.linalg.norm(q2 - rq), np.linalg.norm(q2 + rq)) < 1e-9


class TestRotation:
    def test_examples(self):
        p = np.array([3.0, -2.0, 7.0])
        np.testing.assert_allclose(rotate_about(Rotation((0, 0, 1), 0.0), (5, 5, 5), p), p)
        np.testing.assert_allclose(rotate_about(Rotation((0, 0, 1), np.pi), (0, 0, 0), (1, 0, 0)),
                                   (-1, 0, 0), atol=1e-15)
        rot = Rotation(TABLE_I_N, np.pi)
        twice = rotate_about(rot, TABLE_I_XR, rotate_about(rot, TABLE_I_XR, p))
        np.testing.assert_allclose(twice, p, atol=1e-9)

    def test_angle_wrap(self):
        assert Rotation((0, 0, 1), 3 * np.pi).angle == pytest.approx(np.pi)
        assert Rotation((0, 0, 1), -np.pi).angle == pytest.approx(np.pi)
        assert wrap_angle(-np.pi / 2) == pytest.approx(-np.pi / 2)

    @pytest.mark.invariant
    @PROP
    @given(seeds, st.floats(-np.pi, np.pi), st.floats(-np.pi, np.pi))
    def test_isometry_and_composition(self, seed, t1, t2):
        rng = np.random.default_rng(seed)
        n = rand_unit(rng)
        c = rng.uniform(-300, 300, 3)
        a, b = rng.uniform(-300, 300, (2, 3))
        ra, rb = (rotate_about(Rotation(n, t1), c, x) for x in (a, b))
        assert np.linalg.norm(ra - rb) == pytest.approx(np.linalg.norm(a - b), rel=1e-12)
        composed = rotate_about(Rotation(n, t2), c, rotate_about(Rotation(n, t1), c, a))
        np.testing.assert_allclose(composed, rotate_about(Rotation(n, t1 + t2), c, a), atol=1e-9)

    @PROP
    @given(seeds, st.floats(-np.pi, np.pi))
    def test_matrix_matches_scipy(self, seed, theta):
        from scipy.spatial.transform import Rotation as SR
        n = rand_unit(np.random.default_rng(seed))
        np.testing.assert_allclose(rotation_matrix(n, theta),
                                   SR.from_rotvec(theta * n).as_matrix(), atol=1e-12)

    @PROP
    @given(seeds, st.floats(-np.pi, np.pi))
    def test_edge_transform(self, seed, theta):
        rng = np.random.default_rng(seed)
        _, _, pts = line_points(rng, 3)
        rot, c = Rotation(rand_unit(rng), theta), rng.uniform(-10, 10, 3)
        e2 = make_edge(pts).transformed(rot, c)
        for p in pts:
            assert point_edge_distance(e2, rotate_about(rot, c, p)) < 1e-9

import numpy as np
import pytest

from crossalign.errors import (
    DegenerateConfiguration,
    InsufficientCorrespondences,
    NonPositiveDepth,
)
from crossalign.geometry import (
    Extrinsics,
    Intrinsics,
    ProjectionMatrix,
    geodesic_rotation_error,
    project,
    solve_pnp,
)

from helpers import (
    make_intrinsics,
    project_oracle,
    projection_for,
    random_camera,
    random_rotation,
    rot_z,
)


def scene_points(rng, n=24, spread=2.0, center=(0.0, 0.0, 0.0)):
    return np.asarray(center) + rng.uniform(-spread, spread, size=(n, 3))


class TestIntrinsics:
    def test_matrix_layout(self):
        k = make_intrinsics(800.0, 820.0, 310.0, 245.0, 640, 480)
        assert np.allclose(
            k.matrix, [[800.0, 0.0, 310.0], [0.0, 820.0, 245.0], [0.0, 0.0, 1.0]]
        )

    def test_rejects_bad_values(self):
        with pytest.raises(ValueError):
            make_intrinsics(fx=-1.0)
        with pytest.raises(ValueError):
            make_intrinsics(cx=5000.0)


class TestExtrinsics:
    def test_rejects_non_rotation(self):
        with pytest.raises(ValueError):
            Extrinsics(np.eye(3) * 2.0, np.zeros(3))
        with pytest.raises(ValueError):
            Extrinsics(np.diag([1.0, 1.0, -1.0]), np.zeros(3))

    def test_matrix_is_k_r_t(self):
        rng = np.random.default_rng(3)
        rot = random_rotation(rng)
        t = rng.normal(size=3)
        k = make_intrinsics()
        p = ProjectionMatrix.from_camera(k, Extrinsics(rot, t))
        assert np.allclose(p.values, k.matrix @ np.hstack([rot, t[:, None]]), atol=1e-12)


class TestProject:
    def test_axis_aligned_pinhole(self):
        k = Intrinsics(fx=100.0, fy=100.0, cx=0.0, cy=0.0, width=200, height=200)
        p = projection_for(k, Extrinsics.identity())
        assert np.allclose(project(p, np.array([1.0, 0.0, 1.0])), [100.0, 0.0])

    def test_optical_axis_maps_to_principal_point(self):
        k = make_intrinsics()
        p = projection_for(k, Extrinsics.identity())
        for depth in (0.1, 1.0, 57.0):
            assert np.allclose(project(p, np.array([0.0, 0.0, depth])), [k.cx, k.cy])

    def test_matches_homogeneous_oracle(self):
        rng = np.random.default_rng(7)
        k = make_intrinsics()
        for _ in range(50):
            extr = random_camera(rng)
            p = projection_for(k, extr)
            pt = scene_points(rng, n=1)[0]
            assert np.allclose(project(p, pt), project_oracle(p.values, pt), atol=1e-10)

    def test_scaled_homogeneous_representation_is_equivalent(self):
        # Perspective division cancels any scale on the 3x4 matrix.
        rng = np.random.default_rng(11)
        k = make_intrinsics()
        for _ in range(20):
            extr = random_camera(rng)
            p = projection_for(k, extr)
            pt = scene_points(rng, n=1)[0]
            s = rng.uniform(0.1, 10.0) * rng.choice([-1.0, 1.0])
            assert np.allclose(
                project(p, pt), project_oracle(s * p.values, pt), atol=1e-9
            )

    def test_behind_camera_raises(self):
        k = make_intrinsics()
        p = projection_for(k, Extrinsics.identity())
        with pytest.raises(NonPositiveDepth):
            project(p, np.array([0.0, 0.0, -1.0]))
        with pytest.raises(NonPositiveDepth):
            project(p, np.array([[0.0, 0.0, 2.0], [0.0, 0.0, 0.0]]))


class TestGeodesicRotationError:
    def test_identity(self):
        assert geodesic_rotation_error(np.eye(3), np.eye(3)) == 0.0

    def test_quarter_turn(self):
        assert geodesic_rotation_error(np.eye(3), rot_z(np.pi / 2)) == pytest.approx(
            np.pi / 2, abs=1e-12
        )

    def test_matches_quaternion_oracle(self):
        from scipy.spatial.transform import Rotation

        rng = np.random.default_rng(19)
        for _ in range(100):
            ra, rb = random_rotation(rng), random_rotation(rng)
            qa = Rotation.from_matrix(ra).as_quat()
            qb = Rotation.from_matrix(rb).as_quat()
            oracle = 2.0 * np.arccos(np.clip(abs(qa @ qb), -1.0, 1.0))
            assert geodesic_rotation_error(ra, rb) == pytest.approx(oracle, abs=1e-9)


class TestSolvePnp:
    def test_identity_recovery(self):
        rng = np.random.default_rng(23)
        k = make_intrinsics()
        pts = scene_points(rng, n=24, center=(0.0, 0.0, 8.0))
        p = projection_for(k, Extrinsics.identity())
        obs = project(p, pts)
        result = solve_pnp(pts, obs, k)
        assert geodesic_rotation_error(result.extrinsics.rotation, np.eye(3)) < 1e-6
        assert np.linalg.norm(result.extrinsics.translation) < 1e-6

    def test_random_pose_recovery(self):
        rng = np.random.default_rng(29)
        k = make_intrinsics()
        for _ in range(20):
            extr = random_camera(rng, distance=rng.uniform(6.0, 14.0))
            pts = scene_points(rng, n=24)
            obs = project(projection_for(k, extr), pts)
            result = solve_pnp(pts, obs, k)
            assert geodesic_rotation_error(result.extrinsics.rotation, extr.rotation) < 1e-4
            assert np.linalg.norm(result.extrinsics.translation - extr.translation) < 1e-4
            assert result.rms_px < 1e-6

    def test_noise_leaves_bounded_residual(self):
        rng = np.random.default_rng(31)
        k = make_intrinsics()
        rms_values = []
        for _ in range(30):
            extr = random_camera(rng)
            pts = scene_points(rng, n=24)
            obs = project(projection_for(k, extr), pts) + rng.normal(0.0, 1.0, size=(24, 2))
            result = solve_pnp(pts, obs, k)
            rms_values.append(result.rms_px)
        assert np.mean(rms_values) <= 1.5

    def test_objective_trace_non_increasing(self):
        rng = np.random.default_rng(37)
        k = make_intrinsics()
        extr = random_camera(rng)
        pts = scene_points(rng, n=24)
        obs = project(projection_for(k, extr), pts) + rng.normal(0.0, 2.0, size=(24, 2))
        result = solve_pnp(pts, obs, k)
        trace = np.array(result.objective_trace)
        assert np.all(np.diff(trace) <= 0.0)

    def test_coplanar_points_use_homography_path(self):
        rng = np.random.default_rng(41)
        k = make_intrinsics()
        for _ in range(10):
            extr = random_camera(rng)
            flat = scene_points(rng, n=12)
            flat[:, 2] = 0.3  # all points on z = 0.3 plane
            obs = project(projection_for(k, extr), flat)
            result = solve_pnp(flat, obs, k)
            assert geodesic_rotation_error(result.extrinsics.rotation, extr.rotation) < 1e-4
            assert np.linalg.norm(result.extrinsics.translation - extr.translation) < 1e-4

    def test_coplanar_needs_eight_points(self):
        rng = np.random.default_rng(43)
        k = make_intrinsics()
        extr = random_camera(rng)
        flat = scene_points(rng, n=7)
        flat[:, 2] = 0.0
        obs = project(projection_for(k, extr), flat)
        with pytest.raises(DegenerateConfiguration):
            solve_pnp(flat, obs, k)

    def test_collinear_points_rejected(self):
        rng = np.random.default_rng(47)
        k = make_intrinsics()
        extr = random_camera(rng)
        line = np.outer(np.linspace(-1.0, 1.0, 10), np.array([1.0, 0.5, 0.2]))
        obs = project(projection_for(k, extr), line)
        with pytest.raises(DegenerateConfiguration):
            solve_pnp(line, obs, k)

    def test_too_few_points_rejected(self):
        rng = np.random.default_rng(53)
        k = make_intrinsics()
        extr = random_camera(rng)
        pts = scene_points(rng, n=5)
        obs = project(projection_for(k, extr), pts)
        with pytest.raises(InsufficientCorrespondences):
            solve_pnp(pts, obs, k)

    def test_non_finite_pairs_are_filtered(self):
        rng = np.random.default_rng(59)
        k = make_intrinsics()
        extr = random_camera(rng)
        pts = scene_points(rng, n=24)
        obs = project(projection_for(k, extr), pts)
        obs[:3] = np.nan  # only 21 usable pairs remain
        result = solve_pnp(pts, obs, k)
        assert geodesic_rotation_error(result.extrinsics.rotation, extr.rotation) < 1e-4

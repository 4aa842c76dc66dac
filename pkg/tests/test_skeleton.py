import numpy as np
import pytest

from crossalign.skeleton import (
    JOINT_COUNT,
    BodyPose,
    default_skeleton,
    fk_points,
    forward_kinematics,
    parse_skeleton,
)

from helpers import random_rotation, rot_z


def random_pose_rotations(rng, scale=1.0):
    from scipy.spatial.transform import Rotation

    vecs = rng.normal(0.0, scale, size=(JOINT_COUNT, 3))
    return Rotation.from_rotvec(vecs).as_matrix()


def fk_oracle(skeleton, rotations, root_position):
    """Naive per-joint recursive chain multiplication, independent of fk_points."""

    def world_rotation(j):
        if skeleton.parents[j] < 0:
            return rotations[j]
        return world_rotation(skeleton.parents[j]) @ rotations[j]

    def position(j):
        if skeleton.parents[j] < 0:
            return np.asarray(root_position, dtype=float)
        p = skeleton.parents[j]
        return position(p) + world_rotation(p) @ skeleton.offsets[j]

    return np.stack([position(j) for j in range(JOINT_COUNT)])


class TestCanonicalSkeleton:
    def test_default_skeleton_shape(self):
        s = default_skeleton()
        assert s.joint_count == JOINT_COUNT
        assert s.parents[0] == -1
        assert len(s.content_hash) == 64

    def test_total_height_is_170cm(self):
        s = default_skeleton()
        rest = forward_kinematics(s, BodyPose.rest(), np.zeros(3))
        assert rest[:, 2].max() - rest[:, 2].min() == pytest.approx(1.70, abs=1e-9)

    def test_rejects_forward_references(self):
        text = "\n".join(
            f"j{i} {i + 1 if i == 0 else i - 1} 0 0 0.1" for i in range(JOINT_COUNT)
        )
        with pytest.raises(ValueError):
            parse_skeleton(text)

    def test_hash_tracks_content(self):
        s = default_skeleton()
        text = "\n".join(
            f"j{i} {-1 if i == 0 else i - 1} 0 0 0.05" for i in range(JOINT_COUNT)
        )
        assert parse_skeleton(text).content_hash != s.content_hash


class TestBodyPose:
    def test_rejects_non_orthonormal(self):
        rot = np.broadcast_to(np.eye(3), (JOINT_COUNT, 3, 3)).copy()
        rot[5] *= 1.1
        with pytest.raises(ValueError):
            BodyPose(rot)


class TestForwardKinematics:
    def test_rest_pose_accumulates_offsets(self):
        s = default_skeleton()
        root = np.array([1.0, -2.0, 0.5])
        joints = forward_kinematics(s, BodyPose.rest(), root)
        expected = np.zeros((JOINT_COUNT, 3))
        for j in range(JOINT_COUNT):
            expected[j] = s.offsets[j] if s.parents[j] < 0 else expected[s.parents[j]] + s.offsets[j]
        expected[0] = 0.0
        assert np.allclose(joints, root + expected, atol=1e-12)

    def test_root_rotation_rotates_whole_skeleton(self):
        s = default_skeleton()
        rot = np.broadcast_to(np.eye(3), (JOINT_COUNT, 3, 3)).copy()
        rot[0] = rot_z(np.pi)
        root = np.array([0.0, 0.0, 1.0])
        rest = forward_kinematics(s, BodyPose.rest(), root)
        turned = forward_kinematics(s, rot, root)
        expected = root + (rest - root) @ rot_z(np.pi).T
        assert np.allclose(turned, expected, atol=1e-12)

    def test_matches_recursive_oracle(self):
        s = default_skeleton()
        rng = np.random.default_rng(61)
        for _ in range(10):
            rotations = random_pose_rotations(rng)
            root = rng.normal(size=3)
            assert np.allclose(
                forward_kinematics(s, rotations, root),
                fk_oracle(s, rotations, root),
                atol=1e-10,
            )

    def test_rigid_equivariance(self):
        # Rigidly transforming (root position, root rotation) rigidly
        # transforms every output joint.
        s = default_skeleton()
        rng = np.random.default_rng(67)
        rotations = random_pose_rotations(rng)
        root = rng.normal(size=3)
        base = forward_kinematics(s, rotations, root)
        g_rot = random_rotation(rng)
        g_t = rng.normal(size=3)
        moved = rotations.copy()
        moved[0] = g_rot @ rotations[0]
        new_root = g_rot @ root + g_t
        transformed = forward_kinematics(s, moved, new_root)
        expected = (base - root) @ g_rot.T + new_root
        assert np.allclose(transformed, expected, atol=1e-9)

    def test_batched_matches_single(self):
        s = default_skeleton()
        rng = np.random.default_rng(71)
        rots = np.stack([random_pose_rotations(rng) for _ in range(5)])
        roots = rng.normal(size=(5, 3))
        batched = fk_points(s, rots, roots)
        for i in range(5):
            assert np.allclose(batched[i], forward_kinematics(s, rots[i], roots[i]), atol=1e-12)

"""Quaternion <-> rotation-matrix conversions (wxyz order, w >= 0 canonical)."""

from __future__ import annotations

import numpy as np
from scipy.spatial.transform import Rotation


def quat_wxyz_from_matrix(matrix: np.ndarray) -> np.ndarray:
    """Unit quaternion (w, x, y, z) of a rotation matrix, canonicalized to w >= 0."""
    q = Rotation.from_matrix(np.asarray(matrix, dtype=float)).as_quat()  # x, y, z, w
    out = np.array([q[3], q[0], q[1], q[2]])
    if out[0] < 0 or (out[0] == 0 and _first_nonzero_sign(out) < 0):
        out = -out
    return out


def matrix_from_quat_wxyz(quat: np.ndarray) -> np.ndarray:
    q = np.asarray(quat, dtype=float).reshape(4)
    norm = np.linalg.norm(q)
    if not np.isfinite(norm) or norm == 0:
        raise ValueError("quaternion must be non-zero and finite")
    q = q / norm
    return Rotation.from_quat([q[1], q[2], q[3], q[0]]).as_matrix()


def batch_quat_wxyz_from_matrices(matrices: np.ndarray) -> np.ndarray:
    """(..., 3, 3) rotations -> (..., 4) canonical wxyz quaternions."""
    m = np.asarray(matrices, dtype=float)
    flat = m.reshape(-1, 3, 3)
    q = Rotation.from_matrix(flat).as_quat()  # (n, 4) xyzw
    out = np.column_stack([q[:, 3], q[:, 0], q[:, 1], q[:, 2]])
    flip = out[:, 0] < 0
    out[flip] = -out[flip]
    return out.reshape(m.shape[:-2] + (4,))


def batch_matrices_from_quat_wxyz(quats: np.ndarray) -> np.ndarray:
    """(..., 4) wxyz quaternions -> (..., 3, 3) rotation matrices."""
    q = np.asarray(quats, dtype=float)
    flat = q.reshape(-1, 4)
    norms = np.linalg.norm(flat, axis=1, keepdims=True)
    if not np.all(np.isfinite(norms)) or np.any(norms == 0):
        raise ValueError("quaternions must be non-zero and finite")
    flat = flat / norms
    m = Rotation.from_quat(flat[:, [1, 2, 3, 0]]).as_matrix()
    return m.reshape(q.shape[:-1] + (3, 3))


def _first_nonzero_sign(values: np.ndarray) -> float:
    for v in values:
        if v != 0:
            return np.sign(v)
    return 1.0

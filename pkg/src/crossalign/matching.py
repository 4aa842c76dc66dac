"""Cross-sensor identity matching between 3D and 2D multi-person keypoint tracks.

The matcher pairs LiDAR-derived 3D person tracks with camera-derived 2D person
tracks over a shared timeline, without any prior camera calibration:

1. Body-pose similarity (coordinate-free) gives an initial sequence-level
   assignment, and per-frame pose estimation from that assignment gives
   initial extrinsics.
2. The spread of the initial per-frame translations acts as a gate: a stable
   solution is accepted as-is, an unstable one (synchronized motions, pose
   ambiguity) triggers the per-frame keypoint search, which seeds camera poses
   from every candidate pair, refines assignment proposals, and accumulates
   frame evidence into a sequence-level score matrix.

Pixel costs always refer to the camera whose intrinsics are passed in; world
points behind the camera contribute a fixed penalty equal to the image
diagonal so cost matrices stay finite.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import (
    GeometryError,
    InvalidConfig,
    NoCommonFrames,
    NoViableProposal,
)
from .geometry import (
    Extrinsics,
    Intrinsics,
    ProjectionMatrix,
    project_masked,
    solve_pnp,
)
from .rotations import batch_quat_wxyz_from_matrices, matrix_from_quat_wxyz
from .skeleton import CanonicalSkeleton, default_skeleton, fk_points, rotations_of

logger = logging.getLogger(__name__)

JOINTS = 24

# Similarity assigned to track pairs that are never simultaneously valid;
# sits strictly below the cosine range so such pairs lose every comparison.
NO_OVERLAP_SIMILARITY = -2.0

# Minimum jointly-valid joints for a person to take part in a frame's costs
# (the pose-estimation identifiability floor).
MIN_JOINT_OVERLAP = 6

# Relative tolerance under which two assignment totals count as tied.
ASSIGNMENT_TIE_RTOL = 1e-9

STRATEGIES = ("KPs", "KP", "Pose", "P&K", "P&T", "P&T&K")


# ---------------------------------------------------------------------------
# Track and configuration types


@dataclass(frozen=True)
class PersonTrack3D:
    """One person's world-frame joint trajectory plus per-frame body pose."""

    person_id: str
    joints: np.ndarray  # (T, 24, 3) meters
    body_pose: np.ndarray  # (T, 24, 3, 3)
    valid: np.ndarray  # (T,) bool

    def __post_init__(self):
        joints = np.asarray(self.joints, dtype=float)
        pose = np.asarray(self.body_pose, dtype=float)
        valid = np.asarray(self.valid, dtype=bool)
        t = joints.shape[0]
        if joints.shape != (t, JOINTS, 3) or pose.shape != (t, JOINTS, 3, 3) or valid.shape != (t,):
            raise ValueError("track arrays have inconsistent shapes")
        object.__setattr__(self, "joints", joints)
        object.__setattr__(self, "body_pose", pose)
        object.__setattr__(self, "valid", valid)

    @property
    def frames(self) -> int:
        return self.joints.shape[0]


@dataclass(frozen=True)
class PersonTrack2D:
    """One person's pixel-frame joints with confidences plus per-frame body pose."""

    person_id: str
    joints: np.ndarray  # (T, 24, 2) pixels
    confidence: np.ndarray  # (T, 24) in [0, 1]
    body_pose: np.ndarray  # (T, 24, 3, 3)
    valid: np.ndarray  # (T,) bool

    def __post_init__(self):
        joints = np.asarray(self.joints, dtype=float)
        conf = np.asarray(self.confidence, dtype=float)
        pose = np.asarray(self.body_pose, dtype=float)
        valid = np.asarray(self.valid, dtype=bool)
        t = joints.shape[0]
        if (
            joints.shape != (t, JOINTS, 2)
            or conf.shape != (t, JOINTS)
            or pose.shape != (t, JOINTS, 3, 3)
            or valid.shape != (t,)
        ):
            raise ValueError("track arrays have inconsistent shapes")
        if conf.size and (np.nanmin(conf) < 0.0 or np.nanmax(conf) > 1.0):
            raise ValueError("confidences must lie in [0, 1]")
        object.__setattr__(self, "joints", joints)
        object.__setattr__(self, "confidence", conf)
        object.__setattr__(self, "body_pose", pose)
        object.__setattr__(self, "valid", valid)

    @property
    def frames(self) -> int:
        return self.joints.shape[0]


@dataclass(frozen=True)
class MatchSet:
    """Injective pairing between 3D and 2D person indices.

    ``residuals`` parallels ``pairs``; for geometry-backed matches it holds the
    pair's mean reprojection error in pixels, for similarity-only matches the
    selected matrix value. ``pairs`` plus the unmatched lists partition both
    index sets.
    """

    pairs: tuple[tuple[int, int], ...]
    residuals: tuple[float, ...]
    unmatched3d: tuple[int, ...]
    unmatched2d: tuple[int, ...]

    def __post_init__(self):
        if len(self.pairs) != len(self.residuals):
            raise ValueError("residuals must parallel pairs")
        used3 = [i for i, _ in self.pairs] + list(self.unmatched3d)
        used2 = [j for _, j in self.pairs] + list(self.unmatched2d)
        if sorted(used3) != list(range(len(used3))) or sorted(used2) != list(range(len(used2))):
            raise ValueError("pairs and unmatched lists must partition both index sets")

    @classmethod
    def empty(cls, n3d: int, n2d: int) -> "MatchSet":
        return cls((), (), tuple(range(n3d)), tuple(range(n2d)))

    @property
    def pair_count(self) -> int:
        return len(self.pairs)


def build_match_set(pairs, residuals, n3d: int, n2d: int) -> MatchSet:
    """Sort pairs by 3D index and fill in the unmatched complements."""
    order = sorted(range(len(pairs)), key=lambda k: (pairs[k][0], pairs[k][1]))
    sorted_pairs = tuple((int(pairs[k][0]), int(pairs[k][1])) for k in order)
    sorted_res = tuple(float(residuals[k]) for k in order)
    matched3 = {i for i, _ in sorted_pairs}
    matched2 = {j for _, j in sorted_pairs}
    return MatchSet(
        sorted_pairs,
        sorted_res,
        tuple(i for i in range(n3d) if i not in matched3),
        tuple(j for j in range(n2d) if j not in matched2),
    )


@dataclass(frozen=True)
class CostMatrix:
    """Dense assignment costs with an explicit optimization orientation."""

    values: np.ndarray
    maximize: bool = False

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 2:
            raise ValueError("cost matrix must be 2-D")
        if not np.all(np.isfinite(v)):
            raise ValueError("cost matrix entries must be finite")
        object.__setattr__(self, "values", v)


@dataclass(frozen=True)
class PcmConfig:
    """Tuning for the sequence matcher.

    delta: translation-variance gate (m^2 summed over axes). The initial
        pose-only match is kept only if its per-frame translation variance
        stays at or below delta; with delta = 0 the keypoint path always runs
        (gate disabled).
    lambda0: weight of the body-pose reprojection term in the combined cost.
    n_iter: refinement sweeps per assignment proposal in the keypoint search.
    reject_threshold: pairs whose mean reprojection residual exceeds this many
        pixels are moved to the unmatched lists; None means 5% of the image
        diagonal.
    smoothing_window: centered median window (frames) applied to the per-frame
        extrinsics; must be odd.
    """

    delta: float = 100.0
    lambda0: float = 0.1
    n_iter: int = 2
    reject_threshold: float | None = None
    smoothing_window: int = 9

    def __post_init__(self):
        if math.isnan(self.delta) or self.delta < 0:
            raise InvalidConfig("delta must be >= 0 (0 disables the variance gate)")
        if self.lambda0 < 0:
            raise InvalidConfig("lambda0 must be >= 0")
        if self.n_iter < 1:
            raise InvalidConfig("n_iter must be >= 1")
        if self.reject_threshold is not None and not self.reject_threshold > 0:
            raise InvalidConfig("reject_threshold must be positive")
        if self.smoothing_window < 1 or self.smoothing_window % 2 == 0:
            raise InvalidConfig("smoothing_window must be odd and >= 1")

    def resolved_reject_threshold(self, intrinsics: Intrinsics) -> float:
        if self.reject_threshold is not None:
            return self.reject_threshold
        return 0.05 * intrinsics.diagonal


# ---------------------------------------------------------------------------
# Body-pose similarity


def flatten_body_pose(rotations: np.ndarray) -> np.ndarray:
    """Row-major flattening of the 23 non-root joint rotations.

    The root rotation encodes global orientation, which differs between
    sensors, so it is excluded: the remaining 207-vector is coordinate-free.
    """
    rot = np.asarray(rotations, dtype=float)
    return rot[..., 1:, :, :].reshape(rot.shape[:-3] + (23 * 9,))


def pose_similarity(track3d: PersonTrack3D, track2d: PersonTrack2D) -> float:
    """Mean cosine similarity of flattened body poses over co-valid frames."""
    common = track3d.valid & track2d.valid
    if not common.any():
        raise NoCommonFrames(
            f"tracks {track3d.person_id!r} and {track2d.person_id!r} share no valid frame"
        )
    a = flatten_body_pose(track3d.body_pose[common])
    b = flatten_body_pose(track2d.body_pose[common])
    cos = (a * b).sum(axis=1) / (np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1))
    return float(cos.mean())


def pose_similarity_matrix(tracks3d, tracks2d) -> np.ndarray:
    """(n3d, n2d) similarity scores; non-overlapping pairs get the sentinel."""
    sims = np.full((len(tracks3d), len(tracks2d)), NO_OVERLAP_SIMILARITY)
    for i, t3 in enumerate(tracks3d):
        for j, t2 in enumerate(tracks2d):
            try:
                sims[i, j] = pose_similarity(t3, t2)
            except NoCommonFrames:
                pass
    return sims


def frame_pose_similarity_matrix(tracks3d, tracks2d, frame: int) -> np.ndarray:
    """Single-frame variant: cosine of the flattened poses at one frame."""
    sims = np.full((len(tracks3d), len(tracks2d)), NO_OVERLAP_SIMILARITY)
    for i, t3 in enumerate(tracks3d):
        if not t3.valid[frame]:
            continue
        a = flatten_body_pose(t3.body_pose[frame])
        na = np.linalg.norm(a)
        for j, t2 in enumerate(tracks2d):
            if not t2.valid[frame]:
                continue
            b = flatten_body_pose(t2.body_pose[frame])
            sims[i, j] = float(a @ b / (na * np.linalg.norm(b)))
    return sims


# ---------------------------------------------------------------------------
# Optimal assignment


def hungarian(cost: CostMatrix) -> MatchSet:
    """Optimal injective assignment of min(n3d, n2d) pairs.

    Among equal-cost optima (totals within a small relative tolerance) the
    assignment that is lexicographically smallest in (idx3d, idx2d) is
    returned, so outputs are reproducible. Empty inputs yield the empty
    MatchSet.
    """
    values = cost.values
    n, m = values.shape
    if n == 0 or m == 0:
        return MatchSet.empty(n, m)
    canonical = -values if cost.maximize else values
    pairs = _lexicographic_pairs(canonical)
    residuals = [values[i, j] for i, j in pairs]
    return build_match_set(pairs, residuals, n, m)


def _lexicographic_pairs(cost: np.ndarray) -> list[tuple[int, int]]:
    """Minimize total cost; break ties toward the lexicographically smallest
    pair sequence by deciding one row at a time.

    Each step solves the remaining subproblem with a tiny bias: a bonus for
    matching the lowest-indexed undecided row and an ascending penalty across
    its columns. The bias is far below the tie tolerance times the matrix
    scale, so it can only reorder assignments whose true totals are tied.
    """
    n, m = cost.shape
    scale = max(1.0, float(np.abs(cost).max()))
    kappa_row = 0.25 * ASSIGNMENT_TIE_RTOL * scale
    kappa_col = kappa_row / (m + 1)

    remaining_cols = list(range(m))
    pairs: list[tuple[int, int]] = []
    sub = np.asarray(cost, dtype=float).copy()
    row_offset = 0
    target = min(n, m)
    while len(pairs) < target and sub.shape[0] > 0 and sub.shape[1] > 0:
        biased = sub.copy()
        biased[0, :] -= kappa_row
        biased[0, :] += kappa_col * np.arange(1, sub.shape[1] + 1)
        rows, cols = linear_sum_assignment(biased)
        chosen = dict(zip(rows.tolist(), cols.tolist()))
        if 0 in chosen:
            j = chosen[0]
            pairs.append((row_offset, remaining_cols[j]))
            sub = np.delete(sub, j, axis=1)
            remaining_cols.pop(j)
        sub = sub[1:]
        row_offset += 1
    return pairs


# ---------------------------------------------------------------------------
# Reprojection costs


def reprojection_cost(
    track3d: PersonTrack3D,
    track2d: PersonTrack2D,
    extrinsics: Extrinsics,
    intrinsics: Intrinsics,
    frame: int,
) -> float:
    """Confidence-weighted mean pixel distance between the projected 3D joints
    and the observed 2D joints at one frame."""
    if not (track3d.valid[frame] and track2d.valid[frame]):
        raise ValueError("both tracks must be valid at the frame")
    return _pair_pixel_cost(
        track3d.joints[frame],
        track2d.joints[frame],
        track2d.confidence[frame],
        extrinsics,
        intrinsics,
    )


def _pair_pixel_cost(joints3d, joints2d, confidence, extrinsics, intrinsics) -> float:
    penalty = intrinsics.diagonal
    pts = np.asarray(joints3d, dtype=float)
    finite = np.isfinite(pts).all(axis=1)
    proj = ProjectionMatrix.from_camera(intrinsics, extrinsics)
    uv, front = project_masked(proj, np.where(finite[:, None], pts, 0.0))
    ok = front & finite
    dist = np.where(ok, np.linalg.norm(uv - joints2d, axis=1), penalty)
    weights = np.asarray(confidence, dtype=float)
    total = weights.sum()
    if total <= 0:
        return float(penalty)
    return float((weights * dist).sum() / total)


def body_pose_cost(
    pose3d,
    pose2d,
    root,
    extrinsics: Extrinsics,
    intrinsics: Intrinsics,
    skeleton: CanonicalSkeleton | None = None,
) -> float:
    """Mean pixel distance between the projected canonical-skeleton joints of
    two body poses, both rooted at the same world point.

    Co-locating the roots isolates pose disagreement from position: the cost
    is zero iff the two poses articulate the skeleton identically as seen by
    this camera.
    """
    skeleton = skeleton if skeleton is not None else default_skeleton()
    root = np.asarray(root, dtype=float).reshape(3)
    r3 = rotations_of(pose3d)
    r2 = rotations_of(pose2d)
    pts = fk_points(skeleton, np.stack([r3, r2]), np.stack([root, root]))
    proj = ProjectionMatrix.from_camera(intrinsics, extrinsics)
    uv, front = project_masked(proj, pts)
    ok = front[0] & front[1]
    dist = np.where(ok, np.linalg.norm(uv[0] - uv[1], axis=1), intrinsics.diagonal)
    return float(dist.mean())


def weighted_cost(
    track3d: PersonTrack3D,
    track2d: PersonTrack2D,
    extrinsics: Extrinsics,
    intrinsics: Intrinsics,
    frame: int,
    lambda0: float,
    skeleton: CanonicalSkeleton | None = None,
) -> float:
    """Keypoint reprojection cost plus lambda0 times the body-pose cost."""
    keypoint = reprojection_cost(track3d, track2d, extrinsics, intrinsics, frame)
    if lambda0 == 0.0:
        return keypoint
    pose = body_pose_cost(
        track3d.body_pose[frame],
        track2d.body_pose[frame],
        track3d.joints[frame, 0],
        extrinsics,
        intrinsics,
        skeleton,
    )
    return keypoint + lambda0 * pose


# ---------------------------------------------------------------------------
# Per-frame data and vectorized cost matrices


@dataclass
class FrameData:
    """Per-frame slices of every usable person, with original track indices."""

    frame: int
    n3d: int
    n2d: int
    idx3d: np.ndarray  # (p3,)
    joints3d: np.ndarray  # (p3, 24, 3) NaNs replaced by zeros
    mask3d: np.ndarray  # (p3, 24) finite-joint mask
    pose3d: np.ndarray  # (p3, 24, 3, 3)
    idx2d: np.ndarray  # (p2,)
    joints2d: np.ndarray  # (p2, 24, 2)
    conf2d: np.ndarray  # (p2, 24) zeroed where the 2D joint is unusable
    pose2d: np.ndarray  # (p2, 24, 3, 3)

    @property
    def usable(self) -> bool:
        return len(self.idx3d) > 0 and len(self.idx2d) > 0


def frame_slice(tracks3d, tracks2d, frame: int, min_joints: int = MIN_JOINT_OVERLAP) -> FrameData:
    """Collect the persons that can take part in this frame's costs.

    Persons with fewer than ``min_joints`` usable joints are excluded
    entirely (below the pose-estimation identifiability floor).
    """
    idx3, j3, m3, p3 = [], [], [], []
    for i, t in enumerate(tracks3d):
        if not t.valid[frame]:
            continue
        joints = t.joints[frame]
        finite = np.isfinite(joints).all(axis=1)
        if finite.sum() < min_joints:
            continue
        idx3.append(i)
        j3.append(np.where(finite[:, None], joints, 0.0))
        m3.append(finite)
        p3.append(t.body_pose[frame])
    idx2, j2, c2, p2 = [], [], [], []
    for j, t in enumerate(tracks2d):
        if not t.valid[frame]:
            continue
        joints = t.joints[frame]
        conf = t.confidence[frame].copy()
        finite = np.isfinite(joints).all(axis=1)
        conf[~finite] = 0.0
        if (conf > 0).sum() < min_joints:
            continue
        idx2.append(j)
        j2.append(np.where(finite[:, None], joints, 0.0))
        c2.append(conf)
        p2.append(t.body_pose[frame])

    def stack(items, shape):
        return np.stack(items) if items else np.zeros((0,) + shape)

    return FrameData(
        frame=frame,
        n3d=len(tracks3d),
        n2d=len(tracks2d),
        idx3d=np.array(idx3, dtype=int),
        joints3d=stack(j3, (JOINTS, 3)),
        mask3d=stack(m3, (JOINTS,)).astype(bool),
        pose3d=stack(p3, (JOINTS, 3, 3)),
        idx2d=np.array(idx2, dtype=int),
        joints2d=stack(j2, (JOINTS, 2)),
        conf2d=stack(c2, (JOINTS,)),
        pose2d=stack(p2, (JOINTS, 3, 3)),
    )


def _reprojection_matrix(fd: FrameData, extrinsics: Extrinsics, intrinsics: Intrinsics) -> np.ndarray:
    """(p3, p2) confidence-weighted mean pixel distances under one camera pose."""
    penalty = intrinsics.diagonal
    proj = ProjectionMatrix.from_camera(intrinsics, extrinsics)
    uv, front = project_masked(proj, fd.joints3d)  # (p3, 24, 2), (p3, 24)
    ok = front & fd.mask3d
    dist = np.linalg.norm(uv[:, None, :, :] - fd.joints2d[None, :, :, :], axis=-1)
    dist = np.where(ok[:, None, :], dist, penalty)  # (p3, p2, 24)
    weights = fd.conf2d[None, :, :]
    totals = fd.conf2d.sum(axis=1)[None, :]
    return (weights * dist).sum(axis=-1) / totals


def _body_pose_matrix(
    fd: FrameData,
    extrinsics: Extrinsics,
    intrinsics: Intrinsics,
    fk3_origin: np.ndarray,
    fk2_origin: np.ndarray,
) -> np.ndarray:
    """(p3, p2) mean pixel distances between skeleton poses, each 2D-side pose
    rooted at the paired 3D person's root joint."""
    penalty = intrinsics.diagonal
    proj = ProjectionMatrix.from_camera(intrinsics, extrinsics)
    roots = fd.joints3d[:, 0]  # (p3, 3)
    uv3, front3 = project_masked(proj, fk3_origin + roots[:, None, :])
    pts2 = fk2_origin[None, :, :, :] + roots[:, None, None, :]  # (p3, p2, 24, 3)
    uv2, front2 = project_masked(proj, pts2)
    ok = front3[:, None, :] & front2
    dist = np.linalg.norm(uv3[:, None, :, :] - uv2, axis=-1)
    return np.where(ok, dist, penalty).mean(axis=-1)


def _weighted_matrix(fd, extrinsics, intrinsics, lambda0, fk3_origin, fk2_origin) -> np.ndarray:
    costs = _reprojection_matrix(fd, extrinsics, intrinsics)
    if lambda0 != 0.0:
        costs = costs + lambda0 * _body_pose_matrix(fd, extrinsics, intrinsics, fk3_origin, fk2_origin)
    return costs


# ---------------------------------------------------------------------------
# Per-frame optimal matching (proposal search)


@dataclass
class FrameMatchResult:
    match: MatchSet  # in original track indices
    extrinsics: Extrinsics
    score: float  # exp(-mean matched cost / reject threshold), in (0, 1]


class _FramePnp:
    """Pose-estimation cache keyed by the (local) pair set it was fit to."""

    def __init__(self, fd: FrameData, intrinsics: Intrinsics):
        self.fd = fd
        self.intrinsics = intrinsics
        self._cache: dict[tuple, Extrinsics | None] = {}

    def for_pairs(self, pairs) -> Extrinsics | None:
        key = tuple(sorted(pairs))
        if key not in self._cache:
            fd = self.fd
            pts3, pts2 = [], []
            for a, b in key:
                usable = fd.mask3d[a] & (fd.conf2d[b] > 0)
                pts3.append(fd.joints3d[a][usable])
                pts2.append(fd.joints2d[b][usable])
            pts3 = np.concatenate(pts3) if pts3 else np.zeros((0, 3))
            pts2 = np.concatenate(pts2) if pts2 else np.zeros((0, 2))
            try:
                self._cache[key] = solve_pnp(pts3, pts2, self.intrinsics).extrinsics
            except GeometryError:
                self._cache[key] = None
        return self._cache[key]


def optimize_frame_match(
    fd: FrameData,
    intrinsics: Intrinsics,
    config: PcmConfig,
    skeleton: CanonicalSkeleton | None = None,
    seed_rows: np.ndarray | None = None,
) -> FrameMatchResult:
    """Best assignment for one frame by seeded proposal search.

    Every candidate pair (i, j) with enough jointly valid joints seeds a
    camera pose fit to that single person; the full negated-reprojection
    matrix under that pose is assigned to produce a proposal. Each distinct
    proposal is then refined ``n_iter`` times (re-fit pose on all its pairs,
    re-cost with the combined keypoint + body-pose matrix, re-assign) while
    the best-scoring assignment seen anywhere is tracked. Pairs of the winner
    whose reprojection residual exceeds the reject threshold are moved to the
    unmatched lists.

    ``seed_rows`` restricts which 3D persons may seed proposals (used by the
    single-seed benchmark strategy); the refinement always considers everyone.
    """
    skeleton = skeleton if skeleton is not None else default_skeleton()
    p3, p2 = len(fd.idx3d), len(fd.idx2d)
    if p3 == 0 or p2 == 0:
        raise NoViableProposal(f"frame {fd.frame}: no usable person on one side")
    threshold = config.resolved_reject_threshold(intrinsics)
    pnp = _FramePnp(fd, intrinsics)
    fk3 = fk_points(skeleton, fd.pose3d, np.zeros((p3, 3)))
    fk2 = fk_points(skeleton, fd.pose2d, np.zeros((p2, 3)))

    rows = range(p3) if seed_rows is None else seed_rows
    proposals: list[tuple[tuple[int, int], ...]] = []
    seen = set()
    for a in rows:
        for b in range(p2):
            overlap = fd.mask3d[a] & (fd.conf2d[b] > 0)
            if overlap.sum() < MIN_JOINT_OVERLAP:
                continue
            seed = pnp.for_pairs([(a, b)])
            if seed is None:
                continue
            scores = -_reprojection_matrix(fd, seed, intrinsics)
            proposal = hungarian(CostMatrix(scores, maximize=True)).pairs
            if proposal and proposal not in seen:
                seen.add(proposal)
                proposals.append(proposal)
    if not proposals:
        raise NoViableProposal(f"frame {fd.frame}: every seed pose estimate failed")

    best_score = -math.inf
    best_pairs: tuple[tuple[int, int], ...] | None = None
    best_extr: Extrinsics | None = None
    for proposal in proposals:
        pairs = proposal
        for _ in range(config.n_iter):
            extr = pnp.for_pairs(pairs)
            if extr is None:
                break
            costs = _weighted_matrix(fd, extr, intrinsics, config.lambda0, fk3, fk2)
            matched_mean = float(np.mean([costs[a, b] for a, b in pairs]))
            score = math.exp(-matched_mean / threshold)
            if score > best_score:
                best_score, best_pairs, best_extr = score, pairs, extr
            pairs = hungarian(CostMatrix(-costs, maximize=True)).pairs
    if best_pairs is None:
        raise NoViableProposal(f"frame {fd.frame}: no proposal produced a valid pose")

    residual_matrix = _reprojection_matrix(fd, best_extr, intrinsics)
    kept, residuals = [], []
    for a, b in best_pairs:
        res = float(residual_matrix[a, b])
        if res <= threshold:
            kept.append((int(fd.idx3d[a]), int(fd.idx2d[b])))
            residuals.append(res)
    match = build_match_set(kept, residuals, fd.n3d, fd.n2d)
    return FrameMatchResult(match, best_extr, best_score)


# ---------------------------------------------------------------------------
# Sequence-level matching


def variance_of_translations(extrinsics) -> float:
    """Sum of per-axis sample variances (ddof=1) of the translations, m^2."""
    ts = np.array([e.translation for e in extrinsics], dtype=float)
    if ts.shape[0] <= 1:
        return 0.0
    return float(ts.var(axis=0, ddof=1).sum())


def _pnp_at_frame(tracks3d, tracks2d, pairs, intrinsics, frame) -> Extrinsics | None:
    pts3, pts2 = [], []
    for i, j in pairs:
        t3, t2 = tracks3d[i], tracks2d[j]
        if not (t3.valid[frame] and t2.valid[frame]):
            continue
        usable = (
            np.isfinite(t3.joints[frame]).all(axis=1)
            & np.isfinite(t2.joints[frame]).all(axis=1)
            & (t2.confidence[frame] > 0)
        )
        pts3.append(t3.joints[frame][usable])
        pts2.append(t2.joints[frame][usable])
    if not pts3:
        return None
    pts3 = np.concatenate(pts3)
    pts2 = np.concatenate(pts2)
    if pts3.shape[0] < MIN_JOINT_OVERLAP:
        return None
    try:
        return solve_pnp(pts3, pts2, intrinsics).extrinsics
    except GeometryError:
        return None


def smooth_extrinsics(sequence, window: int):
    """Centered median smoothing: translations per axis, rotations by
    hemisphere-aligned quaternion component medians renormalized back to a
    unit quaternion. Gaps are filled from whatever the window can see."""
    if window <= 1:
        return list(sequence)
    half = window // 2
    out = []
    for t in range(len(sequence)):
        neighbors = [e for e in sequence[max(0, t - half) : t + half + 1] if e is not None]
        if not neighbors:
            out.append(None)
            continue
        ts = np.array([e.translation for e in neighbors])
        quats = batch_quat_wxyz_from_matrices(np.array([e.rotation for e in neighbors]))
        flip = quats @ quats[0] < 0
        quats[flip] = -quats[flip]
        rotation = matrix_from_quat_wxyz(np.median(quats, axis=0))
        out.append(Extrinsics(rotation, np.median(ts, axis=0)))
    return out


@dataclass
class PcmStats:
    """Instrumentation counters for gate / fallback behavior."""

    gate_variance: float = math.nan
    keypoint_path: bool = False
    frames_total: int = 0
    frames_accumulated: int = 0
    frames_failed: int = 0
    fallback_to_pose: bool = False


@dataclass
class SequenceMatchResult:
    match: MatchSet
    extrinsics: list  # per-frame Extrinsics | None, median-smoothed
    stats: PcmStats = field(default_factory=PcmStats)


def _common_timeline(tracks3d, tracks2d) -> int:
    lengths = {t.frames for t in tracks3d} | {t.frames for t in tracks2d}
    if len(lengths) > 1:
        raise ValueError(f"tracks disagree on timeline length: {sorted(lengths)}")
    if not lengths:
        return 0
    t = lengths.pop()
    if t < 1:
        raise ValueError("timeline must have at least one frame")
    return t


def match_sequences(
    tracks3d,
    tracks2d,
    intrinsics: Intrinsics,
    config: PcmConfig | None = None,
    skeleton: CanonicalSkeleton | None = None,
) -> SequenceMatchResult:
    """Sequence-level identity matching with per-frame extrinsic recovery.

    Pose-similarity assignment plus per-frame pose estimation give the
    initial solution; if the translation variance across frames exceeds the
    gate, the per-frame keypoint search runs instead, each frame's winning
    score accumulating onto its winning pairs, and the final assignment
    maximizes the accumulated evidence. Per-frame extrinsics of the returned
    match are median-smoothed, and pairs with large mean reprojection
    residuals are excluded.
    """
    config = config if config is not None else PcmConfig()
    skeleton = skeleton if skeleton is not None else default_skeleton()
    frames = _common_timeline(tracks3d, tracks2d)
    n3, n2 = len(tracks3d), len(tracks2d)
    stats = PcmStats(frames_total=frames)
    if n3 == 0 or n2 == 0:
        return SequenceMatchResult(MatchSet.empty(n3, n2), [None] * frames, stats)

    similarity = pose_similarity_matrix(tracks3d, tracks2d)
    c_init = hungarian(CostMatrix(similarity, maximize=True))
    m_init = [
        _pnp_at_frame(tracks3d, tracks2d, c_init.pairs, intrinsics, t) for t in range(frames)
    ]
    available = [e for e in m_init if e is not None]
    stats.gate_variance = variance_of_translations(available) if available else math.inf

    use_keypoints = config.delta == 0 or stats.gate_variance > config.delta
    stats.keypoint_path = use_keypoints
    if use_keypoints:
        logger.info(
            "translation variance %.3g exceeds gate %.3g: running keypoint search",
            stats.gate_variance,
            config.delta,
        )
        evidence = np.zeros((n3, n2))
        for t in range(frames):
            fd = frame_slice(tracks3d, tracks2d, t)
            try:
                result = optimize_frame_match(fd, intrinsics, config, skeleton)
            except NoViableProposal as exc:
                logger.debug("frame %d skipped: %s", t, exc)
                stats.frames_failed += 1
                continue
            for i, j in result.match.pairs:
                evidence[i, j] += result.score
            stats.frames_accumulated += 1
        if stats.frames_accumulated == 0:
            logger.warning("keypoint search failed on every frame; keeping pose-only match")
            stats.fallback_to_pose = True
            c_final, m_final = c_init, m_init
        else:
            c_final = hungarian(CostMatrix(evidence, maximize=True))
            m_final = [
                _pnp_at_frame(tracks3d, tracks2d, c_final.pairs, intrinsics, t)
                for t in range(frames)
            ]
    else:
        c_final, m_final = c_init, m_init

    smoothed = smooth_extrinsics(m_final, config.smoothing_window)
    threshold = config.resolved_reject_threshold(intrinsics)
    kept, residuals = [], []
    for i, j in c_final.pairs:
        res = _mean_pair_residual(tracks3d[i], tracks2d[j], smoothed, intrinsics)
        if res <= threshold:
            kept.append((i, j))
            residuals.append(res)
    match = build_match_set(kept, residuals, n3, n2)
    return SequenceMatchResult(match, smoothed, stats)


def extrinsics_for_match(tracks3d, tracks2d, pairs, intrinsics, smoothing_window: int = 9):
    """Per-frame smoothed extrinsics implied by a fixed pairing, with each
    pair's mean reprojection residual under them."""
    frames = _common_timeline(tracks3d, tracks2d)
    raw = [_pnp_at_frame(tracks3d, tracks2d, pairs, intrinsics, t) for t in range(frames)]
    smoothed = smooth_extrinsics(raw, smoothing_window)
    residuals = [
        _mean_pair_residual(tracks3d[i], tracks2d[j], smoothed, intrinsics) for i, j in pairs
    ]
    return smoothed, residuals


def _mean_pair_residual(track3d, track2d, extrinsics_seq, intrinsics) -> float:
    values = []
    for t, extr in enumerate(extrinsics_seq):
        if extr is None or not (track3d.valid[t] and track2d.valid[t]):
            continue
        values.append(
            _pair_pixel_cost(
                track3d.joints[t], track2d.joints[t], track2d.confidence[t], extr, intrinsics
            )
        )
    return float(np.mean(values)) if values else math.inf


# ---------------------------------------------------------------------------
# Benchmark strategies (restricted matchers sharing the same machinery)


def match_with_strategy(
    strategy: str,
    tracks3d,
    tracks2d,
    intrinsics: Intrinsics,
    config: PcmConfig | None = None,
    skeleton: CanonicalSkeleton | None = None,
    seed: int = 0,
) -> MatchSet:
    """Dispatch to one of the benchmark matching strategies.

    KPs    exhaustive search over every injective pairing, per frame, with a
           pose fit per pairing; frame winners accumulate sequence evidence.
    KP     proposals seeded from one randomly chosen 3D person per frame.
    Pose   single-frame body-pose similarity only (middle frame).
    P&K    single-frame keypoint + pose search (middle frame).
    P&T    sequence body-pose similarity only.
    P&T&K  the full sequence matcher.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    config = config if config is not None else PcmConfig()
    skeleton = skeleton if skeleton is not None else default_skeleton()
    frames = _common_timeline(tracks3d, tracks2d)
    n3, n2 = len(tracks3d), len(tracks2d)
    if n3 == 0 or n2 == 0:
        return MatchSet.empty(n3, n2)

    if strategy == "P&T&K":
        return match_sequences(tracks3d, tracks2d, intrinsics, config, skeleton).match
    if strategy == "P&T":
        return hungarian(CostMatrix(pose_similarity_matrix(tracks3d, tracks2d), maximize=True))
    if strategy == "Pose":
        sims = frame_pose_similarity_matrix(tracks3d, tracks2d, frames // 2)
        return hungarian(CostMatrix(sims, maximize=True))
    if strategy == "P&K":
        fd = frame_slice(tracks3d, tracks2d, frames // 2)
        try:
            return optimize_frame_match(fd, intrinsics, config, skeleton).match
        except NoViableProposal:
            return MatchSet.empty(n3, n2)
    if strategy == "KP":
        return _accumulated_match(
            tracks3d, tracks2d, intrinsics, config,
            lambda fd, t: _kp_frame(fd, t, intrinsics, config, skeleton, seed),
        )
    return _accumulated_match(
        tracks3d, tracks2d, intrinsics, config,
        lambda fd, t: _kps_frame(fd, intrinsics, config, skeleton),
    )


def _accumulated_match(tracks3d, tracks2d, intrinsics, config, frame_fn) -> MatchSet:
    frames = _common_timeline(tracks3d, tracks2d)
    n3, n2 = len(tracks3d), len(tracks2d)
    evidence = np.zeros((n3, n2))
    accumulated = 0
    for t in range(frames):
        fd = frame_slice(tracks3d, tracks2d, t)
        result = frame_fn(fd, t)
        if result is None:
            continue
        pairs, score = result
        for i, j in pairs:
            evidence[i, j] += score
        accumulated += 1
    if accumulated == 0:
        return MatchSet.empty(n3, n2)
    return hungarian(CostMatrix(evidence, maximize=True))


def _kp_frame(fd, t, intrinsics, config, skeleton, seed):
    if not fd.usable:
        return None
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, t])))
    row = int(rng.integers(len(fd.idx3d)))
    try:
        result = optimize_frame_match(fd, intrinsics, config, skeleton, seed_rows=[row])
    except NoViableProposal:
        return None
    return result.match.pairs, result.score


def _kps_frame(fd, intrinsics, config, skeleton, max_enumeration: int = 5040):
    """Exhaustive per-frame search: every injective full-size pairing gets its
    own pose fit and combined cost; the cheapest pairing wins the frame."""
    if not fd.usable:
        return None
    p3, p2 = len(fd.idx3d), len(fd.idx2d)
    count = math.perm(max(p3, p2), min(p3, p2))
    if count > max_enumeration:
        raise InvalidConfig(
            f"exhaustive strategy would enumerate {count} pairings; reduce the person count"
        )
    pnp = _FramePnp(fd, intrinsics)
    fk3 = fk_points(skeleton, fd.pose3d, np.zeros((p3, 3)))
    fk2 = fk_points(skeleton, fd.pose2d, np.zeros((p2, 3)))
    threshold = config.resolved_reject_threshold(intrinsics)

    if p3 <= p2:
        candidates = (tuple(zip(range(p3), cols)) for cols in itertools.permutations(range(p2), p3))
    else:
        candidates = (tuple(zip(rows, range(p2))) for rows in itertools.permutations(range(p3), p2))
    best_cost, best_pairs = math.inf, None
    for pairs in candidates:
        extr = pnp.for_pairs(pairs)
        if extr is None:
            continue
        costs = _weighted_matrix(fd, extr, intrinsics, config.lambda0, fk3, fk2)
        mean_cost = float(np.mean([costs[a, b] for a, b in pairs]))
        if mean_cost < best_cost:
            best_cost, best_pairs = mean_cost, pairs
    if best_pairs is None:
        return None
    original = [(int(fd.idx3d[a]), int(fd.idx2d[b])) for a, b in best_pairs]
    return tuple(original), math.exp(-best_cost / threshold)

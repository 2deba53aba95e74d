"""Rigid-pose algebra, pinhole projection, and view-overlap predicates.

Conventions, fixed repo-wide:

- Quaternions are (w, x, y, z) and encode world-from-camera rotations,
  canonicalized so the first nonzero component (normally w) is >= 0.
- The camera frame is x right, y down, z forward (pinhole looks along +z).
- The world frame is z up; trajectories live near the xy plane.
- Distances are Euclidean in 3-D world coordinates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np

UNIT_NORM_TOL = 1e-6
BEHIND_PENALTY_DEFAULT = 1e6  # squared pixels charged per behind-camera point

ViewMode = Literal["forward", "backward"]


class InvalidPoseError(ValueError):
    """Raised for quaternions that are not unit norm within tolerance."""


class EmptyCorrespondenceError(ValueError):
    """Raised when a point-residual computation receives no correspondences."""


# ---------------------------------------------------------------------------
# quaternion algebra
# ---------------------------------------------------------------------------

def quat_normalize(q: np.ndarray, tol: float = UNIT_NORM_TOL) -> np.ndarray:
    """Return q scaled to unit norm; reject inputs off by more than tol."""
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (4,):
        raise InvalidPoseError(f"quaternion must have shape (4,), got {q.shape}")
    norm = float(np.linalg.norm(q))
    if abs(norm - 1.0) > tol:
        raise InvalidPoseError(f"quaternion norm {norm:.6g} outside tolerance {tol:g}")
    return q / norm


def quat_canonical(q: np.ndarray) -> np.ndarray:
    """Flip sign so the first nonzero component is positive (w >= 0 normally)."""
    q = np.asarray(q, dtype=np.float64)
    for c in q:
        if c != 0.0:
            return q if c > 0.0 else -q
    return q


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(m: np.ndarray) -> np.ndarray:
    """Rotation matrix to quaternion (Shepperd's branch selection)."""
    m = np.asarray(m, dtype=np.float64)
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    if tr > 0.0:
        s = math.sqrt(tr + 1.0) * 2.0
        q = np.array(
            [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        )
    elif m[0, 0] >= m[1, 1] and m[0, 0] >= m[2, 2]:
        s = math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
        q = np.array(
            [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
        )
    elif m[1, 1] >= m[2, 2]:
        s = math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
        q = np.array(
            [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
        )
    else:
        s = math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
        q = np.array(
            [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
        )
    return quat_canonical(q / np.linalg.norm(q))


def quat_from_axis_angle(axis: np.ndarray, angle_rad: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    half = 0.5 * angle_rad
    return np.concatenate([[math.cos(half)], math.sin(half) * axis])


def quat_rotate(q: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Rotate one point (3,) or a batch (n, 3) by q."""
    pts = np.asarray(points, dtype=np.float64)
    return pts @ quat_to_matrix(q).T


def quat_angle_deg(qa: np.ndarray, qb: np.ndarray) -> float:
    """Rotation angle between two unit quaternions, sign-invariant, in degrees."""
    dot = abs(float(np.dot(qa, qb)))
    return math.degrees(2.0 * math.acos(min(dot, 1.0)))


# ---------------------------------------------------------------------------
# pose types
# ---------------------------------------------------------------------------

_VIEW_AXIS = np.array([0.0, 0.0, 1.0])
# 180 deg about the camera's vertical (y) axis: reverses the viewing direction.
_YAW_FLIP = np.array([0.0, 0.0, 1.0, 0.0])


@dataclass(frozen=True, eq=False)
class CameraPose:
    """World-from-camera rigid pose at one sample index."""

    q: np.ndarray
    t: np.ndarray
    id: int = -1
    timestamp: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "q", quat_canonical(quat_normalize(self.q)))
        t = np.asarray(self.t, dtype=np.float64)
        if t.shape != (3,):
            raise InvalidPoseError(f"translation must have shape (3,), got {t.shape}")
        object.__setattr__(self, "t", t)

    def __eq__(self, other):
        return (
            isinstance(other, CameraPose)
            and self.id == other.id
            and self.timestamp == other.timestamp
            and np.array_equal(self.q, other.q)
            and np.array_equal(self.t, other.t)
        )

    def view_direction(self) -> np.ndarray:
        """Unit vector of the camera's optical axis in world coordinates."""
        return quat_rotate(self.q, _VIEW_AXIS)

    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        """Map world points (n, 3) into this camera's frame."""
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return (pts - self.t) @ self.rotation_matrix()


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics; fov_deg is the derived horizontal field of view."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width) or not (0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def fov_deg(self) -> float:
        return math.degrees(2.0 * math.atan(self.width / (2.0 * self.fx)))

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1]])


@dataclass(frozen=True, eq=False)
class RelativePose:
    """Pose of camera b expressed in camera a's frame: x_a = R q_rel x_b + t_rel."""

    q: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "q", quat_canonical(quat_normalize(self.q)))
        t = np.asarray(self.t, dtype=np.float64)
        if t.shape != (3,):
            raise InvalidPoseError(f"translation must have shape (3,), got {t.shape}")
        object.__setattr__(self, "t", t)

    def __eq__(self, other):
        return (
            isinstance(other, RelativePose)
            and np.array_equal(self.q, other.q)
            and np.array_equal(self.t, other.t)
        )

    @classmethod
    def identity(cls) -> "RelativePose":
        return cls(q=np.array([1.0, 0.0, 0.0, 0.0]), t=np.zeros(3))

    def as_vector(self) -> np.ndarray:
        """7-vector [tx, ty, tz, qw, qx, qy, qz]."""
        return np.concatenate([self.t, self.q])


def compose_relative(pose_a: CameraPose, pose_b: CameraPose) -> RelativePose:
    """Relative pose a -> b, i.e. T_a^-1 T_b, canonicalized."""
    q_a = quat_normalize(pose_a.q)
    q_b = quat_normalize(pose_b.q)
    q_rel = quat_multiply(quat_conjugate(q_a), q_b)
    t_rel = quat_to_matrix(q_a).T @ (pose_b.t - pose_a.t)
    return RelativePose(q=q_rel, t=t_rel)


def apply_relative(pose_a: CameraPose, rel: RelativePose, id: int = -1) -> CameraPose:
    """Compose pose_a with rel, reconstructing the second camera's world pose."""
    q = quat_multiply(pose_a.q, rel.q)
    t = pose_a.t + quat_rotate(pose_a.q, rel.t)
    return CameraPose(q=q, t=t, id=id)


def flip_yaw(pose: CameraPose) -> CameraPose:
    """Rotate a pose 180 deg about its own vertical axis (viewing direction negated)."""
    return CameraPose(
        q=quat_multiply(pose.q, _YAW_FLIP), t=pose.t, id=pose.id, timestamp=pose.timestamp
    )


def flip_yaw_quat(q: np.ndarray) -> np.ndarray:
    return quat_canonical(quat_multiply(q, _YAW_FLIP))


# ---------------------------------------------------------------------------
# projection and reprojection error
# ---------------------------------------------------------------------------

def _strip_homogeneous(points: np.ndarray) -> np.ndarray:
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if pts.shape[1] == 4:
        pts = pts[:, :3] / pts[:, 3:4]
    elif pts.shape[1] != 3:
        raise ValueError(f"points must be (n, 3) or homogeneous (n, 4), got {pts.shape}")
    return pts


def project(
    K: CameraIntrinsics, rel: RelativePose, points: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Project points through the camera sitting at rel.

    Points are expressed in the frame rel is relative to (the first camera).
    Returns (pixels (n, 2), behind (n,) bool); behind-camera points keep a
    NaN pixel and are flagged rather than silently projected.
    """
    pts = _strip_homogeneous(points)
    cam = (pts - rel.t) @ quat_to_matrix(rel.q)
    z = cam[:, 2]
    behind = z <= 0.0
    safe_z = np.where(behind, 1.0, z)
    u = K.fx * cam[:, 0] / safe_z + K.cx
    v = K.fy * cam[:, 1] / safe_z + K.cy
    pix = np.stack([u, v], axis=1)
    pix[behind] = np.nan
    return pix, behind


def unproject(K: CameraIntrinsics, pixels: np.ndarray, depths: np.ndarray) -> np.ndarray:
    """Back-project pixels at given depths into the camera frame."""
    pix = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
    z = np.asarray(depths, dtype=np.float64).reshape(-1)
    x = (pix[:, 0] - K.cx) / K.fx * z
    y = (pix[:, 1] - K.cy) / K.fy * z
    return np.stack([x, y, z], axis=1)


@dataclass(frozen=True)
class ReprojectionResult:
    total: float
    per_point: np.ndarray
    behind: np.ndarray

    @property
    def any_behind(self) -> bool:
        return bool(self.behind.any())


def reprojection_error(
    observed: np.ndarray,
    K: CameraIntrinsics,
    rel: RelativePose,
    points: np.ndarray,
    behind_penalty: float = BEHIND_PENALTY_DEFAULT,
) -> ReprojectionResult:
    """Cumulative squared pixel error between observed 2-D points and projections.

    Behind-camera points contribute behind_penalty each and are flagged.
    """
    obs = np.atleast_2d(np.asarray(observed, dtype=np.float64))
    pts = _strip_homogeneous(points)
    if obs.shape[0] == 0:
        raise EmptyCorrespondenceError("no correspondences supplied")
    if obs.shape[0] != pts.shape[0]:
        raise ValueError(f"observed ({obs.shape[0]}) and points ({pts.shape[0]}) must align")
    pix, behind = project(K, rel, pts)
    per_point = np.where(behind, behind_penalty, np.nansum((obs - pix) ** 2, axis=1))
    return ReprojectionResult(total=float(per_point.sum()), per_point=per_point, behind=behind)


# ---------------------------------------------------------------------------
# view predicate
# ---------------------------------------------------------------------------

def in_view(
    query: CameraPose,
    candidate: CameraPose,
    *,
    fov_deg: float,
    d_min: float,
    d_max: float,
    orient_tol_deg: float,
    mode: ViewMode,
) -> bool:
    """True iff candidate sits inside the query's horizontal view fan.

    Checks, in order: candidate position within the query's horizontal FoV
    cone, 3-D distance within [d_min, d_max], and candidate viewing direction
    within orient_tol_deg of the query's direction (forward mode) or of its
    reversal (backward mode). The vertical extent is ignored.
    """
    if not (0.0 < fov_deg < 180.0):
        raise ValueError("fov_deg must lie in (0, 180)")
    if not (0.0 < d_min < d_max):
        raise ValueError("require 0 < d_min < d_max")
    if mode not in ("forward", "backward"):
        raise ValueError(f"unknown mode {mode!r}")

    offset = candidate.t - query.t
    dist = float(np.linalg.norm(offset))
    if not (d_min <= dist <= d_max):
        return False

    local = quat_to_matrix(query.q).T @ offset
    horiz = math.degrees(abs(math.atan2(local[0], local[2])))
    if local[2] <= 0.0 or horiz > 0.5 * fov_deg:
        return False

    dir_q = query.view_direction()
    dir_c = candidate.view_direction()
    if mode == "backward":
        dir_q = -dir_q
    cos_angle = float(np.clip(np.dot(dir_q, dir_c), -1.0, 1.0))
    return math.degrees(math.acos(cos_angle)) <= orient_tol_deg


# ---------------------------------------------------------------------------
# trajectory file format: `id timestamp tx ty tz qw qx qy qz`, '#' comments
# ---------------------------------------------------------------------------

TRAJECTORY_HEADER = "# biloop-poses v1"


def write_trajectory(path: str | Path, poses: list[CameraPose]) -> None:
    lines = [TRAJECTORY_HEADER, "# id timestamp tx ty tz qw qx qy qz"]
    for p in poses:
        ts = 0.0 if p.timestamp is None else p.timestamp
        fields = [str(p.id), f"{ts:.9g}"]
        fields += [f"{v:.17g}" for v in p.t]
        fields += [f"{v:.17g}" for v in p.q]
        lines.append(" ".join(fields))
    Path(path).write_text("\n".join(lines) + "\n")


def read_trajectory(path: str | Path) -> list[CameraPose]:
    poses = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 9:
            raise ValueError(f"{path}:{lineno}: expected 9 fields, got {len(parts)}")
        pid = int(parts[0])
        ts = float(parts[1])
        tx, ty, tz, qw, qx, qy, qz = (float(v) for v in parts[2:])
        poses.append(
            CameraPose(q=np.array([qw, qx, qy, qz]), t=np.array([tx, ty, tz]), id=pid, timestamp=ts)
        )
    return poses

"""Synthetic out-and-back world with ground-truth visibility overlap.

The world is a polyline path traveled forward, then retraced with the camera
yawed 180 deg. Landmarks carry unit signature vectors; observing a pose
yields the noisy signatures of landmarks inside the view frustum, together
with their pixel projections and ids, so downstream claims (reprojection
checks, retrieval labels) are testable against exact geometry.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from .geometry import (
    CameraIntrinsics,
    CameraPose,
    flip_yaw,
    matrix_to_quat,
    read_trajectory,
    write_trajectory,
)
from .seeding import substream

DEFAULT_CAMERA_HEIGHT = 1.5


@dataclass(frozen=True)
class Landmark:
    """A world point with a canonical unit descriptor signature."""

    position: np.ndarray
    signature: np.ndarray

    def __post_init__(self):
        sig = np.asarray(self.signature, dtype=np.float64)
        norm = np.linalg.norm(sig)
        if not math.isclose(norm, 1.0, abs_tol=1e-9):
            raise ValueError(f"signature must be unit norm, got {norm:.6g}")
        object.__setattr__(self, "position", np.asarray(self.position, dtype=np.float64))
        object.__setattr__(self, "signature", sig)


@dataclass
class Observation:
    """What one pose sees: noisy descriptors plus exact correspondences."""

    descriptors: np.ndarray  # (n, dim)
    landmark_ids: np.ndarray  # (n,) int64
    pixels: np.ndarray  # (n, 2)
    positions: np.ndarray  # (n, 3) world coordinates of the seen landmarks

    @property
    def empty(self) -> bool:
        return self.descriptors.shape[0] == 0


@dataclass
class SequenceDataset:
    """Ordered poses with per-pose observations and leg labels."""

    poses: list[CameraPose]
    observations: dict[int, Observation]
    intrinsics: CameraIntrinsics
    leg_labels: list[str]

    def __post_init__(self):
        ts = [p.timestamp for p in self.poses]
        if any(t is None for t in ts) or any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValueError("poses must carry strictly increasing timestamps")
        if len(self.leg_labels) != len(self.poses):
            raise ValueError("one leg label per pose required")

    def pose_by_id(self, pid: int) -> CameraPose:
        return self._id_map()[pid]

    def _id_map(self) -> dict[int, CameraPose]:
        if not hasattr(self, "_ids"):
            self._ids = {p.id: p for p in self.poses}
        return self._ids

    def path_positions(self) -> np.ndarray:
        """Cumulative traveled distance (meters) per pose, in order."""
        pts = np.array([p.t for p in self.poses])
        steps = np.linalg.norm(np.diff(pts, axis=0), axis=1)
        return np.concatenate([[0.0], np.cumsum(steps)])

    def ids_for_leg(self, leg: str) -> list[int]:
        return [p.id for p, lab in zip(self.poses, self.leg_labels) if lab == leg]


def _heading_quat(yaw_rad: float) -> np.ndarray:
    """Camera orientation looking horizontally along world heading yaw_rad."""
    c, s = math.cos(yaw_rad), math.sin(yaw_rad)
    # columns: camera x (right), y (down), z (forward) in world coordinates
    rot = np.array([[s, 0.0, c], [-c, 0.0, s], [0.0, -1.0, 0.0]])
    return matrix_to_quat(rot)


def _polyline_samples(waypoints: np.ndarray, spacing: float) -> tuple[np.ndarray, np.ndarray]:
    """Equally spaced (positions, headings) along a 2-D polyline."""
    seg = np.diff(waypoints, axis=0)
    seg_len = np.linalg.norm(seg, axis=1)
    total = float(seg_len.sum())
    if total <= 0.0:
        raise ValueError("path has zero length")
    n = int(math.floor(total / spacing + 1e-9))
    if n < 2:
        raise ValueError("path too short for the requested spacing")
    s_values = np.arange(n) * spacing
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    positions = np.empty((n, 2))
    headings = np.empty(n)
    for i, s in enumerate(s_values):
        j = min(int(np.searchsorted(cum, s, side="right")) - 1, len(seg) - 1)
        frac = (s - cum[j]) / seg_len[j]
        positions[i] = waypoints[j] + frac * seg[j]
        headings[i] = math.atan2(seg[j, 1], seg[j, 0])
    return positions, headings


def generate_trajectory(
    length_m: float | None = None,
    spacing_m: float = 1.0,
    *,
    waypoints: Sequence[Sequence[float]] | None = None,
    position_noise_m: float = 0.0,
    yaw_noise_deg: float = 0.0,
    camera_height_m: float = DEFAULT_CAMERA_HEIGHT,
    seed: int = 0,
) -> tuple[list[CameraPose], list[str]]:
    """Out-and-back pose sequence: forward leg, then the retraced leg with
    yaw flipped 180 deg. Deterministic under a fixed seed.

    Provide either length_m (straight path along +x) or explicit 2-D waypoints.
    """
    if spacing_m <= 0:
        raise ValueError("spacing must be positive")
    if waypoints is None:
        if length_m is None or length_m <= 0:
            raise ValueError("need a positive length_m or explicit waypoints")
        waypoints = [[0.0, 0.0], [float(length_m), 0.0]]
    wp = np.asarray(waypoints, dtype=np.float64)
    positions, headings = _polyline_samples(wp, spacing_m)
    n = positions.shape[0]

    rng = substream(seed, "trajectory")
    pos_noise = rng.normal(scale=position_noise_m, size=(2 * n, 3)) if position_noise_m > 0 else np.zeros((2 * n, 3))
    yaw_noise = (
        np.radians(rng.normal(scale=yaw_noise_deg, size=2 * n)) if yaw_noise_deg > 0 else np.zeros(2 * n)
    )

    poses: list[CameraPose] = []
    labels: list[str] = []
    for i in range(n):
        t = np.array([positions[i, 0], positions[i, 1], camera_height_m]) + pos_noise[i]
        poses.append(
            CameraPose(q=_heading_quat(headings[i] + yaw_noise[i]), t=t, id=i, timestamp=float(i))
        )
        labels.append("forward")
    for j in range(n):
        src = n - 1 - j
        idx = n + j
        t = np.array([positions[src, 0], positions[src, 1], camera_height_m]) + pos_noise[idx]
        base = CameraPose(
            q=_heading_quat(headings[src] + yaw_noise[idx]), t=t, id=idx, timestamp=float(idx)
        )
        poses.append(flip_yaw(base))
        labels.append("backward")
    return poses, labels


def generate_landmarks(
    poses: Sequence[CameraPose],
    density_per_m: float,
    lateral_spread_m: float,
    dim: int,
    seed: int = 0,
    *,
    repetitive_pool: int = 0,
    height_m: float = DEFAULT_CAMERA_HEIGHT,
    height_jitter_m: float = 0.3,
    leg_labels: Sequence[str] | None = None,
) -> list[Landmark]:
    """Scatter landmarks with unit signatures around the traveled path.

    With repetitive_pool > 0, signatures are reused from a pool of that size,
    mimicking repeated texture across distinct places. For out-and-back pose
    lists, pass leg_labels so only the forward leg defines the path.
    """
    if density_per_m <= 0:
        raise ValueError("density must be positive")
    if leg_labels is not None:
        path_poses = [p for p, lab in zip(poses, leg_labels) if lab == "forward"]
    else:
        path_poses = list(poses)
    pts = np.array([p.t[:2] for p in path_poses])
    seg = np.diff(pts, axis=0)
    keep = np.linalg.norm(seg, axis=1) > 1e-12
    pts = np.concatenate([pts[:1], pts[1:][keep]], axis=0)
    seg = np.diff(pts, axis=0)
    seg_len = np.linalg.norm(seg, axis=1)
    total = float(seg_len.sum())
    count = max(1, int(round(density_per_m * total)))

    rng = substream(seed, "landmarks")
    s = rng.uniform(0.0, total, size=count)
    lateral = rng.uniform(-lateral_spread_m, lateral_spread_m, size=count)
    heights = height_m + rng.uniform(-height_jitter_m, height_jitter_m, size=count)

    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    landmarks = []
    pool = None
    if repetitive_pool > 0:
        pool = rng.normal(size=(repetitive_pool, dim))
        pool /= np.linalg.norm(pool, axis=1, keepdims=True)
    for i in range(count):
        j = min(int(np.searchsorted(cum, s[i], side="right")) - 1, len(seg) - 1)
        frac = (s[i] - cum[j]) / seg_len[j]
        base = pts[j] + frac * seg[j]
        direction = seg[j] / seg_len[j]
        normal = np.array([-direction[1], direction[0]])
        xy = base + lateral[i] * normal
        if pool is not None:
            sig = pool[rng.integers(repetitive_pool)]
        else:
            sig = rng.normal(size=dim)
            sig = sig / np.linalg.norm(sig)
        landmarks.append(Landmark(position=np.array([xy[0], xy[1], heights[i]]), signature=sig))
    return landmarks


def visible_ids(
    pose: CameraPose,
    landmarks: Sequence[Landmark],
    intrinsics: CameraIntrinsics,
    range_m: float,
) -> np.ndarray:
    """Indices of landmarks inside the pose's image frustum and range."""
    mask, _, _ = _frustum(pose, landmarks, intrinsics, range_m)
    return np.nonzero(mask)[0]


def _frustum(pose, landmarks, intrinsics, range_m):
    positions = np.array([lm.position for lm in landmarks]).reshape(len(landmarks), 3)
    if len(landmarks) == 0:
        return np.zeros(0, dtype=bool), np.empty((0, 2)), positions
    cam = pose.world_to_camera(positions)
    z = cam[:, 2]
    dist = np.linalg.norm(cam, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intrinsics.fx * cam[:, 0] / z + intrinsics.cx
        v = intrinsics.fy * cam[:, 1] / z + intrinsics.cy
    mask = (
        (z > 1e-9)
        & (dist <= range_m)
        & (u >= 0.0)
        & (u < intrinsics.width)
        & (v >= 0.0)
        & (v < intrinsics.height)
    )
    return mask, np.stack([u, v], axis=1), positions


@lru_cache(maxsize=8)
def _aspect_mixers(dim: int) -> tuple[np.ndarray, np.ndarray]:
    """Fixed random mixing matrices deriving per-landmark aspect vectors."""
    rng = np.random.default_rng([0xA5A5, dim])
    return rng.normal(size=(dim, dim)) / math.sqrt(dim), rng.normal(size=(dim, dim)) / math.sqrt(dim)


def observe(
    pose: CameraPose,
    landmarks: Sequence[Landmark],
    intrinsics: CameraIntrinsics,
    range_m: float,
    noise_sigma: float = 0.0,
    seed: int = 0,
    view_dependence: float = 0.0,
) -> Observation:
    """Noisy descriptors and exact pixel correspondences for one pose.

    view_dependence > 0 mixes in per-landmark aspect vectors weighted by the
    world-frame viewing azimuth, so a landmark's appearance changes with the
    direction it is seen from (as real image features do); 0 keeps canonical
    signatures. Deterministic: the noise stream depends only on (seed,
    pose.id). An empty view yields a valid Observation with .empty set.
    """
    if range_m <= 0:
        raise ValueError("range must be positive")
    mask, pixels, positions = _frustum(pose, landmarks, intrinsics, range_m)
    idx = np.nonzero(mask)[0]
    dim = landmarks[0].signature.shape[0] if landmarks else 0
    sigs = (
        np.array([landmarks[i].signature for i in idx])
        if len(idx)
        else np.empty((0, dim))
    )
    if view_dependence > 0 and len(idx) > 0:
        mix_a, mix_b = _aspect_mixers(dim)
        rel = positions[idx] - pose.t
        azimuth = np.arctan2(rel[:, 1], rel[:, 0])
        aspect_a = sigs @ mix_a.T
        aspect_a /= np.linalg.norm(aspect_a, axis=1, keepdims=True)
        aspect_b = sigs @ mix_b.T
        aspect_b /= np.linalg.norm(aspect_b, axis=1, keepdims=True)
        sigs = sigs + view_dependence * (
            np.cos(azimuth)[:, None] * aspect_a + np.sin(azimuth)[:, None] * aspect_b
        )
        sigs /= np.linalg.norm(sigs, axis=1, keepdims=True)
    if noise_sigma > 0 and len(idx) > 0:
        rng = substream(seed, f"observe:{pose.id}")
        sigs = sigs + rng.normal(scale=noise_sigma, size=sigs.shape)
        sigs /= np.linalg.norm(sigs, axis=1, keepdims=True)
    return Observation(
        descriptors=sigs,
        landmark_ids=idx.astype(np.int64),
        pixels=pixels[idx],
        positions=positions[idx],
    )


def overlap(obs_a: Observation, obs_b: Observation) -> float:
    """Jaccard overlap of the landmark-id sets seen by two observations."""
    a, b = set(obs_a.landmark_ids.tolist()), set(obs_b.landmark_ids.tolist())
    if not a and not b:
        return 0.0
    return len(a & b) / len(a | b)


# ---------------------------------------------------------------------------
# dataset directory layout: poses.txt, world.yaml, descriptors/<id>.bin,
# tracks/<id>.bin (correspondences for reprojection validation)
# ---------------------------------------------------------------------------

DATASET_CONFIG_NAME = "world.yaml"
_TRACK_MAGIC = b"BLTRK1\n"


def _write_descriptors(path: Path, desc: np.ndarray) -> None:
    n, d = desc.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<ii", n, d))
        fh.write(np.ascontiguousarray(desc, dtype="<f4").tobytes())


def _read_descriptors(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    n, d = struct.unpack_from("<ii", raw, 0)
    arr = np.frombuffer(raw, dtype="<f4", count=n * d, offset=8)
    return arr.reshape(n, d).astype(np.float64)


def _write_tracks(path: Path, obs: Observation) -> None:
    n = obs.landmark_ids.shape[0]
    with open(path, "wb") as fh:
        fh.write(_TRACK_MAGIC)
        fh.write(struct.pack("<i", n))
        fh.write(obs.landmark_ids.astype("<i8").tobytes())
        fh.write(np.ascontiguousarray(obs.pixels, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(obs.positions, dtype="<f8").tobytes())


def _read_tracks(path: Path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    raw = path.read_bytes()
    if raw[: len(_TRACK_MAGIC)] != _TRACK_MAGIC:
        raise ValueError(f"{path}: unknown track file version")
    off = len(_TRACK_MAGIC)
    (n,) = struct.unpack_from("<i", raw, off)
    off += 4
    ids = np.frombuffer(raw, dtype="<i8", count=n, offset=off).astype(np.int64)
    off += 8 * n
    pixels = np.frombuffer(raw, dtype="<f8", count=2 * n, offset=off).reshape(n, 2).copy()
    off += 16 * n
    positions = np.frombuffer(raw, dtype="<f8", count=3 * n, offset=off).reshape(n, 3).copy()
    return ids, pixels, positions


def save_dataset(directory: str | Path, dataset: SequenceDataset, extra_config: dict | None = None) -> None:
    directory = Path(directory)
    (directory / "descriptors").mkdir(parents=True, exist_ok=True)
    (directory / "tracks").mkdir(parents=True, exist_ok=True)
    write_trajectory(directory / "poses.txt", dataset.poses)
    cfg = {
        "version": 1,
        "intrinsics": {
            "fx": dataset.intrinsics.fx,
            "fy": dataset.intrinsics.fy,
            "cx": dataset.intrinsics.cx,
            "cy": dataset.intrinsics.cy,
            "width": dataset.intrinsics.width,
            "height": dataset.intrinsics.height,
        },
        "leg_labels": {"n_forward": dataset.leg_labels.count("forward")},
    }
    if extra_config:
        cfg.update(extra_config)
    (directory / DATASET_CONFIG_NAME).write_text(yaml.safe_dump(cfg, sort_keys=True))
    for pid, obs in dataset.observations.items():
        _write_descriptors(directory / "descriptors" / f"{pid}.bin", obs.descriptors)
        _write_tracks(directory / "tracks" / f"{pid}.bin", obs)


def load_dataset(directory: str | Path) -> SequenceDataset:
    directory = Path(directory)
    cfg = yaml.safe_load((directory / DATASET_CONFIG_NAME).read_text())
    if cfg.get("version") != 1:
        raise ValueError(f"unknown dataset config version {cfg.get('version')!r}")
    intr = CameraIntrinsics(**cfg["intrinsics"])
    poses = read_trajectory(directory / "poses.txt")
    n_forward = int(cfg["leg_labels"]["n_forward"])
    labels = ["forward" if i < n_forward else "backward" for i in range(len(poses))]
    observations: dict[int, Observation] = {}
    for p in poses:
        dpath = directory / "descriptors" / f"{p.id}.bin"
        tpath = directory / "tracks" / f"{p.id}.bin"
        if not dpath.exists():
            continue
        desc = _read_descriptors(dpath)
        if tpath.exists():
            ids, pixels, positions = _read_tracks(tpath)
        else:
            ids = np.empty(0, dtype=np.int64)
            pixels = np.empty((0, 2))
            positions = np.empty((0, 3))
        observations[p.id] = Observation(
            descriptors=desc, landmark_ids=ids, pixels=pixels, positions=positions
        )
    return SequenceDataset(
        poses=poses, observations=observations, intrinsics=intr, leg_labels=labels
    )


def build_synthetic_dataset(
    intrinsics: CameraIntrinsics,
    *,
    length_m: float | None = None,
    waypoints: Sequence[Sequence[float]] | None = None,
    spacing_m: float = 1.0,
    position_noise_m: float = 0.0,
    yaw_noise_deg: float = 0.0,
    camera_height_m: float = DEFAULT_CAMERA_HEIGHT,
    density_per_m: float = 2.0,
    lateral_spread_m: float = 6.0,
    descriptor_dim: int = 24,
    repetitive_pool: int = 0,
    observe_range_m: float = 12.0,
    descriptor_noise: float = 0.0,
    view_dependence: float = 0.0,
    seed: int = 0,
    landmarks: Sequence[Landmark] | None = None,
) -> tuple[SequenceDataset, list[Landmark]]:
    """Generate poses, landmarks, and per-pose observations in one call."""
    poses, labels = generate_trajectory(
        length_m,
        spacing_m,
        waypoints=waypoints,
        position_noise_m=position_noise_m,
        yaw_noise_deg=yaw_noise_deg,
        camera_height_m=camera_height_m,
        seed=seed,
    )
    if landmarks is None:
        landmarks = generate_landmarks(
            poses,
            density_per_m,
            lateral_spread_m,
            descriptor_dim,
            seed=seed,
            repetitive_pool=repetitive_pool,
            height_m=camera_height_m,
            leg_labels=labels,
        )
    observations = {
        p.id: observe(
            p,
            landmarks,
            intrinsics,
            observe_range_m,
            descriptor_noise,
            seed=seed,
            view_dependence=view_dependence,
        )
        for p in poses
    }
    dataset = SequenceDataset(
        poses=poses, observations=observations, intrinsics=intrinsics, leg_labels=labels
    )
    return dataset, list(landmarks)

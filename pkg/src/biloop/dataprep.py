"""Automated triplet mining for same-direction and opposite-direction loop
closure, with reprojection validation and the distance-range sweep.

Mining is deterministic: the per-query sampling streams derive from
(seed, mode, anchor id), so results are independent of iteration order and
of whether the spatial index is used.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Literal, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .geometry import (
    CameraIntrinsics,
    CameraPose,
    EmptyCorrespondenceError,
    RelativePose,
    compose_relative,
    in_view,
    reprojection_error,
)
from .seeding import substream
from .synthworld import SequenceDataset

logger = logging.getLogger(__name__)

Mode = Literal["forward", "backward"]


@dataclass(frozen=True)
class MiningConfig:
    d_min: float = 2.0
    d_max: float = 11.0
    fov_deg: float | None = None  # None: use the intrinsics' horizontal FoV
    orient_tol_deg: float = 30.0
    triplets_per_query: int = 6
    negative_min_dist: float = 25.0
    reproj_rms_px: float = 2.0

    def __post_init__(self):
        if not (0 < self.d_min < self.d_max):
            raise ValueError("require 0 < d_min < d_max")
        if self.triplets_per_query < 1:
            raise ValueError("triplets_per_query must be >= 1")

    def resolve_fov(self, intrinsics: CameraIntrinsics) -> float:
        return self.fov_deg if self.fov_deg is not None else intrinsics.fov_deg

    def reproj_threshold(self, n_points: int) -> float:
        """Cumulative squared-pixel budget for n tracked points."""
        return self.reproj_rms_px**2 * n_points


@dataclass(frozen=True)
class Triplet:
    anchor_id: int
    positive_id: int
    negative_id: int
    rel_pose: RelativePose
    direction: str

    def __post_init__(self):
        if len({self.anchor_id, self.positive_id, self.negative_id}) != 3:
            raise ValueError("anchor, positive, negative must be distinct")


def positive_candidates(
    query: CameraPose,
    poses: Sequence[CameraPose],
    cfg: MiningConfig,
    fov_deg: float,
    mode: Mode,
    neighbor_ids: Sequence[int] | None = None,
) -> list[int]:
    """Ids of poses passing the view predicate for this query, ascending."""
    pool = poses if neighbor_ids is None else [poses[i] for i in neighbor_ids]
    out = []
    for cand in pool:
        if cand.id == query.id:
            continue
        if in_view(
            query,
            cand,
            fov_deg=fov_deg,
            d_min=cfg.d_min,
            d_max=cfg.d_max,
            orient_tol_deg=cfg.orient_tol_deg,
            mode=mode,
        ):
            out.append(cand.id)
    return sorted(out)


def negative_candidates(
    query: CameraPose,
    poses: Sequence[CameraPose],
    cfg: MiningConfig,
    fov_deg: float,
    mode: Mode,
    near_ids: Sequence[int] | None = None,
) -> list[int]:
    """Ids failing the view predicate at distance > negative_min_dist."""
    if near_ids is None:
        near = None
    else:
        near = set(near_ids)
    out = []
    for idx, cand in enumerate(poses):
        if cand.id == query.id:
            continue
        if near is not None:
            if idx in near:
                continue  # inside the min-distance ball
        elif np.linalg.norm(cand.t - query.t) <= cfg.negative_min_dist:
            continue
        if cfg.negative_min_dist <= cfg.d_max and in_view(
            query,
            cand,
            fov_deg=fov_deg,
            d_min=cfg.d_min,
            d_max=cfg.d_max,
            orient_tol_deg=cfg.orient_tol_deg,
            mode=mode,
        ):
            continue
        out.append(cand.id)
    return sorted(out)


def mine_triplets(
    dataset: SequenceDataset,
    cfg: MiningConfig,
    mode: Mode,
    seed: int = 0,
    use_spatial_index: bool = True,
) -> list[Triplet]:
    """Per query: up to triplets_per_query (positive, negative) pairs.

    Positives pass the view predicate for the given mode; negatives fail it
    and sit farther than negative_min_dist. Queries without a valid positive
    (or negative) are skipped and logged.
    """
    poses = dataset.poses
    if len(poses) < 3:
        raise ValueError("need at least three poses to mine triplets")
    fov = cfg.resolve_fov(dataset.intrinsics)
    positions = np.array([p.t for p in poses])
    tree = cKDTree(positions) if use_spatial_index else None

    triplets: list[Triplet] = []
    for qi, query in enumerate(poses):
        if tree is not None:
            neighbor_idx = sorted(tree.query_ball_point(positions[qi], cfg.d_max))
            near_idx = sorted(tree.query_ball_point(positions[qi], cfg.negative_min_dist))
            positives = positive_candidates(query, poses, cfg, fov, mode, neighbor_idx)
            negatives = negative_candidates(query, poses, cfg, fov, mode, near_idx)
        else:
            positives = positive_candidates(query, poses, cfg, fov, mode)
            negatives = negative_candidates(query, poses, cfg, fov, mode)
        if not positives:
            logger.debug("query %d: no positive candidate (%s mode), skipped", query.id, mode)
            continue
        if not negatives:
            logger.debug("query %d: no negative candidate (%s mode), skipped", query.id, mode)
            continue
        rng = substream(seed, f"mine:{mode}:{query.id}")
        k = min(cfg.triplets_per_query, len(positives))
        chosen_pos = rng.choice(len(positives), size=k, replace=False)
        chosen_neg = rng.choice(len(negatives), size=k, replace=len(negatives) < k)
        for pi, ni in zip(chosen_pos, chosen_neg):
            pos_id = positives[int(pi)]
            neg_id = negatives[int(ni)]
            rel = compose_relative(query, dataset.pose_by_id(pos_id))
            triplets.append(
                Triplet(
                    anchor_id=query.id,
                    positive_id=pos_id,
                    negative_id=neg_id,
                    rel_pose=rel,
                    direction=mode,
                )
            )
    return triplets


# ---------------------------------------------------------------------------
# reprojection validation (same-direction triplets only)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ValidationResult:
    keep: bool
    error: float
    reason: str | None = None


def validate_triplet_reprojection(
    triplet: Triplet,
    anchor_points: np.ndarray,
    tracked_pixels: np.ndarray,
    intrinsics: CameraIntrinsics,
    threshold: float,
) -> ValidationResult:
    """Keep the triplet iff the cumulative squared pixel error stays within
    threshold when the anchor's 3-D points are projected into the positive.

    anchor_points are expressed in the anchor camera frame; tracked_pixels are
    the observed 2-D locations of the same points in the positive sample.
    Opposite-direction triplets are rejected outright: with the perspective
    reversed there are no tracked reference pixels to compare against.
    """
    if triplet.direction != "forward":
        raise ValueError("reprojection validation applies to forward-mode triplets only")
    pts = np.atleast_2d(np.asarray(anchor_points, dtype=np.float64))
    if pts.shape[0] == 0:
        return ValidationResult(keep=False, error=float("inf"), reason="no-correspondences")
    try:
        result = reprojection_error(tracked_pixels, intrinsics, triplet.rel_pose, pts)
    except EmptyCorrespondenceError:
        return ValidationResult(keep=False, error=float("inf"), reason="no-correspondences")
    if result.any_behind:
        return ValidationResult(keep=False, error=result.total, reason="behind-camera")
    if result.total > threshold:
        return ValidationResult(keep=False, error=result.total, reason="reprojection-error")
    return ValidationResult(keep=True, error=result.total)


def validate_forward_manifest(
    dataset: SequenceDataset, triplets: Sequence[Triplet], cfg: MiningConfig
) -> tuple[list[Triplet], list[ValidationResult]]:
    """Filter forward triplets using the stored landmark correspondences.

    Shared landmarks between anchor and positive act as the tracked keypoints;
    their anchor-frame positions are the 3-D points.
    """
    kept: list[Triplet] = []
    results: list[ValidationResult] = []
    for t in triplets:
        obs_a = dataset.observations.get(t.anchor_id)
        obs_p = dataset.observations.get(t.positive_id)
        if obs_a is None or obs_p is None or obs_a.empty or obs_p.empty:
            results.append(ValidationResult(False, float("inf"), "no-correspondences"))
            continue
        shared, ia, ip = np.intersect1d(
            obs_a.landmark_ids, obs_p.landmark_ids, return_indices=True
        )
        if shared.size == 0:
            results.append(ValidationResult(False, float("inf"), "no-correspondences"))
            continue
        anchor_pose = dataset.pose_by_id(t.anchor_id)
        anchor_frame = anchor_pose.world_to_camera(obs_a.positions[ia])
        res = validate_triplet_reprojection(
            t,
            anchor_frame,
            obs_p.pixels[ip],
            dataset.intrinsics,
            cfg.reproj_threshold(shared.size),
        )
        results.append(res)
        if res.keep:
            kept.append(t)
    return kept, results


# ---------------------------------------------------------------------------
# distance-range sweep
# ---------------------------------------------------------------------------

def triplets_with_observations(triplets: Sequence[Triplet], observations: dict) -> list[Triplet]:
    """Drop triplets referencing missing or empty observations."""

    def usable(sample_id: int) -> bool:
        obs = observations.get(sample_id)
        return obs is not None and not getattr(obs, "empty", False)

    return [
        t
        for t in triplets
        if usable(t.anchor_id) and usable(t.positive_id) and usable(t.negative_id)
    ]


@dataclass(frozen=True)
class SweepCell:
    d_min: float
    d_max: float
    n_triplets: int
    train_loss: float
    generalization_gap: float
    empty: bool


def range_sweep(
    dataset: SequenceDataset,
    grid: Sequence[tuple[float, float]],
    cfg: MiningConfig,
    mode: Mode = "backward",
    *,
    embed_k: int = 8,
    embedding_dim: int = 32,
    train_cfg=None,
    seed: int = 0,
) -> list[SweepCell]:
    """Mine and train once per (d_min, d_max) cell; report final training loss
    and the validation-minus-training gap (held-out triplet split).
    """
    from .embedding import EmbedTrainConfig, init_model, train_embedding

    cells: list[SweepCell] = []
    base_train = train_cfg or EmbedTrainConfig(epochs=8, patience=8)
    for d_min, d_max in grid:
        cell_cfg = replace(cfg, d_min=d_min, d_max=d_max)
        triplets = triplets_with_observations(
            mine_triplets(dataset, cell_cfg, mode, seed=seed), dataset.observations
        )
        if len(triplets) < 5:
            cells.append(
                SweepCell(d_min, d_max, len(triplets), float("nan"), float("nan"), True)
            )
            continue
        corpus = [
            obs for p in dataset.poses
            if (obs := dataset.observations.get(p.id)) is not None and not obs.empty
        ]
        model = init_model(corpus, embed_k, embedding_dim, seed=seed)
        tcfg = replace(base_train, seed=seed)
        history = train_embedding(model, triplets, dataset.observations, tcfg)
        train_loss = history.train_loss[-1]
        gap = history.val_loss[-1] - train_loss
        cells.append(SweepCell(d_min, d_max, len(triplets), train_loss, gap, False))
    return cells


def best_cell(cells: Sequence[SweepCell]) -> SweepCell:
    """Cell minimizing train loss plus non-negative generalization gap."""
    usable = [c for c in cells if not c.empty]
    if not usable:
        raise ValueError("all sweep cells are empty")
    return min(usable, key=lambda c: c.train_loss + max(0.0, c.generalization_gap))


# ---------------------------------------------------------------------------
# manifest format: header, then
# `anchor positive negative qw qx qy qz tx ty tz direction`
# ---------------------------------------------------------------------------

MANIFEST_HEADER = "# biloop-triplets v1"


def write_manifest(path: str | Path, triplets: Sequence[Triplet]) -> None:
    lines = [MANIFEST_HEADER, "# anchor positive negative qw qx qy qz tx ty tz direction"]
    for t in triplets:
        q, tr = t.rel_pose.q, t.rel_pose.t
        fields = [str(t.anchor_id), str(t.positive_id), str(t.negative_id)]
        fields += [f"{v:.17g}" for v in q]
        fields += [f"{v:.17g}" for v in tr]
        fields.append(t.direction)
        lines.append(" ".join(fields))
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path: str | Path) -> list[Triplet]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != MANIFEST_HEADER:
        raise ValueError(f"{path}: missing manifest version header")
    out: list[Triplet] = []
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 11:
            raise ValueError(f"{path}:{lineno}: expected 11 fields, got {len(parts)}")
        a, p, n = (int(v) for v in parts[:3])
        qw, qx, qy, qz, tx, ty, tz = (float(v) for v in parts[3:10])
        out.append(
            Triplet(
                anchor_id=a,
                positive_id=p,
                negative_id=n,
                rel_pose=RelativePose(q=np.array([qw, qx, qy, qz]), t=np.array([tx, ty, tz])),
                direction=parts[10],
            )
        )
    return out

"""Relative 6-DoF pose regression on matched view pairs.

Targets are 7-vectors [tx, ty, tz, qw, qx, qy, qz] scaled per component to
[0, 1]; the head is a three-layer leaky-rectifier MLP with dropout over the
concatenated branch embeddings of the two views. The branch encoder is the
(shared) trained place-embedding model, kept frozen here.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .embedding import EmbeddingModel, read_tensors, write_tensors
from .geometry import RelativePose
from .optim import Adam, epoch_lr
from .seeding import substream

_QUAT_EPS = 1e-12


class DegenerateQuaternionError(ValueError):
    """Raised when a predicted quaternion has (near-)zero norm."""


def regression_quat(q: np.ndarray) -> np.ndarray:
    """Sign-canonicalize for regression: largest-magnitude component positive.

    Keeps near-180-degree rotations on one hemisphere so scaled targets stay
    continuous; angular error is sign-invariant so metrics are unaffected.
    """
    q = np.asarray(q, dtype=np.float64)
    lead = np.abs(q).argmax()
    return -q if q[lead] < 0 else q.copy()


def pose_to_vector(rel: RelativePose) -> np.ndarray:
    return np.concatenate([rel.t, regression_quat(rel.q)])


def vector_to_pose(vec: np.ndarray) -> RelativePose:
    vec = np.asarray(vec, dtype=np.float64)
    q = vec[3:7]
    norm = float(np.linalg.norm(q))
    if norm < _QUAT_EPS:
        raise DegenerateQuaternionError("predicted quaternion has zero norm")
    return RelativePose(q=q / norm, t=vec[:3].copy())


# ---------------------------------------------------------------------------
# per-component range scaling
# ---------------------------------------------------------------------------

@dataclass
class PoseScaler:
    """Affine per-component map of 7-vectors onto [0, 1] and back."""

    d_min: np.ndarray
    d_max: np.ndarray
    pinned: np.ndarray  # components whose training range was degenerate

    sc_min: float = 0.0
    sc_max: float = 1.0

    @classmethod
    def fit(cls, targets: np.ndarray, eps: float = 1e-6) -> "PoseScaler":
        targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
        d_min = targets.min(axis=0)
        d_max = targets.max(axis=0)
        pinned = (d_max - d_min) < eps
        d_min = np.where(pinned, d_min - eps, d_min)
        d_max = np.where(pinned, d_max + eps, d_max)
        return cls(d_min=d_min, d_max=d_max, pinned=pinned)

    def scale(self, vec: np.ndarray) -> np.ndarray:
        vec = np.asarray(vec, dtype=np.float64)
        span = self.sc_max - self.sc_min
        return span * (vec - self.d_min) / (self.d_max - self.d_min) + self.sc_min

    def unscale(self, vec: np.ndarray) -> np.ndarray:
        vec = np.asarray(vec, dtype=np.float64)
        out_of_range = (vec < self.sc_min - 1e-12) | (vec > self.sc_max + 1e-12)
        if out_of_range.any():
            warnings.warn(
                f"{int(out_of_range.sum())} scaled component(s) outside "
                f"[{self.sc_min}, {self.sc_max}]; clamping",
                stacklevel=2,
            )
            vec = np.clip(vec, self.sc_min, self.sc_max)
        span = self.sc_max - self.sc_min
        return self.d_min + (vec - self.sc_min) * (self.d_max - self.d_min) / span


def scale_pose(vec: np.ndarray, scaler: PoseScaler) -> np.ndarray:
    return scaler.scale(vec)


def unscale_pose(vec: np.ndarray, scaler: PoseScaler) -> np.ndarray:
    return scaler.unscale(vec)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def pose_mse_loss(target_scaled: np.ndarray, estimate: np.ndarray) -> float:
    """Mean squared component difference of the two 7-vectors."""
    t = np.asarray(target_scaled, dtype=np.float64)
    e = np.asarray(estimate, dtype=np.float64)
    if t.shape != e.shape:
        raise ValueError("shape mismatch")
    return float(np.mean((t - e) ** 2))


def beta_weighted_loss(
    t_gt: np.ndarray, t_est: np.ndarray, q_gt: np.ndarray, q_est: np.ndarray, beta: float
) -> float:
    """Baseline weighted loss: squared translation error plus beta times
    squared quaternion error. Kept for comparison against the scaled MSE."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    dt = np.asarray(t_gt, dtype=np.float64) - np.asarray(t_est, dtype=np.float64)
    dq = np.asarray(q_gt, dtype=np.float64) - np.asarray(q_est, dtype=np.float64)
    return float(dt @ dt + beta * (dq @ dq))


# ---------------------------------------------------------------------------
# regression head
# ---------------------------------------------------------------------------

@dataclass
class HeadConfig:
    hidden: tuple[int, int] = (1024, 256)
    dropout: float = 0.3
    leaky_slope: float = 0.01


class PoseHead:
    """Three fully connected layers with leaky rectifiers and dropout."""

    def __init__(self, in_dim: int, cfg: HeadConfig, seed: int = 0):
        self.cfg = cfg
        rng = substream(seed, "pose-head-init")
        h1, h2 = cfg.hidden
        self.w1 = rng.normal(scale=np.sqrt(2.0 / in_dim), size=(in_dim, h1))
        self.b1 = np.zeros(h1)
        self.w2 = rng.normal(scale=np.sqrt(2.0 / h1), size=(h1, h2))
        self.b2 = np.zeros(h2)
        self.w3 = rng.normal(scale=np.sqrt(2.0 / h2), size=(h2, 7))
        self.b3 = np.zeros(7)

    def parameters(self) -> dict[str, np.ndarray]:
        return {
            "w1": self.w1, "b1": self.b1,
            "w2": self.w2, "b2": self.b2,
            "w3": self.w3, "b3": self.b3,
        }

    def _leaky(self, x: np.ndarray) -> np.ndarray:
        return np.where(x >= 0.0, x, self.cfg.leaky_slope * x)

    def forward(
        self, features: np.ndarray, train: bool = False, rng: np.random.Generator | None = None
    ) -> tuple[np.ndarray, dict]:
        f = np.atleast_2d(np.asarray(features, dtype=np.float64))
        keep = 1.0 - self.cfg.dropout if train and self.cfg.dropout > 0 else 1.0
        pre1 = f @ self.w1 + self.b1
        act1 = self._leaky(pre1)
        mask1 = (
            (rng.random(act1.shape) < keep) / keep if train and keep < 1.0 else np.ones_like(act1)
        )
        act1 = act1 * mask1
        pre2 = act1 @ self.w2 + self.b2
        act2 = self._leaky(pre2)
        mask2 = (
            (rng.random(act2.shape) < keep) / keep if train and keep < 1.0 else np.ones_like(act2)
        )
        act2 = act2 * mask2
        out = act2 @ self.w3 + self.b3
        cache = {"f": f, "pre1": pre1, "act1": act1, "mask1": mask1,
                 "pre2": pre2, "act2": act2, "mask2": mask2}
        return out, cache

    def backward(self, cache: dict, g_out: np.ndarray) -> dict[str, np.ndarray]:
        slope = self.cfg.leaky_slope
        g_act2 = g_out @ self.w3.T
        g_act2 = g_act2 * cache["mask2"]
        g_pre2 = g_act2 * np.where(cache["pre2"] >= 0.0, 1.0, slope)
        g_act1 = g_pre2 @ self.w2.T
        g_act1 = g_act1 * cache["mask1"]
        g_pre1 = g_act1 * np.where(cache["pre1"] >= 0.0, 1.0, slope)
        return {
            "w3": cache["act2"].T @ g_out, "b3": g_out.sum(axis=0),
            "w2": cache["act1"].T @ g_pre2, "b2": g_pre2.sum(axis=0),
            "w1": cache["f"].T @ g_pre1, "b1": g_pre1.sum(axis=0),
        }


@dataclass
class PoseRegressor:
    """Siamese branch encoder (shared embedding model) + fused regression head."""

    encoder: EmbeddingModel
    head: PoseHead
    scaler: PoseScaler

    def features(self, obs_a, obs_b) -> np.ndarray:
        return np.concatenate([self.encoder.embed(obs_a), self.encoder.embed(obs_b)])

    def predict_scaled(self, features: np.ndarray) -> np.ndarray:
        out, _ = self.head.forward(features, train=False)
        return out[0]


def predict_relative_pose(regressor: PoseRegressor, obs_a, obs_b) -> RelativePose:
    """Head output, unscaled to metric range, quaternion re-normalized.

    Raises DegenerateQuaternionError when the head emits a zero quaternion so
    callers can demote the match instead of reporting a bogus pose.
    """
    feats = regressor.features(obs_a, obs_b)
    scaled = regressor.predict_scaled(feats)
    return vector_to_pose(regressor.scaler.unscale(scaled))


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class PoseTrainConfig:
    lr: float = 3e-3
    epochs: int = 60
    batch_size: int = 64
    val_fraction: float = 0.2
    patience: int = 10
    min_epochs: int = 5
    schedule: str = "constant"
    head: HeadConfig = field(default_factory=HeadConfig)
    finetune_encoder: bool = True
    encoder_lr: float = 1e-4
    seed: int = 0


@dataclass
class PoseTrainResult:
    regressor: PoseRegressor
    history_epochs: list[int]
    train_loss: list[float]
    val_loss: list[float]
    best_epoch: int


def _embed_cache(encoder: EmbeddingModel, observations, ids: set[int]) -> dict[int, np.ndarray]:
    return {i: encoder.embed(observations[i]) for i in sorted(ids)}


def train_pose_regressor(
    pairs: Sequence[tuple[int, int, RelativePose]],
    observations: dict[int, object],
    encoder: EmbeddingModel,
    cfg: PoseTrainConfig,
) -> PoseTrainResult:
    """Fit the scaler on training targets and minimize the scaled MSE.

    The branch encoder starts from the supplied embedding model; with
    cfg.finetune_encoder the regressor trains its own copy end-to-end at
    encoder_lr, otherwise branches stay frozen and embeddings are computed
    once per sample id. Deterministic under cfg.seed.
    """
    if not pairs:
        raise ValueError("no training pairs")
    encoder = encoder.copy()
    ids = sorted({a for a, _, _ in pairs} | {b for _, b, _ in pairs})
    targets = np.array([pose_to_vector(rel) for _, _, rel in pairs])
    pair_ids = [(a, b) for a, b, _ in pairs]

    rng = substream(cfg.seed, "train-pose")
    order = rng.permutation(len(pairs))
    n_val = int(round(cfg.val_fraction * len(pairs)))
    val_idx, train_idx = order[:n_val], order[n_val:]
    if train_idx.size == 0:
        raise ValueError("no training pairs after validation split")

    scaler = PoseScaler.fit(targets[train_idx])
    if scaler.pinned.any():
        warnings.warn(
            f"degenerate target range on component(s) {np.nonzero(scaler.pinned)[0].tolist()}; pinned",
            stacklevel=2,
        )
    scaled = scaler.scale(targets)

    e_dim = encoder.embedding_dim
    head = PoseHead(2 * e_dim, cfg.head, seed=cfg.seed)
    head_opt = Adam(head.parameters(), lr=cfg.lr)
    enc_opt = Adam(encoder.parameters(), lr=cfg.encoder_lr) if cfg.finetune_encoder else None

    frozen_emb: dict[int, np.ndarray] | None = None
    if not cfg.finetune_encoder:
        frozen_emb = _embed_cache(encoder, observations, set(ids))

    def current_features(batch_ids: list[tuple[int, int]]) -> np.ndarray:
        if frozen_emb is not None:
            emb = frozen_emb
        else:
            uniq = sorted({i for ab in batch_ids for i in ab})
            emb = {i: encoder.embed(observations[i]) for i in uniq}
        return np.array([np.concatenate([emb[a], emb[b]]) for a, b in batch_ids])

    def eval_loss(idx: np.ndarray) -> float:
        if idx.size == 0:
            return float("nan")
        feats = current_features([pair_ids[i] for i in idx])
        out, _ = head.forward(feats, train=False)
        return float(np.mean((scaled[idx] - out) ** 2))

    best_val = np.inf
    all_params = dict(head.parameters())
    if cfg.finetune_encoder:
        all_params.update({f"enc::{k}": v for k, v in encoder.parameters().items()})
    best_state = {k: v.copy() for k, v in all_params.items()}
    hist_e: list[int] = []
    hist_t: list[float] = []
    hist_v: list[float] = []
    best_epoch = 0
    stale = 0

    for epoch in range(cfg.epochs):
        head_opt.lr = epoch_lr(cfg.lr, epoch, cfg.schedule)
        perm = rng.permutation(train_idx.size)
        epoch_loss = 0.0
        for start in range(0, perm.size, cfg.batch_size):
            rows = train_idx[perm[start : start + cfg.batch_size]]
            batch_ids = [pair_ids[i] for i in rows]
            if frozen_emb is not None:
                feats = np.array(
                    [np.concatenate([frozen_emb[a], frozen_emb[b]]) for a, b in batch_ids]
                )
                caches = None
            else:
                uniq = sorted({i for ab in batch_ids for i in ab})
                fwd = {i: encoder.embed_with_cache(observations[i]) for i in uniq}
                feats = np.array(
                    [np.concatenate([fwd[a][0], fwd[b][0]]) for a, b in batch_ids]
                )
                caches = fwd
            out, cache = head.forward(feats, train=True, rng=rng)
            err = out - scaled[rows]
            batch_loss = float(np.mean(err**2))
            if not np.isfinite(batch_loss):
                from .embedding import TrainingDivergedError

                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}")
            g_out = 2.0 * err / err.size
            grads = head.backward(cache, g_out)
            if caches is not None:
                g_feats = _feature_gradients(head, cache, g_out)
                g_by_id: dict[int, np.ndarray] = {}
                for row, (a, b) in enumerate(batch_ids):
                    g_by_id[a] = g_by_id.get(a, 0.0) + g_feats[row, :e_dim]
                    g_by_id[b] = g_by_id.get(b, 0.0) + g_feats[row, e_dim:]
                enc_grads: dict[str, np.ndarray] = {}
                for i, g in sorted(g_by_id.items()):
                    for name, grad in encoder.backward(caches[i][1], g).items():
                        if name in enc_grads:
                            enc_grads[name] += grad
                        else:
                            enc_grads[name] = grad.copy()
                enc_opt.step(enc_grads)
            head_opt.step(grads)
            epoch_loss += batch_loss * rows.size
        epoch_loss /= train_idx.size
        val_loss = eval_loss(val_idx) if val_idx.size else epoch_loss
        hist_e.append(epoch)
        hist_t.append(epoch_loss)
        hist_v.append(val_loss)
        if val_loss < best_val - 1e-12:
            best_val = val_loss
            best_state = {k: v.copy() for k, v in all_params.items()}
            best_epoch = epoch
            stale = 0
        else:
            stale += 1
            if epoch + 1 >= cfg.min_epochs and stale > cfg.patience:
                break
    for name, value in best_state.items():
        all_params[name][...] = value
    regressor = PoseRegressor(encoder=encoder, head=head, scaler=scaler)
    return PoseTrainResult(
        regressor=regressor,
        history_epochs=hist_e,
        train_loss=hist_t,
        val_loss=hist_v,
        best_epoch=best_epoch,
    )


def _feature_gradients(head: PoseHead, cache: dict, g_out: np.ndarray) -> np.ndarray:
    """dLoss/dfeatures for a cached head forward pass."""
    slope = head.cfg.leaky_slope
    g_act2 = (g_out @ head.w3.T) * cache["mask2"]
    g_pre2 = g_act2 * np.where(cache["pre2"] >= 0.0, 1.0, slope)
    g_act1 = (g_pre2 @ head.w2.T) * cache["mask1"]
    g_pre1 = g_act1 * np.where(cache["pre1"] >= 0.0, 1.0, slope)
    return g_pre1 @ head.w1.T


# ---------------------------------------------------------------------------
# persistence and per-pair report
# ---------------------------------------------------------------------------

def save_regressor(path: str | Path, regressor: PoseRegressor) -> None:
    """One container holds the head, the scaler, and the (possibly fine-tuned)
    branch encoder the regressor owns."""
    head = regressor.head
    enc = regressor.encoder
    metadata = {
        "kind": "pose-regressor",
        "hidden": list(head.cfg.hidden),
        "dropout": head.cfg.dropout,
        "leaky_slope": head.cfg.leaky_slope,
        "in_dim": head.w1.shape[0],
        "encoder": {
            "backend": enc.backend.kind,
            "intra_norm": enc.intra_norm,
            "k": enc.vlad.k,
            "dim": enc.vlad.dim,
            "embedding_dim": enc.embedding_dim,
            "patch_px": getattr(enc.backend, "patch_px", None),
            "backend_dim": getattr(enc.backend, "dim", None),
        },
    }
    tensors = {f"head.{k}": v for k, v in head.parameters().items()}
    tensors.update({f"encoder.{k}": v for k, v in enc.parameters().items()})
    tensors["scaler.d_min"] = regressor.scaler.d_min
    tensors["scaler.d_max"] = regressor.scaler.d_max
    tensors["scaler.pinned"] = regressor.scaler.pinned.astype(np.float64)
    write_tensors(path, metadata, tensors)


def load_regressor(path: str | Path) -> PoseRegressor:
    from .embedding import VladParams, _make_backend

    metadata, tensors = read_tensors(path)
    if metadata.get("kind") != "pose-regressor":
        raise ValueError(f"{path}: not a pose-regressor container")
    cfg = HeadConfig(
        hidden=tuple(metadata["hidden"]),
        dropout=metadata["dropout"],
        leaky_slope=metadata["leaky_slope"],
    )
    head = PoseHead(int(metadata["in_dim"]), cfg, seed=0)
    for name, arr in head.parameters().items():
        arr[...] = tensors[f"head.{name}"]
    enc_meta = metadata["encoder"]
    backend = _make_backend(
        enc_meta["backend"],
        {"patch_px": enc_meta.get("patch_px") or 8, "dim": enc_meta.get("backend_dim") or 16},
    )
    encoder = EmbeddingModel(
        vlad=VladParams(
            centers=tensors["encoder.vlad.centers"],
            weights=tensors["encoder.vlad.weights"],
            biases=tensors["encoder.vlad.biases"],
        ),
        proj_w=tensors["encoder.proj.w"],
        proj_b=tensors["encoder.proj.b"],
        backend=backend,
        intra_norm=bool(enc_meta["intra_norm"]),
    )
    if backend.trainable:
        for name, arr in backend.parameters().items():
            arr[...] = tensors[f"encoder.backend.{name}"]
    scaler = PoseScaler(
        d_min=tensors["scaler.d_min"],
        d_max=tensors["scaler.d_max"],
        pinned=tensors["scaler.pinned"] > 0.5,
    )
    return PoseRegressor(encoder=encoder, head=head, scaler=scaler)


POSE_REPORT_HEADER = "# biloop-posereport v1"


def write_pose_report(path: str | Path, rows: Sequence[dict]) -> None:
    """Per-pair report: ids, predicted and ground-truth pose, metric errors."""
    lines = [
        POSE_REPORT_HEADER,
        "# anchor_id match_id pred_q(4) pred_t(3) gt_q(4) gt_t(3) err_m err_deg",
    ]
    for r in rows:
        fields = [str(r["anchor_id"]), str(r["match_id"])]
        fields += [f"{v:.9g}" for v in r["pred_q"]]
        fields += [f"{v:.9g}" for v in r["pred_t"]]
        fields += [f"{v:.9g}" for v in r["gt_q"]]
        fields += [f"{v:.9g}" for v in r["gt_t"]]
        fields += [f"{r['err_m']:.9g}", f"{r['err_deg']:.9g}"]
        lines.append(" ".join(fields))
    Path(path).write_text("\n".join(lines) + "\n")

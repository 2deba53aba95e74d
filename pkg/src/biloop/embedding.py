"""Descriptor backends, VLAD/soft-assignment aggregation, and triplet training.

The embedding of a view is: backend descriptors -> soft-assignment residual
aggregation -> L2 normalization -> linear projection -> L2 normalization.
All gradients are analytic (checked against finite differences) so training
runs on plain numpy/compiled kernels with no autodiff framework.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np
from scipy.cluster.vq import kmeans2

from . import kernels
from .optim import Adam, epoch_lr
from .seeding import substream
from .synthworld import Observation

_NORM_EPS = 1e-12


class EmptyDescriptorError(ValueError):
    """Raised when an operation needs at least one local descriptor."""


class TrainingDivergedError(RuntimeError):
    """Raised when the training loss stops being finite."""


@dataclass
class LocalDescriptorSet:
    """N local descriptors of fixed dimension for one view."""

    descriptors: np.ndarray
    source_id: int = -1

    def __post_init__(self):
        self.descriptors = np.atleast_2d(np.asarray(self.descriptors, dtype=np.float64))

    @property
    def n(self) -> int:
        return self.descriptors.shape[0]

    @property
    def dim(self) -> int:
        return self.descriptors.shape[1]


@dataclass
class VladParams:
    """Trainable aggregation parameters: centres, assignment weights, biases."""

    centers: np.ndarray  # (K, D)
    weights: np.ndarray  # (K, D)
    biases: np.ndarray  # (K,)

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=np.float64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.biases = np.asarray(self.biases, dtype=np.float64)
        k, d = self.centers.shape
        if self.weights.shape != (k, d) or self.biases.shape != (k,):
            raise ValueError("inconsistent parameter shapes")
        if k < 1:
            raise ValueError("need at least one cluster")

    @property
    def k(self) -> int:
        return self.centers.shape[0]

    @property
    def dim(self) -> int:
        return self.centers.shape[1]

    @classmethod
    def from_centers(cls, centers: np.ndarray, alpha: float) -> "VladParams":
        """Assignment weights from centres so softmax approaches the nearest-centre
        indicator as alpha grows (the usual soft-to-hard construction)."""
        centers = np.asarray(centers, dtype=np.float64)
        return cls(
            centers=centers.copy(),
            weights=2.0 * alpha * centers,
            biases=-alpha * (centers**2).sum(axis=1),
        )


@dataclass(frozen=True)
class VladVector:
    """Aggregated residual matrix and its normalized flattened form."""

    matrix: np.ndarray  # (K, D)
    flat: np.ndarray  # (K*D,), unit norm unless degenerate
    degenerate: bool


def _normalize(u: np.ndarray) -> tuple[np.ndarray, float]:
    norm = float(np.linalg.norm(u))
    if norm < _NORM_EPS:
        return np.zeros_like(u), 0.0
    return u / norm, norm


def _normalize_backward(f: np.ndarray, norm: float, g: np.ndarray) -> np.ndarray:
    if norm == 0.0:
        return np.zeros_like(g)
    return (g - f * float(f @ g)) / norm


def _as_descriptor_array(desc) -> np.ndarray:
    if isinstance(desc, LocalDescriptorSet):
        return desc.descriptors
    return np.atleast_2d(np.asarray(desc, dtype=np.float64))


def vlad_hard(desc, centers: np.ndarray) -> VladVector:
    """Hard nearest-centre aggregation, globally L2-normalized.

    A zero residual matrix (every descriptor exactly at its centre) normalizes
    to the zero vector with the degenerate flag set.
    """
    x = _as_descriptor_array(desc)
    if x.shape[0] == 0:
        raise EmptyDescriptorError("need at least one descriptor")
    v, _ = kernels.vlad_aggregate_hard(x, np.asarray(centers, dtype=np.float64))
    flat, norm = _normalize(v.ravel())
    return VladVector(matrix=v, flat=flat, degenerate=norm == 0.0)


def vlad_soft(desc, params: VladParams, intra_norm: bool = False) -> VladVector:
    """Soft-assignment aggregation, L2-normalized (optionally per-cluster first)."""
    x = _as_descriptor_array(desc)
    if x.shape[0] == 0:
        raise EmptyDescriptorError("need at least one descriptor")
    v, _ = kernels.vlad_aggregate_soft(x, params.centers, params.weights, params.biases)
    pre = _intra_normalize(v)[0] if intra_norm else v
    flat, norm = _normalize(pre.ravel())
    return VladVector(matrix=v, flat=flat, degenerate=norm == 0.0)


def _intra_normalize(v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(v, axis=1)
    safe = np.where(norms < _NORM_EPS, 1.0, norms)
    return v / safe[:, None], safe


def soft_assignments(desc, params: VladParams) -> np.ndarray:
    """Per-descriptor soft assignment weights (rows sum to one)."""
    x = _as_descriptor_array(desc)
    _, a = kernels.vlad_aggregate_soft(x, params.centers, params.weights, params.biases)
    return a


def vlad_soft_gradients(
    desc, params: VladParams, upstream: np.ndarray
) -> dict[str, np.ndarray]:
    """Gradients of the normalized flattened aggregation against all inputs.

    upstream is dLoss/d(flat). Returns gradients for 'centers', 'weights',
    'biases', and 'descriptors'.
    """
    x = _as_descriptor_array(desc)
    if x.shape[0] == 0:
        raise EmptyDescriptorError("need at least one descriptor")
    v, a = kernels.vlad_aggregate_soft(x, params.centers, params.weights, params.biases)
    flat, norm = _normalize(v.ravel())
    g_v = _normalize_backward(flat, norm, np.asarray(upstream, dtype=np.float64)).reshape(v.shape)
    g_x, g_c, g_w, g_b = kernels.vlad_aggregate_soft_backward(
        x, params.centers, params.weights, a, g_v
    )
    return {"centers": g_c, "weights": g_w, "biases": g_b, "descriptors": g_x}


# ---------------------------------------------------------------------------
# descriptor backends
# ---------------------------------------------------------------------------

class DescriptorBackend(Protocol):
    def extract(self, observation) -> np.ndarray: ...


class PassthroughBackend:
    """Uses stored descriptors directly (synthetic worlds, precomputed features)."""

    kind = "passthrough"
    trainable = False

    def extract(self, observation) -> np.ndarray:
        if isinstance(observation, Observation):
            return observation.descriptors
        return _as_descriptor_array(observation)

    def parameters(self) -> dict[str, np.ndarray]:
        return {}


class GridPatchEncoder:
    """Single-layer trainable encoder over an image patch grid.

    Splits a grayscale image into patch_px x patch_px tiles and maps each tile
    through a shared linear layer plus leaky rectifier, yielding one local
    descriptor per tile. Stands in for a CNN feature map at desk scale.
    """

    kind = "grid-patch"
    trainable = True

    def __init__(self, patch_px: int, dim: int, seed: int = 0, leaky_slope: float = 0.1):
        self.patch_px = patch_px
        self.dim = dim
        self.leaky_slope = leaky_slope
        rng = substream(seed, "grid-patch-init")
        fan_in = patch_px * patch_px
        self.w = rng.normal(scale=1.0 / np.sqrt(fan_in), size=(fan_in, dim))
        self.b = np.zeros(dim)

    def parameters(self) -> dict[str, np.ndarray]:
        return {"w": self.w, "b": self.b}

    def _patches(self, image: np.ndarray) -> np.ndarray:
        img = np.asarray(image, dtype=np.float64)
        if img.ndim == 3:
            img = img.mean(axis=2)
        p = self.patch_px
        gh, gw = img.shape[0] // p, img.shape[1] // p
        if gh == 0 or gw == 0:
            raise EmptyDescriptorError("image smaller than one patch")
        tiles = img[: gh * p, : gw * p].reshape(gh, p, gw, p).transpose(0, 2, 1, 3)
        return tiles.reshape(gh * gw, p * p) / 255.0

    def extract(self, observation) -> np.ndarray:
        return self.extract_with_cache(observation)[0]

    def extract_with_cache(self, observation) -> tuple[np.ndarray, dict]:
        image = observation.image if hasattr(observation, "image") else observation
        patches = self._patches(image)
        pre = patches @ self.w + self.b
        desc = np.where(pre >= 0.0, pre, self.leaky_slope * pre)
        return desc, {"patches": patches, "pre": pre}

    def backward(self, cache: dict, g_desc: np.ndarray) -> dict[str, np.ndarray]:
        slope = np.where(cache["pre"] >= 0.0, 1.0, self.leaky_slope)
        g_pre = g_desc * slope
        return {"w": cache["patches"].T @ g_pre, "b": g_pre.sum(axis=0)}


def _make_backend(kind: str, meta: dict) -> PassthroughBackend | GridPatchEncoder:
    if kind == "passthrough":
        return PassthroughBackend()
    if kind == "grid-patch":
        return GridPatchEncoder(patch_px=int(meta["patch_px"]), dim=int(meta["dim"]))
    raise ValueError(f"unknown backend kind {kind!r}")


# ---------------------------------------------------------------------------
# embedding model
# ---------------------------------------------------------------------------

@dataclass
class EmbeddingModel:
    """Backend + aggregation + projection; embeddings are unit E-vectors."""

    vlad: VladParams
    proj_w: np.ndarray  # (K*D, E)
    proj_b: np.ndarray  # (E,)
    backend: PassthroughBackend | GridPatchEncoder = field(default_factory=PassthroughBackend)
    intra_norm: bool = False

    def __post_init__(self):
        kd = self.vlad.k * self.vlad.dim
        self.proj_w = np.asarray(self.proj_w, dtype=np.float64)
        self.proj_b = np.asarray(self.proj_b, dtype=np.float64)
        if self.proj_w.shape[0] != kd or self.proj_w.shape[1] != self.proj_b.shape[0]:
            raise ValueError("projection shape inconsistent with aggregation output")

    @property
    def embedding_dim(self) -> int:
        return self.proj_w.shape[1]

    def parameters(self) -> dict[str, np.ndarray]:
        params = {
            "vlad.centers": self.vlad.centers,
            "vlad.weights": self.vlad.weights,
            "vlad.biases": self.vlad.biases,
            "proj.w": self.proj_w,
            "proj.b": self.proj_b,
        }
        if self.backend.trainable:
            for name, arr in self.backend.parameters().items():
                params[f"backend.{name}"] = arr
        return params

    def embed(self, observation) -> np.ndarray:
        return self.embed_with_cache(observation)[0]

    def embed_with_cache(self, observation) -> tuple[np.ndarray, dict]:
        if self.backend.trainable:
            x, backend_cache = self.backend.extract_with_cache(observation)
        else:
            x, backend_cache = self.backend.extract(observation), None
        if x.shape[0] == 0:
            sid = getattr(observation, "source_id", None)
            raise EmptyDescriptorError(f"no descriptors for sample {sid}")
        v, a = kernels.vlad_aggregate_soft(
            x, self.vlad.centers, self.vlad.weights, self.vlad.biases
        )
        if self.intra_norm:
            pre, row_norms = _intra_normalize(v)
        else:
            pre, row_norms = v, None
        flat, flat_norm = _normalize(pre.ravel())
        z = flat @ self.proj_w + self.proj_b
        f, z_norm = _normalize(z)
        if z_norm == 0.0:
            raise ValueError("projection collapsed to the zero vector")
        cache = {
            "x": x,
            "a": a,
            "v": v,
            "row_norms": row_norms,
            "flat": flat,
            "flat_norm": flat_norm,
            "f": f,
            "z_norm": z_norm,
            "backend": backend_cache,
        }
        return f, cache

    def backward(self, cache: dict, g_f: np.ndarray) -> dict[str, np.ndarray]:
        g_z = _normalize_backward(cache["f"], cache["z_norm"], g_f)
        g_flat = self.proj_w @ g_z
        g_pre = _normalize_backward(cache["flat"], cache["flat_norm"], g_flat).reshape(
            cache["v"].shape
        )
        if self.intra_norm:
            g_v = np.empty_like(g_pre)
            norms = cache["row_norms"]
            rows = cache["v"] / norms[:, None]
            inner = (g_pre * rows).sum(axis=1)
            g_v = (g_pre - rows * inner[:, None]) / norms[:, None]
        else:
            g_v = g_pre
        g_x, g_c, g_w, g_b = kernels.vlad_aggregate_soft_backward(
            cache["x"], self.vlad.centers, self.vlad.weights, cache["a"], g_v
        )
        grads = {
            "vlad.centers": g_c,
            "vlad.weights": g_w,
            "vlad.biases": g_b,
            "proj.w": np.outer(cache["flat"], g_z),
            "proj.b": g_z,
        }
        if self.backend.trainable:
            for name, arr in self.backend.backward(cache["backend"], g_x).items():
                grads[f"backend.{name}"] = arr
        return grads

    def copy(self) -> "EmbeddingModel":
        import copy as _copy

        return _copy.deepcopy(self)


def init_model(
    corpus: list,
    k: int,
    embedding_dim: int,
    seed: int = 0,
    *,
    alpha: float = 25.0,
    backend: PassthroughBackend | GridPatchEncoder | None = None,
    intra_norm: bool = False,
    kmeans_sample_cap: int = 20000,
) -> EmbeddingModel:
    """Data-driven initialization from a corpus of descriptor sets.

    Centres come from k-means over pooled descriptors; assignment weights use
    the soft-to-hard construction at moderate alpha; the projection starts from
    the principal components of the corpus aggregation vectors.
    """
    if not corpus:
        raise ValueError("empty corpus")
    backend = backend or PassthroughBackend()
    arrays = [backend.extract(obs) for obs in corpus]
    pooled = np.concatenate([a for a in arrays if a.shape[0] > 0], axis=0)
    if np.unique(pooled, axis=0).shape[0] < k:
        raise ValueError(f"need at least {k} distinct descriptors for {k} clusters")
    rng = substream(seed, "init-model")
    if pooled.shape[0] > kmeans_sample_cap:
        pooled = pooled[rng.choice(pooled.shape[0], size=kmeans_sample_cap, replace=False)]
    centers, _ = kmeans2(pooled, k, minit="++", seed=rng, iter=25)
    vlad = VladParams.from_centers(centers, alpha)

    kd = k * pooled.shape[1]
    if embedding_dim > kd:
        raise ValueError(f"embedding_dim {embedding_dim} exceeds aggregation size {kd}")
    flats = np.array([vlad_soft(a, vlad).flat for a in arrays if a.shape[0] > 0])
    mean = flats.mean(axis=0)
    _, _, vt = np.linalg.svd(flats - mean, full_matrices=True)
    components = vt[:embedding_dim]
    # sign convention: largest-magnitude entry of each component positive
    signs = np.sign(components[np.arange(components.shape[0]), np.abs(components).argmax(axis=1)])
    signs[signs == 0] = 1.0
    components *= signs[:, None]
    proj_w = components.T
    proj_b = -(mean @ proj_w)
    return EmbeddingModel(
        vlad=vlad, proj_w=proj_w, proj_b=proj_b, backend=backend, intra_norm=intra_norm
    )


# ---------------------------------------------------------------------------
# triplet loss and training
# ---------------------------------------------------------------------------

def triplet_loss(f_a: np.ndarray, f_p: np.ndarray, f_n: np.ndarray, margin: float) -> float:
    """Hinge on unsquared embedding distances: max(0, m + d(a,p) - d(a,n))."""
    d_p = float(np.linalg.norm(f_a - f_p))
    d_n = float(np.linalg.norm(f_a - f_n))
    return max(0.0, margin + d_p - d_n)


def triplet_loss_grad(
    f_a: np.ndarray, f_p: np.ndarray, f_n: np.ndarray, margin: float
) -> tuple[float, np.ndarray, np.ndarray, np.ndarray]:
    """Loss and gradients w.r.t. the three embeddings (zero where inactive)."""
    diff_p = f_a - f_p
    diff_n = f_a - f_n
    d_p = float(np.linalg.norm(diff_p))
    d_n = float(np.linalg.norm(diff_n))
    loss = margin + d_p - d_n
    zero = np.zeros_like(f_a)
    if loss <= 0.0:
        return 0.0, zero, zero.copy(), zero.copy()
    u_p = diff_p / d_p if d_p > _NORM_EPS else zero
    u_n = diff_n / d_n if d_n > _NORM_EPS else zero
    return loss, u_p - u_n, -u_p, u_n


@dataclass
class EmbedTrainConfig:
    lr: float = 0.01
    epochs: int = 30
    batch_size: int = 16
    margin: float = 0.1
    val_fraction: float = 0.2
    patience: int = 5
    min_epochs: int = 3
    schedule: str = "constant"
    seed: int = 0


@dataclass
class TrainHistory:
    epochs: list[int]
    train_loss: list[float]
    val_loss: list[float]
    best_epoch: int

    def rows(self) -> list[tuple[int, float, float]]:
        return list(zip(self.epochs, self.train_loss, self.val_loss))


def _mean_triplet_loss(model, triplet_obs, margin) -> float:
    if not triplet_obs:
        return 0.0
    total = 0.0
    for obs_a, obs_p, obs_n in triplet_obs:
        total += triplet_loss(model.embed(obs_a), model.embed(obs_p), model.embed(obs_n), margin)
    return total / len(triplet_obs)


def train_embedding(
    model: EmbeddingModel,
    triplets,
    observations: dict[int, object],
    cfg: EmbedTrainConfig,
) -> TrainHistory:
    """Minimize the summed triplet hinge over the manifest, in place.

    Deterministic under cfg.seed; validation uses a held-out triplet split and
    early stopping restores the best parameters seen.
    """
    if not triplets:
        raise ValueError("empty triplet manifest")
    obs_for = lambda tid: observations[tid]
    resolved = [
        (obs_for(t.anchor_id), obs_for(t.positive_id), obs_for(t.negative_id)) for t in triplets
    ]
    rng = substream(cfg.seed, "train-embed")
    order = rng.permutation(len(resolved))
    n_val = int(round(cfg.val_fraction * len(resolved)))
    val_set = [resolved[i] for i in order[:n_val]]
    train_set = [resolved[i] for i in order[n_val:]]
    if not train_set:
        raise ValueError("no training triplets after validation split")

    params = model.parameters()
    opt = Adam(params, lr=cfg.lr)
    history = TrainHistory(epochs=[], train_loss=[], val_loss=[], best_epoch=0)
    best_val = np.inf
    best_state = {k: v.copy() for k, v in params.items()}
    stale = 0

    for epoch in range(cfg.epochs):
        opt.lr = epoch_lr(cfg.lr, epoch, cfg.schedule)
        perm = rng.permutation(len(train_set))
        epoch_loss = 0.0
        for start in range(0, len(perm), cfg.batch_size):
            batch = perm[start : start + cfg.batch_size]
            grads = {k: np.zeros_like(v) for k, v in params.items()}
            batch_loss = 0.0
            for idx in batch:
                obs_a, obs_p, obs_n = train_set[idx]
                f_a, cache_a = model.embed_with_cache(obs_a)
                f_p, cache_p = model.embed_with_cache(obs_p)
                f_n, cache_n = model.embed_with_cache(obs_n)
                loss, g_a, g_p, g_n = triplet_loss_grad(f_a, f_p, f_n, cfg.margin)
                batch_loss += loss
                if loss > 0.0:
                    for cache, g in ((cache_a, g_a), (cache_p, g_p), (cache_n, g_n)):
                        for name, grad in model.backward(cache, g).items():
                            grads[name] += grad
            scale = 1.0 / len(batch)
            batch_loss *= scale
            if not np.isfinite(batch_loss):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, batch starting {start}"
                )
            for name in grads:
                grads[name] *= scale
            opt.step(grads)
            epoch_loss += batch_loss * len(batch)
        epoch_loss /= len(train_set)
        val_loss = _mean_triplet_loss(model, val_set, cfg.margin) if val_set else epoch_loss
        history.epochs.append(epoch)
        history.train_loss.append(epoch_loss)
        history.val_loss.append(val_loss)
        if val_loss < best_val - 1e-12:
            best_val = val_loss
            best_state = {k: v.copy() for k, v in params.items()}
            history.best_epoch = epoch
            stale = 0
        else:
            stale += 1
            if epoch + 1 >= cfg.min_epochs and stale > cfg.patience:
                break
    for name, value in best_state.items():
        params[name][...] = value
    return history


# ---------------------------------------------------------------------------
# model container: magic + json metadata + named float32 tensors
# ---------------------------------------------------------------------------

_MODEL_MAGIC = b"BLMDL1\n"


def write_tensors(path: str | Path, metadata: dict, tensors: dict[str, np.ndarray]) -> None:
    meta_blob = json.dumps(metadata, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MODEL_MAGIC)
        fh.write(struct.pack("<i", len(meta_blob)))
        fh.write(meta_blob)
        fh.write(struct.pack("<i", len(tensors)))
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name], dtype="<f4")
            name_b = name.encode("utf-8")
            fh.write(struct.pack("<i", len(name_b)))
            fh.write(name_b)
            fh.write(struct.pack("<i", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}i", *arr.shape))
            fh.write(arr.tobytes())


def read_tensors(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[: len(_MODEL_MAGIC)] != _MODEL_MAGIC:
        raise ValueError(f"{path}: unknown model container version")
    off = len(_MODEL_MAGIC)
    (meta_len,) = struct.unpack_from("<i", raw, off)
    off += 4
    metadata = json.loads(raw[off : off + meta_len].decode("utf-8"))
    off += meta_len
    (count,) = struct.unpack_from("<i", raw, off)
    off += 4
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<i", raw, off)
        off += 4
        name = raw[off : off + name_len].decode("utf-8")
        off += name_len
        (ndim,) = struct.unpack_from("<i", raw, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}i", raw, off)
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(raw, dtype="<f4", count=size, offset=off).reshape(shape)
        off += 4 * size
        tensors[name] = arr.astype(np.float64)
    return metadata, tensors


def save_model(path: str | Path, model: EmbeddingModel) -> None:
    metadata = {
        "kind": "embedding",
        "backend": model.backend.kind,
        "intra_norm": model.intra_norm,
        "k": model.vlad.k,
        "dim": model.vlad.dim,
        "embedding_dim": model.embedding_dim,
    }
    if model.backend.kind == "grid-patch":
        metadata["patch_px"] = model.backend.patch_px
        metadata["backend_dim"] = model.backend.dim
    tensors = dict(model.parameters())
    write_tensors(path, metadata, tensors)


def load_model(path: str | Path) -> EmbeddingModel:
    metadata, tensors = read_tensors(path)
    if metadata.get("kind") != "embedding":
        raise ValueError(f"{path}: not an embedding model container")
    backend = _make_backend(
        metadata["backend"],
        {"patch_px": metadata.get("patch_px", 8), "dim": metadata.get("backend_dim", 16)},
    )
    model = EmbeddingModel(
        vlad=VladParams(
            centers=tensors["vlad.centers"],
            weights=tensors["vlad.weights"],
            biases=tensors["vlad.biases"],
        ),
        proj_w=tensors["proj.w"],
        proj_b=tensors["proj.b"],
        backend=backend,
        intra_norm=bool(metadata["intra_norm"]),
    )
    if backend.trainable:
        for name, arr in backend.parameters().items():
            arr[...] = tensors[f"backend.{name}"]
    return model

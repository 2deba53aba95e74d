"""Embedding database, exact top-N retrieval, and causal loop detection with
neighbour confidence sharing.

Scores are cosine similarity (1 - d2/2 for unit vectors, d2 the squared
Euclidean embedding distance). A candidate above the score threshold tau is
accepted only if its database location is consistent, in traveled distance,
with the recently localized anchors.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import kernels

OUTCOMES = ("no_match", "unique_match", "multiple_matches", "rejected_candidates")


@dataclass(frozen=True)
class EmbeddingIndex:
    """Immutable database of unit embeddings with per-entry path positions."""

    ids: np.ndarray  # (n,) int64
    vectors: np.ndarray  # (n, e) unit rows
    path_positions: np.ndarray  # (n,) cumulative traveled meters

    def __len__(self) -> int:
        return self.ids.shape[0]

    def position_of(self, db_id: int) -> float:
        row = np.nonzero(self.ids == db_id)[0]
        if row.size == 0:
            raise KeyError(f"id {db_id} not in index")
        return float(self.path_positions[row[0]])


def build_index(
    ids: Sequence[int], vectors: np.ndarray, path_positions: Sequence[float]
) -> EmbeddingIndex:
    ids_arr = np.asarray(ids, dtype=np.int64)
    vec = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
    pos = np.asarray(path_positions, dtype=np.float64)
    if not (ids_arr.shape[0] == vec.shape[0] == pos.shape[0]):
        raise ValueError("ids, vectors, path_positions lengths differ")
    if np.unique(ids_arr).shape[0] != ids_arr.shape[0]:
        raise ValueError("duplicate ids in index")
    if ids_arr.shape[0]:
        norms = np.linalg.norm(vec, axis=1)
        if np.abs(norms - 1.0).max() > 1e-5:
            raise ValueError("index vectors must be unit norm")
        vec = vec / norms[:, None]
        if np.any(np.diff(pos) < 0):
            raise ValueError("path positions must be non-decreasing in insertion order")
    return EmbeddingIndex(ids=ids_arr, vectors=vec, path_positions=pos)


@dataclass
class MatchCandidate:
    """One retrieval hit; the verdict is decided exactly once downstream."""

    query_id: int
    db_id: int
    distance: float  # squared Euclidean in embedding space
    score: float  # 1 - distance / 2
    verdict: str | None = None
    reason: str | None = None

    def decide(self, verdict: str, reason: str | None = None) -> None:
        if self.verdict is not None:
            raise RuntimeError(f"verdict already set for ({self.query_id}, {self.db_id})")
        self.verdict = verdict
        self.reason = reason


@dataclass(frozen=True)
class LocalizedAnchor:
    query_id: int
    matched_db_id: int
    traveled_distance_at_query: float


def query_top_n(
    index: EmbeddingIndex,
    query: np.ndarray,
    n: int,
    *,
    query_id: int = -1,
    query_path_position: float | None = None,
    recency_window_m: float = 0.0,
) -> list[MatchCandidate]:
    """Exact nearest neighbours by squared Euclidean distance, ascending,
    ties broken toward the lower db id. Entries whose path position falls
    within recency_window_m of the query's traveled distance are omitted.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if len(index) == 0:
        return []
    keep = np.ones(len(index), dtype=bool)
    if query_path_position is not None and recency_window_m > 0.0:
        keep = index.path_positions <= query_path_position - recency_window_m
    if not keep.any():
        return []
    q = np.asarray(query, dtype=np.float64).reshape(1, -1)
    d2 = kernels.pairwise_sqdist(q, index.vectors[keep])[0]
    sub_ids = index.ids[keep]
    order = np.lexsort((sub_ids, d2))[:n]
    return [
        MatchCandidate(
            query_id=query_id,
            db_id=int(sub_ids[i]),
            distance=float(d2[i]),
            score=1.0 - float(d2[i]) / 2.0,
        )
        for i in order
    ]


def confidence_share(
    candidate: MatchCandidate,
    anchors: Sequence[LocalizedAnchor],
    *,
    query_traveled: float,
    db_path_position: Callable[[int], float],
    tol_m: float,
) -> tuple[bool, str | None]:
    """Accept iff the candidate agrees, in traveled distance, with every
    supplied anchor: |(gap between db matches) - (gap between queries)| <= tol.
    With no anchors the candidate bootstraps as accepted.
    """
    cand_pos = db_path_position(candidate.db_id)
    for anchor in anchors:
        anchor_pos = db_path_position(anchor.matched_db_id)
        db_gap = abs(cand_pos - anchor_pos)
        odo_gap = abs(query_traveled - anchor.traveled_distance_at_query)
        if abs(db_gap - odo_gap) > tol_m:
            return False, (
                f"anchor {anchor.query_id}: db gap {db_gap:.2f} m vs odometry {odo_gap:.2f} m"
            )
    return True, None


@dataclass(frozen=True)
class Keyframe:
    id: int
    embedding: np.ndarray
    traveled_m: float


@dataclass
class LoopConfig:
    tau: float = 0.55
    top_n: int = 5
    recency_window_m: float = 20.0
    confidence_tol_m: float = 10.0
    anchor_count: int = 3
    anchor_max_age_m: float = 40.0
    min_db_size: int = 10


@dataclass
class LoopOutcome:
    query_id: int
    outcome: str
    candidates: list[MatchCandidate] = field(default_factory=list)


def causal_loop_detect(stream: Iterable[Keyframe], cfg: LoopConfig) -> list[LoopOutcome]:
    """Process keyframes in order; each queries strictly earlier keyframes.

    Candidates scoring >= tau go through confidence sharing against the most
    recent (still fresh) anchors; the best accepted match becomes the new
    anchor. All outcomes are data, never errors.
    """
    ids: list[int] = []
    vectors: list[np.ndarray] = []
    positions: list[float] = []
    anchors: list[LocalizedAnchor] = []
    outcomes: list[LoopOutcome] = []

    for kf in stream:
        if positions and kf.traveled_m < positions[-1]:
            raise ValueError("keyframe traveled distances must be monotone")
        if len(ids) < cfg.min_db_size:
            outcomes.append(LoopOutcome(query_id=kf.id, outcome="no_match"))
        else:
            index = build_index(ids, np.array(vectors), positions)
            candidates = query_top_n(
                index,
                kf.embedding,
                cfg.top_n,
                query_id=kf.id,
                query_path_position=kf.traveled_m,
                recency_window_m=cfg.recency_window_m,
            )
            fresh = [
                a
                for a in anchors
                if kf.traveled_m - a.traveled_distance_at_query <= cfg.anchor_max_age_m
            ][-cfg.anchor_count :]
            accepted: list[MatchCandidate] = []
            any_above_tau = False
            for cand in candidates:
                if cand.score < cfg.tau:
                    cand.decide("rejected_threshold", f"score {cand.score:.4f} < tau {cfg.tau}")
                    continue
                any_above_tau = True
                ok, why = confidence_share(
                    cand,
                    fresh,
                    query_traveled=kf.traveled_m,
                    db_path_position=index.position_of,
                    tol_m=cfg.confidence_tol_m,
                )
                if ok:
                    cand.decide("accepted")
                    accepted.append(cand)
                else:
                    cand.decide("rejected_confidence", why)
            if accepted:
                best = min(accepted, key=lambda c: (c.distance, c.db_id))
                anchors.append(
                    LocalizedAnchor(
                        query_id=kf.id,
                        matched_db_id=best.db_id,
                        traveled_distance_at_query=kf.traveled_m,
                    )
                )
                outcome = "unique_match" if len(accepted) == 1 else "multiple_matches"
            elif any_above_tau:
                outcome = "rejected_candidates"
            else:
                outcome = "no_match"
            outcomes.append(LoopOutcome(query_id=kf.id, outcome=outcome, candidates=candidates))
        ids.append(kf.id)
        vectors.append(np.asarray(kf.embedding, dtype=np.float64))
        positions.append(kf.traveled_m)
    return outcomes


def keyframes_from_dataset(ids, embeddings, path_positions, spacing_m: float) -> list[Keyframe]:
    """Thin keyframes to roughly one per spacing_m of traveled distance."""
    out: list[Keyframe] = []
    next_at = 0.0
    for i, pid in enumerate(ids):
        pos = float(path_positions[i])
        if pos + 1e-9 >= next_at:
            out.append(Keyframe(id=int(pid), embedding=embeddings[i], traveled_m=pos))
            next_at = pos + spacing_m
    return out


# ---------------------------------------------------------------------------
# artifacts: binary index file and text loop-closure log
# ---------------------------------------------------------------------------

_INDEX_MAGIC = b"BLIDX1\n"
LOOP_LOG_HEADER = "# biloop-looplog v1"


def save_index(path: str | Path, index: EmbeddingIndex) -> None:
    n, e = index.vectors.shape if len(index) else (0, 0)
    with open(path, "wb") as fh:
        fh.write(_INDEX_MAGIC)
        fh.write(struct.pack("<ii", n, e))
        fh.write(index.ids.astype("<i8").tobytes())
        fh.write(index.path_positions.astype("<f8").tobytes())
        fh.write(np.ascontiguousarray(index.vectors, dtype="<f4").tobytes())


def load_index(path: str | Path) -> EmbeddingIndex:
    raw = Path(path).read_bytes()
    if raw[: len(_INDEX_MAGIC)] != _INDEX_MAGIC:
        raise ValueError(f"{path}: unknown index file version")
    off = len(_INDEX_MAGIC)
    n, e = struct.unpack_from("<ii", raw, off)
    off += 8
    ids = np.frombuffer(raw, dtype="<i8", count=n, offset=off).astype(np.int64)
    off += 8 * n
    pos = np.frombuffer(raw, dtype="<f8", count=n, offset=off).astype(np.float64)
    off += 8 * n
    vec = np.frombuffer(raw, dtype="<f4", count=n * e, offset=off).reshape(n, e).astype(np.float64)
    if n:
        vec = vec / np.linalg.norm(vec, axis=1, keepdims=True)
    return EmbeddingIndex(ids=ids, vectors=vec, path_positions=pos)


def write_loop_log(path: str | Path, outcomes: Sequence[LoopOutcome]) -> None:
    lines = [LOOP_LOG_HEADER, "# query_id outcome [db_id score verdict]..."]
    for o in outcomes:
        fields = [str(o.query_id), o.outcome]
        for c in o.candidates:
            fields += [str(c.db_id), f"{c.score:.9g}", c.verdict or "pending"]
        lines.append(" ".join(fields))
    Path(path).write_text("\n".join(lines) + "\n")


def read_loop_log(path: str | Path) -> list[LoopOutcome]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != LOOP_LOG_HEADER:
        raise ValueError(f"{path}: missing loop log version header")
    out: list[LoopOutcome] = []
    for raw in lines:
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        query_id, outcome = int(parts[0]), parts[1]
        cands = []
        rest = parts[2:]
        if len(rest) % 3 != 0:
            raise ValueError(f"{path}: malformed candidate fields")
        for i in range(0, len(rest), 3):
            db_id = int(rest[i])
            score = float(rest[i + 1])
            cands.append(
                MatchCandidate(
                    query_id=query_id,
                    db_id=db_id,
                    distance=2.0 * (1.0 - score),
                    score=score,
                    verdict=rest[i + 2],
                )
            )
        out.append(LoopOutcome(query_id=query_id, outcome=outcome, candidates=cands))
    return out

"""Precision-recall machinery, metric pose errors, and report emission."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .geometry import RelativePose, quat_angle_deg

GAP_MARKER = "n/a"


@dataclass(frozen=True)
class LabeledScore:
    query_id: int
    db_id: int
    score: float
    is_true_match: bool


@dataclass(frozen=True)
class PoseError:
    translation_error: float
    angular_error: float  # degrees

    def __post_init__(self):
        if self.translation_error < 0 or not (0 <= self.angular_error <= 180.0 + 1e-9):
            raise ValueError("pose errors out of range")


@dataclass(frozen=True)
class PRCurve:
    thresholds: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    auc: float


def pr_curve(scores: Sequence[LabeledScore], thresholds: Sequence[float] | None = None) -> PRCurve:
    """Precision/recall over a monotone threshold sweep plus trapezoidal AUC.

    Predicted positive means score >= threshold. The sweep defaults to the
    unique observed scores; a synthetic zero-recall endpoint extends the curve
    so the AUC integrates over the full recall range.
    """
    y = np.array([s.is_true_match for s in scores], dtype=bool)
    x = np.array([s.score for s in scores], dtype=np.float64)
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == y.size:
        raise ValueError("need at least one positive and one negative label")
    if thresholds is None:
        ts = np.unique(x)
    else:
        ts = np.sort(np.asarray(thresholds, dtype=np.float64))
    precision = np.empty(ts.size)
    recall = np.empty(ts.size)
    order = np.argsort(x, kind="stable")
    xs = x[order]
    ys = y[order]
    pos_cum = np.cumsum(ys[::-1])[::-1]  # positives with score >= xs[i]
    for i, t in enumerate(ts):
        lo = np.searchsorted(xs, t, side="left")
        predicted = xs.size - lo
        tp = int(pos_cum[lo]) if lo < xs.size else 0
        precision[i] = tp / predicted if predicted else 1.0
        recall[i] = tp / n_pos
    auc = _auc_over_recall(precision, recall)
    return PRCurve(thresholds=ts, precision=precision, recall=recall, auc=auc)


def _auc_over_recall(precision: np.ndarray, recall: np.ndarray) -> float:
    """Trapezoid over recall, anchored at recall 0, using the best precision
    achieved at each distinct recall level."""
    r_all = np.concatenate([recall, [0.0]])
    p_all = np.concatenate([precision, [precision[-1]]])
    uniq_r, inverse = np.unique(r_all, return_inverse=True)
    best_p = np.zeros_like(uniq_r)
    np.maximum.at(best_p, inverse, p_all)
    return float(np.trapezoid(best_p, uniq_r))


def pose_errors(pred: RelativePose, gt: RelativePose) -> PoseError:
    """Euclidean translation error (meters) and sign-invariant rotation angle
    between the quaternions (degrees)."""
    terr = float(np.linalg.norm(pred.t - gt.t))
    aerr = quat_angle_deg(pred.q, gt.q)
    return PoseError(translation_error=terr, angular_error=aerr)


def choose_threshold(scores: Sequence[LabeledScore], min_precision: float = 0.9) -> float:
    """Score threshold maximizing recall subject to a precision floor.

    Falls back to the most precise point when the floor is unreachable.
    """
    curve = pr_curve(scores)
    ok = curve.precision >= min_precision
    if ok.any():
        idx = np.nonzero(ok)[0]
        best = idx[np.argmax(curve.recall[idx])]
    else:
        best = int(np.argmax(curve.precision))
    return float(curve.thresholds[best])


# ---------------------------------------------------------------------------
# report files
# ---------------------------------------------------------------------------

PR_HEADER = "# biloop-pr v1"
POSE_CSV_HEADER = "# biloop-pose-errors v1"
SUMMARY_HEADER = "# biloop-summary v1"


def write_pr_csv(path: str | Path, curve: PRCurve) -> None:
    lines = [PR_HEADER, "threshold,precision,recall"]
    for t, p, r in zip(curve.thresholds, curve.precision, curve.recall):
        lines.append(f"{t:.17g},{p:.17g},{r:.17g}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_pr_csv(path: str | Path) -> PRCurve:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != PR_HEADER:
        raise ValueError(f"{path}: missing report version header")
    rows = [tuple(float(v) for v in line.split(",")) for line in lines[2:] if line.strip()]
    ts = np.array([r[0] for r in rows])
    precision = np.array([r[1] for r in rows])
    recall = np.array([r[2] for r in rows])
    return PRCurve(
        thresholds=ts,
        precision=precision,
        recall=recall,
        auc=_auc_over_recall(precision, recall),
    )


def write_pose_csv(path: str | Path, rows: Sequence[dict]) -> None:
    lines = [POSE_CSV_HEADER, "anchor_id,match_id,err_m,err_deg"]
    for r in rows:
        lines.append(f"{r['anchor_id']},{r['match_id']},{r['err_m']:.17g},{r['err_deg']:.17g}")
    Path(path).write_text("\n".join(lines) + "\n")


@dataclass
class ReportInputs:
    """Everything emit_report may use; missing parts become gap markers."""

    run_name: str
    n_test_samples: int | None = None
    spatial_extent: tuple[float, float] | None = None
    auc_forward: float | None = None
    auc_backward: float | None = None
    mean_translation_error: float | None = None
    mean_angular_error: float | None = None
    n_loop_queries: int | None = None
    outcome_counts: dict[str, int] | None = None


def _fmt(value, pattern="{:.3f}") -> str:
    if value is None:
        return GAP_MARKER
    if isinstance(value, float) and math.isnan(value):
        return GAP_MARKER
    return pattern.format(value)


def write_summary(path: str | Path, inputs: ReportInputs) -> None:
    """Delimited table in the layout of the full-scale result tables:
    sequence, test samples, spatial extent, then error/AUC columns."""
    extent = (
        f"{inputs.spatial_extent[0]:.0f} x {inputs.spatial_extent[1]:.0f}"
        if inputs.spatial_extent is not None
        else GAP_MARKER
    )
    lines = [
        SUMMARY_HEADER,
        "",
        "sequence | test_samples | spatial_extent_m | mean_err_m | mean_err_deg",
        " | ".join(
            [
                inputs.run_name,
                _fmt(inputs.n_test_samples, "{:d}"),
                extent,
                _fmt(inputs.mean_translation_error),
                _fmt(inputs.mean_angular_error),
            ]
        ),
        "",
        "retrieval AUC (same-direction): " + _fmt(inputs.auc_forward, "{:.4f}"),
        "retrieval AUC (opposite-direction): " + _fmt(inputs.auc_backward, "{:.4f}"),
        "",
        "loop queries: " + _fmt(inputs.n_loop_queries, "{:d}"),
    ]
    if inputs.outcome_counts:
        for name in sorted(inputs.outcome_counts):
            lines.append(f"outcome {name}: {inputs.outcome_counts[name]}")
    else:
        lines.append("outcome counts: " + GAP_MARKER)
    Path(path).write_text("\n".join(lines) + "\n")

"""Evaluation tests: PR curve against exhaustive confusion-matrix counting,
AUC invariances, pose error metrics, and report round trips."""

import math

import numpy as np
import pytest

from biloop.evaluation import (
    LabeledScore,
    PoseError,
    ReportInputs,
    choose_threshold,
    pose_errors,
    pr_curve,
    read_pr_csv,
    write_pr_csv,
    write_pose_csv,
    write_summary,
)
from biloop.geometry import RelativePose, quat_from_axis_angle


def _scores(pairs):
    return [LabeledScore(i, 1000 + i, s, bool(l)) for i, (s, l) in enumerate(pairs)]


def exhaustive_pr(scores, thresholds):
    """Direct confusion-matrix enumeration per threshold."""
    points = []
    for t in thresholds:
        tp = sum(1 for s in scores if s.score >= t and s.is_true_match)
        fp = sum(1 for s in scores if s.score >= t and not s.is_true_match)
        fn = sum(1 for s in scores if s.score < t and s.is_true_match)
        precision = tp / (tp + fp) if tp + fp else 1.0
        recall = tp / (tp + fn)
        points.append((precision, recall))
    return points


class TestPRCurve:
    def test_perfect_separation_auc_one(self):
        scores = _scores([(0.9, 1), (0.8, 1), (0.7, 1), (0.3, 0), (0.2, 0)])
        curve = pr_curve(scores)
        assert curve.auc == pytest.approx(1.0)

    def test_matches_exhaustive_enumeration_20_points(self, rng):
        vals = rng.uniform(0, 1, size=20)
        labels = rng.random(20) < 0.4
        if labels.all() or not labels.any():
            labels[0] = True
            labels[1] = False
        scores = _scores(list(zip(vals, labels)))
        curve = pr_curve(scores)
        expected = exhaustive_pr(scores, curve.thresholds)
        for i, (p, r) in enumerate(expected):
            assert curve.precision[i] == pytest.approx(p, abs=1e-15)
            assert curve.recall[i] == pytest.approx(r, abs=1e-15)

    def test_random_scores_precision_near_base_rate(self, rng):
        n = 10_000
        vals = rng.uniform(0, 1, size=n)
        labels = rng.random(n) < 0.5
        curve = pr_curve(_scores(list(zip(vals, labels))))
        base = labels.mean()
        mid = (curve.recall > 0.2) & (curve.recall < 0.8)
        assert np.abs(curve.precision[mid] - base).max() < 0.06

    def test_monotone_transform_invariance(self, rng):
        vals = rng.normal(size=60)
        labels = rng.random(60) < 0.5
        labels[0], labels[1] = True, False
        scores = _scores(list(zip(vals, labels)))
        base = pr_curve(scores).auc
        transforms = [
            lambda s: 2.0 * s + 3.0,
            lambda s: s**3,
            lambda s: math.tanh(s),
            lambda s: math.exp(0.5 * s),
            lambda s: math.atan(s),
        ]
        for f in transforms:
            moved = [
                LabeledScore(s.query_id, s.db_id, f(s.score), s.is_true_match) for s in scores
            ]
            assert pr_curve(moved).auc == pytest.approx(base, abs=1e-12)

    def test_permutation_invariance(self, rng):
        vals = rng.uniform(0, 1, size=40)
        labels = rng.random(40) < 0.5
        labels[0], labels[1] = True, False
        scores = _scores(list(zip(vals, labels)))
        base = pr_curve(scores)
        perm = [scores[i] for i in rng.permutation(len(scores))]
        moved = pr_curve(perm)
        assert moved.auc == pytest.approx(base.auc, abs=1e-15)
        np.testing.assert_array_equal(moved.thresholds, base.thresholds)

    def test_single_class_rejected(self):
        with pytest.raises(ValueError):
            pr_curve(_scores([(0.5, 1), (0.4, 1)]))

    def test_auc_in_unit_interval(self, rng):
        for _ in range(10):
            vals = rng.normal(size=30)
            labels = rng.random(30) < 0.5
            labels[0], labels[1] = True, False
            auc = pr_curve(_scores(list(zip(vals, labels)))).auc
            assert 0.0 <= auc <= 1.0


class TestChooseThreshold:
    def test_max_recall_at_precision_floor(self):
        scores = _scores(
            [(0.95, 1), (0.9, 1), (0.85, 0), (0.8, 1), (0.7, 1), (0.4, 0), (0.3, 0)]
        )
        tau = choose_threshold(scores, min_precision=0.8)
        curve = pr_curve(scores)
        idx = np.nonzero(curve.thresholds == tau)[0][0]
        assert curve.precision[idx] >= 0.8
        ok = curve.precision >= 0.8
        assert curve.recall[idx] == curve.recall[ok].max()


class TestPoseErrors:
    def test_exact_prediction_zero(self, rng):
        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        rel = RelativePose(q=q, t=rng.normal(size=3))
        err = pose_errors(rel, rel)
        assert err.translation_error == 0.0
        assert err.angular_error == pytest.approx(0.0, abs=1e-6)

    def test_sign_flip_is_zero_angle(self, rng):
        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        a = RelativePose(q=q, t=np.zeros(3))
        b = RelativePose(q=-q, t=np.zeros(3))
        assert pose_errors(a, b).angular_error == pytest.approx(0.0, abs=1e-6)

    def test_90_degree_yaw(self):
        a = RelativePose.identity()
        b = RelativePose(q=quat_from_axis_angle([0, 0, 1], math.pi / 2), t=np.zeros(3))
        assert pose_errors(a, b).angular_error == pytest.approx(90.0, abs=1e-9)

    def test_symmetry_and_triangle_inequality(self, rng):
        rels = []
        for _ in range(3):
            q = rng.normal(size=4)
            q /= np.linalg.norm(q)
            rels.append(RelativePose(q=q, t=rng.normal(size=3)))
        a, b, c = rels
        assert pose_errors(a, b).angular_error == pytest.approx(
            pose_errors(b, a).angular_error, abs=1e-9
        )
        ab = pose_errors(a, b).translation_error
        bc = pose_errors(b, c).translation_error
        ac = pose_errors(a, c).translation_error
        assert ac <= ab + bc + 1e-12

    def test_bounds_validated(self):
        with pytest.raises(ValueError):
            PoseError(translation_error=-1.0, angular_error=0.0)
        with pytest.raises(ValueError):
            PoseError(translation_error=0.0, angular_error=200.0)


class TestReports:
    def test_pr_round_trip_reproduces_auc(self, tmp_path, rng):
        vals = rng.uniform(0, 1, size=50)
        labels = rng.random(50) < 0.5
        labels[0], labels[1] = True, False
        curve = pr_curve(_scores(list(zip(vals, labels))))
        path = tmp_path / "pr_run.csv"
        write_pr_csv(path, curve)
        loaded = read_pr_csv(path)
        assert loaded.auc == pytest.approx(curve.auc, abs=1e-15)

    def test_pose_csv_written(self, tmp_path):
        path = tmp_path / "pose_run.csv"
        write_pose_csv(
            path, [{"anchor_id": 1, "match_id": 2, "err_m": 0.5, "err_deg": 1.25}]
        )
        text = path.read_text()
        assert text.startswith("# biloop-pose-errors v1")
        assert "1,2,0.5,1.25" in text

    def test_summary_with_gap_markers(self, tmp_path):
        path = tmp_path / "summary_run.txt"
        write_summary(path, ReportInputs(run_name="empty-run"))
        text = path.read_text()
        assert text.startswith("# biloop-summary v1")
        assert "n/a" in text
        assert "empty-run" in text

    def test_summary_fully_populated(self, tmp_path):
        path = tmp_path / "summary_run.txt"
        write_summary(
            path,
            ReportInputs(
                run_name="full",
                n_test_samples=42,
                spatial_extent=(200.0, 12.0),
                auc_forward=0.97,
                auc_backward=0.88,
                mean_translation_error=0.8,
                mean_angular_error=2.5,
                n_loop_queries=180,
                outcome_counts={"no_match": 100, "unique_match": 70, "multiple_matches": 10},
            ),
        )
        text = path.read_text()
        assert "n/a" not in text
        assert "0.9700" in text and "0.8800" in text

"""Command-line orchestration: synth | mine | train-embed | train-pose |
index | localize | eval | sweep.

One structured YAML config drives every command; `--seed` overrides the root
seed, and all randomness flows through named substreams so reruns reproduce
bit-identically. Relative run directories resolve under $BILOOP_RUN_DIR.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys
import warnings
from pathlib import Path

import numpy as np
import yaml

from . import dataprep, embedding, evaluation, localization, posereg, synthworld
from .artifacts import MissingArtifactError, RunPaths, record_artifacts
from .geometry import CameraIntrinsics
from .seeding import child_seed

CONFIG_VERSION = 1


def default_config() -> dict:
    """Full-scale defaults; the bundled desk config overrides the sizes."""
    return {
        "version": CONFIG_VERSION,
        "seed": 7,
        "world": {
            "length_m": 200.0,
            "spacing_m": 1.0,
            "camera_height_m": 1.5,
            "position_noise_m": 0.0,
            "yaw_noise_deg": 0.0,
            "density_per_m": 2.0,
            "lateral_spread_m": 6.0,
            "repetitive_pool": 0,
            "observe_range_m": 12.0,
            "descriptor_noise": 0.05,
            "view_dependence": 0.0,
            "descriptor_dim": 512,
        },
        "intrinsics": {
            "fx": 320.0,
            "fy": 320.0,
            "cx": 320.0,
            "cy": 240.0,
            "width": 640,
            "height": 480,
        },
        "mining": {
            "d_min": 2.0,
            "d_max": 11.0,
            "fov_deg": None,
            "orient_tol_deg": 30.0,
            "triplets_per_query": 6,
            "negative_min_dist": 25.0,
            "reproj_rms_px": 2.0,
            "validate_forward": True,
            # optional per-direction [d_min, d_max] overrides, e.g.
            # windows: {forward: [0.5, 4.5]}
            "windows": {},
        },
        "embedding": {
            "clusters": 64,
            "embedding_dim": 4096,
            "margin": 0.1,
            "intra_norm": False,
            "init_alpha": 25.0,
            "lr": 0.01,
            "epochs": 30,
            "batch_size": 16,
            "val_fraction": 0.2,
            "patience": 5,
            "schedule": "constant",
            "train_directions": ["forward", "backward"],
        },
        "posereg": {
            "hidden": [1024, 256],
            "dropout": 0.3,
            "leaky_slope": 0.01,
            "lr": 0.003,
            "epochs": 60,
            "batch_size": 64,
            "val_fraction": 0.2,
            "patience": 10,
            "finetune_encoder": True,
            "encoder_lr": 1e-4,
            "pair_directions": ["forward", "backward"],
        },
        "localization": {
            "tau": 0.55,
            "top_n": 5,
            "recency_window_m": 20.0,
            "keyframe_spacing_m": 2.0,
            "confidence_tol_m": 10.0,
            "anchor_count": 3,
            "anchor_max_age_m": 40.0,
            "min_db_size": 10,
        },
        "evaluation": {
            "min_overlap": 0.1,
            "min_precision": 0.9,
        },
        "sweep": {
            "cells": [[2.0, 11.0]],
            "mode": "backward",
            "clusters": 8,
            "embedding_dim": 32,
            "epochs": 8,
        },
    }


def _deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = value
    return out


def load_config(path: str | Path | None, seed_override: int | None = None) -> dict:
    cfg = default_config()
    if path is not None:
        user = yaml.safe_load(Path(path).read_text()) or {}
        if user.get("version", CONFIG_VERSION) != CONFIG_VERSION:
            raise ValueError(f"unsupported config version {user.get('version')!r}")
        cfg = _deep_merge(cfg, user)
    if seed_override is not None:
        cfg["seed"] = int(seed_override)
    kd = cfg["embedding"]["clusters"] * cfg["world"]["descriptor_dim"]
    if cfg["embedding"]["embedding_dim"] > kd:
        raise ValueError(
            f"embedding_dim {cfg['embedding']['embedding_dim']} exceeds clusters x "
            f"descriptor_dim = {kd}"
        )
    return cfg


def _intrinsics(cfg: dict) -> CameraIntrinsics:
    return CameraIntrinsics(**cfg["intrinsics"])


def _mining_config(cfg: dict, direction: str | None = None) -> dataprep.MiningConfig:
    m = cfg["mining"]
    d_min, d_max = m["d_min"], m["d_max"]
    if direction is not None and direction in (m.get("windows") or {}):
        d_min, d_max = m["windows"][direction]
    return dataprep.MiningConfig(
        d_min=d_min,
        d_max=d_max,
        fov_deg=m["fov_deg"],
        orient_tol_deg=m["orient_tol_deg"],
        triplets_per_query=m["triplets_per_query"],
        negative_min_dist=m["negative_min_dist"],
        reproj_rms_px=m["reproj_rms_px"],
    )


def _snapshot_config(paths: RunPaths, cfg: dict) -> None:
    paths.root.mkdir(parents=True, exist_ok=True)
    paths.config_snapshot.write_text(yaml.safe_dump(cfg, sort_keys=True))


def _load_world(paths: RunPaths) -> synthworld.SequenceDataset:
    paths.require(paths.world_dir / "poses.txt", "synth")
    return synthworld.load_dataset(paths.world_dir)


def _load_manifests(paths: RunPaths, directions) -> list[dataprep.Triplet]:
    triplets: list[dataprep.Triplet] = []
    for direction in directions:
        path = paths.require(paths.manifest_path(direction), "mine")
        triplets.extend(dataprep.read_manifest(path))
    return triplets


def _write_history_csv(path: Path, header: str, rows) -> None:
    lines = [f"# biloop-history v1", header]
    lines += [",".join(f"{v:.10g}" if isinstance(v, float) else str(v) for v in row) for row in rows]
    path.write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(paths: RunPaths, cfg: dict) -> list[Path]:
    w = cfg["world"]
    dataset, _ = synthworld.build_synthetic_dataset(
        _intrinsics(cfg),
        length_m=w["length_m"],
        waypoints=w.get("waypoints"),
        spacing_m=w["spacing_m"],
        position_noise_m=w["position_noise_m"],
        yaw_noise_deg=w["yaw_noise_deg"],
        camera_height_m=w["camera_height_m"],
        density_per_m=w["density_per_m"],
        lateral_spread_m=w["lateral_spread_m"],
        descriptor_dim=w["descriptor_dim"],
        repetitive_pool=w["repetitive_pool"],
        observe_range_m=w["observe_range_m"],
        descriptor_noise=w["descriptor_noise"],
        view_dependence=w["view_dependence"],
        seed=child_seed(cfg["seed"], "world"),
    )
    synthworld.save_dataset(paths.world_dir, dataset, extra_config={"world": w})
    print(f"synth: {len(dataset.poses)} poses, {len(dataset.observations)} observations")
    return [paths.world_dir]


def cmd_mine(paths: RunPaths, cfg: dict) -> list[Path]:
    dataset = _load_world(paths)
    produced = []
    for direction in ("forward", "backward"):
        mcfg = _mining_config(cfg, direction)
        mined = dataprep.mine_triplets(
            dataset, mcfg, direction, seed=child_seed(cfg["seed"], "mining")
        )
        n_raw = len(mined)
        dropped = 0
        if direction == "forward" and cfg["mining"]["validate_forward"]:
            mined, results = dataprep.validate_forward_manifest(dataset, mined, mcfg)
            dropped = n_raw - len(mined)
        dataprep.write_manifest(paths.manifest_path(direction), mined)
        meta = {
            "direction": direction,
            "mined": n_raw,
            "kept": len(mined),
            "dropped_by_validation": dropped,
            "mining": cfg["mining"],
            "seed": cfg["seed"],
        }
        paths.manifest_meta_path(direction).write_text(yaml.safe_dump(meta, sort_keys=True))
        produced += [paths.manifest_path(direction), paths.manifest_meta_path(direction)]
        print(f"mine[{direction}]: {n_raw} mined, {len(mined)} kept")
    return produced


def cmd_train_embed(paths: RunPaths, cfg: dict) -> list[Path]:
    dataset = _load_world(paths)
    e = cfg["embedding"]
    triplets = dataprep.triplets_with_observations(
        _load_manifests(paths, e["train_directions"]), dataset.observations
    )
    corpus = [
        obs
        for p in dataset.poses
        if (obs := dataset.observations.get(p.id)) is not None and not obs.empty
    ]
    model = embedding.init_model(
        corpus,
        k=e["clusters"],
        embedding_dim=e["embedding_dim"],
        seed=child_seed(cfg["seed"], "init"),
        alpha=e["init_alpha"],
        intra_norm=e["intra_norm"],
    )
    tcfg = embedding.EmbedTrainConfig(
        lr=e["lr"],
        epochs=e["epochs"],
        batch_size=e["batch_size"],
        margin=e["margin"],
        val_fraction=e["val_fraction"],
        patience=e["patience"],
        schedule=e["schedule"],
        seed=child_seed(cfg["seed"], "train-embed"),
    )
    history = embedding.train_embedding(model, triplets, dataset.observations, tcfg)
    embedding.save_model(paths.embedding_model, model)
    _write_history_csv(paths.embed_history, "epoch,train_loss,val_loss", history.rows())
    print(
        f"train-embed: {len(triplets)} triplets, "
        f"loss {history.train_loss[0]:.4f} -> {history.train_loss[-1]:.4f} "
        f"(best epoch {history.best_epoch})"
    )
    return [paths.embedding_model, paths.embed_history]


def cmd_train_pose(paths: RunPaths, cfg: dict) -> list[Path]:
    dataset = _load_world(paths)
    p = cfg["posereg"]
    paths.require(paths.embedding_model, "train-embed")
    encoder = embedding.load_model(paths.embedding_model)
    triplets = dataprep.triplets_with_observations(
        _load_manifests(paths, p["pair_directions"]), dataset.observations
    )
    pairs = [(t.anchor_id, t.positive_id, t.rel_pose) for t in triplets]
    pcfg = posereg.PoseTrainConfig(
        lr=p["lr"],
        epochs=p["epochs"],
        batch_size=p["batch_size"],
        val_fraction=p["val_fraction"],
        patience=p["patience"],
        head=posereg.HeadConfig(
            hidden=tuple(p["hidden"]), dropout=p["dropout"], leaky_slope=p["leaky_slope"]
        ),
        finetune_encoder=p["finetune_encoder"],
        encoder_lr=p["encoder_lr"],
        seed=child_seed(cfg["seed"], "train-pose"),
    )
    result = posereg.train_pose_regressor(pairs, dataset.observations, encoder, pcfg)
    posereg.save_regressor(paths.pose_model, result.regressor)
    _write_history_csv(
        paths.pose_history,
        "epoch,train_loss,val_loss",
        list(zip(result.history_epochs, result.train_loss, result.val_loss)),
    )
    print(
        f"train-pose: {len(pairs)} pairs, "
        f"loss {result.train_loss[0]:.5f} -> {result.train_loss[-1]:.5f}"
    )
    return [paths.pose_model, paths.pose_history]


def _keyframes(paths: RunPaths, cfg: dict):
    dataset = _load_world(paths)
    paths.require(paths.embedding_model, "train-embed")
    model = embedding.load_model(paths.embedding_model)
    spacing = cfg["localization"]["keyframe_spacing_m"]
    positions = dataset.path_positions()
    usable = [
        (p.id, i)
        for i, p in enumerate(dataset.poses)
        if (obs := dataset.observations.get(p.id)) is not None and not obs.empty
    ]
    ids = [pid for pid, _ in usable]
    pos = [float(positions[i]) for _, i in usable]
    embeds = np.array([model.embed(dataset.observations[pid]) for pid in ids])
    return dataset, localization.keyframes_from_dataset(ids, embeds, pos, spacing)


def cmd_index(paths: RunPaths, cfg: dict) -> list[Path]:
    _, keyframes = _keyframes(paths, cfg)
    index = localization.build_index(
        [k.id for k in keyframes],
        np.array([k.embedding for k in keyframes]),
        [k.traveled_m for k in keyframes],
    )
    localization.save_index(paths.index_file, index)
    print(f"index: {len(index)} keyframes")
    return [paths.index_file]


def cmd_localize(paths: RunPaths, cfg: dict) -> list[Path]:
    paths.require(paths.index_file, "index")
    index = localization.load_index(paths.index_file)
    loc = cfg["localization"]
    lcfg = localization.LoopConfig(
        tau=loc["tau"],
        top_n=loc["top_n"],
        recency_window_m=loc["recency_window_m"],
        confidence_tol_m=loc["confidence_tol_m"],
        anchor_count=loc["anchor_count"],
        anchor_max_age_m=loc["anchor_max_age_m"],
        min_db_size=loc["min_db_size"],
    )
    stream = [
        localization.Keyframe(
            id=int(index.ids[i]), embedding=index.vectors[i], traveled_m=float(index.path_positions[i])
        )
        for i in range(len(index))
    ]
    outcomes = localization.causal_loop_detect(stream, lcfg)
    localization.write_loop_log(paths.loop_log, outcomes)
    counts: dict[str, int] = {}
    for o in outcomes:
        counts[o.outcome] = counts.get(o.outcome, 0) + 1
    print("localize: " + ", ".join(f"{k}={v}" for k, v in sorted(counts.items())))
    return [paths.loop_log]


def _retrieval_scores(dataset, vectors: dict[int, np.ndarray], leg: str, min_overlap: float):
    """Labeled similarity scores for one retrieval case.

    Same-direction: forward queries against other forward views.
    Opposite-direction: backward queries against forward views.
    Labels come from ground-truth landmark overlap.
    """
    forward_ids = [i for i in dataset.ids_for_leg("forward") if i in vectors]
    backward_ids = [i for i in dataset.ids_for_leg("backward") if i in vectors]
    query_ids = forward_ids if leg == "forward" else backward_ids
    obs = dataset.observations
    scores: list[evaluation.LabeledScore] = []
    for qid in query_ids:
        q_vec = vectors[qid]
        for did in forward_ids:
            if did == qid:
                continue
            d2 = float(np.sum((q_vec - vectors[did]) ** 2))
            label = synthworld.overlap(obs[qid], obs[did]) >= min_overlap
            scores.append(
                evaluation.LabeledScore(
                    query_id=qid, db_id=did, score=1.0 - d2 / 2.0, is_true_match=label
                )
            )
    return scores


def cmd_eval(paths: RunPaths, cfg: dict) -> list[Path]:
    dataset = _load_world(paths)
    paths.reports_dir.mkdir(parents=True, exist_ok=True)
    produced: list[Path] = []
    inputs = evaluation.ReportInputs(run_name=paths.name)

    pts = np.array([p.t for p in dataset.poses])
    extent = pts.max(axis=0) - pts.min(axis=0)
    inputs.spatial_extent = (float(extent[0]), float(max(extent[1], 1.0)))

    if paths.embedding_model.exists():
        model = embedding.load_model(paths.embedding_model)
        vectors = {
            p.id: model.embed(obs)
            for p in dataset.poses
            if (obs := dataset.observations.get(p.id)) is not None and not obs.empty
        }
        min_overlap = cfg["evaluation"]["min_overlap"]
        for leg, attr in (("forward", "auc_forward"), ("backward", "auc_backward")):
            scores = _retrieval_scores(dataset, vectors, leg, min_overlap)
            labels = {s.is_true_match for s in scores}
            if len(labels) == 2:
                curve = evaluation.pr_curve(scores)
                setattr(inputs, attr, curve.auc)
                evaluation.write_pr_csv(paths.pr_report(leg), curve)
                produced.append(paths.pr_report(leg))
                tau = evaluation.choose_threshold(
                    scores, min_precision=cfg["evaluation"]["min_precision"]
                )
                print(f"eval[{leg}]: AUC {curve.auc:.4f}, suggested tau {tau:.4f}")

    if paths.pose_model.exists():
        regressor = posereg.load_regressor(paths.pose_model)
        directions = cfg["posereg"]["pair_directions"]
        triplets = dataprep.triplets_with_observations(
            _load_manifests(paths, directions), dataset.observations
        )
        rows = []
        errs_t, errs_a = [], []
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            for t in triplets:
                try:
                    pred = posereg.predict_relative_pose(
                        regressor,
                        dataset.observations[t.anchor_id],
                        dataset.observations[t.positive_id],
                    )
                except posereg.DegenerateQuaternionError:
                    continue
                err = evaluation.pose_errors(pred, t.rel_pose)
                errs_t.append(err.translation_error)
                errs_a.append(err.angular_error)
                rows.append(
                    {
                        "anchor_id": t.anchor_id,
                        "match_id": t.positive_id,
                        "err_m": err.translation_error,
                        "err_deg": err.angular_error,
                    }
                )
        if rows:
            evaluation.write_pose_csv(paths.pose_report, rows)
            produced.append(paths.pose_report)
            inputs.n_test_samples = len(rows)
            inputs.mean_translation_error = float(np.mean(errs_t))
            inputs.mean_angular_error = float(np.mean(errs_a))
            print(
                f"eval[pose]: {len(rows)} pairs, mean {inputs.mean_translation_error:.3f} m, "
                f"{inputs.mean_angular_error:.3f} deg"
            )

    if paths.loop_log.exists():
        outcomes = localization.read_loop_log(paths.loop_log)
        inputs.n_loop_queries = len(outcomes)
        counts: dict[str, int] = {}
        for o in outcomes:
            counts[o.outcome] = counts.get(o.outcome, 0) + 1
        inputs.outcome_counts = counts

    evaluation.write_summary(paths.summary_report, inputs)
    produced.append(paths.summary_report)
    print(f"eval: wrote {paths.summary_report}")
    return produced


def cmd_sweep(paths: RunPaths, cfg: dict) -> list[Path]:
    dataset = _load_world(paths)
    s = cfg["sweep"]
    grid = [tuple(cell) for cell in s["cells"]]
    train_cfg = embedding.EmbedTrainConfig(
        lr=cfg["embedding"]["lr"],
        epochs=s["epochs"],
        batch_size=cfg["embedding"]["batch_size"],
        margin=cfg["embedding"]["margin"],
        patience=s["epochs"],
    )
    cells = dataprep.range_sweep(
        dataset,
        grid,
        _mining_config(cfg),
        mode=s["mode"],
        embed_k=s["clusters"],
        embedding_dim=s["embedding_dim"],
        train_cfg=train_cfg,
        seed=child_seed(cfg["seed"], "sweep"),
    )
    lines = ["# biloop-sweep v1", "d_min,d_max,n_triplets,train_loss,generalization_gap,empty"]
    for c in cells:
        lines.append(
            f"{c.d_min:.17g},{c.d_max:.17g},{c.n_triplets},"
            f"{c.train_loss:.10g},{c.generalization_gap:.10g},{int(c.empty)}"
        )
    paths.sweep_table.write_text("\n".join(lines) + "\n")
    usable = [c for c in cells if not c.empty]
    if usable:
        best = dataprep.best_cell(cells)
        print(f"sweep: best cell d_min={best.d_min} d_max={best.d_max}")
    else:
        print("sweep: all cells empty")
    return [paths.sweep_table]


COMMANDS = {
    "synth": cmd_synth,
    "mine": cmd_mine,
    "train-embed": cmd_train_embed,
    "train-pose": cmd_train_pose,
    "index": cmd_index,
    "localize": cmd_localize,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
}


def _resolve_run_dir(raw: str) -> Path:
    path = Path(raw)
    if not path.is_absolute():
        root = os.environ.get("BILOOP_RUN_DIR")
        if root:
            path = Path(root) / path
    return path


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="biloop",
        description="Bi-directional loop closure pipeline on a synthetic out-and-back world",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, help=f"run the {name} stage")
        p.add_argument("--config", type=str, default=None, help="YAML config file")
        p.add_argument(
            "--run-dir",
            type=str,
            required=True,
            help="run directory (relative paths resolve under $BILOOP_RUN_DIR)",
        )
        p.add_argument("--seed", type=int, default=None, help="override the root seed")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, seed_override=args.seed)
    except (ValueError, OSError, yaml.YAMLError) as exc:
        print(json.dumps({"category": "invalid-config", "message": str(exc)}), file=sys.stderr)
        return 2
    paths = RunPaths(_resolve_run_dir(args.run_dir))
    try:
        _snapshot_config(paths, cfg)
        produced = COMMANDS[args.command](paths, cfg)
        record_artifacts(paths, [paths.config_snapshot] + produced, args.command)
    except MissingArtifactError as exc:
        print(json.dumps(exc.payload()), file=sys.stderr)
        return 3
    except (ValueError, RuntimeError) as exc:
        print(
            json.dumps({"category": "runtime-error", "message": str(exc)}), file=sys.stderr
        )
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Pipeline stages wiring the library into a reproducible artifact flow.

Each stage reads the artifacts of earlier stages from the per-task artifact
directory, writes its own, and embeds the producing config hash and seed so
that later stages can refuse mixed inputs. Stages:

  featurize  cohort -> bags.ndjson + subject_vectors.ndjson
  split      labels + vectors -> folds.csv
  train      one of {gbt_level, gbt_leaf, cnn} x 5 folds -> models + OOF CSV
  ensemble   three OOF CSVs -> merged oof.csv + weights.json
  evaluate   held-out cohort -> predictions.csv + metrics.json
  report     oof.csv + weights.json -> report.md + report.csv

Training protocol per fold: the four training folds are split once more with
the same grouped stratified splitter into an inner training set and a small
early-stop holdout (the holdout never includes test-fold subjects). The
positive-class weight is the negative/positive ratio of the inner training
set. Boosted trees consume subject vectors; the MIL net consumes day bags
scaled by a robust scaler fitted on inner-training windows only. All three
model families share the identical outer folds and inner holdout.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import data, ensemble, features, gbt, mil, validation
from .config import RunConfig
from .errors import MissingArtifact, NoUsableDays, ProvenanceMismatch, TooFewSubjects
from .validation import MODEL_KEYS, FoldAssignment, OofTable, TaskConfig

logger = logging.getLogger(__name__)

TRAINABLE = ("gbt_level", "gbt_leaf", "cnn")
CLI_MODEL_NAMES = {"gbt_level": "gbt-level", "gbt_leaf": "gbt-leaf", "cnn": "mil"}

BAGS_FILE = "bags.ndjson"
VECTORS_FILE = "subject_vectors.ndjson"
FOLDS_FILE = "folds.csv"
OOF_MERGED_FILE = "oof.csv"
WEIGHTS_FILE = "weights.json"
PREDICTIONS_FILE = "predictions.csv"
METRICS_FILE = "metrics.json"
REPORT_MD_FILE = "report.md"
REPORT_CSV_FILE = "report.csv"


def artifact_meta(cfg: RunConfig) -> dict:
    return {"config_hash": cfg.config_hash, "seed": cfg.seed, "task": cfg.task}


def _check_meta(meta: Mapping[str, object], cfg: RunConfig, path: Path) -> None:
    found = str(meta.get("config_hash"))
    if found != cfg.config_hash:
        raise ProvenanceMismatch(
            f"{path} was produced under config hash {found}, current is {cfg.config_hash}"
        )


def _require(path: Path, producer: str) -> Path:
    if not path.exists():
        raise MissingArtifact(path, producer)
    return path


def _fold_seed(cfg: RunConfig, fold: int, salt: int) -> int:
    # distinct deterministic streams per (run seed, fold, purpose)
    return cfg.seed * 100003 + fold * 17 + salt


# featurize -----------------------------------------------------------------

def run_featurize(cfg: RunConfig) -> tuple[list[features.WindowBag], dict[str, features.SubjectVector]]:
    cohort = data.load_cohort(cfg.data_path)
    data.validate_cohort(cohort)
    bags, vectors = features.featurize_cohort(cohort)
    out = cfg.artifact_path
    out.mkdir(parents=True, exist_ok=True)
    meta = artifact_meta(cfg)
    features.write_bags_ndjson(bags, out / BAGS_FILE, meta)
    features.write_subject_vectors_ndjson(vectors, out / VECTORS_FILE, meta)
    return bags, vectors


def load_bags(cfg: RunConfig) -> list[features.WindowBag]:
    path = _require(cfg.artifact_path / BAGS_FILE, "vibemil featurize")
    bags, meta = features.read_bags_ndjson(path)
    _check_meta(meta, cfg, path)
    return bags


def load_vectors(cfg: RunConfig) -> dict[str, features.SubjectVector]:
    path = _require(cfg.artifact_path / VECTORS_FILE, "vibemil featurize")
    vectors, meta = features.read_subject_vectors_ndjson(path)
    _check_meta(meta, cfg, path)
    return vectors


# split -----------------------------------------------------------------------

def task_labels(cfg: RunConfig, usable_subjects: Sequence[str]) -> dict[str, int]:
    """Binary task labels for the usable subjects, per the control protocol."""
    labels = data.read_labels(cfg.data_path / "labels.csv")
    task = TaskConfig.for_task(cfg.task)
    binary = task.binarize(labels)
    return {sid: binary[sid] for sid in usable_subjects if sid in binary}


def run_split(cfg: RunConfig) -> FoldAssignment:
    vectors = load_vectors(cfg)
    subject_y = task_labels(cfg, sorted(vectors))
    assignment = validation.stratified_group_kfold(subject_y, k=cfg.split.k, seed=cfg.seed)
    out = cfg.artifact_path
    out.mkdir(parents=True, exist_ok=True)
    validation.write_folds_csv(assignment, out / FOLDS_FILE, artifact_meta(cfg))
    return assignment


def load_folds(cfg: RunConfig) -> FoldAssignment:
    path = _require(cfg.artifact_path / FOLDS_FILE, "vibemil split")
    meta = validation.read_meta_lines(path)
    _check_meta(meta, cfg, path)
    assignment = validation.read_folds_csv(path)
    return FoldAssignment(assignment.fold_of, k=assignment.k, seed=cfg.seed)


# train ------------------------------------------------------------------------

def inner_holdout(
    cfg: RunConfig, train_sids: Sequence[str], y_of: Mapping[str, int], fold: int
) -> tuple[list[str], list[str]]:
    """Split a training fold into inner-train and early-stop holdout subjects.

    Grouped stratified split with k = round(1 / holdout_fraction), capped by
    the smaller class so both classes reach the holdout; piece 0 is held out.
    """
    n_pos = sum(y_of[s] for s in train_sids)
    n_neg = len(train_sids) - n_pos
    k_inner = min(max(2, round(1.0 / cfg.split.holdout_fraction)), n_pos, n_neg)
    if k_inner < 2:
        raise TooFewSubjects(
            f"training fold {fold} needs at least 2 subjects per class for the "
            f"early-stop holdout, got {n_pos} positive / {n_neg} negative"
        )
    inner = validation.stratified_group_kfold(
        {s: y_of[s] for s in sorted(train_sids)}, k=k_inner, seed=_fold_seed(cfg, fold, 0)
    )
    return sorted(inner.train_subjects(0)), sorted(inner.test_subjects(0))


def _subject_matrix(
    vectors: Mapping[str, features.SubjectVector], sids: Sequence[str]
) -> np.ndarray:
    return np.stack([vectors[s].values for s in sids])


def _train_fold_gbt(
    cfg: RunConfig,
    key: str,
    fold: int,
    vectors: Mapping[str, features.SubjectVector],
    y_of: Mapping[str, int],
    folds: FoldAssignment,
) -> tuple[gbt.GbtModel, dict[str, float]]:
    train_sids = sorted(folds.train_subjects(fold))
    test_sids = sorted(folds.test_subjects(fold))
    fit_sids, val_sids = inner_holdout(cfg, train_sids, y_of, fold)
    weight = validation.pos_weight(y_of[s] for s in fit_sids)
    base = cfg.gbt_level if key == "gbt_level" else cfg.gbt_leaf
    fold_cfg = replace(
        base, pos_weight=weight, seed=_fold_seed(cfg, fold, 1 if key == "gbt_level" else 2)
    )
    model = gbt.train_gbt(
        fold_cfg,
        _subject_matrix(vectors, fit_sids),
        np.array([y_of[s] for s in fit_sids], dtype=np.float64),
        _subject_matrix(vectors, val_sids),
        np.array([y_of[s] for s in val_sids], dtype=np.float64),
    )
    probs = gbt.predict_gbt(model, _subject_matrix(vectors, test_sids))
    return model, dict(zip(test_sids, (float(p) for p in probs)))


def _bags_by_subject(bags: Sequence[features.WindowBag]) -> dict[str, list[features.WindowBag]]:
    grouped: dict[str, list[features.WindowBag]] = {}
    for bag in bags:
        grouped.setdefault(bag.subject_id, []).append(bag)
    for day_bags in grouped.values():
        day_bags.sort(key=lambda b: b.day_index)
    return grouped


def _scaled_rows(
    grouped: Mapping[str, Sequence[features.WindowBag]],
    scaler: features.ScalerParams,
    sids: Sequence[str],
) -> list[list[np.ndarray]]:
    return [
        [features.apply_scaler(bag, scaler).rows.astype(np.float32) for bag in grouped[s]]
        for s in sids
    ]


def _train_fold_mil(
    cfg: RunConfig,
    fold: int,
    bags: Sequence[features.WindowBag],
    y_of: Mapping[str, int],
    folds: FoldAssignment,
) -> tuple[mil.MilModel, features.ScalerParams, dict[str, float]]:
    grouped = _bags_by_subject(bags)
    train_sids = sorted(s for s in folds.train_subjects(fold) if s in grouped)
    test_sids = sorted(s for s in folds.test_subjects(fold) if s in grouped)
    fit_sids, val_sids = inner_holdout(cfg, train_sids, y_of, fold)

    scaler = features.fit_robust_scaler(
        (bag for s in fit_sids for bag in grouped[s]),
        fraction=cfg.featurize.scaler_fraction,
        seed=_fold_seed(cfg, fold, 4),
    )
    weight = validation.pos_weight(y_of[s] for s in fit_sids)
    fold_cfg = replace(cfg.mil, pos_weight=weight, seed=_fold_seed(cfg, fold, 3))

    train_rows: list[np.ndarray] = []
    train_labels: list[int] = []
    for s in fit_sids:
        for day_rows in _scaled_rows(grouped, scaler, [s])[0]:
            train_rows.append(day_rows)
            train_labels.append(y_of[s])
    model = mil.train_mil(
        fold_cfg,
        train_rows,
        train_labels,
        _scaled_rows(grouped, scaler, val_sids),
        [y_of[s] for s in val_sids],
    )
    preds = {
        s: mil.predict_subject(model, day_bags)
        for s, day_bags in zip(test_sids, _scaled_rows(grouped, scaler, test_sids))
    }
    return model, scaler, preds


def _scaler_doc(scaler: features.ScalerParams) -> dict:
    return {
        "center": [repr(float(v)) for v in scaler.center],
        "scale": [repr(float(v)) for v in scaler.scale],
        "fraction": scaler.fraction,
        "seed": scaler.seed,
    }


def _scaler_from_doc(doc: Mapping) -> features.ScalerParams:
    return features.ScalerParams(
        center=np.array([float(v) for v in doc["center"]], dtype=np.float64),
        scale=np.array([float(v) for v in doc["scale"]], dtype=np.float64),
        fraction=doc["fraction"],
        seed=doc["seed"],
    )


def model_path(cfg: RunConfig, key: str, fold: int) -> Path:
    suffix = "bin" if key == "cnn" else "json"
    return cfg.artifact_path / "models" / f"{key}_fold{fold}.{suffix}"


def oof_path(cfg: RunConfig, key: str) -> Path:
    return cfg.artifact_path / f"oof_{key}.csv"


def _train_one_fold(args: tuple) -> tuple[int, dict[str, float]]:
    """Worker entry: train one fold of one model family and persist it."""
    cfg, key, fold, bags, vectors, y_of, folds = args
    meta = artifact_meta(cfg)
    path = model_path(cfg, key, fold)
    path.parent.mkdir(parents=True, exist_ok=True)
    if key == "cnn":
        model, scaler, preds = _train_fold_mil(cfg, fold, bags, y_of, folds)
        mil.save_mil(model, path, extras={"meta": meta, "scaler": _scaler_doc(scaler)})
        mil.write_mil_log_csv(model, path.with_suffix(".log.csv"), meta)
    else:
        model, preds = _train_fold_gbt(cfg, key, fold, vectors, y_of, folds)
        gbt.save_gbt(model, path, meta)
        gbt.write_train_log_csv(model, path.with_suffix(".log.csv"), meta)
    return fold, preds


def run_train(cfg: RunConfig, key: str, threads: int = 1) -> OofTable:
    """Train one model family across all folds and write its OOF table."""
    if key not in TRAINABLE:
        raise ValueError(f"model must be one of {TRAINABLE}, got {key!r}")
    vectors = load_vectors(cfg) if key != "cnn" else {}
    bags = load_bags(cfg) if key == "cnn" else []
    folds = load_folds(cfg)
    usable = sorted(vectors) if key != "cnn" else sorted({b.subject_id for b in bags})
    y_of = task_labels(cfg, usable)

    tasks = [(cfg, key, fold, bags, vectors, y_of, folds) for fold in range(folds.k)]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = sorted(pool.map(_train_one_fold, tasks))
    else:
        results = [_train_one_fold(t) for t in tasks]

    rows = []
    for fold, preds in results:
        for sid, p in preds.items():
            rows.append((sid, fold, y_of[sid], {key: p}))
    table = validation.pool_oof(rows, expected_subjects=y_of)
    validation.write_oof_csv(table, oof_path(cfg, key), artifact_meta(cfg))
    return table


def load_model_oof(cfg: RunConfig, key: str) -> OofTable:
    path = _require(oof_path(cfg, key), f"vibemil train --model {CLI_MODEL_NAMES[key]}")
    meta = validation.read_meta_lines(path)
    _check_meta(meta, cfg, path)
    return validation.read_oof_csv(path)


# ensemble ---------------------------------------------------------------------

def run_ensemble(cfg: RunConfig) -> tuple[ensemble.EnsembleWeights, OofTable]:
    """Merge the three per-model OOF tables and grid-search blend weights."""
    tables = {key: load_model_oof(cfg, key) for key in MODEL_KEYS}
    base = tables[MODEL_KEYS[0]]
    for key, table in tables.items():
        if table.subject_ids != base.subject_ids or not np.array_equal(table.y, base.y):
            raise ProvenanceMismatch(
                f"OOF table for {key} covers different subjects or labels than "
                f"{MODEL_KEYS[0]}; re-train from one featurize/split run"
            )
    merged = OofTable(
        subject_ids=base.subject_ids,
        fold=base.fold,
        y=base.y,
        preds={key: tables[key].column(key) for key in MODEL_KEYS},
    )
    weights = ensemble.grid_search_weights(merged, step=cfg.ensemble.step)
    out = cfg.artifact_path
    validation.write_oof_csv(merged, out / OOF_MERGED_FILE, artifact_meta(cfg))
    ensemble.write_weights_json(weights, out / WEIGHTS_FILE, artifact_meta(cfg))
    return weights, merged


def load_weights(cfg: RunConfig) -> ensemble.EnsembleWeights:
    path = _require(cfg.artifact_path / WEIGHTS_FILE, "vibemil ensemble")
    weights, meta = ensemble.read_weights_json(path)
    _check_meta(meta, cfg, path)
    return weights


def load_merged_oof(cfg: RunConfig) -> OofTable:
    path = _require(cfg.artifact_path / OOF_MERGED_FILE, "vibemil ensemble")
    meta = validation.read_meta_lines(path)
    _check_meta(meta, cfg, path)
    return validation.read_oof_csv(path)


# evaluate ----------------------------------------------------------------------

def _load_fold_models(cfg: RunConfig, folds_k: int):
    gbt_models: dict[str, dict[int, gbt.GbtModel]] = {"gbt_level": {}, "gbt_leaf": {}}
    mil_models: dict[int, tuple[mil.MilModel, features.ScalerParams]] = {}
    for key in ("gbt_level", "gbt_leaf"):
        for fold in range(folds_k):
            path = _require(
                model_path(cfg, key, fold), f"vibemil train --model {CLI_MODEL_NAMES[key]}"
            )
            payload = json.loads(path.read_text(encoding="utf-8"))
            _check_meta(payload.get("meta", {}), cfg, path)
            gbt_models[key][fold] = gbt.load_gbt(path)
    for fold in range(folds_k):
        path = _require(model_path(cfg, "cnn", fold), "vibemil train --model mil")
        model, extras = mil.load_mil(path)
        _check_meta(extras.get("meta", {}), cfg, path)
        mil_models[fold] = (model, _scaler_from_doc(extras["scaler"]))
    return gbt_models, mil_models


def run_evaluate(cfg: RunConfig, holdout_dir: Path | str) -> tuple[list[str], np.ndarray, dict]:
    """Score a held-out cohort with the fold models and frozen blend weights."""
    weights = load_weights(cfg)
    k = cfg.split.k
    gbt_models, mil_models = _load_fold_models(cfg, k)

    cohort = data.load_cohort(Path(holdout_dir))
    data.validate_cohort(cohort)
    bags, vectors = features.featurize_cohort(cohort)
    grouped = _bags_by_subject(bags)
    binary = TaskConfig.for_task(cfg.task).binarize(cohort.labels)
    sids = sorted(vectors)
    y_of = {s: binary[s] for s in sids if s in binary}
    sids = [s for s in sids if s in y_of]
    if not sids:
        raise NoUsableDays("held-out cohort has no usable labeled subjects")
    X = _subject_matrix(vectors, sids)

    fold_probs: dict[str, dict[int, np.ndarray]] = {key: {} for key in MODEL_KEYS}
    for key in ("gbt_level", "gbt_leaf"):
        for fold in range(k):
            fold_probs[key][fold] = gbt.predict_gbt(gbt_models[key][fold], X)
    for fold in range(k):
        model, scaler = mil_models[fold]
        fold_probs["cnn"][fold] = np.array(
            [
                mil.predict_subject(model, rows)
                for rows in _scaled_rows(grouped, scaler, sids)
            ]
        )

    p_final, labels = ensemble.apply_test(fold_probs, weights, n_folds=k)
    y_true = np.array([y_of[s] for s in sids], dtype=np.int64)
    metrics = {
        "n_subjects": len(sids),
        "auc": validation.roc_auc(y_true, p_final),
        "accuracy": float(np.mean(labels == y_true)),
        "threshold": 0.5,
    }
    out = cfg.artifact_path
    out.mkdir(parents=True, exist_ok=True)
    ensemble.write_predictions_csv(
        out / PREDICTIONS_FILE, sids, p_final, labels, artifact_meta(cfg)
    )
    (out / METRICS_FILE).write_text(
        json.dumps({"meta": artifact_meta(cfg), **metrics}, indent=2) + "\n",
        encoding="utf-8",
    )
    return sids, p_final, metrics


# report --------------------------------------------------------------------------

_REPORT_NAMES = {
    "cnn": "CNN-MIL",
    "gbt_level": "GBT (level-wise)",
    "gbt_leaf": "GBT (leaf-wise)",
}

_PAIRS = (
    ("cnn", "gbt_level"),
    ("cnn", "gbt_leaf"),
    ("gbt_level", "gbt_leaf"),
)


def report_rows(table: OofTable, weights: ensemble.EnsembleWeights) -> list[dict]:
    """AUC rows: singles, pairwise equal-weight blends, optimized, delta."""
    y = table.y
    cols = {key: table.column(key) for key in MODEL_KEYS}
    half = ensemble.GRID_SCALE // 2
    rows = []
    singles = {}
    for key in MODEL_KEYS:
        auc = validation.roc_auc(y, cols[key])
        singles[key] = auc
        rows.append({"model": _REPORT_NAMES[key], "auc": auc, "weights": None})
    for a, b in _PAIRS:
        twentieths = tuple(half if key in (a, b) else 0 for key in MODEL_KEYS)
        pair_w = ensemble.EnsembleWeights(twentieths=twentieths)
        blended = ensemble.blend(cols["cnn"], cols["gbt_level"], cols["gbt_leaf"], pair_w)
        rows.append(
            {
                "model": f"{_REPORT_NAMES[a]} + {_REPORT_NAMES[b]} (equal)",
                "auc": validation.roc_auc(y, blended),
                "weights": twentieths,
            }
        )
    blended = ensemble.blend(cols["cnn"], cols["gbt_level"], cols["gbt_leaf"], weights)
    optimized = validation.roc_auc(y, blended)
    rows.append({"model": "Optimized ensemble", "auc": optimized, "weights": weights.twentieths})
    rows.append(
        {"model": "Delta vs best single", "auc": optimized - max(singles.values()), "weights": None}
    )
    return rows


def _format_weights(tw) -> str:
    if tw is None:
        return ""
    return "/".join(f"{t / ensemble.GRID_SCALE:.2f}" for t in tw)


def run_report(cfg: RunConfig) -> str:
    table = load_merged_oof(cfg)
    weights = load_weights(cfg)
    rows = report_rows(table, weights)
    meta = artifact_meta(cfg)
    out = cfg.artifact_path

    with open(out / REPORT_CSV_FILE, "w", encoding="utf-8", newline="") as fh:
        for key, value in meta.items():
            fh.write(f"# {key}={value}\n")
        fh.write("model,oof_auc,weights\n")
        for row in rows:
            fh.write(f"{row['model']},{row['auc']!r},{_format_weights(row['weights'])}\n")

    lines = [
        f"# OOF results: task {cfg.task}",
        "",
        f"Config hash `{meta['config_hash']}`, seed {meta['seed']}, "
        f"{table.n} subjects, {cfg.split.k} folds.",
        "",
        "| Model | OOF AUC | Weights (cnn/level/leaf) |",
        "| --- | --- | --- |",
    ]
    for row in rows:
        lines.append(
            f"| {row['model']} | {row['auc']:.4f} | {_format_weights(row['weights'])} |"
        )
    lines.append("")
    text = "\n".join(lines)
    (out / REPORT_MD_FILE).write_text(text, encoding="utf-8")
    return text

"""Subject-level cross-validation, ranking metrics, and OOF bookkeeping.

Splits operate on subjects (every recording of a subject shares its fold) so
no subject can leak across the train/test boundary. The AUC implementation is
the Mann-Whitney rank statistic with average ranks for ties, which equals the
pairwise win fraction counting ties as half.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    DuplicateSubject,
    MissingSubject,
    OneClassOnly,
    SchemaError,
    TooFewSubjects,
)

TASKS = ("pvh", "npvh")

MODEL_KEYS = ("cnn", "gbt_level", "gbt_leaf")

OOF_COLUMNS = ("subject_id", "fold", "y", "p_cnn", "p_gbt_level", "p_gbt_leaf")


@dataclass(frozen=True)
class TaskConfig:
    """Binary task protocol: one positive group versus the other two."""

    name: str
    positive_group: str
    control_groups: tuple[str, str]

    @staticmethod
    def for_task(task: str) -> "TaskConfig":
        if task == "pvh":
            return TaskConfig("pvh", "PVH", ("NPVH", "NORMAL"))
        if task == "npvh":
            return TaskConfig("npvh", "NPVH", ("PVH", "NORMAL"))
        raise ValueError(f"unknown task {task!r}")

    def binarize(self, labels: Mapping[str, str]) -> dict[str, int]:
        return {sid: int(group == self.positive_group) for sid, group in labels.items()}


def pos_weight(y: Iterable[int]) -> float:
    """Positive-class weight n_neg / n_pos of a training split."""
    y = np.asarray(list(y), dtype=int)
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise OneClassOnly("pos_weight needs both classes")
    return n_neg / n_pos


@dataclass(frozen=True)
class FoldAssignment:
    fold_of: dict[str, int]
    k: int
    seed: int

    def test_subjects(self, fold: int) -> list[str]:
        return [s for s, f in self.fold_of.items() if f == fold]

    def train_subjects(self, fold: int) -> list[str]:
        return [s for s, f in self.fold_of.items() if f != fold]


def stratified_group_kfold(
    subject_y: Mapping[str, int], k: int = 5, seed: int = 0
) -> FoldAssignment:
    """Deterministic greedy stratified split of subjects into k folds.

    Subjects are shuffled with the seed, stably sorted positives first, and
    each is assigned to the fold currently farthest below its per-class
    target. Per-fold class counts end within one of perfect stratification.
    """
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    subjects = list(subject_y.keys())
    y = {s: int(subject_y[s]) for s in subjects}
    n_pos = sum(v == 1 for v in y.values())
    n_neg = len(subjects) - n_pos
    if n_pos < k or n_neg < k:
        raise TooFewSubjects(
            f"need at least {k} subjects per class, got {n_pos} positive / {n_neg} negative"
        )

    rng = np.random.default_rng(seed)
    order = list(rng.permutation(len(subjects)))
    shuffled = [subjects[i] for i in order]
    shuffled.sort(key=lambda s: -y[s])  # stable: positives first, shuffle order kept

    targets = {1: n_pos / k, 0: n_neg / k}
    counts = np.zeros((k, 2), dtype=np.int64)  # fold x class
    fold_of: dict[str, int] = {}
    for s in shuffled:
        c = y[s]
        deficits = targets[c] - counts[:, c]
        fold = int(np.argmax(deficits))  # ties resolve to the lowest fold
        fold_of[s] = fold
        counts[fold, c] += 1
    # report assignments in the caller's subject order
    return FoldAssignment({s: fold_of[s] for s in subjects}, k=k, seed=seed)


def roc_auc(y: np.ndarray, p: np.ndarray) -> float:
    """Rank-based AUC with average ranks for ties.

    Equals the fraction of (positive, negative) pairs ranked correctly,
    counting ties as half a win.
    """
    y = np.asarray(y)
    p = np.asarray(p, dtype=np.float64)
    if y.shape != p.shape or y.ndim != 1:
        raise ValueError(f"y and p must be equal-length vectors, got {y.shape} vs {p.shape}")
    n = y.size
    n_pos = int((y == 1).sum())
    n_neg = n - n_pos
    if n_pos == 0 or n_neg == 0:
        raise OneClassOnly(f"AUC needs both classes, got {n_pos} positives of {n}")

    order = np.argsort(p, kind="mergesort")
    sorted_p = p[order]
    boundaries = np.flatnonzero(sorted_p[1:] != sorted_p[:-1]) + 1
    starts = np.concatenate([[0], boundaries])
    ends = np.concatenate([boundaries, [n]])
    avg_rank = (starts + ends + 1) / 2.0  # mean of 1-based ranks start+1 .. end
    ranks = np.empty(n, dtype=np.float64)
    ranks[order] = np.repeat(avg_rank, ends - starts)

    rank_sum_pos = ranks[y == 1].sum()
    return float((rank_sum_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def classify(p: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Hard labels: 1 iff p >= threshold."""
    return (np.asarray(p) >= threshold).astype(np.int64)


@dataclass
class OofTable:
    """Pooled out-of-fold predictions, one row per subject."""

    subject_ids: list[str]
    fold: np.ndarray
    y: np.ndarray
    preds: dict[str, np.ndarray] = field(default_factory=dict)  # model key -> p

    def __post_init__(self):
        n = len(self.subject_ids)
        self.fold = np.asarray(self.fold, dtype=np.int64)
        self.y = np.asarray(self.y, dtype=np.int64)
        for name, arr in (("fold", self.fold), ("y", self.y)):
            if arr.shape != (n,):
                raise ValueError(f"{name} column has shape {arr.shape}, expected ({n},)")
        self.preds = {k: np.asarray(v, dtype=np.float64) for k, v in self.preds.items()}
        for key, arr in self.preds.items():
            if arr.shape != (n,):
                raise ValueError(f"prediction column {key} has shape {arr.shape}, expected ({n},)")

    @property
    def n(self) -> int:
        return len(self.subject_ids)

    def column(self, key: str) -> np.ndarray:
        return self.preds[key]


def pool_oof(
    rows: Sequence[tuple[str, int, int, dict[str, float]]],
    expected_subjects: Iterable[str] | None = None,
) -> OofTable:
    """Union per-fold predictions into one table sorted by subject id.

    Each row is (subject_id, fold, y, {model key: probability}). Every subject
    must appear exactly once and, when an expected set is given, cover it.
    """
    seen: set[str] = set()
    for sid, _, _, _ in rows:
        if sid in seen:
            raise DuplicateSubject(f"subject {sid!r} predicted by more than one fold")
        seen.add(sid)
    if expected_subjects is not None:
        missing = sorted(set(expected_subjects) - seen)
        if missing:
            raise MissingSubject(f"no out-of-fold prediction for subjects {missing[:5]}")
    ordered = sorted(rows, key=lambda r: r[0])
    keys = sorted({k for _, _, _, preds in ordered for k in preds})
    return OofTable(
        subject_ids=[r[0] for r in ordered],
        fold=np.array([r[1] for r in ordered], dtype=np.int64),
        y=np.array([r[2] for r in ordered], dtype=np.int64),
        preds={k: np.array([r[3][k] for r in ordered], dtype=np.float64) for k in keys},
    )


# Delimited artifact I/O --------------------------------------------------

def _write_meta_lines(fh, meta: Mapping[str, object] | None) -> None:
    if meta:
        for key, value in meta.items():
            fh.write(f"# {key}={value}\n")


def read_meta_lines(path: Path | str) -> dict[str, str]:
    """Leading '# key=value' comment lines of a delimited artifact."""
    meta: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if not line.startswith("#"):
                break
            body = line[1:].strip()
            if "=" in body:
                key, value = body.split("=", 1)
                meta[key.strip()] = value.strip()
    return meta


def write_folds_csv(
    assignment: FoldAssignment, path: Path | str, meta: Mapping[str, object] | None = None
) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        _write_meta_lines(fh, meta)
        fh.write("subject_id,fold\n")
        for sid, fold in assignment.fold_of.items():
            fh.write(f"{sid},{fold}\n")


def read_folds_csv(path: Path | str) -> FoldAssignment:
    fold_of: dict[str, int] = {}
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(line for line in fh if not line.startswith("#"))
        header = next(reader, None)
        if header != ["subject_id", "fold"]:
            raise SchemaError(f"fold file header must be subject_id,fold, got {header!r}", str(path))
        for row in reader:
            if not row:
                continue
            if row[0] in fold_of:
                raise DuplicateSubject(f"subject {row[0]!r} listed twice in {path}")
            fold_of[row[0]] = int(row[1])
    if not fold_of:
        raise SchemaError("fold file has no rows", str(path))
    k = max(fold_of.values()) + 1
    return FoldAssignment(fold_of, k=k, seed=-1)


def write_oof_csv(
    table: OofTable, path: Path | str, meta: Mapping[str, object] | None = None
) -> None:
    cols = [f"p_{k}" for k in MODEL_KEYS if k in table.preds]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        _write_meta_lines(fh, meta)
        fh.write(",".join(["subject_id", "fold", "y", *cols]) + "\n")
        for i, sid in enumerate(table.subject_ids):
            vals = [repr(float(table.preds[c[2:]][i])) for c in cols]
            fh.write(",".join([sid, str(int(table.fold[i])), str(int(table.y[i])), *vals]) + "\n")


def read_oof_csv(path: Path | str) -> OofTable:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(line for line in fh if not line.startswith("#"))
        header = next(reader, None)
        if not header or header[:3] != ["subject_id", "fold", "y"]:
            raise SchemaError(f"unexpected OOF header {header!r}", str(path))
        keys = [h[2:] for h in header[3:]]
        if any(not h.startswith("p_") for h in header[3:]):
            raise SchemaError(f"unexpected OOF header {header!r}", str(path))
        rows = [r for r in reader if r]
    return OofTable(
        subject_ids=[r[0] for r in rows],
        fold=np.array([int(r[1]) for r in rows], dtype=np.int64),
        y=np.array([int(r[2]) for r in rows], dtype=np.int64),
        preds={
            k: np.array([float(r[3 + j]) for r in rows], dtype=np.float64)
            for j, k in enumerate(keys)
        },
    )

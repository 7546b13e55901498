"""Convex blending of model probabilities via exhaustive simplex grid search.

Weights live on the 0.05-step simplex and are stored as integer twentieths,
so the three parts always sum to one exactly. The search scores every triplet
on pooled out-of-fold predictions and keeps the first strict improvement,
which makes ties resolve to the lexicographically smallest triplet. Corners
reuse the raw probability columns, so a corner's AUC equals the corresponding
single-model AUC bit for bit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import MissingFoldModel
from .validation import MODEL_KEYS, OofTable, classify, roc_auc

GRID_SCALE = 20  # 0.05 steps


@dataclass(frozen=True)
class EnsembleWeights:
    """Simplex weights over (cnn, gbt_level, gbt_leaf) in integer twentieths."""

    twentieths: tuple[int, int, int]
    achieved_oof_auc: float = float("nan")
    scale: int = GRID_SCALE

    def __post_init__(self):
        if len(self.twentieths) != 3 or any(t < 0 for t in self.twentieths):
            raise ValueError("weights need three non-negative integer parts")
        if sum(self.twentieths) != self.scale:
            raise ValueError(f"weight parts must sum to {self.scale}")

    @property
    def w_cnn(self) -> float:
        return self.twentieths[0] / self.scale

    @property
    def w_gbt_level(self) -> float:
        return self.twentieths[1] / self.scale

    @property
    def w_gbt_leaf(self) -> float:
        return self.twentieths[2] / self.scale


def enumerate_triplets(scale: int = GRID_SCALE) -> list[tuple[int, int, int]]:
    """All non-negative integer triplets summing to scale, lexicographic."""
    return [
        (a, b, scale - a - b) for a in range(scale + 1) for b in range(scale + 1 - a)
    ]


def blend(
    p_cnn: np.ndarray,
    p_gbt_level: np.ndarray,
    p_gbt_leaf: np.ndarray,
    weights: EnsembleWeights,
) -> np.ndarray:
    """Convex combination; a pure corner returns its input column unchanged."""
    a, b, c = weights.twentieths
    cols = (np.asarray(p_cnn, dtype=np.float64),
            np.asarray(p_gbt_level, dtype=np.float64),
            np.asarray(p_gbt_leaf, dtype=np.float64))
    for part, col in zip((a, b, c), cols):
        if part == weights.scale:
            return col.copy()
    mix = (a * cols[0] + b * cols[1] + c * cols[2]) / weights.scale
    return np.clip(mix, 0.0, 1.0)


def grid_search_weights(oof: OofTable, step: float = 0.05) -> EnsembleWeights:
    """Maximize pooled OOF AUC over the full simplex grid.

    Only strictly better AUC replaces the incumbent, so ties keep the
    lexicographically smallest triplet; the first triplet is (0, 0, scale).
    """
    scale = round(1.0 / step)
    if scale < 1 or abs(scale * step - 1.0) > 1e-9:
        raise ValueError(f"step {step} must evenly divide 1.0")
    y = np.asarray(oof.y, dtype=np.float64)
    cols = tuple(np.asarray(oof.column(key), dtype=np.float64) for key in MODEL_KEYS)

    best_triplet: tuple[int, int, int] | None = None
    best_auc = -np.inf
    for triplet in enumerate_triplets(scale):
        probe = EnsembleWeights(triplet, scale=scale)
        auc = roc_auc(y, blend(*cols, probe))
        if auc > best_auc:
            best_auc = auc
            best_triplet = triplet

    singles = [roc_auc(y, col) for col in cols]
    assert best_auc >= max(singles), "corner evaluation guarantees this"
    return EnsembleWeights(best_triplet, achieved_oof_auc=best_auc, scale=scale)


def apply_test(
    fold_probs: dict[str, dict[int, np.ndarray]],
    weights: EnsembleWeights,
    n_folds: int = 5,
) -> tuple[np.ndarray, np.ndarray]:
    """Mean over the per-fold models of each type, then blend and threshold.

    fold_probs maps model key -> fold index -> aligned probability vector.
    Returns (p_final, labels) with labels = 1 where p_final >= 0.5.
    """
    means = {}
    for key in MODEL_KEYS:
        per_fold = fold_probs.get(key, {})
        stack = []
        for fold in range(n_folds):
            if fold not in per_fold:
                raise MissingFoldModel(f"no {key} model for fold {fold}")
            stack.append(np.asarray(per_fold[fold], dtype=np.float64))
        means[key] = np.mean(stack, axis=0)
    p_final = blend(means["cnn"], means["gbt_level"], means["gbt_leaf"], weights)
    return p_final, classify(p_final)


# Artifacts ---------------------------------------------------------------------

def write_weights_json(
    weights: EnsembleWeights, path: Path | str, meta: dict | None = None
) -> None:
    payload = {
        "meta": meta or {},
        "twentieths": list(weights.twentieths),
        "scale": weights.scale,
        "w_cnn": weights.w_cnn,
        "w_gbt_level": weights.w_gbt_level,
        "w_gbt_leaf": weights.w_gbt_leaf,
        "achieved_oof_auc": weights.achieved_oof_auc,
    }
    Path(path).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def read_weights_json(path: Path | str) -> tuple[EnsembleWeights, dict]:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    weights = EnsembleWeights(
        tuple(payload["twentieths"]),
        achieved_oof_auc=payload["achieved_oof_auc"],
        scale=payload.get("scale", GRID_SCALE),
    )
    return weights, payload.get("meta", {})


def write_predictions_csv(
    path: Path | str,
    subject_ids: list[str],
    p_final: np.ndarray,
    labels: np.ndarray,
    meta: dict | None = None,
) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        if meta:
            for key, value in meta.items():
                fh.write(f"# {key}={value}\n")
        fh.write("subject_id,p_final,label\n")
        for sid, p, lab in zip(subject_ids, p_final, labels):
            fh.write(f"{sid},{float(p)!r},{int(lab)}\n")

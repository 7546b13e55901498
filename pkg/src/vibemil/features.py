"""Windowed featurization of day recordings.

Voiced frames are concatenated and cut into 200-frame windows (10 s at 50 ms
frames) advancing by 100 frames, full windows only. Each window becomes a
56-dim vector: per feature, [mean, population std, 5th pct, 95th pct] in
feature-major order. A day becomes 618 dims: 11 distributional statistics of
each of the 56 window dims across windows (dim-major), plus voiced ratio and
window count. A subject becomes 1237 dims: per-day mean and population std of
the 618, plus the day count.

All percentiles use linear interpolation at rank h = (n - 1) * p. The robust
scaler (median center, IQR scale) is fit on a seeded subsample of training
window rows and is the only scaling used; distributional day vectors are
always computed on unscaled windows.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np

from . import data
from .errors import EmptyBag, NoTrainingRows, NoUsableDays, SchemaError

logger = logging.getLogger(__name__)

WINDOW_FRAMES = 200
HOP_FRAMES = 100

WINDOW_STAT_NAMES = ("mean", "std", "p5", "p95")
N_WINDOW_DIMS = data.N_FEATURES * len(WINDOW_STAT_NAMES)  # 56

DIST_STAT_NAMES = (
    "mean",
    "std",
    "median",
    "skew",
    "kurt",
    "p5",
    "p25",
    "p75",
    "p95",
    "iqr",
    "mad",
)
N_DAY_DIMS = N_WINDOW_DIMS * len(DIST_STAT_NAMES) + 2  # 618
N_SUBJECT_DIMS = 2 * N_DAY_DIMS + 1  # 1237


@dataclass
class WindowBag:
    """All windows of one day: the MIL instance set."""

    subject_id: str
    day_index: int
    rows: np.ndarray  # (n_windows, 56) float64
    voiced_ratio: float

    @property
    def n_windows(self) -> int:
        return self.rows.shape[0]


@dataclass
class DayVector:
    subject_id: str
    day_index: int
    values: np.ndarray  # (618,) float64


@dataclass
class SubjectVector:
    subject_id: str
    values: np.ndarray  # (1237,) float64
    n_days: int


@dataclass
class ScalerParams:
    center: np.ndarray  # (56,) per-dim median
    scale: np.ndarray   # (56,) per-dim IQR, 1.0 where degenerate
    fraction: float
    seed: int


def window_count(n_voiced: int, window: int = WINDOW_FRAMES, hop: int = HOP_FRAMES) -> int:
    """Number of full windows over a voiced stream of the given length."""
    if n_voiced < window:
        return 0
    return (n_voiced - window) // hop + 1


def window_segment(
    voiced: np.ndarray, window: int = WINDOW_FRAMES, hop: int = HOP_FRAMES
) -> np.ndarray:
    """Cut a (V, 14) voiced stream into full windows, shape (N, 14, window).

    Windows start at 0, hop, 2*hop, ...; a trailing partial window is dropped.
    Returns a zero-copy strided view.
    """
    if voiced.ndim != 2:
        raise ValueError(f"expected a 2-d frame matrix, got shape {voiced.shape}")
    n = voiced.shape[0]
    if window_count(n, window, hop) == 0:
        return np.empty((0, voiced.shape[1], window), dtype=voiced.dtype)
    view = np.lib.stride_tricks.sliding_window_view(voiced, window, axis=0)
    return view[::hop]


def window_stats(window: np.ndarray) -> np.ndarray:
    """Summarize one (window, 14) or (14, window) window into 56 dims.

    Output is feature-major: [f0 mean, f0 std, f0 p5, f0 p95, f1 mean, ...].
    """
    if window.ndim != 2:
        raise ValueError(f"expected a single window, got shape {window.shape}")
    if window.shape[0] != data.N_FEATURES and window.shape[1] == data.N_FEATURES:
        window = window.T  # accept (frames, 14) layout
    return _stack_window_stats(window[np.newaxis, :, :])[0]


def _stack_window_stats(windows: np.ndarray) -> np.ndarray:
    """Vectorized stats for (N, 14, window) stacks, output (N, 56)."""
    mean = windows.mean(axis=2)
    std = windows.std(axis=2)
    # Constant stretches must summarize exactly, not up to summation rounding.
    mn = windows.min(axis=2)
    constant = mn == windows.max(axis=2)
    mean = np.where(constant, mn, mean)
    std = np.where(constant, 0.0, std)
    p5, p95 = np.percentile(windows, [5.0, 95.0], axis=2)
    stacked = np.stack([mean, std, p5, p95], axis=2)  # (N, 14, 4)
    return stacked.reshape(windows.shape[0], -1)


def distribution_stats(x: np.ndarray) -> np.ndarray:
    """Eleven distributional statistics of a 1-d sample.

    Order: [mean, std, median, skew, kurt, p5, p25, p75, p95, iqr, mad].
    Std is the population std; kurtosis is excess; skew and kurtosis are 0
    for zero-variance samples; MAD is the unscaled median absolute deviation.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise EmptyBag(f"distribution_stats needs a non-empty 1-d sample, got shape {x.shape}")
    return _column_distribution_stats(x[:, np.newaxis])[0]


def _sorted_percentile(s: np.ndarray, p: float) -> np.ndarray:
    """Linear-interpolated percentile of already sorted (n, d) columns."""
    h = (s.shape[0] - 1) * p
    lo = math.floor(h)
    hi = math.ceil(h)
    return s[lo] + (h - lo) * (s[hi] - s[lo])


def _column_distribution_stats(cols: np.ndarray) -> np.ndarray:
    """Per-column stats of an (n, d) matrix, output (d, 11).

    Moments are computed on sorted columns so the result is exactly
    permutation invariant; exactly constant columns short-circuit to
    [c, 0, c, 0, 0, c, c, c, c, 0, 0].
    """
    s = np.sort(cols, axis=0)
    constant = s[0] == s[-1]
    mean = np.where(constant, s[0], s.mean(axis=0))
    centered = s - mean
    c2 = centered * centered
    m2 = np.where(constant, 0.0, c2.mean(axis=0))
    m3 = (c2 * centered).mean(axis=0)
    m4 = (c2 * c2).mean(axis=0)
    std = np.sqrt(m2)
    safe_m2 = np.where(m2 > 0.0, m2, 1.0)
    skew = np.where(m2 > 0.0, m3 / safe_m2**1.5, 0.0)
    kurt = np.where(m2 > 0.0, m4 / safe_m2**2 - 3.0, 0.0)
    p5 = _sorted_percentile(s, 0.05)
    p25 = _sorted_percentile(s, 0.25)
    median = _sorted_percentile(s, 0.50)
    p75 = _sorted_percentile(s, 0.75)
    p95 = _sorted_percentile(s, 0.95)
    iqr = p75 - p25
    mad = np.median(np.abs(s - median), axis=0)
    return np.stack([mean, std, median, skew, kurt, p5, p25, p75, p95, iqr, mad], axis=1)


def day_distributional(bag: WindowBag) -> DayVector:
    """Collapse a window bag to the 618-dim day vector.

    Layout is dim-major: 11 stats for window dim 0, then dim 1, ..., followed
    by [voiced_ratio, window_count].
    """
    if bag.n_windows == 0:
        raise EmptyBag(f"day {bag.subject_id}/{bag.day_index} has no windows")
    stats = _column_distribution_stats(bag.rows)  # (56, 11)
    values = np.concatenate(
        [stats.reshape(-1), [float(bag.voiced_ratio), float(bag.n_windows)]]
    )
    assert values.shape == (N_DAY_DIMS,)
    return DayVector(bag.subject_id, bag.day_index, values)


def subject_aggregate(day_vectors: Sequence[DayVector]) -> SubjectVector:
    """Aggregate a subject's day vectors: [day mean, day population std, n_days]."""
    if not day_vectors:
        raise EmptyBag("subject_aggregate needs at least one day vector")
    sid = day_vectors[0].subject_id
    if any(dv.subject_id != sid for dv in day_vectors):
        raise ValueError("day vectors from multiple subjects")
    stacked = np.stack([dv.values for dv in day_vectors])
    values = np.concatenate(
        [stacked.mean(axis=0), stacked.std(axis=0), [float(len(day_vectors))]]
    )
    assert values.shape == (N_SUBJECT_DIMS,)
    return SubjectVector(sid, values, n_days=len(day_vectors))


def featurize_day(rec: data.DayRecording) -> tuple[WindowBag, DayVector] | None:
    """Clean, mask, window and summarize one recording.

    Returns None when the voiced stream is too short for a single window.
    """
    voiced = data.cleaned_voiced_matrix(rec)
    windows = window_segment(voiced)
    if windows.shape[0] == 0:
        return None
    rows = _stack_window_stats(windows)
    ratio = voiced.shape[0] / rec.total_frame_count if rec.total_frame_count else 0.0
    bag = WindowBag(rec.subject_id, rec.day_index, rows=rows, voiced_ratio=ratio)
    return bag, day_distributional(bag)


def featurize_cohort(
    cohort: data.Cohort,
) -> tuple[list[WindowBag], dict[str, SubjectVector]]:
    """Featurize every recording, streaming one day at a time.

    Days with zero windows are excluded; subjects left with no usable day are
    dropped with a warning. Raises NoUsableDays if nothing remains.
    """
    bags: list[WindowBag] = []
    subject_vectors: dict[str, SubjectVector] = {}
    for sid in cohort.labels:
        day_vecs: list[DayVector] = []
        for path in cohort.day_paths.get(sid, []):
            rec = data.read_day_file(path)
            out = featurize_day(rec)
            if out is None:
                logger.warning(
                    "dropping day %s of subject %s: voiced stream shorter than one window",
                    rec.day_index,
                    sid,
                )
                continue
            bag, day_vec = out
            bags.append(bag)
            day_vecs.append(day_vec)
        if day_vecs:
            subject_vectors[sid] = subject_aggregate(day_vecs)
        else:
            logger.warning("dropping subject %s: no usable days", sid)
    if not subject_vectors:
        raise NoUsableDays("no subject produced any usable day")
    return bags, subject_vectors


def fit_robust_scaler(
    bags: Iterable[WindowBag], fraction: float = 0.3, seed: int = 0
) -> ScalerParams:
    """Fit per-dim median/IQR on a seeded uniform subsample of window rows.

    Exactly ceil(fraction * total_rows) rows are drawn without replacement.
    Dims with zero IQR get scale 1.0 so scaling never divides by zero.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    mats = [b.rows for b in bags if b.n_windows > 0]
    if not mats:
        raise NoTrainingRows("scaler fitting received no window rows")
    pooled = np.concatenate(mats, axis=0)
    total = pooled.shape[0]
    take = math.ceil(fraction * total)
    rng = np.random.default_rng(seed)
    idx = rng.choice(total, size=take, replace=False)
    sample = pooled[idx]
    center = np.percentile(sample, 50.0, axis=0)
    p25, p75 = np.percentile(sample, [25.0, 75.0], axis=0)
    iqr = p75 - p25
    scale = np.where(iqr > 0.0, iqr, 1.0)
    return ScalerParams(center=center, scale=scale, fraction=fraction, seed=seed)


def apply_scaler(bag: WindowBag, params: ScalerParams) -> WindowBag:
    """Return a new bag with rows (x - center) / scale; metadata unchanged."""
    rows = (bag.rows - params.center) / params.scale
    return replace(bag, rows=rows)


# Feature artifact I/O -----------------------------------------------------
#
# Bags and subject vectors are NDJSON with a meta line first; the scaler is a
# single JSON document. repr() keeps float round trips exact.


def _meta_line(kind: str, meta: dict | None) -> str:
    return json.dumps({"kind": kind, "meta": meta or {}})


def _read_meta_line(line: str, kind: str, source: str) -> dict:
    head = json.loads(line)
    if not isinstance(head, dict) or head.get("kind") != kind:
        raise SchemaError(f"expected a {kind!r} header line", source)
    return head.get("meta", {})


def write_bags_ndjson(bags: Iterable[WindowBag], path, meta: dict | None = None) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(_meta_line("window-bags", meta) + "\n")
        for bag in bags:
            rec = {
                "subject_id": bag.subject_id,
                "day_index": bag.day_index,
                "voiced_ratio": bag.voiced_ratio,
                "rows": [[repr(float(v)) for v in row] for row in bag.rows],
            }
            fh.write(json.dumps(rec) + "\n")


def read_bags_ndjson(path) -> tuple[list[WindowBag], dict]:
    bags: list[WindowBag] = []
    with open(path, "r", encoding="utf-8") as fh:
        meta = _read_meta_line(next(fh), "window-bags", str(path))
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            rows = np.array([[float(v) for v in row] for row in rec["rows"]], dtype=np.float64)
            rows = rows.reshape(-1, N_WINDOW_DIMS)
            bags.append(
                WindowBag(rec["subject_id"], rec["day_index"], rows, rec["voiced_ratio"])
            )
    return bags, meta


def write_subject_vectors_ndjson(
    vectors: dict[str, SubjectVector], path, meta: dict | None = None
) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(_meta_line("subject-vectors", meta) + "\n")
        for sid in sorted(vectors):
            vec = vectors[sid]
            rec = {
                "subject_id": vec.subject_id,
                "n_days": vec.n_days,
                "values": [repr(float(v)) for v in vec.values],
            }
            fh.write(json.dumps(rec) + "\n")


def read_subject_vectors_ndjson(path) -> tuple[dict[str, SubjectVector], dict]:
    vectors: dict[str, SubjectVector] = {}
    with open(path, "r", encoding="utf-8") as fh:
        meta = _read_meta_line(next(fh), "subject-vectors", str(path))
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            values = np.array([float(v) for v in rec["values"]], dtype=np.float64)
            if values.shape != (N_SUBJECT_DIMS,):
                raise SchemaError(
                    f"subject vector for {rec['subject_id']!r} has length {values.shape[0]}",
                    str(path),
                )
            vectors[rec["subject_id"]] = SubjectVector(rec["subject_id"], values, rec["n_days"])
    return vectors, meta


def write_scaler_json(params: ScalerParams, path, meta: dict | None = None) -> None:
    doc = {
        "kind": "robust-scaler",
        "meta": meta or {},
        "fraction": params.fraction,
        "seed": params.seed,
        "center": [repr(float(v)) for v in params.center],
        "scale": [repr(float(v)) for v in params.scale],
    }
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(json.dumps(doc))


def read_scaler_json(path) -> tuple[ScalerParams, dict]:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("kind") != "robust-scaler":
        raise SchemaError("expected a robust-scaler document", str(path))
    return (
        ScalerParams(
            center=np.array([float(v) for v in doc["center"]], dtype=np.float64),
            scale=np.array([float(v) for v in doc["scale"]], dtype=np.float64),
            fraction=doc["fraction"],
            seed=doc["seed"],
        ),
        doc.get("meta", {}),
    )

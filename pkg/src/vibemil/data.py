"""Day-recording ingest: NDJSON parsing, cleaning, voiced masking, cohort loading.

A cohort directory holds one NDJSON file per (subject, day) plus a
``labels.csv`` with one ``subject_id,group`` row per subject. Each day file
starts with a metadata line::

    {"subject_id": "S0001", "day_index": 0, "feature_order": [... 14 names ...]}

followed by one line per 50 ms frame::

    {"v": [14 numbers], "voiced": true}

where ``null`` encodes NaN and the strings ``"inf"`` / ``"-inf"`` encode the
two infinities.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import (
    DuplicateRecording,
    DuplicateSubject,
    EmptyInput,
    ParseError,
    SchemaError,
    UnknownSubject,
)

# Canonical feature order: six acoustic measures followed by eight
# inverse-filtered glottal measures. Day files must list exactly this order.
CANONICAL_FEATURES: tuple[str, ...] = (
    "cpp",
    "accel_db",
    "h1h2",
    "lh_ratio",
    "spectral_tilt",
    "spl15",
    "ac_flow",
    "cq",
    "ibif_h1h2",
    "hrf",
    "mfdr",
    "naq",
    "oq",
    "sq",
)
N_FEATURES = len(CANONICAL_FEATURES)

GROUPS = ("PVH", "NPVH", "NORMAL")

NAN_FILL = 0.0
POS_INF_FILL = 1.0e5
NEG_INF_FILL = -1.0e5

FRAME_SECONDS = 0.05

_CHUNK = 1 << 16


@dataclass
class DayRecording:
    """One day of frame-level features for one subject."""

    subject_id: str
    day_index: int
    values: np.ndarray  # (n_frames, 14) float64, may contain NaN/Inf before cleaning
    voiced: np.ndarray  # (n_frames,) bool

    @property
    def total_frame_count(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class SubjectLabel:
    subject_id: str
    group: str


@dataclass
class Cohort:
    """Lazy view of a cohort directory: labels plus per-subject day files."""

    root: Path
    labels: dict[str, str]                 # subject_id -> group
    day_paths: dict[str, list[Path]]       # subject_id -> day files ordered by day_index
    day_indices: dict[str, list[int]] = field(default_factory=dict)

    @property
    def subject_ids(self) -> list[str]:
        return list(self.labels.keys())

    @property
    def n_days(self) -> int:
        return sum(len(v) for v in self.day_paths.values())


@dataclass(frozen=True)
class CohortSummary:
    n_subjects: int
    n_days: int
    group_counts: dict[str, int]
    days_per_subject: dict[str, int]


def clean_frames(values: np.ndarray) -> np.ndarray:
    """Replace NaN with 0.0 and the infinities with +-1e5; finite values pass through.

    Pure and idempotent. Finite magnitudes beyond 1e5 are deliberately kept.
    """
    return np.nan_to_num(values, nan=NAN_FILL, posinf=POS_INF_FILL, neginf=NEG_INF_FILL)


def apply_voiced_mask(rec: DayRecording) -> np.ndarray:
    """Keep voiced frames only, preserving temporal order. Result may be empty."""
    return rec.values[rec.voiced]


def _decode_value_row(v: list, source: str, line_no: int) -> list:
    out = []
    for x in v:
        if x is None:
            out.append(math.nan)
        elif isinstance(x, str):
            if x == "inf":
                out.append(math.inf)
            elif x == "-inf":
                out.append(-math.inf)
            else:
                raise SchemaError(f"non-numeric value {x!r}", source, line_no)
        elif isinstance(x, bool) or not isinstance(x, (int, float)):
            raise SchemaError(f"non-numeric value {x!r}", source, line_no)
        else:
            out.append(x)
    return out


def parse_day_recording(text: str | Iterable[str], source: str = "<memory>") -> DayRecording:
    """Parse one NDJSON day file into a DayRecording.

    Raises ParseError for unreadable input (with a line number) and
    SchemaError for structurally wrong records, including arity mismatches
    and a feature order differing from the canonical one.
    """
    lines = text.splitlines() if isinstance(text, str) else text
    it = iter(lines)

    meta_line = None
    line_no = 0
    for raw in it:
        line_no += 1
        if raw.strip():
            meta_line = raw
            break
    if meta_line is None:
        raise ParseError("empty input", source)

    try:
        meta = json.loads(meta_line)
    except json.JSONDecodeError as e:
        raise ParseError(f"malformed JSON: {e.msg}", source, line_no) from e
    if not isinstance(meta, dict):
        raise SchemaError("metadata line is not an object", source, line_no)
    try:
        subject_id = meta["subject_id"]
        day_index = meta["day_index"]
        feature_order = meta["feature_order"]
    except KeyError as e:
        raise SchemaError(f"metadata missing key {e.args[0]!r}", source, line_no) from e
    if not isinstance(subject_id, str) or not subject_id:
        raise SchemaError("subject_id must be a non-empty string", source, line_no)
    if isinstance(day_index, bool) or not isinstance(day_index, int) or day_index < 0:
        raise SchemaError("day_index must be a non-negative integer", source, line_no)
    if tuple(feature_order) != CANONICAL_FEATURES:
        raise SchemaError(
            f"feature_order must match the canonical 14-name order, got {feature_order!r}",
            source,
            line_no,
        )

    rows: list[list] = []
    voiced: list[bool] = []
    chunks: list[np.ndarray] = []

    def flush() -> None:
        if not rows:
            return
        try:
            arr = np.array(rows, dtype=np.float64)
            if arr.ndim != 2 or arr.shape[1] != N_FEATURES:
                raise ValueError("arity")
        except (ValueError, TypeError):
            # Slow path: find the offending line for a precise error.
            base = line_no - len(rows)
            for i, r in enumerate(rows):
                if len(r) != N_FEATURES:
                    raise SchemaError(
                        f"frame has {len(r)} values, expected {N_FEATURES}",
                        source,
                        base + i + 1,
                    ) from None
                _decode_value_row(r, source, base + i + 1)
            raise
        chunks.append(arr)
        rows.clear()

    for raw in it:
        line_no += 1
        if not raw.strip():
            continue
        try:
            obj = json.loads(raw)
        except json.JSONDecodeError as e:
            raise ParseError(f"malformed JSON: {e.msg}", source, line_no) from e
        if not isinstance(obj, dict) or "v" not in obj or "voiced" not in obj:
            raise SchemaError('frame line must be an object with "v" and "voiced"', source, line_no)
        v = obj["v"]
        if not isinstance(v, list):
            raise SchemaError('"v" must be an array', source, line_no)
        if len(v) != N_FEATURES:
            raise SchemaError(f"frame has {len(v)} values, expected {N_FEATURES}", source, line_no)
        flag = obj["voiced"]
        if not isinstance(flag, bool):
            raise SchemaError('"voiced" must be a boolean', source, line_no)
        if any(not isinstance(x, (int, float)) or isinstance(x, bool) for x in v):
            v = _decode_value_row(v, source, line_no)
        rows.append(v)
        voiced.append(flag)
        if len(rows) >= _CHUNK:
            flush()

    flush()
    if not chunks:
        raise SchemaError("day file has no frame lines", source)
    values = chunks[0] if len(chunks) == 1 else np.concatenate(chunks, axis=0)
    return DayRecording(
        subject_id=subject_id,
        day_index=day_index,
        values=values,
        voiced=np.array(voiced, dtype=bool),
    )


def read_day_file(path: Path | str) -> DayRecording:
    path = Path(path)
    with open(path, "r", encoding="utf-8") as fh:
        return parse_day_recording(fh, source=str(path))


def read_day_metadata(path: Path | str) -> tuple[str, int]:
    """Read only the metadata line of a day file (cheap cohort scans)."""
    path = Path(path)
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                meta = json.loads(raw)
            except json.JSONDecodeError as e:
                raise ParseError(f"malformed JSON: {e.msg}", str(path), line_no) from e
            if not isinstance(meta, dict) or "subject_id" not in meta or "day_index" not in meta:
                raise SchemaError("first line must be the day metadata object", str(path), line_no)
            return str(meta["subject_id"]), int(meta["day_index"])
    raise ParseError("empty input", str(path))


def _encode_row(row: np.ndarray, finite: bool) -> list:
    if finite:
        return row.tolist()
    out = []
    for x in row.tolist():
        if math.isnan(x):
            out.append(None)
        elif math.isinf(x):
            out.append("inf" if x > 0 else "-inf")
        else:
            out.append(x)
    return out


def serialize_day_recording(rec: DayRecording) -> str:
    """Render a DayRecording to NDJSON text that parse_day_recording round-trips."""
    if rec.values.shape[1] != N_FEATURES:
        raise SchemaError(f"recording has arity {rec.values.shape[1]}, expected {N_FEATURES}")
    parts = [
        json.dumps(
            {
                "subject_id": rec.subject_id,
                "day_index": int(rec.day_index),
                "feature_order": list(CANONICAL_FEATURES),
            }
        )
    ]
    row_finite = np.isfinite(rec.values).all(axis=1)
    rows = rec.values
    for i in range(rows.shape[0]):
        payload = {"v": _encode_row(rows[i], bool(row_finite[i])), "voiced": bool(rec.voiced[i])}
        parts.append(json.dumps(payload, allow_nan=False))
    return "\n".join(parts) + "\n"


def write_day_file(rec: DayRecording, path: Path | str) -> None:
    Path(path).write_text(serialize_day_recording(rec), encoding="utf-8")


def day_file_name(subject_id: str, day_index: int) -> str:
    return f"{subject_id}_d{day_index:02d}.ndjson"


def read_labels(path: Path | str) -> dict[str, str]:
    """Read a subject_id,group CSV into an ordered dict."""
    path = Path(path)
    labels: dict[str, str] = {}
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(line for line in fh if not line.startswith("#"))
        header = next(reader, None)
        if header is None:
            raise ParseError("empty label file", str(path))
        if [h.strip() for h in header] != ["subject_id", "group"]:
            raise SchemaError(f"label header must be subject_id,group, got {header!r}", str(path))
        for row in reader:
            if not row:
                continue
            if len(row) != 2:
                raise SchemaError(f"label row must have 2 fields, got {row!r}", str(path))
            sid, group = row[0].strip(), row[1].strip()
            if group not in GROUPS:
                raise SchemaError(f"unknown group {group!r} for subject {sid!r}", str(path))
            if sid in labels:
                raise DuplicateSubject(f"subject {sid!r} listed twice in {path}")
            labels[sid] = group
    return labels


def write_labels(labels: dict[str, str], path: Path | str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("subject_id,group\n")
        for sid, group in labels.items():
            fh.write(f"{sid},{group}\n")


def load_cohort(root: Path | str) -> Cohort:
    """Scan a cohort directory, reading labels and day-file metadata only."""
    root = Path(root)
    labels_path = root / "labels.csv"
    if not labels_path.exists():
        raise EmptyInput(f"no labels.csv under {root}")
    labels = read_labels(labels_path)

    entries: list[tuple[str, int, Path]] = []
    for path in sorted(root.glob("*.ndjson")):
        sid, day = read_day_metadata(path)
        entries.append((sid, day, path))
    if not entries:
        raise EmptyInput(f"no day recordings under {root}")

    seen: set[tuple[str, int]] = set()
    day_paths: dict[str, list[Path]] = {sid: [] for sid in labels}
    day_indices: dict[str, list[int]] = {sid: [] for sid in labels}
    for sid, day, path in sorted(entries, key=lambda e: (e[0], e[1])):
        if sid not in labels:
            raise UnknownSubject(f"recording {path.name} references unlabeled subject {sid!r}")
        if (sid, day) in seen:
            raise DuplicateRecording(f"duplicate recording for subject {sid!r} day {day}")
        seen.add((sid, day))
        day_paths[sid].append(path)
        day_indices[sid].append(day)
    return Cohort(root=root, labels=labels, day_paths=day_paths, day_indices=day_indices)


def validate_cohort(cohort: Cohort) -> CohortSummary:
    """Check cohort-level invariants and summarize composition."""
    if not cohort.labels:
        raise EmptyInput("cohort has no labeled subjects")
    n_days = 0
    days_per_subject: dict[str, int] = {}
    for sid in cohort.labels:
        k = len(cohort.day_paths.get(sid, []))
        days_per_subject[sid] = k
        n_days += k
    if n_days == 0:
        raise EmptyInput("cohort has no recordings")
    group_counts = {g: 0 for g in GROUPS}
    for group in cohort.labels.values():
        group_counts[group] += 1
    return CohortSummary(
        n_subjects=len(cohort.labels),
        n_days=n_days,
        group_counts=group_counts,
        days_per_subject=days_per_subject,
    )


def cleaned_voiced_matrix(rec: DayRecording) -> np.ndarray:
    """Convenience composition used by the pipeline: clean first, then mask.

    Cleaning before masking matters: a voiced frame whose values are all NaN
    stays in the stream as a zero row instead of silently disappearing.
    """
    cleaned = replace(rec, values=clean_frames(rec.values))
    return apply_voiced_mask(cleaned)

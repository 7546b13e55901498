"""Deterministic synthetic cohort generator for end-to-end pipeline checks.

Each subject gets per-feature AR(1) noise around a personal baseline:

    x[t,f] = base[f] + (u[s,f] + pos*shift[f]) * spread[f]
             + burst[t,f] * gain * spread[f] + amp[f] * drift[t,f] * spread[f]
             + e[t,f]

where u is a class-independent subject offset, e is AR(1) with a per-subject
dispersion multiplier, and drift is a slow skewed lognormal path drawn
independently per feature. Class signal can enter three ways: mean_shift and
tail_scale move per-feature distributions, and contiguous burst episodes
elevate the burst dims. With neg_burst_mode "none" only positives burst; with
"antiphase" both classes burst every burst dim at the same per-dim duty
cycle, episode length, and gain, but positives elevate all burst dims in the
same episodes while negatives alternate one dim per episode, so the classes
differ only in whether the dims surge together. The nuisance terms exist so
distributional summaries cannot trivially expose bursts: between-subject
spread swamps the footprint a burst leaves on day-level statistics while
windowed instances still show it plainly.

Every subject derives its own generator from (seed, subject index), so output
is byte-identical for a spec regardless of generation order.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from .data import (
    GROUPS,
    N_FEATURES,
    Cohort,
    DayRecording,
    day_file_name,
    load_cohort,
    write_day_file,
    write_labels,
)
from .errors import InvalidSpec

# plausible per-feature operating points and spreads; effect sizes in the
# spec are expressed in units of these spreads
BASE_LEVELS = np.array(
    [15.0, 62.0, 6.0, 22.0, -8.0, 78.0, 150.0, 0.55, 8.0, 12.0, 310.0, 0.12, 0.62, 2.2]
)
BASE_SPREADS = np.array(
    [2.5, 5.0, 2.0, 4.0, 2.5, 4.5, 35.0, 0.06, 2.2, 3.0, 70.0, 0.025, 0.07, 0.45]
)

BURST_MIN_FRAMES = 6000  # 5 minutes at 20 frames/s
BURST_MAX_FRAMES = 18000  # 15 minutes
# guard strip around every burst: consecutive bursts stay further apart than
# one analysis window spans, so no window ever overlaps two bursts
BURST_GAP_FRAMES = 600


@dataclass(frozen=True)
class SynthSpec:
    n_pos: int
    n_neg: int
    days_per_subject: tuple[int, int] = (1, 2)
    frames_per_day: tuple[int, int] = (18000, 26000)
    voiced_rate: float = 0.6
    ar_coeff: float = 0.9
    mean_shift: tuple[float, ...] = (0.0,) * N_FEATURES  # in spread units
    tail_scale: float = 1.0
    burst_prob: float = 0.0  # target fraction of frames inside a burst (duty cycle)
    burst_gain: float = 0.0  # in spread units, applied on burst_dims
    burst_dims: tuple[int, ...] = (0, 5)  # cpp and spl15
    burst_frames: tuple[int, int] = (BURST_MIN_FRAMES, BURST_MAX_FRAMES)
    # "none": control subjects never burst. "antiphase": controls burst each
    # burst dim at the same per-dim duty, length, and count as cases, but one
    # dim at a time instead of all dims together, so every single-feature
    # summary is class-matched and only within-window co-occurrence separates
    # the classes.
    neg_burst_mode: str = "none"
    nan_rate: float = 0.0
    inf_rate: float = 0.0
    seed: int = 0
    pos_group: str = "PVH"
    # class-independent nuisance structure
    between_sigma: float = 0.5  # subject baseline offsets, spread units
    scale_jitter: float = 0.0  # lognormal sigma of per-subject dispersion
    mod_amp: tuple[float, float] = (0.0, 0.0)  # per-subject slow-drift amplitude range
    mod_ar: float = 0.999
    mod_sigma: float = 0.5

    def __post_init__(self):
        if self.n_pos < 1 or self.n_neg < 1:
            raise InvalidSpec("subject counts must be positive")
        for name, rng_pair in (
            ("days_per_subject", self.days_per_subject),
            ("frames_per_day", self.frames_per_day),
        ):
            lo, hi = rng_pair
            if lo < 1 or hi < lo:
                raise InvalidSpec(f"{name} must be a non-empty positive range")
        for name, rate in (
            ("voiced_rate", self.voiced_rate),
            ("nan_rate", self.nan_rate),
            ("inf_rate", self.inf_rate),
            ("burst_prob", self.burst_prob),
        ):
            if not 0.0 <= rate <= 1.0:
                raise InvalidSpec(f"{name} must be in [0, 1]")
        if not 0.0 <= self.ar_coeff < 1.0 or not 0.0 <= self.mod_ar < 1.0:
            raise InvalidSpec("AR coefficients must be in [0, 1)")
        if len(self.mean_shift) != N_FEATURES:
            raise InvalidSpec(f"mean_shift must have {N_FEATURES} entries")
        if self.tail_scale <= 0:
            raise InvalidSpec("tail_scale must be > 0")
        if any(not 0 <= d < N_FEATURES for d in self.burst_dims):
            raise InvalidSpec("burst_dims out of range")
        lo, hi = self.burst_frames
        if lo < 1 or hi < lo:
            raise InvalidSpec("burst_frames must be a non-empty positive range")
        if self.neg_burst_mode not in ("none", "antiphase"):
            raise InvalidSpec(f"unknown neg_burst_mode {self.neg_burst_mode!r}")
        if self.neg_burst_mode == "antiphase":
            if len(self.burst_dims) < 2:
                raise InvalidSpec("antiphase bursts need at least two burst_dims")
            if self.burst_prob * len(self.burst_dims) > 0.9:
                raise InvalidSpec("antiphase burst duty too high to keep dims disjoint")
        if self.pos_group not in GROUPS or self.pos_group == "NORMAL":
            raise InvalidSpec(f"pos_group must be a disorder group, got {self.pos_group!r}")
        if self.between_sigma < 0 or self.scale_jitter < 0 or self.mod_sigma < 0:
            raise InvalidSpec("nuisance sigmas must be >= 0")
        lo, hi = self.mod_amp
        if lo < 0 or hi < lo:
            raise InvalidSpec("mod_amp must be a non-negative range")

    @property
    def n_subjects(self) -> int:
        return self.n_pos + self.n_neg


@dataclass
class SubjectSim:
    subject_id: str
    group: str
    label: int
    days: list[DayRecording]
    bursts: list[list[tuple[int, int]]]  # per day, [start, end) frame intervals


def _subject_id(index: int) -> str:
    return f"s{index:04d}"


def _ar1(rng: np.random.Generator, n: int, phi: float, sigma: float) -> np.ndarray:
    """Stationary AR(1) path: first innovation at the stationary scale."""
    eps = rng.standard_normal(n)
    if sigma == 0.0:
        return np.zeros(n)
    eps[0] *= sigma
    if n > 1:
        eps[1:] *= sigma * math.sqrt(1.0 - phi * phi)
    if phi == 0.0:
        return eps
    return lfilter([1.0], [1.0, -phi], eps)


def _draw_bursts(
    rng: np.random.Generator, n: int, duty: float, length_range: tuple[int, int], lanes: int = 1
) -> list[tuple[int, int]]:
    """Non-overlapping [start, end) intervals covering ~duty of n frames per lane.

    The count k is the duty-preserving rate rounded stochastically; the
    k * lanes intervals then land in k * lanes equal slots, slot i belonging
    to lane i % lanes. Every lane therefore sees the same count and length
    law, so per-lane coverage stays at the target duty however many lanes
    share the day.
    """
    lo, hi = length_range
    lam = duty * n / ((lo + hi) / 2.0)
    k = int(lam) + (1 if rng.random() < lam - int(lam) else 0)
    total = k * lanes
    intervals: list[tuple[int, int]] = []
    if total == 0:
        return intervals
    slot = n / total
    pad = BURST_GAP_FRAMES // 2
    for i in range(total):
        lo_edge = int(i * slot) + pad
        hi_edge = int((i + 1) * slot) - pad
        length = min(int(rng.integers(lo, hi + 1)), hi_edge - lo_edge, n)
        if length <= 0:
            continue
        start_hi = hi_edge - length
        start = int(rng.integers(lo_edge, start_hi + 1)) if start_hi > lo_edge else lo_edge
        intervals.append((start, start + length))
    return intervals


def simulate_subject(spec: SynthSpec, index: int) -> SubjectSim:
    """Generate one subject's recordings from its derived seed.

    Subjects 0..n_pos-1 are positive (pos_group), the rest NORMAL. The draw
    order below is fixed; changing it changes every cohort byte.
    """
    if not 0 <= index < spec.n_subjects:
        raise InvalidSpec(f"subject index {index} out of range")
    rng = np.random.default_rng([spec.seed, index])
    positive = index < spec.n_pos

    offsets = rng.normal(0.0, spec.between_sigma, N_FEATURES) if spec.between_sigma else np.zeros(N_FEATURES)
    dispersion = math.exp(rng.normal(0.0, spec.scale_jitter)) if spec.scale_jitter else 1.0
    amp_lo, amp_hi = spec.mod_amp
    # each feature drifts with its own amplitude so no single feature's
    # day-level spread is a clean class discriminant
    mod_amps = rng.uniform(amp_lo, amp_hi, N_FEATURES) if amp_hi > 0 else None

    centers = BASE_LEVELS + offsets * BASE_SPREADS
    if positive:
        centers = centers + np.asarray(spec.mean_shift) * BASE_SPREADS
    sigma_eff = BASE_SPREADS * dispersion * (spec.tail_scale if positive else 1.0)

    d_lo, d_hi = spec.days_per_subject
    n_days = int(rng.integers(d_lo, d_hi + 1))
    f_lo, f_hi = spec.frames_per_day

    days: list[DayRecording] = []
    bursts_by_day: list[list[tuple[int, int]]] = []
    for day in range(n_days):
        n = int(rng.integers(f_lo, f_hi + 1))
        voiced = rng.random(n) < spec.voiced_rate

        values = np.tile(centers, (n, 1))
        for f in range(N_FEATURES):
            values[:, f] += _ar1(rng, n, spec.ar_coeff, sigma_eff[f])

        if mod_amps is not None:
            expz_mean = math.exp(spec.mod_sigma**2 / 2.0)
            for f in range(N_FEATURES):
                z = _ar1(rng, n, spec.mod_ar, spec.mod_sigma)
                drift = np.exp(z) - expz_mean
                values[:, f] += mod_amps[f] * drift * BASE_SPREADS[f]

        intervals: list[tuple[int, int]] = []
        bursting = spec.burst_prob > 0.0 and spec.burst_gain != 0.0
        if bursting and positive:
            intervals = _draw_bursts(rng, n, spec.burst_prob, spec.burst_frames)
            for start, end in intervals:
                for dim in spec.burst_dims:
                    values[start:end, dim] += spec.burst_gain * BASE_SPREADS[dim]
        elif bursting and spec.neg_burst_mode == "antiphase":
            dims = spec.burst_dims
            intervals = _draw_bursts(rng, n, spec.burst_prob, spec.burst_frames, lanes=len(dims))
            for i, (start, end) in enumerate(intervals):
                dim = dims[i % len(dims)]  # one dim per lane, never together
                values[start:end, dim] += spec.burst_gain * BASE_SPREADS[dim]

        if spec.nan_rate > 0.0:
            values[rng.random(values.shape) < spec.nan_rate] = np.nan
        if spec.inf_rate > 0.0:
            inf_mask = rng.random(values.shape) < spec.inf_rate
            signs = np.where(rng.random(values.shape) < 0.5, -np.inf, np.inf)
            values[inf_mask] = signs[inf_mask]

        values = np.round(values, 4)  # keeps files compact; far below noise scale
        days.append(
            DayRecording(
                subject_id=_subject_id(index),
                day_index=day,
                values=values,
                voiced=voiced,
            )
        )
        bursts_by_day.append(intervals)

    group = spec.pos_group if positive else "NORMAL"
    return SubjectSim(
        subject_id=_subject_id(index),
        group=group,
        label=1 if positive else 0,
        days=days,
        bursts=bursts_by_day,
    )


def generate_cohort(spec: SynthSpec, out_dir: Path | str) -> Cohort:
    """Write day files, labels.csv, and a spec.json echo; returns the cohort."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    labels: dict[str, str] = {}
    for index in range(spec.n_subjects):
        sim = simulate_subject(spec, index)
        labels[sim.subject_id] = sim.group
        for rec in sim.days:
            write_day_file(rec, out / day_file_name(rec.subject_id, rec.day_index))
    write_labels(labels, out / "labels.csv")
    write_spec_json(spec, out / "spec.json")
    return load_cohort(out)


def write_spec_json(spec: SynthSpec, path: Path | str, meta: dict | None = None) -> None:
    payload = {"meta": meta or {}, "spec": asdict(spec)}
    Path(path).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def read_spec_json(path: Path | str) -> tuple[SynthSpec, dict]:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    raw = payload["spec"]
    for key in ("days_per_subject", "frames_per_day", "mean_shift", "burst_dims", "mod_amp", "burst_frames"):
        raw[key] = tuple(raw[key])
    return SynthSpec(**raw), payload.get("meta", {})


@dataclass
class CohortDescription:
    """Closed-form frame-level moments per class, before artifact injection."""

    mean_neg: np.ndarray
    mean_pos: np.ndarray
    var_neg: np.ndarray
    var_pos: np.ndarray
    burst_fraction: float  # expected fraction of positive frames inside a burst


def describe_cohort(spec: SynthSpec) -> CohortDescription:
    """Analytic class-conditional mean and variance of each feature.

    The burst term is treated as an independent on/off indicator with duty
    cycle burst_prob (expected count times expected length over day length),
    ignoring overlap between bursts.
    """
    spreads = BASE_SPREADS
    shift = np.asarray(spec.mean_shift)
    burst_frac = min(spec.burst_prob, 1.0)
    burst_mean = np.zeros(N_FEATURES)
    burst_var = np.zeros(N_FEATURES)
    for dim in spec.burst_dims:
        gain = spec.burst_gain * spreads[dim]
        burst_mean[dim] = burst_frac * gain
        burst_var[dim] = burst_frac * (1.0 - burst_frac) * gain * gain
    neg_bursting = spec.neg_burst_mode == "antiphase"

    mean_neg = BASE_LEVELS + (burst_mean if neg_bursting else 0.0)
    mean_pos = BASE_LEVELS + shift * spreads + burst_mean

    e_c2 = math.exp(2.0 * spec.scale_jitter**2)  # E[dispersion^2]
    lo, hi = spec.mod_amp
    e_amp2 = (lo * lo + lo * hi + hi * hi) / 3.0
    var_expz = math.exp(spec.mod_sigma**2) * (math.exp(spec.mod_sigma**2) - 1.0)
    nuisance = spec.between_sigma**2 + e_amp2 * var_expz

    var_neg = spreads**2 * (nuisance + e_c2) + (burst_var if neg_bursting else 0.0)
    var_pos = spreads**2 * (nuisance + e_c2 * spec.tail_scale**2) + burst_var
    return CohortDescription(
        mean_neg=mean_neg,
        mean_pos=mean_pos,
        var_neg=var_neg,
        var_pos=var_pos,
        burst_fraction=burst_frac,
    )


# Documented presets used by the end-to-end acceptance checks -----------------------


def effect_cohort_spec(seed: int = 42) -> SynthSpec:
    """Mean-shift plus burst effects; both model families should see signal."""
    return SynthSpec(
        n_pos=100,
        n_neg=100,
        days_per_subject=(1, 2),
        frames_per_day=(18000, 26000),
        voiced_rate=0.6,
        ar_coeff=0.9,
        mean_shift=(0.0, 0.0, 0.6, 0.0, 0.6, 0.0, 0.0, 0.6, 0.0, 0.6, 0.0, 0.0, 0.0, 0.0),
        tail_scale=1.15,
        burst_prob=0.35,
        burst_gain=1.2,
        nan_rate=0.002,
        inf_rate=0.001,
        seed=seed,
        between_sigma=0.5,
        scale_jitter=0.15,
        mod_amp=(0.2, 0.6),
    )


def null_cohort_spec(seed: int = 42) -> SynthSpec:
    """All class effects off; classes are exchangeable by construction."""
    return SynthSpec(
        n_pos=100,
        n_neg=100,
        days_per_subject=(1, 1),
        frames_per_day=(8000, 12000),
        voiced_rate=0.6,
        ar_coeff=0.9,
        nan_rate=0.002,
        inf_rate=0.001,
        seed=seed,
        between_sigma=0.5,
        scale_jitter=0.15,
        mod_amp=(0.2, 0.6),
    )


def burst_cohort_spec(seed: int = 42) -> SynthSpec:
    """Co-occurrence-only signal: no per-feature distributional shift.

    Both classes burst the same two features with identical per-feature duty
    cycle, episode length, and gain. Positives surge both features in the
    same episodes; negatives alternate them so the features never surge
    together. Day-level summaries are computed one feature at a time, so
    they cannot distinguish the classes, while window-level instances keep
    the joint surge visible. Inf artifacts are left out of this preset: the
    cleaning stage clips them to +-1e5, and at window scale those fill
    values dwarf the effect being probed.
    """
    return SynthSpec(
        n_pos=50,
        n_neg=50,
        days_per_subject=(1, 1),
        frames_per_day=(30000, 36000),
        voiced_rate=0.6,
        ar_coeff=0.9,
        mean_shift=(0.0,) * N_FEATURES,
        tail_scale=1.0,
        burst_prob=0.15,
        burst_gain=3.0,
        burst_frames=(3000, 6000),
        neg_burst_mode="antiphase",
        nan_rate=0.002,
        inf_rate=0.0,
        seed=seed,
        between_sigma=0.3,
        scale_jitter=0.1,
        mod_amp=(0.1, 0.3),
        mod_ar=0.999,
    )

"""Run configuration: TOML file -> resolved dataclass -> stable content hash.

A RunConfig collects every knob of the pipeline in flat sections (paths,
featurize, split, gbt_level, gbt_leaf, mil, ensemble). Unknown keys are
rejected so typos fail loudly. The config hash is the sha256 of the fully
resolved configuration (defaults applied, paths as written), so two runs
agree on the hash iff they agree on every effective setting; artifacts embed
it and downstream commands refuse mixed-hash inputs.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .errors import ConfigError
from .gbt import GbtConfig, Growth
from .mil import MilConfig

TASKS = ("pvh", "npvh")


@dataclass(frozen=True)
class FeaturizeParams:
    window: int = 200
    hop: int = 100
    scaler_fraction: float = 0.3

    def __post_init__(self):
        if self.window <= 0 or self.hop <= 0:
            raise ConfigError("window and hop must be positive")
        if not 0.0 < self.scaler_fraction <= 1.0:
            raise ConfigError("scaler_fraction must be in (0, 1]")


@dataclass(frozen=True)
class SplitParams:
    k: int = 5
    holdout_fraction: float = 0.15  # early-stop validation share of each training fold

    def __post_init__(self):
        if self.k < 2:
            raise ConfigError("k must be at least 2")
        if not 0.0 < self.holdout_fraction < 0.5:
            raise ConfigError("holdout_fraction must be in (0, 0.5)")


@dataclass(frozen=True)
class EnsembleParams:
    step: float = 0.05

    def __post_init__(self):
        if not 0.0 < self.step <= 1.0:
            raise ConfigError("step must be in (0, 1]")


@dataclass(frozen=True)
class RunConfig:
    data_dir: str
    artifact_dir: str
    task: str = "pvh"
    seed: int = 0
    featurize: FeaturizeParams = field(default_factory=FeaturizeParams)
    split: SplitParams = field(default_factory=SplitParams)
    gbt_level: GbtConfig = field(default_factory=lambda: GbtConfig(growth=Growth.LEVEL_WISE))
    gbt_leaf: GbtConfig = field(default_factory=lambda: GbtConfig(growth=Growth.LEAF_WISE))
    mil: MilConfig = field(default_factory=MilConfig)
    ensemble: EnsembleParams = field(default_factory=EnsembleParams)

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.gbt_level.growth is not Growth.LEVEL_WISE:
            raise ConfigError("gbt_level section must keep level-wise growth")
        if self.gbt_leaf.growth is not Growth.LEAF_WISE:
            raise ConfigError("gbt_leaf section must keep leaf-wise growth")

    @property
    def data_path(self) -> Path:
        return Path(self.data_dir)

    @property
    def artifact_path(self) -> Path:
        return Path(self.artifact_dir) / self.task

    def resolved(self) -> dict:
        doc = asdict(self)
        doc["gbt_level"]["growth"] = self.gbt_level.growth.value
        doc["gbt_leaf"]["growth"] = self.gbt_leaf.growth.value
        return doc

    @property
    def config_hash(self) -> str:
        blob = json.dumps(self.resolved(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def _build_section(cls, section: dict, name: str):
    known = {f.name for f in fields(cls)}
    unknown = set(section) - known
    if unknown:
        raise ConfigError(f"unknown keys in [{name}]: {sorted(unknown)}")
    if cls is GbtConfig and "growth" in section:
        section = dict(section)
        try:
            section["growth"] = Growth(section["growth"])
        except ValueError as exc:
            raise ConfigError(f"[{name}] growth must be 'level' or 'leaf'") from exc
    try:
        return cls(**section)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid [{name}] section: {exc}") from exc


_SECTION_TYPES = {
    "featurize": FeaturizeParams,
    "split": SplitParams,
    "gbt_level": GbtConfig,
    "gbt_leaf": GbtConfig,
    "mil": MilConfig,
    "ensemble": EnsembleParams,
}


def load_config(
    path: Path | str, task: str | None = None, seed: int | None = None
) -> RunConfig:
    """Parse a TOML run config; optional task/seed override the file values."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = tomllib.loads(path.read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"malformed TOML in {path}: {exc}") from exc

    top_known = {"data_dir", "artifact_dir", "task", "seed", *_SECTION_TYPES}
    unknown = set(doc) - top_known
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    for key in ("data_dir", "artifact_dir"):
        if key not in doc:
            raise ConfigError(f"config must set {key}")

    kwargs: dict = {
        "data_dir": doc["data_dir"],
        "artifact_dir": doc["artifact_dir"],
        "task": task if task is not None else doc.get("task", "pvh"),
        "seed": seed if seed is not None else doc.get("seed", 0),
    }
    for name, cls in _SECTION_TYPES.items():
        section = doc.get(name, {})
        if not isinstance(section, dict):
            raise ConfigError(f"[{name}] must be a table")
        if name.startswith("gbt_"):
            section = dict(section)
            section.setdefault("growth", "level" if name == "gbt_level" else "leaf")
        kwargs[name] = _build_section(cls, section, name)
    return RunConfig(**kwargs)


def default_config(data_dir: str, artifact_dir: str, task: str = "pvh", seed: int = 0) -> RunConfig:
    return RunConfig(data_dir=data_dir, artifact_dir=artifact_dir, task=task, seed=seed)


def write_config_toml(cfg: RunConfig, path: Path | str) -> None:
    """Emit the resolved config as TOML (defaults made explicit)."""

    def fmt(v) -> str:
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, (int, float)):
            return repr(v)
        return json.dumps(v)

    doc = cfg.resolved()
    lines = []
    for key in ("data_dir", "artifact_dir", "task", "seed"):
        lines.append(f"{key} = {fmt(doc[key])}")
    for name in _SECTION_TYPES:
        lines.append("")
        lines.append(f"[{name}]")
        for key, value in doc[name].items():
            lines.append(f"{key} = {fmt(value)}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

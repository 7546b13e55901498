"""Command line entry point: `vibemil <command> --config path [...]`.

Each command runs one pipeline stage against a TOML run config. Artifacts land
under `<artifact_dir>/<task>/` and embed the config hash and seed, so stages
refuse inputs produced under a different effective configuration. Exit codes:
0 ok, 2 configuration error, 3 missing upstream artifact, 4 data contract
violation, 1 anything else.
"""

from __future__ import annotations

import logging
import sys
from dataclasses import replace
from pathlib import Path

import click

from . import pipeline, synth
from .config import load_config
from .errors import ConfigError, VibemilError, exit_code_for

logger = logging.getLogger(__name__)

_MODEL_CHOICES = {"gbt-level": "gbt_level", "gbt-leaf": "gbt_leaf", "mil": "cnn"}

_PRESETS = {
    "effect": synth.effect_cohort_spec,
    "null": synth.null_cohort_spec,
    "burst": synth.burst_cohort_spec,
}


def _fail(exc: VibemilError) -> None:
    click.echo(f"error: {exc}", err=True)
    sys.exit(exit_code_for(exc))


def _config_options(fn):
    for option in reversed(
        (
            click.option(
                "--config",
                "config_path",
                required=True,
                type=click.Path(path_type=Path),
                help="TOML run configuration.",
            ),
            click.option(
                "--task",
                type=click.Choice(["pvh", "npvh"]),
                default=None,
                help="Override the task set in the config file.",
            ),
            click.option("--seed", type=int, default=None, help="Override the config seed."),
            click.option(
                "--threads",
                type=click.IntRange(min=1),
                default=1,
                help="Worker cap for fold-parallel stages.",
            ),
        )
    ):
        fn = option(fn)
    return fn


@click.group()
@click.version_option(package_name="vibemil")
def main() -> None:
    """Ambulatory voice-disorder detection pipeline."""
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")


@main.command("synth")
@click.option("--spec", "spec_path", type=click.Path(path_type=Path), default=None,
              help="Cohort spec JSON (as written by spec.json).")
@click.option("--preset", type=click.Choice(sorted(_PRESETS)), default=None,
              help="Generate one of the packaged cohort presets instead.")
@click.option("--seed", type=int, default=None, help="Override the spec seed.")
@click.option("--out", "out_dir", required=True, type=click.Path(path_type=Path))
def cmd_synth(spec_path: Path | None, preset: str | None, seed: int | None, out_dir: Path) -> None:
    """Generate a synthetic cohort directory."""
    try:
        if (spec_path is None) == (preset is None):
            raise ConfigError("pass exactly one of --spec or --preset")
        if spec_path is not None:
            if not spec_path.exists():
                raise ConfigError(f"spec file not found: {spec_path}")
            spec, _ = synth.read_spec_json(spec_path)
            if seed is not None:
                spec = replace(spec, seed=seed)
        else:
            spec = _PRESETS[preset]() if seed is None else _PRESETS[preset](seed=seed)
        cohort = synth.generate_cohort(spec, out_dir)
        click.echo(f"wrote {cohort.n_days} day files for {len(cohort.subject_ids)} subjects to {out_dir}")
    except VibemilError as exc:
        _fail(exc)


@main.command("featurize")
@_config_options
def cmd_featurize(config_path: Path, task: str | None, seed: int | None, threads: int) -> None:
    """Turn a cohort into window bags and subject vectors."""
    try:
        cfg = load_config(config_path, task=task, seed=seed)
        bags, vectors = pipeline.run_featurize(cfg)
        click.echo(
            f"featurized {len(bags)} days of {len(vectors)} subjects "
            f"into {cfg.artifact_path}"
        )
    except VibemilError as exc:
        _fail(exc)


@main.command("split")
@_config_options
def cmd_split(config_path: Path, task: str | None, seed: int | None, threads: int) -> None:
    """Assign subjects to stratified grouped folds."""
    try:
        cfg = load_config(config_path, task=task, seed=seed)
        assignment = pipeline.run_split(cfg)
        sizes = [len(assignment.test_subjects(f)) for f in range(assignment.k)]
        click.echo(f"assigned {sum(sizes)} subjects to {assignment.k} folds (sizes {sizes})")
    except VibemilError as exc:
        _fail(exc)


@main.command("train")
@click.option("--model", required=True, type=click.Choice(sorted(_MODEL_CHOICES)))
@_config_options
def cmd_train(
    model: str, config_path: Path, task: str | None, seed: int | None, threads: int
) -> None:
    """Train one model family across all folds and write its OOF predictions."""
    try:
        cfg = load_config(config_path, task=task, seed=seed)
        key = _MODEL_CHOICES[model]
        table = pipeline.run_train(cfg, key, threads=threads)
        from .validation import roc_auc

        auc = roc_auc(table.y, table.column(key))
        click.echo(f"{model}: out-of-fold AUC {auc:.4f} over {table.n} subjects")
    except VibemilError as exc:
        _fail(exc)


@main.command("ensemble")
@_config_options
def cmd_ensemble(config_path: Path, task: str | None, seed: int | None, threads: int) -> None:
    """Grid-search blend weights on the pooled OOF predictions."""
    try:
        cfg = load_config(config_path, task=task, seed=seed)
        weights, _ = pipeline.run_ensemble(cfg)
        click.echo(
            f"weights cnn/level/leaf = {weights.w_cnn:.2f}/{weights.w_gbt_level:.2f}/"
            f"{weights.w_gbt_leaf:.2f}, OOF AUC {weights.achieved_oof_auc:.4f}"
        )
    except VibemilError as exc:
        _fail(exc)


@main.command("evaluate")
@click.option("--holdout", "holdout_dir", required=True, type=click.Path(path_type=Path),
              help="Held-out cohort directory to score.")
@_config_options
def cmd_evaluate(
    holdout_dir: Path, config_path: Path, task: str | None, seed: int | None, threads: int
) -> None:
    """Score a held-out cohort with the trained fold models and frozen weights."""
    try:
        cfg = load_config(config_path, task=task, seed=seed)
        if not holdout_dir.exists():
            raise ConfigError(f"holdout directory not found: {holdout_dir}")
        _, _, metrics = pipeline.run_evaluate(cfg, holdout_dir)
        click.echo(
            f"holdout AUC {metrics['auc']:.4f}, accuracy {metrics['accuracy']:.4f} "
            f"over {metrics['n_subjects']} subjects"
        )
    except VibemilError as exc:
        _fail(exc)


@main.command("report")
@_config_options
def cmd_report(config_path: Path, task: str | None, seed: int | None, threads: int) -> None:
    """Render the OOF results table (singles, pairwise blends, optimized)."""
    try:
        cfg = load_config(config_path, task=task, seed=seed)
        click.echo(pipeline.run_report(cfg))
    except VibemilError as exc:
        _fail(exc)


if __name__ == "__main__":
    main()

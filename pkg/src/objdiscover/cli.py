"""Command line surface: pipeline subcommands over a state directory.

Exit codes: 0 success, 2 validation failure (bad flags, config or
inputs), 1 runtime error. All flags are long-form; ``--config`` points at
a YAML or JSON document with PipelineConfig fields, and explicit flags
win over the document.
"""

from __future__ import annotations

import dataclasses
import json
import sys
from pathlib import Path

import click
import yaml

from .pipeline import PipelineConfig, ValidationFailure, stage_discover, stage_discover_large, \
    stage_evaluate, stage_propose, stage_score, stage_synth
from .tensor_store import ParseError, TensorStoreError

_CONFIG_FIELDS = {f.name for f in dataclasses.fields(PipelineConfig)}


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    text = Path(path).read_text(encoding="utf-8")
    if path.endswith((".yaml", ".yml")):
        doc = yaml.safe_load(text)
    else:
        doc = json.loads(text)
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise ValidationFailure(f"config file {path} must hold a mapping")
    return doc


def _build_config(ctx: click.Context, config_path: str | None, flag_values: dict) -> PipelineConfig:
    overrides = {}
    for name, value in flag_values.items():
        if name not in _CONFIG_FIELDS:
            continue
        source = ctx.get_parameter_source(name)
        if source == click.core.ParameterSource.COMMANDLINE:
            overrides[name] = value
    base = {name: value for name, value in flag_values.items() if name in _CONFIG_FIELDS}
    if base.get("multi") and ctx.get_parameter_source("nu") == click.core.ParameterSource.DEFAULT:
        base["nu"] = 50  # multi-object runs keep many regions before suppression
    base.update(_load_config_file(config_path))
    return PipelineConfig.from_document(base, overrides)


def _state_dir(value: str | None) -> Path:
    if not value:
        raise ValidationFailure("no state directory: pass --state-dir or set ROSD_STATE_DIR")
    return Path(value)


state_dir_option = click.option("--state-dir", envvar="ROSD_STATE_DIR", default=None,
                                help="Pipeline state directory (env: ROSD_STATE_DIR).")
config_option = click.option("--config", "config_path", default=None,
                             help="YAML/JSON config document; explicit flags win.")


def _common_options(fn):
    fn = click.option("--seed", default=0, show_default=True, help="Master seed; stages derive their own.")(fn)
    fn = click.option("--workers", default=1, show_default=True, help="Parallel workers where a stage allows.")(fn)
    fn = config_option(fn)
    fn = state_dir_option(fn)
    return fn


@click.group()
def cli() -> None:
    """Unsupervised object discovery over precomputed feature tensors."""


@cli.command()
@click.option("--images", default=40, show_default=True)
@click.option("--classes", default=4, show_default=True)
@click.option("--noise", default=0.0, show_default=True)
@click.option("--seed", default=0, show_default=True)
@state_dir_option
def synth(images: int, classes: int, noise: float, seed: int, state_dir: str | None) -> None:
    """Generate a synthetic planted-object dataset into the state directory."""
    ran = stage_synth(_state_dir(state_dir), images, classes, noise, seed)
    click.echo(f"synth: {'written' if ran else 'up to date'}")


@cli.command()
@click.option("--alpha", default=0.3, show_default=True, help="Saliency floor fraction.")
@click.option("--beta", default=0.5, show_default=True, help="Global-mean fraction in the mask filter.")
@click.option("--max-maxima", default=20, show_default=True, help="Local maxima kept per layer.")
@click.option("--threshold-count", default=50, show_default=True, help="Thresholds per local map.")
@_common_options
def propose(state_dir, config_path, **flags) -> None:
    """Generate grouped region proposals for every image."""
    ctx = click.get_current_context()
    config = _build_config(ctx, config_path, flags)
    ran = stage_propose(_state_dir(state_dir), config)
    click.echo(f"propose: {'written' if ran else 'up to date'}")


@cli.command()
@click.option("--pool-grid", default=3, show_default=True, help="RoI pooling grid side.")
@click.option("--neighbor-cap", default=50, show_default=True, help="Potential neighbors per image.")
@click.option("--score-budget", default=50, show_default=True, help="Positive entries kept per score matrix.")
@click.option("--roi-layer", default="auto", show_default=True, help="Layer tag pooled for region descriptors.")
@_common_options
def score(state_dir, config_path, **flags) -> None:
    """Prefilter neighborhoods and compute sparse score matrices."""
    ctx = click.get_current_context()
    config = _build_config(ctx, config_path, flags)
    ran = stage_score(_state_dir(state_dir), config)
    click.echo(f"score: {'written' if ran else 'up to date'}")


def _discover_options(fn):
    fn = click.option("--nu", default=5, show_default=True, help="Max retained regions per image.")(fn)
    fn = click.option("--tau", default=10, show_default=True, help="Max out-edges per image.")(fn)
    fn = click.option("--use-groups/--no-use-groups", default=True, show_default=True,
                      help="Enforce at most one selected region per proposal group.")(fn)
    fn = click.option("--max-sweeps", default=50, show_default=True)(fn)
    fn = click.option("--multi", is_flag=True, default=False, help="Emit multiple boxes per image.")(fn)
    fn = click.option("--nms-iou", default=0.7, show_default=True, help="Suppression threshold in multi mode.")(fn)
    fn = click.option("--max-regions", default=5, show_default=True, help="Boxes kept per image in multi mode.")(fn)
    return fn


@cli.command()
@_discover_options
@_common_options
def discover(state_dir, config_path, **flags) -> None:
    """Solve the joint region/graph selection and write predictions."""
    ctx = click.get_current_context()
    config = _build_config(ctx, config_path, flags)
    ran = stage_discover(_state_dir(state_dir), config)
    click.echo(f"discover: {'written' if ran else 'up to date'}")


@cli.command("discover-large")
@click.option("--parts", default=2, show_default=True, help="Random parts in stage one.")
@click.option("--memory-limit", default=0, show_default=True,
              help="Score-entry budget M; 0 derives n * neighbor_cap * score_budget.")
@click.option("--pool-grid", default=3, show_default=True)
@click.option("--neighbor-cap", default=50, show_default=True)
@click.option("--score-budget", default=50, show_default=True,
              help="Stage-two entries per matrix (K2) when deriving the memory limit.")
@click.option("--roi-layer", default="auto", show_default=True)
@_discover_options
@_common_options
def discover_large(state_dir, config_path, **flags) -> None:
    """Two-stage discovery under a global memory budget."""
    ctx = click.get_current_context()
    config = _build_config(ctx, config_path, flags)
    ran = stage_discover_large(_state_dir(state_dir), config)
    click.echo(f"discover-large: {'written' if ran else 'up to date'}")


@cli.command()
@click.option("--metric", default="corloc", show_default=True,
              type=click.Choice(["corloc", "detection-rate", "corret"]))
@click.option("--per-class/--pooled", default=True, show_default=True,
              help="Group by class labels when available, or treat all images as one class.")
@click.option("--csv", "csv_only", is_flag=True, default=False, help="Print the CSV report to stdout.")
@_common_options
def evaluate(state_dir, config_path, metric, per_class, csv_only, **flags) -> None:
    """Score predictions against manifest ground truth."""
    ctx = click.get_current_context()
    config = _build_config(ctx, config_path, flags)
    state = _state_dir(state_dir)
    doc = stage_evaluate(state, config, metric, per_class)
    if csv_only:
        click.echo((state / "report.csv").read_text(encoding="utf-8"), nl=False)
    else:
        click.echo((state / "report.txt").read_text(encoding="utf-8"), nl=False)
    click.echo(f"overall: {doc['overall']}")


def main(argv: list[str] | None = None) -> int:
    try:
        cli.main(args=argv, standalone_mode=False)
        return 0
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return 1
    except click.UsageError as exc:
        click.echo(f"error: {exc.format_message()}", err=True)
        return 2
    except (ValidationFailure, ParseError) as exc:
        click.echo(f"validation error: {exc}", err=True)
        return 2
    except TensorStoreError as exc:
        click.echo(f"error: {exc}", err=True)
        return 1
    except Exception as exc:  # noqa: BLE001 - single CLI boundary
        click.echo(f"error: {exc}", err=True)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry points.

Exit codes: 0 success, 1 configuration/validation error, 2 runtime failure.
The default output root comes from ``CCREID_OUTPUT_ROOT`` (``./runs`` when
unset); each command writes into ``<root>/<command>`` unless ``--output-dir``
is given.
"""

from __future__ import annotations

import json
import os
import sys
from pathlib import Path
from typing import Callable, Optional

import click

from . import pipeline
from .config import Config, ConfigError, parse_config

OUTPUT_ROOT_ENV = "CCREID_OUTPUT_ROOT"


def _output_dir(explicit: Optional[str], command: str) -> Path:
    if explicit:
        return Path(explicit)
    root = os.environ.get(OUTPUT_ROOT_ENV, "runs")
    return Path(root) / command


def _common(fn: Callable) -> Callable:
    fn = click.option("--config", "-c", "config_path", default=None,
                      type=click.Path(), help="config file (key = value)")(fn)
    fn = click.option("--output-dir", "-o", default=None,
                      type=click.Path(), help="run output directory")(fn)
    fn = click.option("--set", "-s", "overrides", multiple=True,
                      metavar="KEY=VALUE", help="config override")(fn)
    return fn


def _run(command: str, config_path: Optional[str], output_dir: Optional[str],
         overrides: tuple[str, ...], body: Callable[[Config, Path], int]) -> None:
    try:
        cfg = parse_config(config_path, overrides)
    except (ConfigError, FileNotFoundError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)
    out = _output_dir(output_dir, command)
    try:
        pipeline.prepare_output_dir(
            cfg, out, Path(config_path) if config_path else None)
        code = body(cfg, out)
    except (ConfigError, ValueError, FileNotFoundError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)
    except Exception as exc:  # noqa: BLE001 - runtime failures exit with 2
        click.echo(f"runtime error: {exc}", err=True)
        sys.exit(2)
    sys.exit(code)


@click.group()
def cli() -> None:
    """Cloth-changing person re-identification workflows."""


@cli.command()
@_common
def synth(config_path, output_dir, overrides) -> None:
    """Generate the synthetic cloth-changing dataset."""

    def body(cfg: Config, out: Path) -> int:
        manifest = pipeline.run_synth(cfg, out)
        click.echo(f"dataset written; manifest: {manifest}")
        return 0

    _run("synth", config_path, output_dir, overrides, body)


@cli.command()
@_common
def train(config_path, output_dir, overrides) -> None:
    """Train a model on the configured manifest."""

    def body(cfg: Config, out: Path) -> int:
        result = pipeline.run_train(cfg, out)
        click.echo(f"trained {result.epochs_run} epochs; "
                   f"checkpoint: {result.checkpoint_path}")
        return 0

    _run("train", config_path, output_dir, overrides, body)


@cli.command()
@_common
def eval(config_path, output_dir, overrides) -> None:  # noqa: A001
    """Evaluate a checkpoint under the configured protocol settings."""

    def body(cfg: Config, out: Path) -> int:
        results = pipeline.run_eval(cfg, out)
        for name, metrics in results.items():
            summary = metrics.summary(name)
            click.echo(json.dumps(summary, sort_keys=True))
        return 0

    _run("eval", config_path, output_dir, overrides, body)


@cli.command()
@_common
def extract(config_path, output_dir, overrides) -> None:
    """Export the embedding table of one split."""

    def body(cfg: Config, out: Path) -> int:
        path = pipeline.run_extract(cfg, out)
        click.echo(f"embeddings written: {path}")
        return 0

    _run("extract", config_path, output_dir, overrides, body)


@cli.command()
@_common
def gradcheck(config_path, output_dir, overrides) -> None:
    """Finite-difference gradient check on the toy architecture."""

    def body(cfg: Config, out: Path) -> int:
        report = pipeline.run_gradcheck_cmd(cfg, out)
        for section, groups in report.sections.items():
            worst = max(groups.values())
            click.echo(f"{section}: max relative error {worst:.3e}")
        click.echo(f"overall: {report.max_error:.3e} "
                   f"({'pass' if report.passed else 'FAIL'})")
        return 0 if report.passed else 2

    _run("gradcheck", config_path, output_dir, overrides, body)


@cli.command()
@_common
def ablate(config_path, output_dir, overrides) -> None:
    """Train and evaluate the ablation presets and emit a comparison table."""

    def body(cfg: Config, out: Path) -> int:
        payload = pipeline.run_ablate(cfg, out)
        click.echo(f"setting: {payload['setting']}")
        for preset, row in payload["results"].items():
            click.echo(f"{preset}\trank1={row['rank1_mean']:.4f}\t"
                       f"map={row['map_mean']:.4f}")
        return 0

    _run("ablate", config_path, output_dir, overrides, body)


def main() -> None:
    cli()


if __name__ == "__main__":
    main()

from dataclasses import dataclass
from pathlib import Path

import click
import yaml
from loguru import logger

from src.conf.config import config
from src.repository.configs import parse_config, with_overrides
from src.repository.runs import RunSessionManager
from src.schemas.experiment import ExperimentConfig
from src.services import experiments
from src.services.errors import ConfigError
from src.services.timing import process_time


@dataclass
class CliState:
    """Global options shared by every command."""

    config_path: str | None = None
    seed: int | None = None
    output_dir: str | None = None


def load_experiment(ctx: click.Context) -> ExperimentConfig:
    """
    Resolves the experiment config from ``--config`` and the global overrides.

    Without ``--config`` every default applies.
    """
    state: CliState = ctx.obj or CliState()
    cfg = parse_config(state.config_path) if state.config_path else ExperimentConfig()
    if state.seed is not None:
        cfg = with_overrides(cfg, {"seed": state.seed})
    return cfg


def output_dir(ctx: click.Context, cfg: ExperimentConfig) -> Path:
    state: CliState = ctx.obj or CliState()
    return Path(state.output_dir or cfg.output_dir or config.OUTPUT_DIR)


def parse_values(raw: str) -> list:
    """Comma-separated axis values, each parsed as a YAML scalar (``0.1`` is a float, ``krum`` a string)."""
    values = [yaml.safe_load(item) for item in raw.split(",") if item.strip()]
    if not values:
        raise ConfigError(f"no values in '{raw}'")
    return values


def parse_pairs(raw: str) -> list[tuple[int, int]]:
    pairs = []
    for item in raw.split(","):
        try:
            source, target = (int(part) for part in item.strip().split("-"))
        except ValueError as error:
            raise ConfigError(f"pair '{item}' is not of the form <source>-<target>") from error
        pairs.append((source, target))
    return pairs


@click.command("run")
@click.pass_context
@process_time("run")
def run(ctx: click.Context):
    """
    Runs the configured experiment.

    With a botpa section the vanilla and boosted variants run in pairs and the summary holds
    V-ASR, B-ASR and RI-ASR per repetition; otherwise the configured attack (or none) runs alone.
    """
    cfg = load_experiment(ctx)
    with RunSessionManager(output_dir(ctx, cfg)).session(experiments.run_id_for(cfg)) as store:
        if cfg.botpa is not None:
            summary = experiments.run_paired(cfg, store)
            click.echo(
                f"median V-ASR {summary.v_asr:.4f}  B-ASR {summary.b_asr:.4f}  RI-ASR "
                + ("n/a" if summary.ri_asr is None else f"{summary.ri_asr:.4f}")
            )
        else:
            frame = experiments.run_plain(cfg, store)
            click.echo(frame.to_string(index=False))


@click.command("sweep")
@click.option("--axis", type=click.Choice(sorted(experiments.SWEEP_KEYS)), default=None, help="Swept config axis.")
@click.option("--values", "raw_values", default=None, help="Comma-separated axis values.")
@click.pass_context
@process_time("sweep")
def sweep(ctx: click.Context, axis: str | None, raw_values: str | None):
    """Paired runs over one axis; failing points are marked and skipped."""
    cfg = load_experiment(ctx)
    if (axis is None) != (raw_values is None):
        raise ConfigError("--axis and --values go together")
    values = parse_values(raw_values) if raw_values is not None else None
    with RunSessionManager(output_dir(ctx, cfg)).session(f"{experiments.run_id_for(cfg)}-sweep") as store:
        rows = experiments.run_sweep(cfg, store, axis, values)
    for row in rows:
        click.echo(f"{row.axis}={row.value}: {row.status}" + (f" RI-ASR {row.ri_asr}" if row.status == "ok" else ""))


@click.command("select-n")
@click.option("--values", "raw_values", default=None, help="Comma-separated candidate N values, ascending.")
@click.pass_context
@process_time("select-n")
def select_n(ctx: click.Context, raw_values: str | None):
    """Grows the number of intermediate classes while RI-ASR keeps improving."""
    cfg = load_experiment(ctx)
    values = [int(v) for v in parse_values(raw_values)] if raw_values is not None else None
    with RunSessionManager(output_dir(ctx, cfg)).session(f"{experiments.run_id_for(cfg)}-select-n") as store:
        chosen = experiments.select_n(cfg, store, values)
    click.echo(f"N={chosen}")


@click.command("scan")
@click.option("--pairs", "raw_pairs", default=None, help="Comma-separated <source>-<target> pairs; all pairs by default.")
@click.pass_context
@process_time("scan")
def scan(ctx: click.Context, raw_pairs: str | None):
    """Paired runs over source/target combinations; reports the median and best cases."""
    cfg = load_experiment(ctx)
    pairs = parse_pairs(raw_pairs) if raw_pairs is not None else None
    with RunSessionManager(output_dir(ctx, cfg)).session(f"{experiments.run_id_for(cfg)}-scan") as store:
        result = experiments.scan_combinations(cfg, store, pairs)
    if result.median_case is None:
        logger.warning("no combination has a defined RI-ASR")
        click.echo("no defined RI-ASR")
        return
    click.echo(f"median case {result.median_case[0]}->{result.median_case[1]}")
    click.echo(f"best case {result.best_case[0]}->{result.best_case[1]}")

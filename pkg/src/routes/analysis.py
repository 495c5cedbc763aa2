import click

from src.repository.configs import with_overrides
from src.repository.runs import RunSessionManager
from src.routes.experiments import load_experiment, output_dir
from src.services import experiments
from src.services.errors import MetricError
from src.services.propositions import DEFAULT_TOLERANCE, proposition_suite
from src.services.timing import process_time


@click.command("check-propositions")
@click.option("--seeds", default=20, show_default=True, type=click.IntRange(min=1), help="Number of random problems.")
@click.option("--eta", default=0.1, show_default=True, type=float, help="Learning rate of the gradient step.")
@click.option("--classes", "num_classes", default=4, show_default=True, type=click.IntRange(min=3))
@click.option("--dim", default=5, show_default=True, type=click.IntRange(min=1))
@click.option("--samples", default=40, show_default=True, type=click.IntRange(min=3))
@click.option("--tolerance", default=DEFAULT_TOLERANCE, show_default=True, type=float)
@click.pass_context
@process_time("check-propositions")
def check_propositions(ctx: click.Context, seeds: int, eta: float, num_classes: int, dim: int, samples: int, tolerance: float):
    """
    Compares empirical and closed-form weight divergence on random softmax-regression problems.

    Writes ``propositions.csv`` and fails with the metric exit code if any check misses the tolerance.
    """
    if samples < num_classes:
        raise click.BadParameter("needs at least one sample per class", param_hint="--samples")
    cfg = load_experiment(ctx)
    frame = proposition_suite(
        [cfg.seed + s for s in range(seeds)], eta=eta, num_classes=num_classes, dim=dim, samples=samples, tolerance=tolerance
    )
    with RunSessionManager(output_dir(ctx, cfg)).session(f"propositions-seed{cfg.seed}") as store:
        store.write_frame("propositions.csv", frame)
    failed = int((~frame["passed"]).sum())
    click.echo(f"{len(frame) - failed}/{len(frame)} checks passed, worst error {frame['max_abs_error'].max():.3e}")
    if failed:
        raise MetricError(f"{failed} divergence checks exceeded tolerance {tolerance}")


@click.command("export-features")
@click.pass_context
@process_time("export-features")
def export_features(ctx: click.Context):
    """Runs the configured experiment with logits-feature and density export enabled."""
    cfg = with_overrides(load_experiment(ctx), {"metrics.export_features": True})
    with RunSessionManager(output_dir(ctx, cfg)).session(experiments.run_id_for(cfg)) as store:
        if cfg.botpa is not None:
            experiments.run_paired(cfg, store)
        else:
            experiments.run_plain(cfg, store)
    click.echo(f"features written under {store.root}")

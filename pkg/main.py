import click
from loguru import logger

from src.conf.config import config
from src.conf.log import configure_logging
from src.routes import analysis, experiments
from src.routes.experiments import CliState
from src.services.errors import SimulatorError, exit_code_for


class SimulatorGroup(click.Group):
    """Command group that turns a ``SimulatorError`` into its category's exit code."""

    def invoke(self, ctx: click.Context):
        try:
            return super().invoke(ctx)
        except SimulatorError as error:
            logger.error(str(error))
            click.echo(f"error: {error}", err=True)
            ctx.exit(exit_code_for(error))


@click.group(cls=SimulatorGroup)
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None, help="YAML experiment config.")
@click.option("--seed", type=int, default=None, help="Overrides the config seed.")
@click.option("--serial/--parallel", default=None, help="Train clients one after another (bitwise deterministic).")
@click.option("--workers", type=click.IntRange(min=1), default=None, help="Client threads in parallel mode.")
@click.option("--output-dir", type=click.Path(file_okay=False), default=None, help="Results root directory.")
@click.option("--log-level", default=None, help="Overrides LOG_LEVEL.")
@click.pass_context
def cli(ctx: click.Context, config_path, seed, serial, workers, output_dir, log_level):
    """Federated-learning poisoning simulator."""
    configure_logging(log_level)
    if serial is not None:
        config.SERIAL = serial
    if workers is not None:
        config.WORKERS = workers
    ctx.obj = CliState(config_path=config_path, seed=seed, output_dir=output_dir)


cli.add_command(experiments.run)
cli.add_command(experiments.sweep)
cli.add_command(experiments.select_n)
cli.add_command(experiments.scan)
cli.add_command(analysis.check_propositions)
cli.add_command(analysis.export_features)


if __name__ == "__main__":
    cli()

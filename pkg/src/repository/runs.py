import contextlib
from pathlib import Path
from typing import Iterable

import pandas as pd
from loguru import logger

from src.repository.configs import dump_config
from src.schemas.experiment import ExperimentConfig
from src.schemas.records import RoundRecord


class RunStore:
    """
    Results directory of one run: ``<output_dir>/<run_id>/`` with per-repetition subdirectories.

    Column order of every CSV is fixed by the record ``to_row`` methods.
    """

    def __init__(self, output_dir: str | Path, run_id: str):
        self.root = Path(output_dir) / run_id
        self.root.mkdir(parents=True, exist_ok=True)

    def repetition_dir(self, repetition: int | None) -> Path:
        path = self.root if repetition is None else self.root / f"rep-{repetition}"
        path.mkdir(parents=True, exist_ok=True)
        return path

    def write_frame(self, name: str, frame: pd.DataFrame, repetition: int | None = None) -> Path:
        path = self.repetition_dir(repetition) / name
        frame.to_csv(path, index=False)
        logger.debug(f"wrote {path}")
        return path

    def write_rows(self, name: str, rows: Iterable, repetition: int | None = None) -> Path:
        return self.write_frame(name, pd.DataFrame([row.to_row() for row in rows]), repetition)

    def write_rounds(self, variant: str, records: list[RoundRecord], repetition: int | None = None) -> Path:
        return self.write_rows(f"rounds_{variant}.csv", records, repetition)

    def write_config(self, cfg: ExperimentConfig) -> Path:
        path = self.root / "resolved_config.yaml"
        path.write_text(dump_config(cfg), encoding="utf-8")
        return path


class RunSessionManager:
    def __init__(self, output_dir: str | Path):
        self.output_dir = Path(output_dir)

    @contextlib.contextmanager
    def session(self, run_id: str):
        """Yields the run's store; a failure is logged with the run id and re-raised."""
        store = RunStore(self.output_dir, run_id)
        try:
            yield store
        except Exception as error:
            logger.error(f"run {run_id} failed: {error}")
            raise
        finally:
            logger.info(f"results in {store.root}")

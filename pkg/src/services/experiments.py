"""Experiment orchestration: single runs, vanilla-versus-boosted pairs, sweeps and scans."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import pandas as pd
from loguru import logger

from src.entity.dataset import Dataset
from src.entity.models import build_model
from src.repository.configs import with_overrides
from src.repository.datasets import load_idx, synth_blobs
from src.repository.runs import RunStore
from src.schemas.experiment import ExperimentConfig
from src.schemas.records import PairedSummaryRow, RoundRecord, ScanRow, SweepRow
from src.services.attacks import AttackPlan, flip_labels
from src.services.botpa import BotpaOutcome, boost_shards, select_n_sweep
from src.services.detector import density_divergence, suspect_models
from src.services.errors import ExperimentError, SimulatorError
from src.services.federation import Client, FederationState, new_state, run_experiment
from src.services.metrics import export_logits_features, ri_asr, windowed_mean
from src.services.partition import partition_dirichlet, partition_iid, select_malicious

SWEEP_KEYS = {
    "malicious_fraction": "attack.malicious_fraction",
    "N": "botpa.num_intermediate",
    "beta": "partition.beta",
    "aggregator": "aggregator.kind",
}


def load_datasets(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    """
    Training and test splits described by the dataset section.

    Synthetic splits share one class geometry (seeded by ``cfg.seed``) and use independent noise streams.
    """
    spec = cfg.dataset
    if spec.kind == "blobs":
        neighbours = [(n.class_id, n.anchor, n.closeness) for n in spec.neighbours]
        common = dict(separation=spec.separation, neighbours=neighbours)
        train = synth_blobs(spec.num_classes, spec.per_class, spec.dim, spec.spread, cfg.seed, sample_stream=0, **common)
        test = synth_blobs(spec.num_classes, spec.test_per_class, spec.dim, spec.spread, cfg.seed, sample_stream=1, **common)
    else:
        train = load_idx(spec.images_path, spec.labels_path, spec.num_classes)
        test = load_idx(spec.test_images_path, spec.test_labels_path, spec.num_classes)
    if spec.subset is not None and spec.subset < len(train):
        rng = np.random.default_rng(cfg.seed)
        train = train.subset(np.sort(rng.choice(len(train), size=spec.subset, replace=False)))
    return train, test


def malicious_for(cfg: ExperimentConfig, repetition: int) -> list[int]:
    attack = cfg.attack
    if attack is None or not attack.active:
        return []
    seed = None if attack.malicious_seed is None else attack.malicious_seed + repetition
    return select_malicious(cfg.partition.clients, cfg.malicious_count(), attack.malicious_clients, seed)


@dataclass
class VariantRun:
    records: list[RoundRecord]
    state: FederationState
    clients: list[Client]
    outcome: BotpaOutcome | None = None


def run_variant(
    cfg: ExperimentConfig,
    train: Dataset,
    test: Dataset,
    seed: int,
    malicious: Sequence[int],
    boosted: bool = False,
    sink=None,
) -> VariantRun:
    """
    One federated run: partition, poison the malicious shards (and boost them), then train.

    Args:
        cfg (ExperimentConfig): Resolved config.
        train (Dataset): Training split.
        test (Dataset): Test split.
        seed (int): Repetition seed, used for partitioning, initialization and client streams.
        malicious (Sequence[int]): Malicious client ids.
        boosted (bool): Apply the boosting stage to the malicious shards.
        sink: Receives partial round records if a round fails.

    Returns:
        VariantRun: Round records, final federation state and clients.
    """
    k = cfg.partition.clients
    if cfg.partition.scheme == "iid":
        partition = partition_iid(train, k, seed)
    else:
        partition = partition_dirichlet(train, k, cfg.partition.beta, seed)
    attack = cfg.attack if cfg.attack is not None and cfg.attack.active else None
    malicious = set(malicious)
    clients = []
    for client_id, indices in enumerate(partition.shards):
        shard = train.subset(indices)
        if client_id in malicious:
            clean = shard.copy()
            flipped = flip_labels(shard, attack.source_class, attack.target_class)
            logger.debug(f"client {client_id}: {flipped} labels flipped")
            clients.append(Client(client_id, shard, True, clean))
        else:
            clients.append(Client(client_id, shard))

    outcome = None
    if boosted:
        if cfg.botpa is None or attack is None:
            raise ExperimentError("boosted runs need attack and botpa sections")
        shards = {c.client_id: c.shard for c in clients if c.malicious}
        outcome = boost_shards(
            shards, cfg.botpa, cfg.model, attack.source_class, attack.target_class, cfg.training.batch_size, seed
        )

    model = build_model(train.input_shape, train.num_classes, cfg.model.arch, cfg.model.descriptors(), seed)
    state = new_state(
        model,
        test,
        cfg.training,
        seed,
        source_class=None if attack is None else attack.source_class,
        target_class=None if attack is None else attack.target_class,
        f_default=cfg.krum_f(),
    )
    plan = AttackPlan.from_config(cfg, sorted(malicious)) if attack is not None else None
    records = run_experiment(state, clients, cfg.aggregator, plan, sink=sink)
    return VariantRun(records, state, clients, outcome)


def _selection_rate(records: list[RoundRecord], cfg: ExperimentConfig) -> float | None:
    window = [r for r in records if cfg.metrics.from_round <= r.round <= cfg.metrics.to_round]
    if not window or window[0].malicious_selected is None:
        return None
    return float(np.mean([r.malicious_selected for r in window]))


def _export_features(store: RunStore, variant: str, run: VariantRun, test: Dataset, repetition: int) -> None:
    directory = store.repetition_dir(repetition)
    export_logits_features(run.state.model, test, directory / f"features_{variant}.csv")
    base = run.state.model.params - run.state.previous_update
    local_models = [run.state.model.with_params(base + u.delta) for u in run.state.last_updates]
    if len(local_models) < 2:
        return
    report = density_divergence(local_models, test)
    store.write_frame(f"density_{variant}.csv", report.to_frame(), repetition)
    updates = run.state.last_updates
    suspects = pd.DataFrame(
        [
            {"rank": rank, "client_id": updates[m].client_id, "malicious": updates[m].malicious, "deviation": deviation}
            for rank, (m, deviation) in enumerate(suspect_models(report), start=1)
        ]
    )
    store.write_frame(f"suspects_{variant}.csv", suspects, repetition)


@dataclass
class PairedSummary:
    rows: list[PairedSummaryRow] = field(default_factory=list)

    def _median(self, key: str) -> float | None:
        values = [getattr(r, key) for r in self.rows if getattr(r, key) is not None]
        return float(np.median(values)) if values else None

    @property
    def v_asr(self) -> float | None:
        return self._median("v_asr")

    @property
    def b_asr(self) -> float | None:
        return self._median("b_asr")

    @property
    def ri_asr(self) -> float | None:
        return self._median("ri_asr")

    @property
    def v_accuracy(self) -> float | None:
        return self._median("v_accuracy")

    @property
    def b_accuracy(self) -> float | None:
        return self._median("b_accuracy")


def run_paired(cfg: ExperimentConfig, store: RunStore) -> PairedSummary:
    """
    Vanilla and boosted runs with shared seeds and malicious sets, ``cfg.runs`` times.

    Repetition ``r`` uses seed ``cfg.seed + r``. Per repetition the rounds of both variants,
    both similarity matrices and the Amplifier description are written; the summary holds
    metric-window means.

    Args:
        cfg (ExperimentConfig): Config with attack and botpa sections.
        store (RunStore): Results directory.

    Returns:
        PairedSummary: One row per repetition plus medians.

    Raises:
        ExperimentError: If the config cannot run in paired mode or a run fails.
    """
    if cfg.attack is None or not cfg.attack.active or cfg.botpa is None:
        raise ExperimentError("paired runs need an active attack and a botpa section")
    store.write_config(cfg)
    train, test = load_datasets(cfg)
    window = (cfg.metrics.from_round, cfg.metrics.to_round)
    summary = PairedSummary()
    for repetition in range(cfg.runs):
        seed = cfg.seed + repetition
        malicious = malicious_for(cfg, repetition)
        runs = {}
        for variant, boosted in (("vanilla", False), ("boosted", True)):
            def sink(records, variant=variant):
                store.write_rounds(variant, records, repetition)

            try:
                runs[variant] = run_variant(cfg, train, test, seed, malicious, boosted, sink)
            except SimulatorError as error:
                raise ExperimentError(f"repetition {repetition} ({variant}): {error.detail}") from error
            store.write_rounds(variant, runs[variant].records, repetition)
            if cfg.metrics.export_features:
                _export_features(store, variant, runs[variant], test, repetition)
        outcome = runs["boosted"].outcome
        store.write_frame("similarity_contrib.csv", outcome.contrib.to_frame(), repetition)
        store.write_frame("similarity_ftrs.csv", outcome.ftrs.to_frame(), repetition)
        store.write_frame("amplifier.csv", outcome.amplifier.to_frame(), repetition)

        vanilla, boosted_records = runs["vanilla"].records, runs["boosted"].records
        v_asr = windowed_mean(vanilla, *window, "asr")
        b_asr = windowed_mean(boosted_records, *window, "asr")
        row = PairedSummaryRow(
            repetition=repetition,
            seed=seed,
            v_asr=v_asr,
            b_asr=b_asr,
            ri_asr=ri_asr(v_asr, b_asr),
            v_accuracy=windowed_mean(vanilla, *window, "global_accuracy"),
            b_accuracy=windowed_mean(boosted_records, *window, "global_accuracy"),
            v_final_asr=vanilla[-1].asr,
            b_final_asr=boosted_records[-1].asr,
            v_malicious_selected=_selection_rate(vanilla, cfg),
            b_malicious_selected=_selection_rate(boosted_records, cfg),
            malicious_clients=malicious,
            intermediate_classes=outcome.amplifier.classes,
        )
        logger.info(f"repetition {repetition}: V-ASR {v_asr:.4f}, B-ASR {b_asr:.4f}, RI-ASR {row.ri_asr}")
        summary.rows.append(row)
    store.write_rows("summary.csv", summary.rows)
    return summary


def run_plain(cfg: ExperimentConfig, store: RunStore) -> pd.DataFrame:
    """Runs the configured experiment (with or without a vanilla attack) ``cfg.runs`` times."""
    store.write_config(cfg)
    train, test = load_datasets(cfg)
    window = (cfg.metrics.from_round, cfg.metrics.to_round)
    rows = []
    for repetition in range(cfg.runs):
        seed = cfg.seed + repetition
        malicious = malicious_for(cfg, repetition)

        def sink(records):
            store.write_rounds("run", records, repetition)

        try:
            run = run_variant(cfg, train, test, seed, malicious, False, sink)
        except SimulatorError as error:
            raise ExperimentError(f"repetition {repetition}: {error.detail}") from error
        store.write_rounds("run", run.records, repetition)
        if cfg.metrics.export_features:
            _export_features(store, "run", run, test, repetition)
        has_asr = run.records[-1].asr is not None
        rows.append(
            {
                "repetition": repetition,
                "seed": seed,
                "accuracy": windowed_mean(run.records, *window, "global_accuracy"),
                "asr": windowed_mean(run.records, *window, "asr") if has_asr else np.nan,
                "malicious_clients": ";".join(str(c) for c in malicious),
            }
        )
    frame = pd.DataFrame(rows)
    store.write_frame("summary.csv", frame)
    return frame


def sweep_overrides(axis: str, value: Any) -> dict[str, Any]:
    if axis not in SWEEP_KEYS:
        raise ExperimentError(f"unknown sweep axis '{axis}'")
    overrides = {SWEEP_KEYS[axis]: value}
    if axis == "malicious_fraction":
        overrides["attack.malicious_clients"] = None
    if axis == "beta":
        overrides["partition.scheme"] = "dirichlet"
    return overrides


def run_sweep(cfg: ExperimentConfig, store: RunStore, axis: str | None = None, values: Sequence[Any] | None = None) -> list[SweepRow]:
    """
    One paired run per axis value; an invalid or failing point is recorded and skipped.

    Args:
        cfg (ExperimentConfig): Base config.
        store (RunStore): Results directory; every point gets a ``<axis>-<value>`` subdirectory.
        axis (str | None): ``malicious_fraction``, ``N``, ``beta`` or ``aggregator``. Defaults to the sweep section.
        values (Sequence[Any] | None): Axis values. Defaults to the sweep section.

    Returns:
        list[SweepRow]: One row per value, in order.
    """
    if axis is None or values is None:
        if cfg.sweep is None:
            raise ExperimentError("no sweep axis given and the config has no sweep section")
        axis, values = cfg.sweep.axis, cfg.sweep.values
    store.write_config(cfg)
    rows = []
    for value in values:
        row = SweepRow(axis=axis, value=str(value))
        try:
            point = with_overrides(cfg, sweep_overrides(axis, value))
            summary = run_paired(point, RunStore(store.root, f"{axis}-{value}"))
        except SimulatorError as error:
            logger.warning(f"sweep point {axis}={value} failed: {error}")
            row.status, row.error = "failed", str(error)
        else:
            row.v_asr, row.b_asr, row.ri_asr = summary.v_asr, summary.b_asr, summary.ri_asr
            row.v_accuracy, row.b_accuracy = summary.v_accuracy, summary.b_accuracy
        rows.append(row)
    store.write_rows("sweep.csv", rows)
    return rows


def select_n(cfg: ExperimentConfig, store: RunStore, values: Sequence[int] | None = None) -> int:
    """Chooses N on the configured (easy-case) source/target pair by growing it while RI-ASR improves."""
    if values is None:
        values = cfg.select_n.values if cfg.select_n is not None else [1, 2, 3]
    history = []

    def runner(n: int) -> float | None:
        point = with_overrides(cfg, {"botpa.num_intermediate": n})
        summary = run_paired(point, RunStore(store.root, f"N-{n}"))
        history.append({"N": n, "ri_asr": np.nan if summary.ri_asr is None else summary.ri_asr})
        return summary.ri_asr

    chosen = select_n_sweep(values, runner)
    store.write_frame("select_n.csv", pd.DataFrame(history).assign(chosen=lambda f: f["N"] == chosen))
    return chosen


@dataclass
class ScanResult:
    rows: list[ScanRow]
    median_case: tuple[int, int] | None
    best_case: tuple[int, int] | None


def scan_combinations(cfg: ExperimentConfig, store: RunStore, pairs: Sequence[tuple[int, int]] | None = None) -> ScanResult:
    """
    Paired runs over source/target combinations, reporting the median-case and best-case pairs by RI-ASR.

    Args:
        cfg (ExperimentConfig): Base config with attack and botpa sections.
        store (RunStore): Results directory.
        pairs (Sequence[tuple[int, int]] | None): Combinations to run; all ordered pairs by default.

    Returns:
        ScanResult: Per-pair rows and the selected cases (None when no RI-ASR is defined).
    """
    classes = cfg.dataset.num_classes
    if pairs is None:
        pairs = [(s, t) for s in range(classes) for t in range(classes) if s != t]
    rows = []
    for source, target in pairs:
        point = with_overrides(cfg, {"attack.source_class": source, "attack.target_class": target})
        summary = run_paired(point, RunStore(store.root, f"pair-{source}-{target}"))
        rows.append(ScanRow(source_class=source, target_class=target, v_asr=summary.v_asr, b_asr=summary.b_asr, ri_asr=summary.ri_asr))
    store.write_rows("scan.csv", rows)
    defined = sorted((r for r in rows if r.ri_asr is not None), key=lambda r: (r.ri_asr, r.source_class, r.target_class))
    if not defined:
        return ScanResult(rows, None, None)
    median = defined[(len(defined) - 1) // 2]
    best = defined[-1]
    logger.info(
        f"median case {median.source_class}->{median.target_class}, best case {best.source_class}->{best.target_class}"
    )
    return ScanResult(rows, (median.source_class, median.target_class), (best.source_class, best.target_class))


def run_id_for(cfg: ExperimentConfig) -> str:
    return f"{cfg.name}-seed{cfg.seed}"


def output_root(cfg: ExperimentConfig, default: str | Path) -> Path:
    return Path(cfg.output_dir or default)

"""Leave-one-domain-out experiments, sweeps and ablations.

A trial seed controls the labelled-example draw, the train/validation split,
the initial weights and every training-time random stream. Domain data
itself is fixed by the benchmark configuration.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import reference
from .averaging import VARIANTS, CheckpointTriple, model_average, variant_params
from .config import METHODS, ExperimentConfig
from .data import DomainData, SourceSplit, TableSchema, generate_domain, make_source_split, read_table
from .fixmatch import GatePolicy, Trainer, TrainConfig, TrainResult, pool_unlabelled, train_run
from .metrics import MetricsCollector, top1_accuracy
from .nn import NetworkSpec, ParamSet, predict

log = logging.getLogger(__name__)


class HarnessError(RuntimeError):
    pass


class HeldOutTarget:
    """Evaluation-only handle on the target domain.

    Exposes accuracy and predictions for given parameters; the raw rows are
    kept private so nothing can train or select models on them.
    """

    def __init__(self, data: DomainData):
        self._data = data
        self.domain_id = data.domain_id

    def __len__(self):
        return len(self._data)

    def predictions(self, spec: NetworkSpec, params: ParamSet) -> np.ndarray:
        return predict(spec, params, self._data.x)

    def accuracy(self, spec: NetworkSpec, params: ParamSet) -> float:
        return top1_accuracy(self.predictions(spec, params), self._data.y)

    def as_domain(self) -> DomainData:
        """The raw rows, for feature export and reporting."""
        return self._data


def build_benchmark(config: ExperimentConfig) -> list[DomainData]:
    if config.data_file:
        return list(read_table(config.data_file, TableSchema(config.benchmark.num_classes)).values())
    return [generate_domain(s) for s in config.benchmark.domain_specs()]


def leave_one_domain_out(domains: Sequence[DomainData], target_id: str, seed: int = 0,
                         labels_per_class: int | None = 10, train_fraction: float = 0.9
                         ) -> tuple[list[SourceSplit], HeldOutTarget]:
    """Split off the target domain; prepare labelled/unlabelled/validation splits of the rest."""
    ids = [d.domain_id for d in domains]
    if target_id not in ids:
        raise HarnessError(f"unknown target domain {target_id!r}; benchmark has {ids}")
    sources = [d for d in domains if d.domain_id != target_id]
    if not sources:
        raise HarnessError("no source domains left after holding out the target")
    if len(sources) < 2:
        log.warning("only one source domain remains after holding out %r", target_id)
    target = next(d for d in domains if d.domain_id == target_id)
    splits = [make_source_split(d, labels_per_class, train_fraction, seed) for d in sources]
    return splits, HeldOutTarget(target)


def method_dispatch(method: str) -> tuple[GatePolicy, str]:
    """Gate policy and inference checkpoint (``"best"`` or ``"avg"``) for a method name."""
    table = {
        "FixMatch": (GatePolicy.CONFIDENCE, "best"),
        "UPL": (GatePolicy.UPL, "best"),
        "MA": (GatePolicy.CONFIDENCE, "avg"),
        "UPLM": (GatePolicy.UPL, "avg"),
    }
    try:
        return table[method]
    except KeyError:
        raise HarnessError(f"unknown method {method!r}; expected one of {METHODS}") from None


def inference_params(triple: CheckpointTriple, which: str, train: TrainConfig) -> ParamSet:
    if which == "best":
        return triple.best
    if which == "avg":
        return model_average(triple, train.averaging)
    raise HarnessError(f"unknown inference checkpoint {which!r}")


@dataclass
class TrialResult:
    seed: int
    target: str
    method: str
    target_acc: float
    val_acc: float  # best-epoch validation accuracy
    result: TrainResult
    collector: MetricsCollector

    @property
    def spec(self) -> NetworkSpec:
        return self.result.spec


@dataclass
class ResultRow:
    target: str
    method: str
    mean: float
    std: float
    accuracies: tuple[float, ...]


@dataclass
class ResultsTable:
    rows: list[ResultRow] = field(default_factory=list)

    def methods(self) -> list[str]:
        seen = []
        for r in self.rows:
            if r.method not in seen:
                seen.append(r.method)
        return seen

    def average(self, method: str) -> float:
        means = [r.mean for r in self.rows if r.method == method]
        return float(np.mean(means))

    def csv_rows(self) -> list[list]:
        out = [[r.target, r.method, r.mean, r.std, len(r.accuracies)] for r in self.rows]
        for m in self.methods():
            n = len([r for r in self.rows if r.method == m])
            out.append(["average", m, self.average(m), "", n])
        return out


RESULTS_HEADER = ("target", "method", "mean_acc", "std_acc", "n")


def run_single(config: ExperimentConfig, seed: int, domains: Sequence[DomainData] | None = None,
               method: str | None = None, target: str | None = None, train: TrainConfig | None = None,
               gate_log: bool = False) -> TrialResult:
    method = method or config.method
    target_id = target or config.target
    train = (train or config.train).with_(seed=seed)
    domains = domains if domains is not None else build_benchmark(config)
    sources, held_out = leave_one_domain_out(domains, target_id, seed, train.labels_per_class, train.train_fraction)
    policy, which = method_dispatch(method)
    first = sources[0].dataset
    spec = NetworkSpec(first.labelled.x.shape[1], train.hidden_dims, first.num_classes, train.dropout_rate)
    # per-epoch target accuracy is reported only, never used for selection
    collector = MetricsCollector(pool_unlabelled(sources), train.ece_bins,
                                 target_eval=lambda p: held_out.accuracy(spec, p), keep_gate_log=gate_log)
    result = train_run(sources, train, policy, collector)
    params = inference_params(result.triple, which, train)
    acc = held_out.accuracy(result.spec, params)
    best_val = max(r.val_acc for r in result.history)
    return TrialResult(seed, target_id, method, acc, best_val, result, collector)


def run_trials(config: ExperimentConfig, domains: Sequence[DomainData] | None = None, method: str | None = None,
               target: str | None = None, train: TrainConfig | None = None, gate_log: bool = False
               ) -> tuple[ResultRow, list[TrialResult]]:
    """One training run per seed; mean and population std of target accuracy."""
    if not config.seeds:
        raise HarnessError("need at least one seed")
    domains = domains if domains is not None else build_benchmark(config)
    trials = []
    for s in config.seeds:
        try:
            trials.append(run_single(config, s, domains, method, target, train, gate_log))
        except Exception as exc:
            raise HarnessError(f"trial with seed {s} failed: {exc}") from exc
    accs = tuple(t.target_acc for t in trials)
    row = ResultRow(target or config.target, method or config.method, float(np.mean(accs)), float(np.std(accs)), accs)
    return row, trials


def run_benchmark(config: ExperimentConfig, targets: Sequence[str] | None = None,
                  methods: Sequence[str] | None = None, gate_log: bool = False
                  ) -> tuple[ResultsTable, list[TrialResult]]:
    """Every (target, method) pair, leave-one-domain-out."""
    domains = build_benchmark(config)
    table, all_trials = ResultsTable(), []
    for t in targets or [d.domain_id for d in domains]:
        for m in methods or config.methods:
            row, trials = run_trials(config, domains, m, t, gate_log=gate_log)
            table.rows.append(row)
            all_trials.extend(trials)
    return table, all_trials


def supervised_reference(config: ExperimentConfig, seed: int, domains: Sequence[DomainData] | None = None,
                         target: str | None = None) -> float:
    """Target accuracy of a network trained on every source training row with labels, no unlabelled branch."""
    domains = domains if domains is not None else build_benchmark(config)
    train = config.train.with_(seed=seed)
    sources, held_out = leave_one_domain_out(domains, target or config.target, seed, None, train.train_fraction)
    result = train_run(sources, train, GatePolicy.NONE)
    return held_out.accuracy(result.spec, result.triple.best)


def grid_search_eta(config: ExperimentConfig, values: Sequence[float] | None = None,
                    domains: Sequence[DomainData] | None = None) -> tuple[float, list[tuple[float, float]]]:
    """Pick the certainty threshold with the highest mean best-epoch validation accuracy (smallest on ties).

    Returns ``(best_eta, [(eta, mean_val_acc), ...])``; the target is never consulted.
    """
    values = list(config.eta_grid if values is None else values)
    if not values:
        raise HarnessError("empty eta grid")
    for v in values:
        if not 0.0 < v <= 1.0:
            raise HarnessError(f"eta must be in (0, 1], got {v}")
    domains = domains if domains is not None else build_benchmark(config)
    method = config.method if method_dispatch(config.method)[0] is GatePolicy.UPL else "UPL"
    scores = []
    for eta in values:
        _, trials = run_trials(config, domains, method, train=config.train.with_(eta=eta))
        scores.append((eta, float(np.mean([t.val_acc for t in trials]))))
    best = max(scores, key=lambda p: (p[1], -p[0]))[0]
    return best, scores


def ablate_mu(config: ExperimentConfig, values: Sequence[int] | None = None,
              domains: Sequence[DomainData] | None = None) -> list[ResultRow]:
    values = list(config.mu_values if values is None else values)
    for v in values:
        if v < 1:
            raise HarnessError(f"mu must be positive, got {v}")
    domains = domains if domains is not None else build_benchmark(config)
    rows = []
    for mu in values:
        row, _ = run_trials(config, domains, train=config.train.with_(mu=mu))
        row.method = f"{row.method} mu={mu}"
        rows.append(row)
    return rows


def ablate_ma_variants(spec: NetworkSpec, triple: CheckpointTriple, target: HeldOutTarget) -> dict[str, float]:
    """Target accuracy of each checkpoint combination, in :data:`VARIANTS` order."""
    return {v: target.accuracy(spec, variant_params(triple, v)) for v in VARIANTS}


@dataclass
class TimingRow:
    mc_passes: int
    ms_per_iteration: float
    reference_ms: float | None


def measure_mc_overhead(config: ExperimentConfig, values: Sequence[int] | None = None, warmup: int = 5,
                        timed: int = 50, domains: Sequence[DomainData] | None = None) -> list[TimingRow]:
    """Mean wall-clock milliseconds per UPL training iteration for each number of MC passes."""
    values = list(config.mc_values if values is None else values)
    for v in values:
        if v < 1:
            raise HarnessError(f"MC pass count must be positive, got {v}")
    domains = domains if domains is not None else build_benchmark(config)
    seed = config.seeds[0]
    sources, _ = leave_one_domain_out(domains, config.target, seed, config.train.labels_per_class,
                                      config.train.train_fraction)
    rows = []
    for n in values:
        trainer = Trainer(sources, config.train.with_(seed=seed, mc_passes=n), GatePolicy.UPL)
        for _ in range(warmup):
            trainer.step()
        start = time.perf_counter()
        for _ in range(timed):
            trainer.step()
        ms = 1000.0 * (time.perf_counter() - start) / timed
        rows.append(TimingRow(n, ms, reference.MC_PASS_MS.get(n)))
    return rows

"""Evaluation metrics and CSV writers.

This is the only module that reads the hidden ground truth of unlabelled
examples (:func:`reveal_labels`). Training code hands per-batch gate results
to a :class:`MetricsCollector`, which scores them here.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .data import DomainData, UnlabelledSet
from .nn import NetworkSpec, forward

METRICS_HEADER = ("epoch", "val_acc", "target_acc", "pl_precision", "pl_coverage", "mean_uncertainty", "ece")
SERIES_HEADER = ("mean_uncertainty", "mean_ece")
GATE_LOG_HEADER = ("example_id", "pseudo_label", "confidence", "certainty", "selected")


class MetricsError(ValueError):
    pass


def reveal_labels(unlabelled: UnlabelledSet, ids: np.ndarray | None = None) -> np.ndarray:
    """Ground-truth labels of unlabelled examples, for scoring only."""
    truth = unlabelled._truth
    return truth if ids is None else truth[np.asarray(ids, dtype=np.int64)]


def top1_accuracy(predictions: np.ndarray, labels: np.ndarray) -> float:
    """Percent correct. ``predictions`` are class indices or probability rows (argmax, lowest index on ties)."""
    pred = np.asarray(predictions)
    labels = np.asarray(labels)
    if pred.ndim == 2:
        pred = np.argmax(pred, axis=1)
    if len(pred) == 0:
        raise MetricsError("accuracy of an empty set is undefined")
    if len(pred) != len(labels):
        raise MetricsError(f"{len(pred)} predictions vs {len(labels)} labels")
    return 100.0 * float(np.count_nonzero(pred == labels)) / len(labels)


@dataclass(frozen=True)
class EceBins:
    num_bins: int
    counts: np.ndarray
    mean_confidence: np.ndarray  # nan for empty bins
    accuracy: np.ndarray  # nan for empty bins

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def bin_index(confidences: np.ndarray, num_bins: int) -> np.ndarray:
    """Bin ``m`` covers ``(m/M, (m+1)/M]``."""
    edges = np.arange(num_bins + 1) / num_bins
    return np.searchsorted(edges, confidences, side="left") - 1


def ece_bins(confidences: np.ndarray, correct: np.ndarray, num_bins: int = 10) -> EceBins:
    if num_bins < 1:
        raise MetricsError(f"number of bins must be >= 1, got {num_bins}")
    conf = np.asarray(confidences, dtype=np.float64)
    ok = np.asarray(correct, dtype=np.float64)
    if conf.shape != ok.shape:
        raise MetricsError("confidences and correctness flags differ in length")
    if conf.size and (conf.min() <= 0.0 or conf.max() > 1.0):
        raise MetricsError("confidences must lie in (0, 1]")
    idx = bin_index(conf, num_bins)
    counts = np.bincount(idx, minlength=num_bins)
    conf_sum = np.bincount(idx, weights=conf, minlength=num_bins)
    ok_sum = np.bincount(idx, weights=ok, minlength=num_bins)
    with np.errstate(invalid="ignore", divide="ignore"):
        return EceBins(num_bins, counts, conf_sum / counts, ok_sum / counts)


def ece(confidences: np.ndarray, correct: np.ndarray, num_bins: int = 10) -> float:
    """Binned expected calibration error; empty bins contribute nothing."""
    bins = ece_bins(confidences, correct, num_bins)
    n = bins.total
    if n == 0:
        return 0.0
    filled = bins.counts > 0
    gaps = np.abs(bins.accuracy[filled] - bins.mean_confidence[filled])
    return float(np.sum(bins.counts[filled] / n * gaps))


def pl_stats(selected: np.ndarray, pseudo_labels: np.ndarray, truth: np.ndarray) -> tuple[float | None, float]:
    """(precision in percent or None when nothing is selected, coverage fraction)."""
    selected = np.asarray(selected, dtype=bool)
    total = len(selected)
    n_sel = int(selected.sum())
    coverage = n_sel / total if total else 0.0
    if n_sel == 0:
        return None, coverage
    hits = int(np.count_nonzero(np.asarray(pseudo_labels)[selected] == np.asarray(truth)[selected]))
    return 100.0 * hits / n_sel, coverage


@dataclass(frozen=True)
class CalibrationSeries:
    points: tuple[tuple[float, float], ...]

    @property
    def uncertainty(self) -> np.ndarray:
        return np.array([p[0] for p in self.points])

    @property
    def ece(self) -> np.ndarray:
        return np.array([p[1] for p in self.points])


def uncertainty_ece_series(variances: Sequence[np.ndarray], batch_eces: Sequence[float],
                           epochs: Sequence[int]) -> CalibrationSeries:
    """One (mean uncertainty, mean ECE) point per epoch, sorted by uncertainty.

    ``variances[i]`` is the ``[n_i, C]`` per-class variance of batch ``i``;
    each example's uncertainty is its mean over classes. The epoch value is the
    mean over all examples seen in that epoch, paired with the mean of that
    epoch's batch ECEs.
    """
    if not len(variances):
        raise MetricsError("no calibration records")
    if not (len(variances) == len(batch_eces) == len(epochs)):
        raise MetricsError("variance, ECE and epoch records differ in length")
    per_epoch: dict[int, tuple[list, list]] = {}
    for v, e, ep in zip(variances, batch_eces, epochs):
        slot = per_epoch.setdefault(int(ep), ([], []))
        slot[0].append(np.asarray(v, dtype=np.float64).mean(axis=-1).ravel())
        slot[1].append(float(e))
    pts = []
    for ep in sorted(per_epoch):
        u, e = per_epoch[ep]
        pts.append((float(np.concatenate(u).mean()), float(np.mean(e))))
    pts.sort(key=lambda p: p[0])
    return CalibrationSeries(tuple(pts))


@dataclass
class MetricsRecord:
    epoch: int
    val_acc: float
    target_acc: float | None = None
    pl_precision: float | None = None
    pl_coverage: float = 0.0
    mean_uncertainty: float | None = None
    ece: float | None = None

    def row(self) -> list[str]:
        return [_fmt(getattr(self, f.name)) for f in fields(self)]


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    return repr(float(v))


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([c if isinstance(c, str) else _fmt(c) for c in r])
    return path


def write_metrics_csv(path, records: Sequence[MetricsRecord]) -> Path:
    return write_csv(path, METRICS_HEADER, (r.row() for r in records))


def read_metrics_csv(path) -> list[MetricsRecord]:
    out = []
    with Path(path).open(newline="") as fh:
        for row in csv.DictReader(fh):
            vals = {k: (None if row[k] == "" else float(row[k])) for k in METRICS_HEADER}
            vals["epoch"] = int(vals["epoch"])
            out.append(MetricsRecord(**vals))
    return out


def write_series_csv(path, series: CalibrationSeries) -> Path:
    return write_csv(path, SERIES_HEADER, series.points)


def feature_dump(spec: NetworkSpec, params: Mapping[str, np.ndarray], examples: Sequence[DomainData], path) -> Path:
    """Write Eval-mode penultimate features as ``example_id,domain,label,f0..``.

    ``example_id`` counts rows across all given domains; unknown labels are blank.
    """
    header = ["example_id", "domain", "label"] + [f"f{j}" for j in range(spec.feature_dim)]
    rows = []
    next_id = 0
    for dom in examples:
        if len(dom) == 0:
            continue
        _, feats = forward(spec, params, dom.x)
        for y, f in zip(dom.y, feats):
            rows.append([str(next_id), dom.domain_id, "" if y < 0 else str(int(y))] + [repr(float(v)) for v in f])
            next_id += 1
    try:
        return write_csv(path, header, rows)
    except OSError as exc:
        raise MetricsError(f"cannot write feature dump to {path}: {exc}") from exc


@dataclass
class MetricsCollector:
    """Training hook that scores pseudo-labels against hidden ground truth.

    ``pool`` is the pooled unlabelled set the engine samples from (the batch
    ``unlabelled_ids`` index into it). ``target_eval`` optionally maps the
    live parameters to a target-domain accuracy for reporting.
    """

    pool: UnlabelledSet
    num_bins: int = 10
    target_eval: Callable | None = None
    keep_gate_log: bool = False
    keep_batches: bool = False

    total_selected: int = 0
    total_correct: int = 0
    total_seen: int = 0
    batch_variances: list = field(default_factory=list)
    batch_eces: list = field(default_factory=list)
    batch_epochs: list = field(default_factory=list)
    gate_log: list = field(default_factory=list)
    batches: list = field(default_factory=list)
    _epoch: dict = field(default_factory=dict)

    def on_batch(self, info) -> None:
        truth = reveal_labels(self.pool, info.unlabelled_ids)
        gate = info.gate
        sel = gate.selected
        n_sel = int(sel.sum())
        n_hit = int(np.count_nonzero(gate.pseudo_label[sel] == truth[sel]))
        self.total_selected += n_sel
        self.total_correct += n_hit
        self.total_seen += len(sel)
        ep = self._epoch
        ep["selected"] = ep.get("selected", 0) + n_sel
        ep["correct"] = ep.get("correct", 0) + n_hit
        ep["seen"] = ep.get("seen", 0) + len(sel)
        correct = (gate.pseudo_label == truth).astype(np.float64)
        batch_ece = ece(gate.confidence, correct, self.num_bins)
        ep.setdefault("eces", []).append(batch_ece)
        if info.variance is not None:
            ep.setdefault("unc", []).append(info.variance.mean(axis=1))
            self.batch_variances.append(info.variance)
            self.batch_eces.append(batch_ece)
            self.batch_epochs.append(info.epoch)
        if self.keep_gate_log:
            for i in range(len(gate)):
                self.gate_log.append((int(info.unlabelled_ids[i]), int(gate.pseudo_label[i]),
                                      float(gate.confidence[i]), float(gate.certainty_at_label[i]),
                                      int(bool(sel[i]))))
        if self.keep_batches:
            self.batches.append(info)

    def epoch_end(self, epoch: int, params) -> dict:
        ep, self._epoch = self._epoch, {}
        out = {}
        if ep.get("seen"):
            out["pl_coverage"] = ep["selected"] / ep["seen"]
            out["pl_precision"] = 100.0 * ep["correct"] / ep["selected"] if ep["selected"] else None
            out["ece"] = float(np.mean(ep["eces"]))
        if ep.get("unc"):
            out["mean_uncertainty"] = float(np.concatenate(ep["unc"]).mean())
        if self.target_eval is not None:
            out["target_acc"] = float(self.target_eval(params))
        return out

    @property
    def run_precision(self) -> float | None:
        return 100.0 * self.total_correct / self.total_selected if self.total_selected else None

    @property
    def run_coverage(self) -> float:
        return self.total_selected / self.total_seen if self.total_seen else 0.0

    def calibration_series(self) -> CalibrationSeries:
        return uncertainty_ece_series(self.batch_variances, self.batch_eces, self.batch_epochs)

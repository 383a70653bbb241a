"""FixMatch-style training over pooled source domains.

Each iteration draws ``B`` labelled examples and ``mu * B`` unlabelled ones
(with weak and strong views), pseudo-labels the weak views with a
dropout-free pass, gates them (confidence alone or confidence + MC-dropout
certainty), and minimises

    L = L_s + lambda * L_u

with L_s the mean cross-entropy on the labelled batch and L_u the
cross-entropy of gated strong views against their pseudo-labels, divided by
the full unlabelled batch size. Every iteration is followed by a Nesterov
step and an EMA update.

Random streams are derived per iteration and per purpose (batch sampling,
labelled-branch dropout, unlabelled-branch dropout, MC masks), so switching
a branch on or off never shifts the draws of another.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field, fields, replace
from typing import Protocol, Sequence

import numpy as np

from .averaging import AveragingWeights, CheckpointTriple, EmaState, ema_update, select_best
from .data import AugmentationConfig, LabelledSet, SourceSplit, UnlabelledSet, strong_augment, weak_augment
from .metrics import MetricsRecord, top1_accuracy
from .nn import (ForwardMode, NetworkSpec, NonFiniteError, OptimizerState, ParamSet, add_grads, forward,
                 init_params, loss_and_grad, predict, sgd_nesterov_step, weighted_ce)
from .rng import derive_rng, derive_seed
from .upl import CERTAINTY_FLOOR, GateBatch, certainty, gate_batch, mc_passes, predictive_variance

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class GatePolicy(enum.Enum):
    CONFIDENCE = "confidence"
    UPL = "upl"
    NONE = "none"  # supervised only; the unlabelled branch is skipped entirely


@dataclass(frozen=True)
class TrainConfig:
    tau: float = 0.95
    lam: float = 1.0
    batch_size: int = 8
    mu: int = 5
    lr: float = 0.03
    momentum: float = 0.9
    epochs: int = 10
    iterations_per_epoch: int = 50
    eta: float = 0.5
    mc_passes: int = 10
    dropout_rate: float = 0.5
    ema_decay: float = 0.999
    ma_weights: tuple[float, float, float] = (1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0)
    seed: int = 0
    hidden_dims: tuple[int, ...] = (64, 64)
    weak_noise_sigma: float = 0.1
    strong_noise_sigma: float = 0.5
    strong_mask_count: int = 2
    labels_per_class: int = 10
    train_fraction: float = 0.9
    ece_bins: int = 10
    track_uncertainty: bool = False

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        object.__setattr__(self, "ma_weights", tuple(float(w) for w in self.ma_weights))
        if not 0.0 < self.tau <= 1.0:
            raise ValueError(f"tau must be in (0, 1], got {self.tau}")
        if not 0.0 < self.eta <= 1.0:
            raise ValueError(f"eta must be in (0, 1], got {self.eta}")
        if self.lam < 0:
            raise ValueError(f"lam must be >= 0, got {self.lam}")
        for name in ("batch_size", "mu", "epochs", "iterations_per_epoch", "mc_passes", "ece_bins"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.labels_per_class < 0:
            raise ValueError("labels_per_class must be >= 0")
        if len(self.ma_weights) != 3:
            raise ValueError("ma_weights needs three entries (best, last, ema)")
        AveragingWeights(*self.ma_weights)
        AugmentationConfig(self.weak_noise_sigma, self.strong_noise_sigma, self.strong_mask_count)

    @property
    def augmentation(self) -> AugmentationConfig:
        return AugmentationConfig(self.weak_noise_sigma, self.strong_noise_sigma, self.strong_mask_count)

    @property
    def averaging(self) -> AveragingWeights:
        return AveragingWeights(*self.ma_weights)

    @property
    def unlabelled_batch_size(self) -> int:
        return self.mu * self.batch_size

    def with_(self, **changes) -> "TrainConfig":
        return replace(self, **changes)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass(frozen=True)
class Batch:
    x: np.ndarray
    y: np.ndarray
    unlabelled_ids: np.ndarray
    u: np.ndarray
    u_weak: np.ndarray
    u_strong: np.ndarray

    @property
    def labelled_size(self) -> int:
        return len(self.y)

    @property
    def unlabelled_size(self) -> int:
        return len(self.unlabelled_ids)


@dataclass(frozen=True)
class LossBreakdown:
    l_s: float
    l_u: float
    l_final: float
    gated_count: int


@dataclass(frozen=True)
class BatchInfo:
    """What a hook sees after each iteration."""

    epoch: int
    iteration: int
    unlabelled_ids: np.ndarray
    q_weak: np.ndarray
    gate: GateBatch
    variance: np.ndarray | None
    kappa: np.ndarray | None
    loss: LossBreakdown


class Hooks(Protocol):
    def on_batch(self, info: BatchInfo) -> None: ...

    def epoch_end(self, epoch: int, params: ParamSet) -> dict: ...


def pool_labelled(sources: Sequence[SourceSplit]) -> LabelledSet:
    parts = [s.dataset.labelled for s in sources]
    return LabelledSet(np.concatenate([p.x for p in parts]), np.concatenate([p.y for p in parts]),
                       np.concatenate([p.domain for p in parts]))


def pool_unlabelled(sources: Sequence[SourceSplit]) -> UnlabelledSet:
    parts = [s.dataset.unlabelled for s in sources]
    return UnlabelledSet(np.concatenate([p.x for p in parts]), np.concatenate([p.domain for p in parts]),
                         np.concatenate([p._truth for p in parts]))


def pool_validation(sources: Sequence[SourceSplit]) -> tuple[np.ndarray, np.ndarray]:
    return (np.concatenate([s.validation.x for s in sources]), np.concatenate([s.validation.y for s in sources]))


def compose_batch(labelled: LabelledSet, unlabelled: UnlabelledSet | None, config: TrainConfig,
                  rng: np.random.Generator) -> Batch:
    """Uniform sampling with replacement from the pooled sets; weak/strong views drawn independently."""
    if len(labelled) == 0:
        raise TrainingError("labelled pool is empty")
    li = rng.integers(0, len(labelled), size=config.batch_size)
    x, y = labelled.x[li], labelled.y[li]
    if unlabelled is None:
        empty = np.zeros((0, labelled.x.shape[1]))
        return Batch(x, y, np.zeros(0, dtype=np.int64), empty, empty, empty)
    if len(unlabelled) == 0:
        raise TrainingError("unlabelled pool is empty")
    ui = rng.integers(0, len(unlabelled), size=config.unlabelled_batch_size)
    u = unlabelled.x[ui]
    aug = config.augmentation
    return Batch(x, y, unlabelled.ids[ui], u, weak_augment(u, aug, rng), strong_augment(u, aug, rng))


def supervised_loss(probs: np.ndarray, labels: np.ndarray) -> float:
    """Mean cross-entropy over the labelled batch."""
    n = len(labels)
    if n < 1:
        raise ValueError("supervised loss needs at least one example")
    return weighted_ce(probs, labels, np.full(n, 1.0 / n))


def unsupervised_loss(probs_strong: np.ndarray, pseudo_labels: np.ndarray, selected: np.ndarray,
                      batch_size: int | None = None) -> float:
    """Sum of gated strong-view cross-entropies divided by the unlabelled batch size.

    ``probs_strong`` may hold every unlabelled row (then ``batch_size``
    defaults to its length) or only the gated rows (pass ``batch_size``).
    """
    selected = np.asarray(selected, dtype=bool)
    n = len(selected) if batch_size is None else batch_size
    if n == 0 or not selected.any():
        return 0.0
    probs = probs_strong[selected] if len(probs_strong) == len(selected) else probs_strong
    return weighted_ce(probs, np.asarray(pseudo_labels)[selected], np.full(int(selected.sum()), 1.0 / n))


def total_loss(l_s: float, l_u: float, lam: float) -> float:
    return l_s + lam * l_u


def objective(spec: NetworkSpec, params: ParamSet, x_l: np.ndarray, y_l: np.ndarray,
              x_strong: np.ndarray | None, pseudo_labels: np.ndarray | None, n_unlabelled: int, lam: float,
              *, rng_l=None, rng_u=None, mask_l=None, mask_u=None) -> tuple[LossBreakdown, ParamSet]:
    """``L_s + lam * L_u`` and its gradient.

    ``x_strong``/``pseudo_labels`` hold only the gated strong views; ``L_u``
    is normalised by ``n_unlabelled`` (the whole unlabelled batch). Dropout
    masks come from ``rng_l``/``rng_u`` or are given explicitly. With
    ``lam == 0`` the unlabelled branch adds no gradient, so the result is
    bitwise the supervised one.
    """
    n = len(y_l)
    l_s, grads = loss_and_grad(spec, params, x_l, y_l, np.full(n, 1.0 / n), ForwardMode.TRAIN, rng_l, mask=mask_l)
    k = 0 if pseudo_labels is None else len(pseudo_labels)
    l_u = 0.0
    if k:
        weights = np.full(k, 1.0 / n_unlabelled)
        if lam != 0.0:
            l_u, g_u = loss_and_grad(spec, params, x_strong, pseudo_labels, weights, ForwardMode.TRAIN, rng_u,
                                     mask=mask_u)
            grads = add_grads(grads, g_u, lam)
        else:
            probs, _ = forward(spec, params, x_strong, ForwardMode.TRAIN, rng_u, mask=mask_u)
            l_u = weighted_ce(probs, pseudo_labels, weights)
    return LossBreakdown(l_s, l_u, total_loss(l_s, l_u, lam), k), grads


class Trainer:
    """Holds the state of one training run and advances it an iteration at a time."""

    def __init__(self, sources: Sequence[SourceSplit], config: TrainConfig, gate_policy: GatePolicy,
                 hooks: Hooks | None = None, init: ParamSet | None = None):
        if not sources:
            raise TrainingError("need at least one source domain")
        if len(sources) < 2:
            log.warning("training on a single source domain")
        self.config = config
        self.policy = GatePolicy(gate_policy)
        if self.policy is GatePolicy.UPL and config.eta <= CERTAINTY_FLOOR:
            log.warning("eta=%g is at or below the certainty floor %.5f; the certainty test never rejects",
                        config.eta, CERTAINTY_FLOOR)
        self.hooks = hooks
        num_classes = sources[0].dataset.num_classes
        input_dim = sources[0].dataset.labelled.x.shape[1]
        self.spec = NetworkSpec(input_dim, config.hidden_dims, num_classes, config.dropout_rate)
        self.labelled = pool_labelled(sources)
        self.unlabelled = None if self.policy is GatePolicy.NONE else pool_unlabelled(sources)
        self.val_x, self.val_y = pool_validation(sources)
        self.params = init.copy() if init is not None else init_params(self.spec, derive_rng(config.seed, "init"))
        self.opt = OptimizerState.zeros(self.params, config.lr, config.momentum)
        self.ema = EmaState.start(self.params, config.ema_decay)
        self.mc_seed = derive_seed(config.seed, "mc")
        self.step_count = 0

    def _gate(self, batch: Batch, step: int):
        cfg = self.config
        q = predict(self.spec, self.params, batch.u_weak)
        variance = kappa = None
        if self.policy is GatePolicy.UPL or cfg.track_uncertainty:
            c = mc_passes(self.spec, self.params, batch.u_weak, cfg.mc_passes, self.mc_seed,
                          batch.unlabelled_ids, iteration=step)
            variance = predictive_variance(c)
            kappa = certainty(variance)
        if self.policy is GatePolicy.UPL:
            gate = gate_batch(q, cfg.tau, kappa, cfg.eta)
        else:
            gate = gate_batch(q, cfg.tau)
        return q, gate, variance, kappa

    def _losses(self, batch: Batch, step: int, epoch: int, it: int):
        cfg = self.config
        rng_l = derive_rng(cfg.seed, "drop_l", step)
        if self.unlabelled is None:
            losses, grads = objective(self.spec, self.params, batch.x, batch.y, None, None, 0, 0.0, rng_l=rng_l)
            info = None
        else:
            q, gate, variance, kappa = self._gate(batch, step)
            sel = gate.selected
            losses, grads = objective(self.spec, self.params, batch.x, batch.y, batch.u_strong[sel],
                                      gate.pseudo_label[sel], batch.unlabelled_size, cfg.lam, rng_l=rng_l,
                                      rng_u=derive_rng(cfg.seed, "drop_u", step))
            info = BatchInfo(epoch, it, batch.unlabelled_ids, q, gate, variance, kappa, losses)
        if not np.isfinite(losses.l_final):
            raise NonFiniteError(f"non-finite loss: l_s={losses.l_s} l_u={losses.l_u}")
        return info, grads

    def step(self) -> BatchInfo | None:
        cfg = self.config
        step = self.step_count
        epoch, it = divmod(step, cfg.iterations_per_epoch)
        batch = compose_batch(self.labelled, self.unlabelled, cfg, derive_rng(cfg.seed, "batch", step))
        try:
            info, grads = self._losses(batch, step, epoch, it)
            self.params, self.opt = sgd_nesterov_step(self.params, grads, self.opt)
        except NonFiniteError as exc:
            raise NonFiniteError(f"epoch {epoch + 1}, iteration {it + 1}: {exc}") from exc
        self.ema = ema_update(self.ema, self.params)
        self.step_count += 1
        if info is not None and self.hooks is not None:
            self.hooks.on_batch(info)
        return info

    def validation_accuracy(self, params: ParamSet | None = None) -> float:
        return top1_accuracy(predict(self.spec, self.params if params is None else params, self.val_x), self.val_y)


@dataclass
class TrainResult:
    spec: NetworkSpec
    triple: CheckpointTriple
    history: list[MetricsRecord]
    best_epoch: int
    checkpoints: list[ParamSet] = field(repr=False, default_factory=list)


def train_run(sources: Sequence[SourceSplit], config: TrainConfig,
              gate_policy: GatePolicy | str = GatePolicy.CONFIDENCE,
              hooks: Hooks | None = None, init: ParamSet | None = None) -> TrainResult:
    """Train for ``epochs x iterations_per_epoch`` steps and return the best/last/EMA checkpoints.

    Validation accuracy on the pooled source validation rows is measured after
    every epoch; the epoch maximising it (earliest on ties) gives ``best``.
    """
    trainer = Trainer(sources, config, GatePolicy(gate_policy), hooks, init)
    history: list[MetricsRecord] = []
    checkpoints: list[ParamSet] = []
    for epoch in range(config.epochs):
        for _ in range(config.iterations_per_epoch):
            trainer.step()
        record = MetricsRecord(epoch + 1, trainer.validation_accuracy())
        if hooks is not None:
            for key, value in hooks.epoch_end(epoch, trainer.params).items():
                setattr(record, key, value)
        history.append(record)
        checkpoints.append(trainer.params)
        log.debug("epoch %d val_acc %.2f", epoch + 1, record.val_acc)
    best_idx, best = select_best([r.val_acc for r in history], checkpoints)
    triple = CheckpointTriple(best=best, last=trainer.params, ema=trainer.ema.shadow)
    return TrainResult(trainer.spec, triple, history, best_idx + 1, checkpoints)

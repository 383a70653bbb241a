"""EMA tracking, best-checkpoint selection and checkpoint parameter averaging."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .nn import ParamSet, ShapeError

VARIANTS = ("last", "best", "ema", "last+ema", "last+best", "best+ema", "avg")


class AveragingError(ValueError):
    pass


@dataclass
class EmaState:
    shadow: ParamSet
    decay: float = 0.999

    def __post_init__(self):
        if not 0.0 <= self.decay <= 1.0:
            raise ValueError(f"EMA decay must be in [0, 1], got {self.decay}")

    @classmethod
    def start(cls, params: ParamSet, decay: float = 0.999) -> "EmaState":
        return cls(params.copy(), decay)


def ema_update(state: EmaState, live: Mapping[str, np.ndarray]) -> EmaState:
    """``shadow' = decay * shadow + (1 - decay) * live``."""
    bad = state.shadow.mismatches(live)
    if bad:
        raise ShapeError(f"EMA shadow and live parameters differ: {bad}")
    d = state.decay
    shadow = ParamSet((k, d * v + (1.0 - d) * live[k]) for k, v in state.shadow.items())
    return EmaState(shadow, d)


@dataclass(frozen=True)
class CheckpointTriple:
    best: ParamSet
    last: ParamSet
    ema: ParamSet

    def __post_init__(self):
        bad = self.best.mismatches(self.last) + self.best.mismatches(self.ema)
        if bad:
            raise AveragingError(f"checkpoints are not compatible: {sorted(set(bad))}")

    def get(self, name: str) -> ParamSet:
        return {"best": self.best, "last": self.last, "ema": self.ema}[name]


@dataclass(frozen=True)
class AveragingWeights:
    alpha: float = 1.0 / 3.0
    beta: float = 1.0 / 3.0
    gamma: float = 1.0 / 3.0

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise AveragingError("averaging weights must be non-negative")
        if abs(self.alpha + self.beta + self.gamma - 1.0) > 1e-12:
            raise AveragingError(f"averaging weights must sum to 1, got {self.alpha + self.beta + self.gamma!r}")


def select_best(val_accuracies: Sequence[float], checkpoints: Sequence[ParamSet]) -> tuple[int, ParamSet]:
    """Checkpoint with the highest validation accuracy; earliest wins ties. Returns (index, params)."""
    if not val_accuracies:
        raise AveragingError("no epochs recorded")
    if len(val_accuracies) != len(checkpoints):
        raise AveragingError("accuracy and checkpoint histories differ in length")
    i = int(np.argmax(np.asarray(val_accuracies, dtype=np.float64)))
    return i, checkpoints[i]


def weighted_sum(sets: Sequence[ParamSet], weights: Sequence[float]) -> ParamSet:
    ref = sets[0]
    for other in sets[1:]:
        bad = ref.mismatches(other)
        if bad:
            raise AveragingError(f"incompatible checkpoints, mismatched names: {bad}")
    out = ParamSet()
    for name in ref:
        acc = weights[0] * sets[0][name]
        for w, s in zip(weights[1:], sets[1:]):
            acc = acc + w * s[name]
        out[name] = acc
    return out


def model_average(triple: CheckpointTriple, weights: AveragingWeights = AveragingWeights()) -> ParamSet:
    return weighted_sum([triple.best, triple.last, triple.ema], [weights.alpha, weights.beta, weights.gamma])


def variant_average(triple: CheckpointTriple, subset: Iterable[str]) -> ParamSet:
    """Equal-weight average over a subset of ``{"best", "last", "ema"}``.

    Members are combined in the fixed order best, last, ema so the result does
    not depend on how the subset is listed.
    """
    chosen = set(subset)
    unknown = chosen - {"best", "last", "ema"}
    if unknown:
        raise AveragingError(f"unknown checkpoint names {sorted(unknown)}")
    if not chosen:
        raise AveragingError("empty checkpoint subset")
    names = [n for n in ("best", "last", "ema") if n in chosen]
    if len(names) == 1:
        return triple.get(names[0]).copy()
    w = 1.0 / len(names)
    return weighted_sum([triple.get(n) for n in names], [w] * len(names))


def variant_params(triple: CheckpointTriple, variant: str) -> ParamSet:
    """Parameters for one of the seven ablation columns in :data:`VARIANTS`."""
    if variant == "avg":
        return model_average(triple)
    return variant_average(triple, variant.split("+"))

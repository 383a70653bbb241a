"""Uncertainty-guided pseudo-label selection.

For a weak view ``u'`` the model is run ``N`` times with dropout active,
giving ``c`` of shape ``[N, C]``. The per-class population variance ``V``
over passes is mapped to a certainty ``kappa = 1 - tanh(V)``. A pseudo-label
``argmax(q)`` (``q`` from a dropout-free pass) is kept when

    max(q) >= tau  and  kappa[argmax(q)] >= eta.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .nn import NetworkSpec, classify, extract_features, softmax
from .rng import counter_uniform

# Probabilities lie in [0, 1], so their variance is at most 1/4 and the
# certainty never drops below this value. Any eta at or below it passes
# every example and the gate reduces to the confidence test.
CERTAINTY_FLOOR = 1.0 - float(np.tanh(0.25))


def mc_masks(seed: int, example_ids: np.ndarray, n_passes: int, width: int, p: float,
             iteration: int = 0) -> np.ndarray:
    """Inverted-dropout masks of shape ``[len(ids), n_passes, width]``.

    Entry ``[e, i, j]`` depends only on ``(seed, iteration, ids[e], i, j)``.
    """
    if p == 0.0:
        return np.ones((len(example_ids), n_passes, width))
    ids = np.asarray(example_ids, dtype=np.int64)[:, None, None]
    passes = np.arange(n_passes)[None, :, None]
    units = np.arange(width)[None, None, :]
    keep = counter_uniform(seed, iteration, ids, passes, units) >= p
    return keep / (1.0 - p)


def mc_passes(spec: NetworkSpec, params: Mapping[str, np.ndarray], u_weak: np.ndarray, n_passes: int,
              seed: int, example_ids: np.ndarray | None = None, iteration: int = 0) -> np.ndarray:
    """MC-dropout class probabilities.

    ``u_weak`` may be one example (``[D]`` -> result ``[N, C]``) or a batch
    (``[B, D]`` -> result ``[B, N, C]``). Features are computed once since
    dropout only acts between the feature extractor and the classifier.
    """
    if n_passes < 1:
        raise ValueError(f"number of MC passes must be >= 1, got {n_passes}")
    x = np.asarray(u_weak, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if example_ids is None:
        example_ids = np.arange(len(x))
    feats = extract_features(spec, params, x)
    masks = mc_masks(seed, example_ids, n_passes, feats.shape[1], spec.dropout_rate, iteration)
    dropped = feats[:, None, :] * masks
    probs = softmax(classify(params, dropped))
    return probs[0] if single else probs


def predictive_variance(c: np.ndarray) -> np.ndarray:
    """Population variance over the pass axis (second to last): ``[..., N, C] -> [..., C]``.

    Values are shifted by the first pass before the two-pass formula, so
    identical passes give exactly zero.
    """
    c = np.asarray(c, dtype=np.float64)
    if c.shape[-2] < 1:
        raise ValueError("need at least one pass")
    d = c - c[..., :1, :]
    mean = d.mean(axis=-2, keepdims=True)
    return ((d - mean) ** 2).mean(axis=-2)


def certainty(variance: np.ndarray) -> np.ndarray:
    v = np.asarray(variance, dtype=np.float64)
    if np.any(v < 0):
        raise ValueError("variance must be non-negative")
    return 1.0 - np.tanh(v)


@dataclass(frozen=True)
class UncertaintyProfile:
    mc_probs: np.ndarray
    variance: np.ndarray
    certainty: np.ndarray

    @classmethod
    def from_passes(cls, c: np.ndarray) -> "UncertaintyProfile":
        v = predictive_variance(c)
        return cls(np.asarray(c), v, certainty(v))


@dataclass(frozen=True)
class GateDecision:
    pseudo_label: int
    confidence: float
    certainty_at_label: float
    passed_confidence: bool
    passed_certainty: bool

    @property
    def selected(self) -> bool:
        return self.passed_confidence and self.passed_certainty


def confidence_gate(q: np.ndarray, tau: float) -> int:
    return int(np.max(q) >= tau)


def upl_gate(q: np.ndarray, kappa: np.ndarray, tau: float, eta: float) -> GateDecision:
    q = np.asarray(q, dtype=np.float64)
    label = int(np.argmax(q))
    conf = float(q[label])
    cert = float(np.asarray(kappa)[label])
    return GateDecision(label, conf, cert, conf >= tau, cert >= eta)


@dataclass(frozen=True)
class GateBatch:
    """Vectorised gate outcome for a batch of weak views."""

    pseudo_label: np.ndarray
    confidence: np.ndarray
    certainty_at_label: np.ndarray
    passed_confidence: np.ndarray
    passed_certainty: np.ndarray

    @property
    def selected(self) -> np.ndarray:
        return self.passed_confidence & self.passed_certainty

    def __len__(self):
        return len(self.pseudo_label)

    def decision(self, i: int) -> GateDecision:
        return GateDecision(int(self.pseudo_label[i]), float(self.confidence[i]), float(self.certainty_at_label[i]),
                            bool(self.passed_confidence[i]), bool(self.passed_certainty[i]))


def gate_batch(q: np.ndarray, tau: float, kappa: np.ndarray | None = None, eta: float | None = None) -> GateBatch:
    """Confidence gate alone when ``kappa`` is None, otherwise the conjunction with the certainty test."""
    q = np.asarray(q, dtype=np.float64)
    labels = np.argmax(q, axis=1)
    rows = np.arange(len(q))
    conf = q[rows, labels]
    passed_conf = conf >= tau
    if kappa is None:
        cert = np.ones(len(q))
        passed_cert = np.ones(len(q), dtype=bool)
    else:
        if eta is None:
            raise ValueError("eta is required with kappa")
        cert = np.asarray(kappa)[rows, labels]
        passed_cert = cert >= eta
    return GateBatch(labels, conf, cert, passed_conf, passed_cert)

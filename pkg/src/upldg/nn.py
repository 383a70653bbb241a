"""A small dense network with one dropout layer, written directly in numpy.

Layer order: ``hidden0 -> relu -> ... -> hiddenK -> relu -> dropout ->
classifier -> softmax``. The dropout layer sits between the feature
extractor and the classifier so MC-dropout passes only need to re-run the
classifier head.

Parameters live in a :class:`ParamSet` (an ordered ``name -> ndarray`` map).
Everything is float64.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

CE_EPS = 1e-12


class ShapeError(ValueError):
    """Raised when a tensor does not have the shape its context requires."""


class NonFiniteError(FloatingPointError):
    """Raised when a loss, gradient or update stops being finite."""


class ForwardMode(enum.Enum):
    EVAL = "eval"
    TRAIN = "train"
    MC_DROPOUT = "mc_dropout"


@dataclass(frozen=True)
class NetworkSpec:
    input_dim: int
    hidden_dims: tuple[int, ...] = (64, 64)
    num_classes: int = 7
    dropout_rate: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.input_dim < 1:
            raise ValueError(f"input_dim must be positive, got {self.input_dim}")
        if not self.hidden_dims or any(h < 1 for h in self.hidden_dims):
            raise ValueError(f"hidden_dims must be a non-empty list of positive ints, got {self.hidden_dims}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")

    @property
    def feature_dim(self) -> int:
        return self.hidden_dims[-1]

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        fan_in = self.input_dim
        for i, width in enumerate(self.hidden_dims):
            shapes[f"hidden{i}.weight"] = (fan_in, width)
            shapes[f"hidden{i}.bias"] = (width,)
            fan_in = width
        shapes["classifier.weight"] = (fan_in, self.num_classes)
        shapes["classifier.bias"] = (self.num_classes,)
        return shapes


class ParamSet(dict):
    """Ordered mapping of parameter name to float64 array."""

    def copy(self) -> "ParamSet":
        return ParamSet((k, np.array(v, dtype=np.float64, copy=True)) for k, v in self.items())

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: tuple(v.shape) for k, v in self.items()}

    def mismatches(self, other: Mapping[str, np.ndarray]) -> list[str]:
        """Names that are missing on one side or differ in shape."""
        bad = sorted(set(self) ^ set(other))
        bad += [k for k in self if k in other and np.shape(other[k]) != self[k].shape]
        return bad

    def scaled(self, factor: float) -> "ParamSet":
        return ParamSet((k, v * factor) for k, v in self.items())

    def zeros_like(self) -> "ParamSet":
        return ParamSet((k, np.zeros_like(v)) for k, v in self.items())


def check_params(spec: NetworkSpec, params: Mapping[str, np.ndarray]) -> None:
    expected = spec.param_shapes()
    missing = [k for k in expected if k not in params]
    extra = [k for k in params if k not in expected]
    if missing or extra:
        raise ShapeError(f"parameter names do not match spec: missing={missing} extra={extra}")
    for name, shape in expected.items():
        if tuple(np.shape(params[name])) != shape:
            raise ShapeError(f"parameter {name!r} has shape {np.shape(params[name])}, expected {shape}")


def init_params(spec: NetworkSpec, rng: np.random.Generator) -> ParamSet:
    """He-normal weights, zero biases."""
    params = ParamSet()
    for name, shape in spec.param_shapes().items():
        if name.endswith(".bias"):
            params[name] = np.zeros(shape)
        else:
            params[name] = rng.normal(0.0, np.sqrt(2.0 / shape[0]), size=shape)
    return params


def zero_params(spec: NetworkSpec) -> ParamSet:
    return ParamSet((k, np.zeros(s)) for k, s in spec.param_shapes().items())


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def dropout_mask(shape, p: float, rng: np.random.Generator) -> np.ndarray:
    """Inverted-dropout scale mask: 0 with probability p, else 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    if p == 0.0:
        return np.ones(shape)
    keep = rng.random(shape) >= p
    return keep / (1.0 - p)


def dropout_apply(x: np.ndarray, p: float, mode: ForwardMode, rng: np.random.Generator | None = None) -> np.ndarray:
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    if mode is ForwardMode.EVAL or p == 0.0:
        return x
    if rng is None:
        raise ValueError(f"{mode.value} mode dropout needs an rng")
    return x * dropout_mask(x.shape, p, rng)


@dataclass
class ForwardCache:
    """Intermediate values needed by :func:`backward`."""

    inputs: list[np.ndarray] = field(default_factory=list)  # input to each hidden layer
    pre: list[np.ndarray] = field(default_factory=list)  # pre-activation of each hidden layer
    features: np.ndarray | None = None
    mask: np.ndarray | None = None
    dropped: np.ndarray | None = None
    probs: np.ndarray | None = None


def _check_input(spec: NetworkSpec, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ShapeError(f"input x has shape {x.shape}, expected (batch, {spec.input_dim})")
    return x


def extract_features(spec: NetworkSpec, params: Mapping[str, np.ndarray], x: np.ndarray,
                     cache: ForwardCache | None = None) -> np.ndarray:
    h = x
    for i in range(len(spec.hidden_dims)):
        z = h @ params[f"hidden{i}.weight"] + params[f"hidden{i}.bias"]
        if cache is not None:
            cache.inputs.append(h)
            cache.pre.append(z)
        h = np.maximum(z, 0.0)
    return h


def classify(params: Mapping[str, np.ndarray], features: np.ndarray) -> np.ndarray:
    """Logits from (already dropped-out) penultimate features."""
    return features @ params["classifier.weight"] + params["classifier.bias"]


def forward(spec: NetworkSpec, params: Mapping[str, np.ndarray], x: np.ndarray,
            mode: ForwardMode = ForwardMode.EVAL, rng: np.random.Generator | None = None,
            *, mask: np.ndarray | None = None, cache: ForwardCache | None = None):
    """Run the network; returns ``(probs, features)``.

    ``features`` is the pre-dropout penultimate activation. In TRAIN and
    MC_DROPOUT modes a fresh dropout mask is drawn from ``rng`` unless an
    explicit ``mask`` (already scaled by 1/(1-p)) is given.
    """
    check_params(spec, params)
    x = _check_input(spec, x)
    feats = extract_features(spec, params, x, cache)
    if mode is ForwardMode.EVAL or spec.dropout_rate == 0.0:
        m = None
        dropped = feats
    else:
        if mask is None:
            if rng is None:
                raise ValueError(f"{mode.value} mode forward needs an rng or an explicit mask")
            mask = dropout_mask(feats.shape, spec.dropout_rate, rng)
        elif mask.shape != feats.shape:
            raise ShapeError(f"dropout mask has shape {mask.shape}, expected {feats.shape}")
        m = mask
        dropped = feats * m
    probs = softmax(classify(params, dropped))
    if cache is not None:
        cache.features, cache.mask, cache.dropped, cache.probs = feats, m, dropped, probs
    return probs, feats


def cross_entropy(probs: np.ndarray, target: int, eps: float = CE_EPS) -> float:
    """``-log(max(probs[target], eps))`` for one probability row."""
    probs = np.asarray(probs, dtype=np.float64)
    if not 0 <= int(target) < probs.shape[-1]:
        raise IndexError(f"target class {target} out of range for {probs.shape[-1]} classes")
    return float(-np.log(max(probs[int(target)], eps)))


def weighted_ce(probs: np.ndarray, targets: np.ndarray, weights: np.ndarray, eps: float = CE_EPS) -> float:
    """``sum_i weights[i] * CE(probs[i], targets[i])``, summed in row order."""
    targets = np.asarray(targets, dtype=np.int64)
    if targets.size and (targets.min() < 0 or targets.max() >= probs.shape[1]):
        raise IndexError(f"targets out of range for {probs.shape[1]} classes")
    picked = probs[np.arange(len(targets)), targets]
    return float(np.sum(weights * -np.log(np.maximum(picked, eps))))


def backward(spec: NetworkSpec, params: Mapping[str, np.ndarray], cache: ForwardCache,
             targets: np.ndarray, weights: np.ndarray, eps: float = CE_EPS) -> ParamSet:
    """Gradient of ``weighted_ce(cache.probs, targets, weights)`` w.r.t. params.

    The forward pass that filled ``cache`` fixes the dropout mask, so the
    gradient is exact for that realisation. Rows whose target probability is
    clamped at ``eps`` contribute zero gradient.
    """
    targets = np.asarray(targets, dtype=np.int64)
    weights = np.asarray(weights, dtype=np.float64)
    n = len(targets)
    probs = cache.probs
    rows = np.arange(n)
    onehot = np.zeros_like(probs)
    onehot[rows, targets] = 1.0
    live = probs[rows, targets] > eps
    dz = (probs - onehot) * (weights * live)[:, None]

    grads = ParamSet()
    n_hidden = len(spec.hidden_dims)
    grads["classifier.weight"] = cache.dropped.T @ dz
    grads["classifier.bias"] = dz.sum(axis=0)
    dh = dz @ params["classifier.weight"].T
    if cache.mask is not None:
        dh = dh * cache.mask
    for i in reversed(range(n_hidden)):
        dpre = dh * (cache.pre[i] > 0.0)
        grads[f"hidden{i}.weight"] = cache.inputs[i].T @ dpre
        grads[f"hidden{i}.bias"] = dpre.sum(axis=0)
        if i > 0:
            dh = dpre @ params[f"hidden{i}.weight"].T

    ordered = ParamSet((k, grads[k]) for k in spec.param_shapes())
    for name, g in ordered.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {name!r}")
    return ordered


def loss_and_grad(spec: NetworkSpec, params: Mapping[str, np.ndarray], x: np.ndarray,
                  targets: np.ndarray, weights: np.ndarray, mode: ForwardMode = ForwardMode.TRAIN,
                  rng: np.random.Generator | None = None, *, mask: np.ndarray | None = None):
    """Forward + weighted cross-entropy + backward in one call."""
    cache = ForwardCache()
    probs, _ = forward(spec, params, x, mode, rng, mask=mask, cache=cache)
    loss = weighted_ce(probs, targets, weights)
    if not np.isfinite(loss):
        raise NonFiniteError(f"non-finite loss {loss}")
    return loss, backward(spec, params, cache, targets, weights)


def add_grads(a: Mapping[str, np.ndarray], b: Mapping[str, np.ndarray], scale_b: float = 1.0) -> ParamSet:
    return ParamSet((k, a[k] + scale_b * b[k]) for k in a)


@dataclass
class OptimizerState:
    velocity: ParamSet
    lr: float = 0.03
    momentum: float = 0.9

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")

    @classmethod
    def zeros(cls, params: ParamSet, lr: float = 0.03, momentum: float = 0.9) -> "OptimizerState":
        return cls(params.zeros_like(), lr, momentum)


def sgd_nesterov_step(params: ParamSet, grads: Mapping[str, np.ndarray], state: OptimizerState):
    """One Nesterov step; returns ``(new_params, new_state)``.

    v' = m * v + g
    w' = w - lr * (g + m * v')
    """
    bad = params.mismatches(grads) or params.mismatches(state.velocity)
    if bad:
        raise ShapeError(f"shape/name mismatch in optimizer step: {bad}")
    m, lr = state.momentum, state.lr
    new_params, new_vel = ParamSet(), ParamSet()
    for name, w in params.items():
        g = grads[name]
        v = m * state.velocity[name] + g
        w_new = w - lr * (g + m * v)
        if not np.all(np.isfinite(w_new)):
            raise NonFiniteError(f"non-finite update for {name!r}")
        new_params[name] = w_new
        new_vel[name] = v
    return new_params, OptimizerState(new_vel, lr, m)


def predict(spec: NetworkSpec, params: Mapping[str, np.ndarray], x: np.ndarray) -> np.ndarray:
    """Eval-mode probabilities."""
    return forward(spec, params, x, ForwardMode.EVAL)[0]


def argmax_lowest(probs: np.ndarray) -> np.ndarray:
    """Row-wise argmax; ``np.argmax`` already returns the first (lowest) index on ties."""
    return np.argmax(probs, axis=-1)

"""Experiment configuration and the flat ``key = value`` config file format.

A config file holds one ``key = value`` pair per line; ``#`` starts a
comment. Every :class:`~upldg.fixmatch.TrainConfig` field is a key, plus:

``benchmark``           preset name (``default``, ``zero-shift``, ``confident-shift``)
``domains``             overrides the preset's domains: ``id:family:magnitude`` items, comma separated
``num_classes``, ``examples_per_class``, ``feature_dim``, ``class_separation``,
``noise_std``, ``prototype_seed``, ``data_seed``   generator settings shared by all domains
``target``              held-out domain id
``method``              FixMatch, UPL, MA or UPLM
``methods``             comma list used by the full report
``seeds``               comma list of trial seeds
``output_dir``          where reports go
``data_file``           read domains from a ``domain,label,f0,...`` table instead of generating them
``gate_logs``           write per-example gate logs (true/false)
``eta_grid``, ``mu_values``, ``mc_values``   sweep values (comma lists)

Tuple-valued fields (``hidden_dims``, ``ma_weights``, ...) are comma lists.
Command-line ``--set key=value`` overrides take precedence over the file.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

from .data import DomainSpec
from .fixmatch import TrainConfig

OUTPUT_ROOT_ENV = "UPLDG_OUTPUT_ROOT"
METHODS = ("FixMatch", "UPL", "MA", "UPLM")

# id, shift family, magnitude
PRESETS: dict[str, tuple[tuple[str, str, float], ...]] = {
    "default": (("style", "style", 0.6), ("background", "background", 2.0),
                ("corruption", "corruption", 0.7), ("texture", "texture", 0.5)),
    "zero-shift": (("d0", "style", 0.0), ("d1", "background", 0.0), ("d2", "corruption", 0.0), ("d3", "texture", 0.0)),
    # one source far from the rest: confident but unstable predictions there
    "confident-shift": (("clean", "style", 0.0), ("textured", "texture", 0.3),
                        ("shifted", "background", 10.0), ("target", "style", 0.3)),
}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class BenchmarkConfig:
    preset: str = "default"
    domains: tuple[tuple[str, str, float], ...] = PRESETS["default"]
    num_classes: int = 7
    examples_per_class: int = 60
    feature_dim: int = 16
    class_separation: float = 4.0
    noise_std: float = 1.0
    prototype_seed: int = 0
    data_seed: int = 0

    def domain_specs(self) -> list[DomainSpec]:
        return [DomainSpec(dom_id, self.num_classes, self.examples_per_class, family, magnitude,
                           seed=self.data_seed * 1000 + i + 1, feature_dim=self.feature_dim,
                           class_separation=self.class_separation, noise_std=self.noise_std,
                           prototype_seed=self.prototype_seed)
                for i, (dom_id, family, magnitude) in enumerate(self.domains)]

    @property
    def domain_ids(self) -> list[str]:
        return [d[0] for d in self.domains]


@dataclass(frozen=True)
class ExperimentConfig:
    benchmark: BenchmarkConfig = field(default_factory=BenchmarkConfig)
    target: str = "style"
    method: str = "UPLM"
    methods: tuple[str, ...] = METHODS
    train: TrainConfig = field(default_factory=lambda: TrainConfig(track_uncertainty=True))
    seeds: tuple[int, ...] = (0, 1, 2)
    output_dir: str = ""
    data_file: str = ""
    gate_logs: bool = False
    eta_grid: tuple[float, ...] = (0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8)
    mu_values: tuple[int, ...] = (1, 2, 3, 4, 5, 6)
    mc_values: tuple[int, ...] = (1, 5, 10, 20, 40, 80, 160)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {METHODS}")
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ConfigError(f"unknown methods {bad}")
        if not self.seeds:
            raise ConfigError("need at least one seed")
        if not self.data_file and self.target not in self.benchmark.domain_ids:
            raise ConfigError(f"target {self.target!r} is not a benchmark domain {self.benchmark.domain_ids}")

    def resolved_output_dir(self) -> Path:
        if self.output_dir:
            return Path(self.output_dir)
        return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))

    def with_(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_flat(self) -> dict[str, str]:
        """Every setting as ``key -> text``; :func:`from_flat` inverts it."""
        flat: dict[str, str] = {}
        for f in dataclasses.fields(TrainConfig):
            flat[f.name] = _dump(getattr(self.train, f.name))
        b = self.benchmark
        flat["benchmark"] = b.preset
        flat["domains"] = ",".join(f"{i}:{fam}:{mag!r}" for i, fam, mag in b.domains)
        for name in ("num_classes", "examples_per_class", "feature_dim", "class_separation", "noise_std",
                     "prototype_seed", "data_seed"):
            flat[name] = _dump(getattr(b, name))
        for name in ("target", "method", "methods", "seeds", "output_dir", "data_file", "gate_logs", "eta_grid",
                     "mu_values", "mc_values"):
            flat[name] = _dump(getattr(self, name))
        return flat


def _dump(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (tuple, list)):
        return ",".join(_dump(x) for x in v)
    return str(v)


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _parse_like(kind: type | str, text: str, key: str):
    try:
        if kind in (bool, "bool"):
            return _parse_bool(text)
        if kind in (int, "int"):
            return int(text)
        if kind in (float, "float"):
            return float(text)
        if kind == "tuple[int, ...]":
            return tuple(int(t) for t in text.split(",") if t.strip())
        if kind in ("tuple[float, ...]", "tuple[float, float, float]"):
            return tuple(float(t) for t in text.split(",") if t.strip())
        if kind == "tuple[str, ...]":
            return tuple(t.strip() for t in text.split(",") if t.strip())
        return text
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {text!r} ({exc})") from None


def parse_domains(text: str) -> tuple[tuple[str, str, float], ...]:
    out = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        parts = item.split(":")
        if len(parts) != 3:
            raise ConfigError(f"domain entry {item!r} is not id:family:magnitude")
        try:
            out.append((parts[0], parts[1], float(parts[2])))
        except ValueError:
            raise ConfigError(f"bad magnitude in domain entry {item!r}") from None
    return tuple(out)


def read_config_file(path) -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


_TRAIN_TYPES = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
_BENCH_TYPES = {f.name: f.type for f in dataclasses.fields(BenchmarkConfig) if f.name not in ("preset", "domains")}
_EXP_TYPES = {"target": "str", "method": "str", "methods": "tuple[str, ...]", "seeds": "tuple[int, ...]",
              "output_dir": "str", "data_file": "str", "gate_logs": "bool", "eta_grid": "tuple[float, ...]",
              "mu_values": "tuple[int, ...]", "mc_values": "tuple[int, ...]"}


def known_keys() -> set[str]:
    return set(_TRAIN_TYPES) | set(_BENCH_TYPES) | set(_EXP_TYPES) | {"benchmark", "domains"}


def from_flat(values: Mapping[str, str]) -> ExperimentConfig:
    unknown = sorted(set(values) - known_keys())
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    preset = values.get("benchmark", "default")
    if preset not in PRESETS:
        raise ConfigError(f"unknown benchmark preset {preset!r}; expected one of {sorted(PRESETS)}")
    domains = parse_domains(values["domains"]) if "domains" in values else PRESETS[preset]
    bench_kw = {k: _parse_like(t, values[k], k) for k, t in _BENCH_TYPES.items() if k in values}
    bench = BenchmarkConfig(preset=preset, domains=domains, **bench_kw)

    train_kw = {k: _parse_like(t, values[k], k) for k, t in _TRAIN_TYPES.items() if k in values}
    train_kw.setdefault("track_uncertainty", True)
    try:
        train = TrainConfig(**train_kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None

    exp_kw = {k: _parse_like(t, values[k], k) for k, t in _EXP_TYPES.items() if k in values}
    exp_kw.setdefault("target", domains[0][0] if "target" not in values else values["target"])
    return ExperimentConfig(benchmark=bench, train=train, **exp_kw)


def load_config(path=None, overrides: Mapping[str, str] | None = None) -> ExperimentConfig:
    values = read_config_file(path) if path else {}
    values.update(overrides or {})
    return from_flat(values)


def parse_overrides(items) -> dict[str, str]:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out

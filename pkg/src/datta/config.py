"""Run configuration: one TOML file with dotted sections, plus flag overrides.

Sections and keys::

    [task]      num_classes, image_size, seed
    [model]     channels, kernels, strides
    [train]     epochs, n_train, batch_size, lr, momentum, bn_momentum, n_heldout, photometric, seed
    [scenario]  kind, domains, batch_size, num_batches, delta, seed, run_length
    [adapt]     every AdaptationConfig field
    [output]    dir, plots, timing

Any key not listed is an error. Seeds left unset fall back to the
``DATTA_SEED`` environment variable, then to 0.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

import tomli

from .adaptation import AdaptationConfig
from .datagen import ScenarioSpec, SourceTask
from .harness import TrainConfig
from .model import ModelSpec

SEED_ENV = "DATTA_SEED"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class OutputConfig:
    dir: str = "out"
    plots: bool = True
    timing: bool = False


def _keys(cls) -> list[str]:
    return [f.name for f in fields(cls)]


SECTIONS: dict[str, list[str]] = {
    "task": ["num_classes", "image_size", "seed"],
    "model": ["channels", "kernels", "strides"],
    "train": _keys(TrainConfig),
    "scenario": ["kind", "domains", "batch_size", "num_batches", "delta", "seed", "run_length"],
    "adapt": _keys(AdaptationConfig),
    "output": _keys(OutputConfig),
}


def key_help() -> str:
    """One line per section listing its keys with defaults (for ``--help``)."""
    defaults = {
        "task": {"num_classes": 10, "image_size": 32, "seed": "$DATTA_SEED or 0"},
        "model": ModelSpec().to_dict(),
        "train": dataclasses.asdict(TrainConfig()),
        "scenario": {"kind": "(required)", "domains": "(required)", "batch_size": 64, "num_batches": 50,
                     "delta": 0.1, "seed": "$DATTA_SEED or 0", "run_length": 10},
        "adapt": dataclasses.asdict(AdaptationConfig()),
        "output": dataclasses.asdict(OutputConfig()),
    }
    lines = []
    for sec, keys in SECTIONS.items():
        items = ", ".join(f"{k}={defaults[sec].get(k)!r}" if not isinstance(defaults[sec].get(k), str)
                          else f"{k}={defaults[sec][k]}" for k in keys)
        lines.append(f"  [{sec}] {items}")
    return "\n".join(lines)


@dataclass
class RunConfig:
    task: SourceTask = field(default_factory=SourceTask)
    model: ModelSpec = field(default_factory=ModelSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    scenario: ScenarioSpec | None = None
    adapt: AdaptationConfig = field(default_factory=AdaptationConfig)
    output: OutputConfig = field(default_factory=OutputConfig)


def read_toml(path) -> dict:
    p = Path(path)
    try:
        with open(p, "rb") as fh:
            return tomli.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {p}") from None
    except OSError as e:
        raise ConfigError(f"cannot read config file {p}: {e.strerror or e}") from None
    except tomli.TOMLDecodeError as e:
        raise ConfigError(f"{p}: {e}") from None


def parse_override(text: str) -> tuple[str, object]:
    """``section.key=value`` with a TOML value; bare words are taken as strings."""
    key, sep, raw = text.partition("=")
    if not sep or "." not in key:
        raise ConfigError(f"override {text!r} must look like section.key=value")
    try:
        value = tomli.loads(f"v = {raw}")["v"]
    except tomli.TOMLDecodeError:
        value = raw
    return key.strip(), value


def merge(data: dict, overrides: list[tuple[str, object]]) -> dict:
    out = {k: dict(v) if isinstance(v, dict) else v for k, v in data.items()}
    for key, value in overrides:
        sec, _, name = key.partition(".")
        out.setdefault(sec, {})[name] = value
    return out


def _check(data: dict) -> None:
    for sec, body in data.items():
        if sec not in SECTIONS:
            raise ConfigError(f"unknown section [{sec}]; valid sections: {', '.join(SECTIONS)}")
        if not isinstance(body, dict):
            raise ConfigError(f"[{sec}] must be a table of keys")
        bad = sorted(set(body) - set(SECTIONS[sec]))
        if bad:
            raise ConfigError(f"unknown key(s) in [{sec}]: {', '.join(bad)}; valid: {', '.join(SECTIONS[sec])}")


def env_seed(default: int = 0) -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return default
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


def build(data: dict, need_scenario: bool = False) -> RunConfig:
    """Validate every key and construct the typed config objects."""
    _check(data)
    seed = env_seed()
    try:
        t = data.get("task", {})
        task = SourceTask(num_classes=t.get("num_classes", 10),
                          image_shape=(3, t.get("image_size", 32), t.get("image_size", 32)),
                          seed=t.get("seed", seed))
        m = data.get("model", {})
        mspec = ModelSpec(in_channels=3, image_size=task.image_shape[1], num_classes=task.num_classes,
                          **{k: tuple(v) for k, v in m.items()})
        tr = dict(data.get("train", {}))
        tr.setdefault("seed", seed)
        train = TrainConfig(**tr)
        scen = None
        if "scenario" in data:
            sd = dict(data["scenario"])
            sd.setdefault("seed", seed)
            scen = ScenarioSpec.from_dict(sd)
        elif need_scenario:
            raise ConfigError("a [scenario] section is required")
        ad = dict(data.get("adapt", {}))
        ad.setdefault("seed", seed)
        adapt = AdaptationConfig(**ad)
        output = OutputConfig(**data.get("output", {}))
    except ConfigError:
        raise
    except (TypeError, ValueError, KeyError) as e:
        raise ConfigError(str(e)) from None
    return RunConfig(task, mspec, train, scen, adapt, output)


def load(path=None, overrides: list[tuple[str, object]] = (), need_scenario: bool = False) -> RunConfig:
    data = read_toml(path) if path is not None else {}
    return build(merge(data, list(overrides)), need_scenario)

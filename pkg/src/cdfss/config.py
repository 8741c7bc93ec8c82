"""JSON run configuration with strict keys and documented defaults.

Layout::

    {
      "forge": {"source": {...}, "target": {...}, "n_images_per_class": 20,
                "image_size": 32, "channels": 1, "exact": false},
      "model": {"base_channels": 8, "attn_k": 3, "pooled": 4, "pivot_channels": 8,
                "hidden": 16, "ridge": 1e-6, "prototypes_from": "enhanced",
                "kshot_merge": "avg", "encoder": "pooling", "backbone_seed": 0, "seed": 0},
      "train": {"lr": 0.001, "optimizer": "adam", "epochs": 10, "episodes_per_epoch": 100,
                "k_shot": 1, "seed": 42, "loss_weights": [1, 1], "dtype": "float64", ...},
      "eval":  {"n_episodes": 200, "k": 1, "seed": 7, "domain": "target"}
    }

Image size and channel count of the model come from the dataset manifest;
the model dtype comes from ``train.dtype``.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .episodes import DEFAULT_SOURCE, DEFAULT_TARGET, DomainSpec, ForgeConfigError
from .segmenter import ModelConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ForgeConfig:
    source: DomainSpec = DEFAULT_SOURCE
    target: DomainSpec = DEFAULT_TARGET
    n_images_per_class: int = 20
    image_size: int = 32
    channels: int = 1
    exact: bool = False

    def to_dict(self) -> dict:
        return {
            "source": self.source.to_dict(),
            "target": self.target.to_dict(),
            "n_images_per_class": self.n_images_per_class,
            "image_size": self.image_size,
            "channels": self.channels,
            "exact": self.exact,
        }


@dataclass(frozen=True)
class EvalConfig:
    n_episodes: int = 200
    k: int = 1
    seed: int = 7
    domain: str = "target"


MODEL_KEYS = ("base_channels", "attn_k", "pooled", "pivot_channels", "hidden", "ridge",
              "prototypes_from", "kshot_merge", "encoder", "backbone_seed", "seed")


@dataclass(frozen=True)
class RunConfig:
    forge: ForgeConfig = field(default_factory=ForgeConfig)
    model: dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def model_config(self, image_size: int, in_channels: int = 1) -> ModelConfig:
        return ModelConfig(image_size=image_size, in_channels=in_channels, dtype=self.train.dtype, **self.model)

    def to_dict(self) -> dict:
        model_defaults = {k: getattr(ModelConfig(), k) for k in MODEL_KEYS}
        model_defaults.update(self.model)
        return {
            "forge": self.forge.to_dict(),
            "model": model_defaults,
            "train": self.train.to_dict(),
            "eval": dataclasses.asdict(self.eval),
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _check_keys(section: str, given: dict, allowed) -> None:
    if not isinstance(given, dict):
        raise ConfigError(f"section {section!r} must be a JSON object")
    unknown = sorted(set(given) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) in {section!r}: {', '.join(unknown)}")


def _domain(section: str, given: dict, default: DomainSpec) -> DomainSpec:
    fields = [f.name for f in dataclasses.fields(DomainSpec)]
    _check_keys(section, given, fields)
    merged = default.to_dict()
    merged.update(given)
    return DomainSpec(**merged)


def parse_config(doc: dict) -> RunConfig:
    """Build a RunConfig from a parsed JSON object; raises ConfigError on any problem."""
    _check_keys("<root>", doc, ("forge", "model", "train", "eval"))
    try:
        f = dict(doc.get("forge", {}))
        _check_keys("forge", f, [x.name for x in dataclasses.fields(ForgeConfig)])
        source = _domain("forge.source", f.pop("source", {}), DEFAULT_SOURCE)
        target = _domain("forge.target", f.pop("target", {}), DEFAULT_TARGET)
        shared = sorted(set(source.class_set) & set(target.class_set))
        if shared:
            raise ConfigError(f"source and target share class(es) {', '.join(shared)}")
        forge = ForgeConfig(source=source, target=target, **f)

        model = dict(doc.get("model", {}))
        _check_keys("model", model, MODEL_KEYS)
        ModelConfig(**model)  # validate values early

        t = dict(doc.get("train", {}))
        _check_keys("train", t, [x.name for x in dataclasses.fields(TrainConfig)])
        train = TrainConfig(**t)

        e = dict(doc.get("eval", {}))
        _check_keys("eval", e, [x.name for x in dataclasses.fields(EvalConfig)])
        ev = EvalConfig(**e)
    except ConfigError:
        raise
    except (ForgeConfigError, TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return RunConfig(forge, model, train, ev)


def load_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    try:
        doc = json.loads(p.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {p}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON: {exc}") from None
    return parse_config(doc)

"""Frozen three-level convolutional feature pyramid."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, conv2d, mean, relu, reshape

GROUPS = ("low", "mid", "high")


@dataclass(frozen=True)
class BackboneConfig:
    in_channels: int = 1
    base_channels: int = 8
    seed: int = 0
    image_size: int = 32

    def __post_init__(self):
        if self.image_size % 4 != 0 or self.image_size <= 0:
            raise ValueError(f"image_size must be a positive multiple of 4, got {self.image_size}")
        if self.in_channels < 1 or self.base_channels < 1:
            raise ValueError("in_channels and base_channels must be positive")

    @property
    def channels(self) -> tuple[int, int, int]:
        b = self.base_channels
        return (b, 2 * b, 4 * b)

    @property
    def sizes(self) -> tuple[int, int, int]:
        s = self.image_size
        return (s, s // 2, s // 4)


@dataclass
class PyramidFeatures:
    levels: list[Tensor]
    group_of_level: dict[int, str] = field(default_factory=lambda: dict(enumerate(GROUPS)))


@dataclass
class BackboneWeights:
    cfg: BackboneConfig
    kernels: list[Tensor]
    biases: list[Tensor]

    def named(self) -> dict[str, Tensor]:
        out = {}
        for lv, (k, b) in enumerate(zip(self.kernels, self.biases), start=1):
            out[f"backbone.level{lv}.kernel"] = k
            out[f"backbone.level{lv}.bias"] = b
        return out

    def astype(self, dtype) -> "BackboneWeights":
        return BackboneWeights(
            self.cfg,
            [Tensor(k.data.astype(dtype)) for k in self.kernels],
            [Tensor(b.data.astype(dtype)) for b in self.biases],
        )


def glorot_bound(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def init_backbone(cfg: BackboneConfig, dtype=np.float64) -> BackboneWeights:
    """Seeded Glorot-uniform weights; biases share each layer's bound. Never trained."""
    rng = np.random.default_rng(cfg.seed)
    kernels, biases = [], []
    cin = cfg.in_channels
    for cout in cfg.channels:
        fan_in, fan_out = cin * 9, cout * 9
        a = glorot_bound(fan_in, fan_out)
        kernels.append(Tensor(rng.uniform(-a, a, size=(cout, cin, 3, 3)).astype(dtype)))
        biases.append(Tensor(rng.uniform(-a, a, size=(cout,)).astype(dtype)))
        cin = cout
    return BackboneWeights(cfg, kernels, biases)


def _avg_pool2(x: Tensor) -> Tensor:
    c, h, w = x.shape
    return mean(reshape(x, (c, h // 2, 2, w // 2, 2)), axis=(2, 4))


def extract_features(weights: BackboneWeights, image) -> PyramidFeatures:
    """Run the frozen pyramid: full, 1/2 and 1/4 resolution, channels doubling per level."""
    x = image if isinstance(image, Tensor) else Tensor(image)
    x = Tensor(x.data.astype(weights.kernels[0].dtype))  # frozen: never part of a graph
    s = weights.cfg.image_size
    if x.ndim != 3 or x.shape[1:] != (s, s) or x.shape[0] != weights.cfg.in_channels:
        raise ValueError(
            f"image must be [{weights.cfg.in_channels}×{s}×{s}], got {list(x.shape)}"
        )
    levels = []
    for lv, (k, b) in enumerate(zip(weights.kernels, weights.biases)):
        if lv > 0:
            x = _avg_pool2(x)
        x = relu(conv2d(x, k, b))
        levels.append(Tensor(x.data))
    return PyramidFeatures(levels)


__all__ = [
    "GROUPS",
    "BackboneConfig",
    "BackboneWeights",
    "PyramidFeatures",
    "init_backbone",
    "extract_features",
    "glorot_bound",
]

"""Anchor transformation: shared spatial attention, masked prototypes and the
pseudo-inverse map that sends normalized prototypes onto learned anchors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbone import GROUPS
from .tensor import (
    Tensor,
    bilinear_resize,
    concat,
    conv2d,
    matmul,
    mean,
    pseudo_inverse_2col,
    reshape,
    sigmoid,
    sqrt,
    tmax,
    tsum,
)

NORM_EPS = 1e-12
MASS_EPS = 1e-8


class EmptyRegionError(ValueError):
    """A mask selects (numerically) no pixels at feature resolution."""


class DegenerateInputError(ValueError):
    """A prototype or anchor vector has (near) zero norm."""


@dataclass
class AttentionParams:
    kernel: Tensor  # [1, 2, k, k]
    bias: Tensor  # [1]

    @classmethod
    def init(cls, k: int = 3, rng=None, dtype=np.float64) -> "AttentionParams":
        rng = rng if rng is not None else np.random.default_rng(0)
        a = float(np.sqrt(6.0 / (2 * k * k + k * k)))
        kernel = rng.uniform(-a, a, size=(1, 2, k, k)).astype(dtype)
        return cls(Tensor(kernel, requires_grad=True), Tensor(np.zeros(1, dtype), requires_grad=True))

    @property
    def size(self) -> int:
        return self.kernel.size + self.bias.size


@dataclass
class PrototypePair:
    level: int
    c_f: Tensor
    c_b: Tensor


@dataclass
class TransformMatrix:
    level: int
    w: Tensor


class AnchorBank:
    """One trainable (foreground, background) anchor pair per feature group."""

    def __init__(self, dims: dict[str, int], seed: int = 0, dtype=np.float64):
        self.dims = dict(dims)
        self._rng = np.random.default_rng(seed)
        self.vectors: dict[str, dict[str, Tensor]] = {}
        for g in GROUPS:
            self.vectors[g] = {
                "f": Tensor(self._unit(self.dims[g], dtype), requires_grad=True),
                "b": Tensor(self._unit(self.dims[g], dtype), requires_grad=True),
            }

    def _unit(self, d: int, dtype) -> np.ndarray:
        v = self._rng.standard_normal(d)
        return (v / np.linalg.norm(v)).astype(dtype)

    def pair(self, group: str) -> tuple[Tensor, Tensor]:
        return self.vectors[group]["f"], self.vectors[group]["b"]

    def renormalize_degenerate(self) -> list[str]:
        """Re-draw any anchor whose norm underflowed; returns the names touched."""
        touched = []
        for g, pair in self.vectors.items():
            for which, t in pair.items():
                if not np.linalg.norm(t.data) > NORM_EPS:
                    t.data = self._unit(self.dims[g], t.dtype)
                    touched.append(f"seat.anchor.{g}.{which}")
        return touched


def mask_features(f: Tensor, mask: Tensor | None) -> Tensor:
    """Gate support features by the mask resized to feature resolution; queries pass through."""
    if mask is None:
        return f
    mask = mask if isinstance(mask, Tensor) else Tensor(np.asarray(mask, dtype=f.dtype))
    _, h, w = f.shape
    m = bilinear_resize(reshape(mask, (1,) + mask.shape), h, w)
    return f * m


def unified_attention(f_hat: Tensor, p: AttentionParams) -> Tensor:
    pooled = concat([mean(f_hat, axis=0, keepdims=True), tmax(f_hat, axis=0, keepdims=True)], axis=0)
    gate = sigmoid(conv2d(pooled, p.kernel, p.bias))
    return gate * f_hat


def masked_average_pool(f: Tensor, mask: Tensor) -> Tensor:
    """Mask-weighted spatial mean of [D, H, W] features; the mask is resized bilinearly first."""
    mask = mask if isinstance(mask, Tensor) else Tensor(np.asarray(mask, dtype=f.dtype))
    _, h, w = f.shape
    m = bilinear_resize(reshape(mask, (1,) + mask.shape), h, w)
    mass = tsum(m)
    if not float(mass.data) > MASS_EPS:
        raise EmptyRegionError(f"mask mass {float(mass.data):.3g} at {h}×{w} is empty")
    return tsum(f * m, axis=(1, 2)) / mass


def _unit_column(v: Tensor, what: str) -> Tensor:
    n = sqrt(tsum(v * v))
    if not float(n.data) > NORM_EPS:
        raise DegenerateInputError(f"{what} has zero norm")
    return reshape(v / n, (v.shape[0], 1))


def compute_transform(
    proto: PrototypePair, anchors: tuple[Tensor, Tensor], ridge: float = 0.0
) -> TransformMatrix:
    c_s = concat(
        [_unit_column(proto.c_f, "foreground prototype"), _unit_column(proto.c_b, "background prototype")], axis=1
    )
    a = concat([_unit_column(anchors[0], "foreground anchor"), _unit_column(anchors[1], "background anchor")], axis=1)
    # columns are unit length, so trace(CᵀC)/2 == 1 and a relative ridge equals the absolute one
    return TransformMatrix(proto.level, matmul(a, pseudo_inverse_2col(c_s, ridge)))


def apply_transform(w: TransformMatrix, f: Tensor) -> Tensor:
    d, h, wd = f.shape
    if w.w.shape != (d, d):
        raise ValueError(f"transform is {w.w.shape} but features have {d} channels")
    return reshape(matmul(w.w, reshape(f, (d, h * wd))), (d, h, wd))

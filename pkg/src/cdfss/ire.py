"""Residual enhancement and the ReLU-cosine support/query correlation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, matmul, relu, reshape, sqrt, transpose, tsum

ZERO_NORM = 1e-12


@dataclass
class ResidualFeatures:
    level: int
    r: Tensor  # [D, H, W]


@dataclass
class CorrelationTensor:
    """Clamped cosines, rows indexed by query pixel and columns by support pixel."""

    level: int
    cos: Tensor  # [Hq*Wq, Hs*Ws]
    query_hw: tuple[int, int]
    support_hw: tuple[int, int]

    @property
    def total_pairs(self) -> int:
        return int(self.cos.size)


def residual_enhance(transformed: Tensor, original: Tensor, level: int = 0) -> ResidualFeatures:
    if transformed.shape != original.shape:
        raise ValueError(f"residual shapes differ: {transformed.shape} vs {original.shape}")
    return ResidualFeatures(level, transformed + original)


def _unit_pixels(r: Tensor) -> Tensor:
    """[D, H, W] -> [D, H*W] with unit columns; columns below ZERO_NORM become zero."""
    d, h, w = r.shape
    flat = reshape(r, (d, h * w))
    sq = tsum(flat * flat, axis=0, keepdims=True)
    valid = (np.sqrt(sq.data) >= ZERO_NORM).astype(r.dtype)
    # invalid columns get norm 1 so neither the value nor its gradient blows up
    safe = sqrt(sq * valid + (1.0 - valid))
    return flat / safe * valid


def hypercorrelation(r_s: ResidualFeatures, r_q: ResidualFeatures) -> CorrelationTensor:
    if r_s.r.shape[0] != r_q.r.shape[0]:
        raise ValueError(f"channel mismatch: support {r_s.r.shape[0]}, query {r_q.r.shape[0]}")
    us = _unit_pixels(r_s.r)
    uq = _unit_pixels(r_q.r)
    cos = relu(matmul(transpose(uq), us))
    return CorrelationTensor(r_q.level, cos, tuple(r_q.r.shape[1:]), tuple(r_s.r.shape[1:]))


def active_matching_count(c: CorrelationTensor) -> int:
    return int(np.count_nonzero(c.cos.data > 0))

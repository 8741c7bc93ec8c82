"""Correlation encoder/decoder and the coarse-to-fine episode pipeline."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .backbone import GROUPS, BackboneConfig, BackboneWeights, PyramidFeatures, extract_features, init_backbone
from .ire import CorrelationTensor, hypercorrelation, residual_enhance
from .seat import (
    AnchorBank,
    AttentionParams,
    EmptyRegionError,
    PrototypePair,
    apply_transform,
    compute_transform,
    mask_features,
    masked_average_pool,
    unified_attention,
)
from .tensor import (
    DTYPES,
    Tensor,
    bilinear_resize,
    concat,
    conv2d,
    matmul,
    mean,
    relu,
    reshape,
    sigmoid,
    softmax,
    tmax,
    transpose,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    in_channels: int = 1
    base_channels: int = 8
    attn_k: int = 3
    pooled: int = 4
    pivot_channels: int = 8
    hidden: int = 16
    ridge: float = 1e-6
    prototypes_from: str = "enhanced"
    kshot_merge: str = "avg"
    encoder: str = "pooling"
    backbone_seed: int = 0
    seed: int = 0
    dtype: str = "float64"

    def __post_init__(self):
        if self.prototypes_from not in ("enhanced", "raw"):
            raise ValueError(f"prototypes_from must be 'enhanced' or 'raw', got {self.prototypes_from!r}")
        if self.kshot_merge != "avg":
            raise ValueError(f"kshot_merge must be 'avg', got {self.kshot_merge!r}")
        if self.encoder != "pooling":
            raise ValueError(f"encoder must be 'pooling', got {self.encoder!r}")
        if self.attn_k % 2 == 0 or self.attn_k < 1:
            raise ValueError("attn_k must be odd and positive")
        if self.ridge < 0:
            raise ValueError("ridge must be non-negative")
        if self.dtype not in DTYPES:
            raise ValueError(f"dtype must be one of {sorted(DTYPES)}")
        for name in ("pooled", "pivot_channels", "hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    @property
    def backbone(self) -> BackboneConfig:
        return BackboneConfig(self.in_channels, self.base_channels, self.backbone_seed, self.image_size)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SoftMask:
    probs: Tensor  # [H, W] foreground probability
    logits: Tensor  # [2, H, W]


@dataclass
class FusionParam:
    raw: Tensor

    @property
    def alpha(self) -> Tensor:
        return sigmoid(self.raw)


@dataclass
class EncoderDecoderParams:
    compress: list[Tensor]  # per level [P, Hs*Ws]
    pivot_kernels: list[Tensor]  # per level [pivot, 2+P, 3, 3]
    pivot_biases: list[Tensor]
    dec_kernels: list[Tensor]  # conv3x3, conv3x3, conv1x1
    dec_biases: list[Tensor]

    def named(self) -> dict[str, Tensor]:
        out = {}
        for lv in range(len(self.compress)):
            out[f"seg.level{lv + 1}.compress"] = self.compress[lv]
            out[f"seg.level{lv + 1}.pivot.kernel"] = self.pivot_kernels[lv]
            out[f"seg.level{lv + 1}.pivot.bias"] = self.pivot_biases[lv]
        for name, k, b in zip(("conv1", "conv2", "out"), self.dec_kernels, self.dec_biases):
            out[f"seg.dec.{name}.kernel"] = k
            out[f"seg.dec.{name}.bias"] = b
        return out


def _glorot(rng, shape, dtype) -> Tensor:
    receptive = int(np.prod(shape[2:])) if len(shape) > 2 else 1
    fan_in, fan_out = shape[1] * receptive, shape[0] * receptive
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-a, a, size=shape).astype(dtype), requires_grad=True)


def _zeros(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def init_encoder_decoder(cfg: ModelConfig, rng, dtype) -> EncoderDecoderParams:
    sizes = cfg.backbone.sizes
    p, pc, hid = cfg.pooled, cfg.pivot_channels, cfg.hidden
    compress = [_zeros((p, s * s), dtype) for s in sizes]
    pivot_k = [_glorot(rng, (pc, 2 + p, 3, 3), dtype) for _ in sizes]
    pivot_b = [_zeros((pc,), dtype) for _ in sizes]
    dec_k = [
        _glorot(rng, (hid, len(sizes) * pc, 3, 3), dtype),
        _glorot(rng, (hid, hid, 3, 3), dtype),
        _glorot(rng, (2, hid, 1, 1), dtype),
    ]
    dec_b = [_zeros((hid,), dtype), _zeros((hid,), dtype), _zeros((2,), dtype)]
    return EncoderDecoderParams(compress, pivot_k, pivot_b, dec_k, dec_b)


class FewShotSegmenter:
    """All model state: the frozen backbone plus every trainable group."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        dtype = DTYPES[cfg.dtype]
        rng = np.random.default_rng(cfg.seed)
        self.backbone: BackboneWeights = init_backbone(cfg.backbone, dtype)
        dims = dict(zip(GROUPS, cfg.backbone.channels))
        self.anchors = AnchorBank(dims, seed=int(rng.integers(2**63)), dtype=dtype)
        self.attention = AttentionParams.init(cfg.attn_k, rng, dtype)
        self.encdec = init_encoder_decoder(cfg, rng, dtype)
        self.fusion = FusionParam(Tensor(np.zeros((), dtype=dtype), requires_grad=True))

    @property
    def dtype(self):
        return DTYPES[self.cfg.dtype]

    def trainable(self) -> dict[str, Tensor]:
        out = {}
        for g in GROUPS:
            out[f"seat.anchor.{g}.f"], out[f"seat.anchor.{g}.b"] = self.anchors.pair(g)
        out["seat.attn.kernel"] = self.attention.kernel
        out["seat.attn.bias"] = self.attention.bias
        out.update(self.encdec.named())
        out["fusion.alpha_raw"] = self.fusion.raw
        return out

    def state(self) -> dict[str, Tensor]:
        out = dict(self.backbone.named())
        out.update(self.trainable())
        return out

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        for name, t in self.state().items():
            if name not in arrays:
                raise KeyError(f"checkpoint lacks {name}")
            arr = np.asarray(arrays[name])
            if arr.shape != t.shape:
                raise ValueError(f"{name}: checkpoint shape {arr.shape} != model shape {t.shape}")
            t.data = arr.astype(self.dtype).copy()

    def zero_grad(self) -> None:
        for t in self.trainable().values():
            t.grad = None


# ---------------------------------------------------------------------------
# encoder / decoder


def encode_decode(
    corrs: Sequence[CorrelationTensor], params: EncoderDecoderParams, out_h: int, out_w: int
) -> SoftMask:
    """Compress each correlation over its support axis, convolve on the query grid and decode.

    Per query pixel the support axis is summarised by its mean, its max and
    P softmax-weighted averages, giving 2+P channels per level.
    """
    if not corrs:
        raise ValueError("encode_decode needs at least one correlation level")
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output size must be positive, got {out_h}×{out_w}")
    fine_h, fine_w = max((c.query_hw for c in corrs), key=lambda hw: hw[0] * hw[1])
    maps = []
    for lv, c in enumerate(corrs):
        hq, wq = c.query_hw
        cos = c.cos
        weights = softmax(params.compress[lv], axis=1)  # [P, Ns]
        desc = concat(
            [mean(cos, axis=1, keepdims=True), tmax(cos, axis=1, keepdims=True), matmul(cos, transpose(weights))],
            axis=1,
        )  # [Nq, 2+P]
        x = reshape(transpose(desc), (desc.shape[1], hq, wq))
        x = relu(conv2d(x, params.pivot_kernels[lv], params.pivot_biases[lv]))
        maps.append(bilinear_resize(x, fine_h, fine_w))
    x = concat(maps, axis=0)
    x = relu(conv2d(x, params.dec_kernels[0], params.dec_biases[0]))
    x = relu(conv2d(x, params.dec_kernels[1], params.dec_biases[1]))
    logits = bilinear_resize(conv2d(x, params.dec_kernels[2], params.dec_biases[2]), out_h, out_w)
    probs = softmax(logits, axis=0)[1]
    return SoftMask(probs, logits)


# ---------------------------------------------------------------------------
# prototypes


def query_prototypes(f_q: Tensor, soft: SoftMask, level: int = 0) -> PrototypePair:
    return PrototypePair(
        level,
        masked_average_pool(f_q, soft.probs),
        masked_average_pool(f_q, 1.0 - soft.probs),
    )


def fuse_prototypes(support: PrototypePair, query: PrototypePair, fusion) -> PrototypePair:
    """Convex blend alpha*support + (1-alpha)*query for both foreground and background.

    ``fusion`` is a FusionParam, a Tensor holding alpha, or a plain float.
    """
    if support.c_f.shape != query.c_f.shape or support.c_b.shape != query.c_b.shape:
        raise ValueError(f"prototype dims differ: {support.c_f.shape} vs {query.c_f.shape}")
    alpha = fusion.alpha if isinstance(fusion, FusionParam) else fusion
    if not isinstance(alpha, Tensor):
        alpha = Tensor(np.asarray(alpha, dtype=support.c_f.dtype))
    beta = 1.0 - alpha
    return PrototypePair(
        support.level,
        alpha * support.c_f + beta * query.c_f,
        alpha * support.c_b + beta * query.c_b,
    )


def _pool_or_global(f: Tensor, mask, what: str) -> Tensor:
    try:
        return masked_average_pool(f, mask)
    except EmptyRegionError as exc:
        log.warning("%s: %s; using global average pooling", what, exc)
        return mean(f, axis=(1, 2))


# ---------------------------------------------------------------------------
# full pipeline


class EpisodeError(RuntimeError):
    pass


@dataclass
class StageOutput:
    mask: SoftMask
    correlations: list[CorrelationTensor]
    prototypes: list[PrototypePair]


@dataclass
class EpisodeTrace:
    coarse: StageOutput
    fine: StageOutput
    alpha: Tensor = field(repr=False, default=None)


def _stage(model, protos, enh_q, enh_s_shots, out_hw) -> StageOutput:
    corrs = []
    for lv, proto in enumerate(protos):
        group = GROUPS[lv]
        w = compute_transform(proto, model.anchors.pair(group), model.cfg.ridge)
        r_q = residual_enhance(apply_transform(w, enh_q[lv]), enh_q[lv], lv)
        shot_corrs = []
        for shot in enh_s_shots:
            r_s = residual_enhance(apply_transform(w, shot[lv]), shot[lv], lv)
            shot_corrs.append(hypercorrelation(r_s, r_q))
        cos = shot_corrs[0].cos
        for extra in shot_corrs[1:]:
            cos = cos + extra.cos
        if len(shot_corrs) > 1:
            cos = cos * (1.0 / len(shot_corrs))
        corrs.append(CorrelationTensor(lv, cos, shot_corrs[0].query_hw, shot_corrs[0].support_hw))
    soft = encode_decode(corrs, model.encdec, *out_hw)
    return StageOutput(soft, corrs, list(protos))


def run_episode(model: FewShotSegmenter, episode, alpha_override=None) -> EpisodeTrace:
    """Both prediction stages for one episode, with intermediates kept for diagnostics."""
    try:
        return _run_episode(model, episode, alpha_override)
    except EpisodeError:
        raise
    except (ValueError, ArithmeticError) as exc:
        ep_id = getattr(episode, "episode_id", "?")
        raise EpisodeError(f"episode {ep_id}: {exc}") from exc


def _run_episode(model, episode, alpha_override) -> EpisodeTrace:
    dtype = model.dtype
    att = model.attention
    use_enhanced = model.cfg.prototypes_from == "enhanced"
    q_feats: PyramidFeatures = extract_features(model.backbone, np.asarray(episode.query_image, dtype=dtype))
    out_hw = tuple(np.shape(episode.query_image)[1:])
    n_levels = len(q_feats.levels)

    enh_q = [unified_attention(f, att) for f in q_feats.levels]
    q_proto_src = enh_q if use_enhanced else q_feats.levels

    enh_s_shots = []
    shot_protos: list[list[tuple[Tensor, Tensor]]] = [[] for _ in range(n_levels)]
    for image, mask in episode.supports:
        feats = extract_features(model.backbone, np.asarray(image, dtype=dtype))
        m = Tensor(np.asarray(mask, dtype=dtype))
        enh_s_shots.append([unified_attention(mask_features(f, m), att) for f in feats.levels])
        for lv, f in enumerate(feats.levels):
            src = unified_attention(f, att) if use_enhanced else f
            shot_protos[lv].append(
                (
                    _pool_or_global(src, m, f"support foreground, level {lv + 1}"),
                    _pool_or_global(src, 1.0 - m, f"support background, level {lv + 1}"),
                )
            )

    support_protos = []
    for lv, shots in enumerate(shot_protos):
        c_f, c_b = shots[0]
        for f_extra, b_extra in shots[1:]:
            c_f, c_b = c_f + f_extra, c_b + b_extra
        if len(shots) > 1:
            c_f, c_b = c_f * (1.0 / len(shots)), c_b * (1.0 / len(shots))
        support_protos.append(PrototypePair(lv, c_f, c_b))

    coarse = _stage(model, support_protos, enh_q, enh_s_shots, out_hw)

    alpha = model.fusion.alpha if alpha_override is None else Tensor(np.asarray(alpha_override, dtype=dtype))
    fused = [
        fuse_prototypes(sp, query_prototypes(q_proto_src[lv], coarse.mask, lv), alpha)
        for lv, sp in enumerate(support_protos)
    ]
    fine = _stage(model, fused, enh_q, enh_s_shots, out_hw)
    return EpisodeTrace(coarse, fine, alpha)


def segment_episode(model: FewShotSegmenter, episode, alpha_override=None) -> tuple[SoftMask, SoftMask]:
    trace = run_episode(model, episode, alpha_override)
    return trace.coarse.mask, trace.fine.mask

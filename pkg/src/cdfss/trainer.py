"""Episodic training, losses and metrics, gradient verification and parameter accounting."""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .backbone import GROUPS
from .episodes import EpisodeDataset, sample_episode
from .formats import load_checkpoint, save_checkpoint
from .segmenter import EpisodeError, FewShotSegmenter, ModelConfig, SoftMask, run_episode
from .tensor import DTYPES, Tensor, kink_trace, log_softmax, mean, tsum

log = logging.getLogger(__name__)

METRICS_HEADER = ("episode_id", "stage", "ce_loss", "iou")


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 10
    episodes_per_epoch: int = 100
    k_shot: int = 1
    seed: int = 42
    loss_weights: tuple[float, float] = (1.0, 1.0)
    dtype: str = "float64"
    domain: str = "source"

    def __post_init__(self):
        object.__setattr__(self, "loss_weights", tuple(float(w) for w in self.loss_weights))
        if not self.lr >= 0:
            raise ValueError("lr must be non-negative")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        if len(self.loss_weights) != 2 or min(self.loss_weights) < 0 or max(self.loss_weights) == 0:
            raise ValueError("loss_weights must be two non-negative floats, not both zero")
        if self.dtype not in DTYPES:
            raise ValueError(f"dtype must be one of {sorted(DTYPES)}")
        if self.k_shot < 1 or self.epochs < 0 or self.episodes_per_epoch < 1:
            raise ValueError("k_shot and episodes_per_epoch must be >= 1, epochs >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss_weights"] = list(self.loss_weights)
        return d


@dataclass
class MetricsRow:
    episode_id: str
    stage: str
    ce_loss: float
    iou: float

    def as_csv(self) -> list[str]:
        return [self.episode_id, self.stage, repr(self.ce_loss), repr(self.iou)]


# ---------------------------------------------------------------------------
# loss and metric


def cross_entropy(logits: Tensor, gt) -> Tensor:
    """Mean per-pixel negative log-likelihood of the binary ground truth under a 2-way softmax."""
    gt = np.asarray(gt.data if isinstance(gt, Tensor) else gt)
    if not np.all((gt == 0) | (gt == 1)):
        raise ValueError("ground-truth mask must be binary {0, 1}")
    if logits.shape != (2,) + gt.shape:
        raise ValueError(f"logits {logits.shape} do not match mask {gt.shape}")
    onehot = np.stack([1.0 - gt, gt]).astype(logits.dtype)
    return -mean(tsum(log_softmax(logits, axis=0) * Tensor(onehot), axis=0))


def iou(pred_binary, gt) -> float:
    pred = np.asarray(pred_binary) > 0.5
    truth = np.asarray(gt) > 0.5
    union = np.count_nonzero(pred | truth)
    if union == 0:
        return 1.0
    return np.count_nonzero(pred & truth) / union


def binarize(soft: SoftMask) -> np.ndarray:
    return (soft.probs.data > 0.5).astype(np.float64)


# ---------------------------------------------------------------------------
# optimizers


class Adam:
    def __init__(self, params: dict[str, Tensor], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * p.grad
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * p.grad**2
            p.data = p.data - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)

    def state(self) -> dict[str, np.ndarray]:
        out = {"opt.step": np.array(float(self.t))}
        for k in self.params:
            out[f"opt.m.{k}"] = self.m[k]
            out[f"opt.v.{k}"] = self.v[k]
        return out

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        self.t = int(arrays.get("opt.step", 0))
        for k in self.params:
            if f"opt.m.{k}" in arrays:
                self.m[k] = arrays[f"opt.m.{k}"].astype(self.m[k].dtype)
                self.v[k] = arrays[f"opt.v.{k}"].astype(self.v[k].dtype)


class SGD:
    def __init__(self, params: dict[str, Tensor], lr=1e-3):
        self.params, self.lr = params, lr

    def step(self) -> None:
        for p in self.params.values():
            if p.grad is not None:
                p.data = p.data - self.lr * p.grad

    def state(self) -> dict[str, np.ndarray]:
        return {}

    def load_state(self, arrays) -> None:
        pass


def make_optimizer(model: FewShotSegmenter, cfg: TrainConfig):
    params = model.trainable()
    if cfg.optimizer == "adam":
        return Adam(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    return SGD(params, cfg.lr)


# ---------------------------------------------------------------------------
# checkpoints


def checkpoint_entries(model: FewShotSegmenter, optimizer=None, epoch: int = 0) -> dict[str, np.ndarray]:
    out = {name: t.data for name, t in model.state().items()}
    out["train.epoch"] = np.array(float(epoch))
    if optimizer is not None:
        out.update(optimizer.state())
    return out


def infer_model_config(arrays: dict[str, np.ndarray], **overrides) -> ModelConfig:
    """Recover shape-determined model settings from checkpoint tensor shapes."""
    k1 = arrays["backbone.level1.kernel"]
    comp = arrays["seg.level1.compress"]
    piv = arrays["seg.level1.pivot.kernel"]
    cfg = dict(
        image_size=int(round(np.sqrt(comp.shape[1]))),
        in_channels=int(k1.shape[1]),
        base_channels=int(k1.shape[0]),
        attn_k=int(arrays["seat.attn.kernel"].shape[-1]),
        pooled=int(comp.shape[0]),
        pivot_channels=int(piv.shape[0]),
        hidden=int(arrays["seg.dec.conv1.kernel"].shape[0]),
        dtype="float32" if k1.dtype == np.float32 else "float64",
    )
    cfg.update(overrides)
    return ModelConfig(**cfg)


def load_model(path, model_cfg: ModelConfig | None = None) -> tuple[FewShotSegmenter, int]:
    arrays = load_checkpoint(path)
    cfg = model_cfg if model_cfg is not None else infer_model_config(arrays)
    model = FewShotSegmenter(cfg)
    model.load_state(arrays)
    return model, int(arrays.get("train.epoch", 0))


# ---------------------------------------------------------------------------
# training


def episode_loss(model, episode, weights=(1.0, 1.0)):
    trace = run_episode(model, episode)
    ce_c = cross_entropy(trace.coarse.mask.logits, episode.query_mask)
    ce_f = cross_entropy(trace.fine.mask.logits, episode.query_mask)
    total = ce_c * weights[0] + ce_f * weights[1]
    return total, trace, ce_c, ce_f


def _param_norms(model) -> str:
    return ", ".join(f"{k}={np.linalg.norm(t.data):.4g}" for k, t in model.trainable().items())


@dataclass
class TrainResult:
    epoch_losses: list[float] = field(default_factory=list)
    rows: list[MetricsRow] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)


def train(
    model: FewShotSegmenter,
    ds: EpisodeDataset,
    cfg: TrainConfig,
    out_dir=None,
    start_epoch: int = 0,
    optimizer=None,
) -> TrainResult:
    """Episodic training on ``cfg.domain``; writes per-epoch checkpoints and metrics.csv when ``out_dir`` is set."""
    if cfg.domain not in ds.domains():
        raise ValueError(f"dataset has no domain {cfg.domain!r}")
    opt = optimizer if optimizer is not None else make_optimizer(model, cfg)
    out = Path(out_dir) if out_dir is not None else None
    result = TrainResult()
    writer = None
    fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        fh = open(out / "metrics.csv", "w", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_HEADER)
    try:
        for epoch in range(start_epoch + 1, start_epoch + cfg.epochs + 1):
            losses = []
            for i in range(cfg.episodes_per_epoch):
                ep = sample_episode(ds, cfg.domain, cfg.k_shot, (cfg.seed, epoch, i))
                ep.episode_id = f"e{epoch}-{i}"
                model.zero_grad()
                try:
                    total, trace, ce_c, ce_f = episode_loss(model, ep, cfg.loss_weights)
                except EpisodeError as exc:
                    if all(np.all(np.isfinite(t.data)) for t in model.trainable().values()):
                        raise
                    raise TrainingDiverged(f"non-finite parameters at episode {ep.episode_id}; parameter norms: {_param_norms(model)}") from exc
                if not np.isfinite(total.item()):
                    raise TrainingDiverged(f"non-finite loss at episode {ep.episode_id}; parameter norms: {_param_norms(model)}")
                total.backward()
                opt.step()
                for name in model.anchors.renormalize_degenerate():
                    log.warning("episode %s: %s underflowed and was re-initialized", ep.episode_id, name)
                losses.append(total.item())
                for stage, ce, out_stage in (("coarse", ce_c, trace.coarse), ("fine", ce_f, trace.fine)):
                    row = MetricsRow(ep.episode_id, stage, ce.item(), iou(binarize(out_stage.mask), ep.query_mask))
                    result.rows.append(row)
                    if writer is not None:
                        writer.writerow(row.as_csv())
            result.epoch_losses.append(float(np.mean(losses)))
            log.info("epoch %d mean loss %.6f", epoch, result.epoch_losses[-1])
            if out is not None:
                path = out / f"ckpt_epoch{epoch}.rtck"
                save_checkpoint(path, checkpoint_entries(model, opt, epoch))
                result.checkpoints.append(path)
                fh.flush()
    finally:
        if fh is not None:
            fh.close()
    return result


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalResult:
    mean_iou: float
    mean_coarse_iou: float
    rows: list[MetricsRow]
    fine_probs: list[np.ndarray] = field(default_factory=list, repr=False)


def _eval_one(model, ds, domain_id, k, seed, i):
    ep = sample_episode(ds, domain_id, k, (seed, i))
    ep.episode_id = f"{domain_id}-{i}"
    trace = run_episode(model, ep)
    rows = []
    for stage, out in (("coarse", trace.coarse), ("fine", trace.fine)):
        ce = cross_entropy(out.mask.logits, ep.query_mask).item()
        rows.append(MetricsRow(ep.episode_id, stage, ce, iou(binarize(out.mask), ep.query_mask)))
    return rows, trace.fine.mask.probs.data


def evaluate(model, ds: EpisodeDataset, domain_id: str, n_episodes: int, k: int = 1, seed: int = 0, jobs: int = 1) -> EvalResult:
    """Mean fine-stage IoU over ``n_episodes`` seeded episodes; episode i uses RNG stream (seed, i)."""
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    ds.classes(domain_id)
    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            outs = list(pool.map(lambda i: _eval_one(model, ds, domain_id, k, seed, i), range(n_episodes)))
    else:
        outs = [_eval_one(model, ds, domain_id, k, seed, i) for i in range(n_episodes)]
    rows = [r for rs, _ in outs for r in rs]
    fine = [r.iou for r in rows if r.stage == "fine"]
    coarse = [r.iou for r in rows if r.stage == "coarse"]
    return EvalResult(float(np.mean(fine)), float(np.mean(coarse)), rows, [p for _, p in outs])


def write_metrics(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for r in rows:
            w.writerow(r.as_csv())


# ---------------------------------------------------------------------------
# gradient check


@dataclass
class GroupReport:
    name: str
    max_rel_error: float
    n_checked: int
    n_kinked: int


@dataclass
class GradcheckReport:
    groups: list[GroupReport]
    tolerance: float

    @property
    def passed(self) -> bool:
        return all(g.max_rel_error <= self.tolerance for g in self.groups)

    def lines(self) -> list[str]:
        out = []
        for g in self.groups:
            status = "ok" if g.max_rel_error <= self.tolerance else "FAIL"
            out.append(f"{g.name:28s} max_rel_err={g.max_rel_error:.3e} coords={g.n_checked} kinked={g.n_kinked} {status}")
        return out


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    """|a - n| / max(|a|, |n|, floor); the floor keeps near-zero gradients from dividing noise by noise."""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def gradcheck(
    model: FewShotSegmenter,
    episode,
    tolerance: float = 1e-4,
    coords_per_group: int = 20,
    step: float = 1e-5,
    seed: int = 0,
    weights=(1.0, 1.0),
    floor: float = 1e-6,
    loss_fn=None,
) -> GradcheckReport:
    """Compare backprop gradients with central differences on sampled coordinates of every trainable tensor.

    When the +h and -h evaluations take different ReLU/argmax branches the
    difference straddles a kink; h is shrunk tenfold (twice at most) and, if
    the kink persists, the coordinate is replaced by another one and counted
    in ``n_kinked``.
    """
    if model.dtype != np.float64:
        raise ValueError("gradcheck requires a float64 model")
    if loss_fn is None:
        def loss_fn():
            return episode_loss(model, episode, weights)[0]

    model.zero_grad()
    loss_fn().backward()
    params = model.trainable()
    analytic = {k: (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for k, p in params.items()}
    rng = np.random.default_rng(seed)

    def probe(p, idx, delta):
        old = p.data[idx]
        p.data[idx] = old + delta
        with kink_trace() as trace:
            val = loss_fn().item()
        p.data[idx] = old
        return val, tuple(trace)

    groups = []
    for name, p in params.items():
        order = rng.permutation(p.size)
        want = min(coords_per_group, p.size)
        worst, checked, kinked = 0.0, 0, 0
        for flat in order:
            if checked >= want:
                break
            idx = np.unravel_index(int(flat), p.shape)
            numeric = None
            for h in (step, step / 10, step / 100):
                plus, sig_p = probe(p, idx, h)
                minus, sig_m = probe(p, idx, -h)
                if sig_p == sig_m:
                    numeric = (plus - minus) / (2 * h)
                    break
            if numeric is None:
                kinked += 1
                continue
            worst = max(worst, relative_error(float(analytic[name][idx]), numeric, floor))
            checked += 1
        groups.append(GroupReport(name, worst, checked, kinked))
    model.zero_grad()
    return GradcheckReport(groups, tolerance)


# ---------------------------------------------------------------------------
# parameter accounting


def parameter_count(model: FewShotSegmenter) -> int:
    """Trainable scalars outside the frozen backbone."""
    return int(sum(t.size for t in model.trainable().values()))


def closed_form_parameter_count(cfg: ModelConfig) -> int:
    b, k, p, pc, h, s = cfg.base_channels, cfg.attn_k, cfg.pooled, cfg.pivot_channels, cfg.hidden, cfg.image_size
    anchors = 2 * (b + 2 * b + 4 * b)
    attention = 2 * k * k + 1
    compress = p * (s * s + (s // 2) ** 2 + (s // 4) ** 2)
    pivots = 3 * (pc * (2 + p) * 9 + pc)
    decoder = (h * 3 * pc * 9 + h) + (h * h * 9 + h) + (2 * h + 2)
    return anchors + attention + compress + pivots + decoder + 1


__all__ = [
    "GROUPS",
    "TrainConfig",
    "MetricsRow",
    "cross_entropy",
    "iou",
    "train",
    "evaluate",
    "gradcheck",
    "parameter_count",
    "closed_form_parameter_count",
]

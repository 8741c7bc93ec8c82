import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cdfss.formats import load_checkpoint
from cdfss.segmenter import FewShotSegmenter, ModelConfig
from cdfss.tensor import Tensor
from cdfss.trainer import (
    Adam,
    TrainConfig,
    TrainingDiverged,
    checkpoint_entries,
    cross_entropy,
    evaluate,
    gradcheck,
    iou,
    load_model,
    parameter_count,
    relative_error,
    train,
)

from oracles import cross_entropy_loops, iou_counts


def t(x, grad=False):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad)


def snapshot(params):
    return {k: p.data.tobytes() for k, p in params.items()}


# -- cross-entropy ----------------------------------------------------------------


def test_uniform_logits_give_ln2():
    rng = np.random.default_rng(0)
    for _ in range(5):
        gt = (rng.uniform(size=(5, 4)) > 0.5).astype(float)
        logits = np.broadcast_to(rng.standard_normal((1, 5, 4)), (2, 5, 4)).copy()
        assert cross_entropy(t(logits), gt).item() == pytest.approx(math.log(2), abs=1e-12)


def test_saturated_correct_logits():
    gt = np.zeros((4, 4))
    gt[1:3, 1:3] = 1
    logits = np.zeros((2, 4, 4))
    logits[1][gt == 1] = 20
    logits[0][gt == 0] = 20
    assert cross_entropy(t(logits), gt).item() <= 1e-8


def test_cross_entropy_matches_oracle():
    rng = np.random.default_rng(1)
    for _ in range(100):
        logits = rng.standard_normal((2, 3, 3)) * 3
        gt = (rng.uniform(size=(3, 3)) > 0.5).astype(float)
        assert abs(cross_entropy(t(logits), gt).item() - cross_entropy_loops(logits, gt)) <= 1e-12


def test_cross_entropy_rejects_non_binary():
    with pytest.raises(ValueError):
        cross_entropy(t(np.zeros((2, 2, 2))), np.full((2, 2), 0.5))


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), scale=st.floats(0.0, 50.0))
def test_cross_entropy_nonnegative(seed, scale):
    rng = np.random.default_rng(seed)
    logits = rng.standard_normal((2, 4, 4)) * scale
    gt = (rng.uniform(size=(4, 4)) > 0.5).astype(float)
    assert cross_entropy(t(logits), gt).item() >= 0


# -- IoU --------------------------------------------------------------------------


def test_iou_examples():
    a = np.zeros((4, 4))
    a[:2] = 1
    assert iou(a, a) == 1.0
    b = np.zeros((4, 4))
    b[2:] = 1
    assert iou(a, b) == 0.0
    gt = np.zeros((4, 4))
    gt[:, :2] = 1
    half = np.zeros((4, 4))
    half[:2, :2] = 1
    assert iou(half, gt) == 0.5
    assert iou(np.zeros((4, 4)), np.zeros((4, 4))) == 1.0


def test_iou_matches_counting_oracle_and_is_symmetric():
    rng = np.random.default_rng(2)
    for _ in range(100):
        a = (rng.uniform(size=(5, 5)) > 0.5).astype(float)
        b = (rng.uniform(size=(5, 5)) > 0.5).astype(float)
        assert abs(iou(a, b) - iou_counts(a, b)) <= 1e-12
        assert iou(a, b) == iou(b, a)


# -- training ---------------------------------------------------------------------


def test_zero_learning_rate_is_identity(ds16):
    model = FewShotSegmenter(ModelConfig(image_size=16))
    before = snapshot(model.state())
    train(model, ds16, TrainConfig(lr=0.0, epochs=1, episodes_per_epoch=5))
    assert snapshot(model.state()) == before


def test_backbone_frozen_and_heads_updated(ds16):
    model = FewShotSegmenter(ModelConfig(image_size=16))
    bb = snapshot(model.backbone.named())
    heads = snapshot(model.trainable())
    train(model, ds16, TrainConfig(epochs=1, episodes_per_epoch=5))
    assert snapshot(model.backbone.named()) == bb
    after = snapshot(model.trainable())
    assert all(after[k] != heads[k] for k in heads)


def test_training_writes_checkpoints_and_rows(ds16, tmp_path):
    model = FewShotSegmenter(ModelConfig(image_size=16))
    res = train(model, ds16, TrainConfig(epochs=2, episodes_per_epoch=3), tmp_path)
    assert [p.name for p in res.checkpoints] == ["ckpt_epoch1.rtck", "ckpt_epoch2.rtck"]
    lines = (tmp_path / "metrics.csv").read_text().splitlines()
    assert lines[0] == "episode_id,stage,ce_loss,iou"
    assert len(lines) == 1 + 2 * 3 * 2
    for r in res.rows:
        assert r.ce_loss >= 0 and 0 <= r.iou <= 1
    arrays = load_checkpoint(res.checkpoints[-1])
    assert any(k.startswith("opt.") for k in arrays)
    loaded, epoch = load_model(res.checkpoints[-1])
    assert epoch == 2
    assert snapshot(loaded.state()) == snapshot(model.state())


def test_training_is_deterministic(ds16):
    runs = []
    for _ in range(2):
        model = FewShotSegmenter(ModelConfig(image_size=16))
        res = train(model, ds16, TrainConfig(epochs=1, episodes_per_epoch=4))
        runs.append((res.epoch_losses, snapshot(model.state())))
    assert runs[0] == runs[1]


def test_non_finite_loss_aborts(ds16):
    model = FewShotSegmenter(ModelConfig(image_size=16))
    model.trainable()["seg.dec.out.bias"].data[:] = np.nan
    with pytest.raises(TrainingDiverged, match="e1-0"):
        train(model, ds16, TrainConfig(epochs=1, episodes_per_epoch=2))


def test_invalid_train_config():
    with pytest.raises(ValueError):
        TrainConfig(lr=-1.0)
    with pytest.raises(ValueError):
        TrainConfig(loss_weights=(0.0, 0.0))
    with pytest.raises(ValueError):
        TrainConfig(optimizer="rmsprop")


def test_adam_resume_matches_uninterrupted(ds16, tmp_path):
    straight = FewShotSegmenter(ModelConfig(image_size=16))
    train(straight, ds16, TrainConfig(epochs=2, episodes_per_epoch=3))

    first = FewShotSegmenter(ModelConfig(image_size=16))
    res = train(first, ds16, TrainConfig(epochs=1, episodes_per_epoch=3), tmp_path)
    arrays = load_checkpoint(res.checkpoints[0])
    resumed, epoch = load_model(res.checkpoints[0])
    opt = Adam(resumed.trainable())
    opt.load_state(arrays)
    train(resumed, ds16, TrainConfig(epochs=1, episodes_per_epoch=3), start_epoch=epoch, optimizer=opt)
    assert snapshot(resumed.state()) == snapshot(straight.state())


# -- evaluation -------------------------------------------------------------------


def test_evaluate_rejects_zero_episodes(model16, ds16):
    with pytest.raises(ValueError):
        evaluate(model16, ds16, "target", 0)


def test_evaluate_deterministic_and_job_independent(model16, ds16):
    a = evaluate(model16, ds16, "target", 6, 1, 3)
    b = evaluate(model16, ds16, "target", 6, 1, 3)
    c = evaluate(model16, ds16, "target", 6, 1, 3, jobs=3)
    assert a.mean_iou == b.mean_iou == c.mean_iou
    assert [r.iou for r in a.rows] == [r.iou for r in c.rows]
    assert len(a.rows) == 12


# -- gradcheck --------------------------------------------------------------------


def test_relative_error_floor():
    assert relative_error(1e-12, -1e-12) == pytest.approx(2e-6)
    assert relative_error(2.0, 1.0) == 0.5


def test_gradcheck_constant_loss_passes(model16, episode16):
    report = gradcheck(model16, episode16, loss_fn=lambda: t(3.0) + t(0.0))
    assert report.passed
    assert all(g.max_rel_error == 0.0 for g in report.groups)


def test_gradcheck_reports_every_group(model16, episode16):
    report = gradcheck(model16, episode16, coords_per_group=3)
    assert [g.name for g in report.groups] == list(model16.trainable())
    assert "fusion.alpha_raw" in report.lines()[-1]
    strict = gradcheck(model16, episode16, tolerance=0.0, coords_per_group=3)
    assert not strict.passed


def test_gradcheck_requires_float64(episode16):
    with pytest.raises(ValueError):
        gradcheck(FewShotSegmenter(ModelConfig(image_size=16, dtype="float32")), episode16)


# -- parameter accounting -----------------------------------------------------------


def closed_form(base=8, k=3, pooled=4, pivot=8, hidden=16, size=32):
    dims = [base, 2 * base, 4 * base]
    anchors = sum(2 * d for d in dims)
    attention = 2 * k * k + 1
    pixels = sum((size // 2**lv) ** 2 for lv in range(3))
    encoder = pooled * pixels + 3 * (pivot * (pooled + 2) * 9 + pivot)
    decoder = hidden * 3 * pivot * 9 + hidden + hidden * hidden * 9 + hidden + hidden * 2 + 2
    return anchors + attention + encoder + decoder + 1


def test_parameter_count_default_matches_closed_form():
    assert parameter_count(FewShotSegmenter(ModelConfig())) == closed_form() == 12654


def test_alpha_counts_exactly_one():
    model = FewShotSegmenter(ModelConfig(image_size=16))
    assert model.trainable()["fusion.alpha_raw"].size == 1


def test_doubling_base_channels_only_doubles_anchors():
    small = FewShotSegmenter(ModelConfig(image_size=16, base_channels=8))
    big = FewShotSegmenter(ModelConfig(image_size=16, base_channels=16))

    def anchor_total(m):
        return sum(p.size for k, p in m.trainable().items() if k.startswith("seat.anchor."))

    assert anchor_total(big) == 2 * anchor_total(small) == 2 * 2 * (8 + 16 + 32)
    assert parameter_count(big) - parameter_count(small) == anchor_total(small)


def test_checkpoint_entries_contain_epoch(model16):
    entries = checkpoint_entries(model16, Adam(model16.trainable()), 4)
    assert entries["train.epoch"] == 4
    assert "opt.step" in entries

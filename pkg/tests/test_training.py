import csv
import math

import numpy as np
import pytest
import torch

from protoseg.config import OptimizerConfig, PrototypeConfig, TrainConfig
from protoseg.encoder import build_model
from protoseg.episodes import Episode
from protoseg.fewshot import segment_query
from protoseg.training import (
    LossReport,
    TrainingError,
    alignment_loss,
    checkpoint_meta,
    create_optimizer,
    load_checkpoint,
    run_training,
    save_checkpoint,
    segmentation_loss,
    train_episode,
)

from helpers import blob_image, small_window, tiny_cnn_config, weights_digest


def make_episode(seed=0, size=32):
    rng = np.random.default_rng(seed)
    img, mask = blob_image((size, size), center=(13, 14), radius=7)
    img = np.clip(img + rng.normal(0, 0.01, img.shape), 0, 1).astype(np.float32)
    q_img, q_mask = blob_image((size, size), center=(16, 18), radius=6)
    q_img = np.clip(q_img + rng.normal(0, 0.01, img.shape), 0, 1).astype(np.float32)
    return Episode(
        support=[(img, mask)],
        query_image=q_img,
        query_label=q_mask,
        class_id=1,
        source=("p000", 3),
    )


def train_cfg(**kw):
    base = dict(
        episodes=4,
        optimizer=OptimizerConfig(lr=0.01, momentum=0.9),
        reg_weight=1.0,
        checkpoint_every=2,
        seed=0,
    )
    base.update(kw)
    return TrainConfig(**base)


def test_uniform_probabilities_give_log2():
    probs = torch.full((2, 4, 4), 0.5)
    target = np.zeros((4, 4), dtype=np.int64)
    loss = segmentation_loss(probs, target)
    assert float(loss) == pytest.approx(math.log(2.0), abs=1e-6)


def test_perfect_prediction_near_zero():
    probs = torch.zeros(2, 4, 4)
    probs[1] = 1.0
    target = np.ones((4, 4), dtype=np.int64)
    assert float(segmentation_loss(probs, target)) == pytest.approx(0.0, abs=1e-6)


def test_loss_uses_class_id_channels():
    probs = torch.zeros(2, 2, 2)
    probs[0] = 0.9
    probs[1] = 0.1
    target = np.full((2, 2), 7)
    # channel order (0, 7): class 7 sits in the low-probability channel
    loss = segmentation_loss(probs, target, class_ids=[0, 7])
    assert float(loss) == pytest.approx(-math.log(0.1), abs=1e-5)


def test_labels_outside_class_set_error():
    probs = torch.full((2, 2, 2), 0.5)
    target = np.array([[0, 1], [2, 0]])
    with pytest.raises(TrainingError, match=r"outside the class set: \[2\]"):
        segmentation_loss(probs, target)


def test_loss_floor_keeps_finite():
    probs = torch.zeros(2, 2, 2)  # exact zero probability everywhere
    target = np.zeros((2, 2), dtype=np.int64)
    loss = segmentation_loss(probs, target)
    assert torch.isfinite(loss)
    assert float(loss) == pytest.approx(-math.log(1e-8), rel=1e-3)


def test_target_shape_mismatch():
    with pytest.raises(TrainingError, match="does not match"):
        segmentation_loss(torch.full((2, 4, 4), 0.5), np.zeros((3, 3), dtype=np.int64))


def test_alignment_loss_roundtrip_small():
    """If the query is the support image and the prediction is its own label,
    swapping roles should segment the support well, giving a small loss."""
    torch.manual_seed(0)
    state = build_model(tiny_cnn_config(), seed=0)
    ep = make_episode()
    fwd = segment_query(
        state, [(ep.query_image, ep.query_label)], ep.query_image, state.config, small_window()
    )
    loss = alignment_loss(fwd, [ep.query_label], small_window()).detach()
    assert torch.isfinite(loss)
    assert float(loss) < math.log(2.0) + 0.2


def test_alignment_loss_single_class_warns_zero():
    torch.manual_seed(0)
    state = build_model(tiny_cnn_config(), seed=0)
    flat = np.zeros((32, 32), dtype=np.float32)
    mask = np.zeros((32, 32), dtype=bool)
    mask[8:20, 8:20] = True
    fwd = segment_query(state, [(flat, mask)], flat, state.config, small_window())
    # force a single-class hard prediction
    fwd.result.probabilities.data[0] = 1.0
    fwd.result.probabilities.data[1] = 0.0
    with pytest.warns(UserWarning, match="single-class"):
        loss = alignment_loss(fwd, [mask], small_window())
    assert float(loss) == 0.0


def test_zero_lr_keeps_weights_and_counts_steps():
    state = build_model(tiny_cnn_config(), seed=0)
    before = weights_digest(state.model)
    cfg = train_cfg(optimizer=OptimizerConfig(lr=0.0, momentum=0.0))
    report = train_episode(state, make_episode(), cfg, small_window())
    assert weights_digest(state.model) == before
    assert state.step == 1
    assert isinstance(report, LossReport)
    assert report.episode_id == 0


def test_same_seed_same_losses():
    reports = []
    for _ in range(2):
        state = build_model(tiny_cnn_config(), seed=0)
        cfg = train_cfg()
        r = [train_episode(state, make_episode(i), cfg, small_window()) for i in range(3)]
        reports.append([(x.seg_loss, x.reg_loss, x.total) for x in r])
    assert reports[0] == reports[1]


def test_reg_weight_zero_skips_alignment():
    state = build_model(tiny_cnn_config(), seed=0)
    cfg = train_cfg(reg_weight=0.0)
    report = train_episode(state, make_episode(), cfg, small_window())
    assert report.reg_loss == 0.0
    assert report.total == report.seg_loss


def test_total_is_weighted_sum():
    state = build_model(tiny_cnn_config(), seed=0)
    cfg = train_cfg(reg_weight=0.5)
    report = train_episode(state, make_episode(), cfg, small_window())
    assert report.total == pytest.approx(report.seg_loss + 0.5 * report.reg_loss, rel=1e-5)
    assert report.reg_loss > 0.0


def test_nonfinite_loss_raises_with_step():
    state = build_model(tiny_cnn_config(), seed=0)
    with torch.no_grad():
        next(state.model.parameters()).fill_(float("nan"))
    with pytest.raises(TrainingError, match="step 0"):
        train_episode(state, make_episode(), train_cfg(reg_weight=0.0), small_window())


def test_missing_query_label_rejected():
    state = build_model(tiny_cnn_config(), seed=0)
    ep = make_episode()
    ep.query_label = None
    with pytest.raises(TrainingError, match="query label"):
        train_episode(state, ep, train_cfg(), small_window())


def test_unsupported_optimizer_kind():
    state = build_model(tiny_cnn_config(), seed=0)
    with pytest.raises(TrainingError, match="adamw"):
        create_optimizer(state, train_cfg(optimizer=OptimizerConfig(kind="adamw")))


def test_scheduler_decays_lr():
    state = build_model(tiny_cnn_config(), seed=0)
    cfg = train_cfg(
        optimizer=OptimizerConfig(lr=0.1, momentum=0.0, decay_every=1, decay_gamma=0.5)
    )
    create_optimizer(state, cfg)
    assert state.scheduler is not None
    train_episode(state, make_episode(), cfg, small_window())
    assert state.optimizer.param_groups[0]["lr"] == pytest.approx(0.05)


def sampler_for(episodes):
    def sampler(rng):
        i = int(rng.integers(0, len(episodes)))
        return episodes[i]

    return sampler


def test_run_training_artifacts(tmp_path):
    state = build_model(tiny_cnn_config(), seed=0)
    cfg = train_cfg(episodes=4, checkpoint_every=2)
    eps = [make_episode(i) for i in range(2)]
    metrics = run_training(state, sampler_for(eps), cfg, tmp_path, small_window(), fold="group0")
    with open(metrics) as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["episode_id", "seg_loss", "reg_loss", "total", "wall_time"]
    assert [r[0] for r in rows[1:]] == ["0", "1", "2", "3"]
    with open(tmp_path / "episode_sources.csv") as f:
        srows = list(csv.reader(f))
    assert srows[0] == ["episode_id", "patient", "z_index", "class_id"]
    assert len(srows) == 5
    assert {r[1] for r in srows[1:]} == {"p000"}
    assert (tmp_path / "checkpoint_000002").is_dir()
    assert (tmp_path / "checkpoint_000004").is_dir()
    assert (tmp_path / "checkpoint_final" / "weights.pt").exists()
    meta = checkpoint_meta(tmp_path / "checkpoint_final")
    assert meta["step"] == 4
    assert meta["fold"] == "group0"
    assert meta["encoder"]["backbone"] == "dilated_cnn"


def test_resume_appends_and_restores(tmp_path):
    eps = [make_episode(i) for i in range(2)]
    state = build_model(tiny_cnn_config(), seed=0)
    cfg = train_cfg(episodes=2, checkpoint_every=2)
    run_training(state, sampler_for(eps), cfg, tmp_path, small_window())
    digest_after_2 = weights_digest(state.model)

    resumed = build_model(tiny_cnn_config(), seed=1)
    cfg4 = train_cfg(episodes=4, checkpoint_every=2)
    load_checkpoint(resumed, tmp_path / "checkpoint_final", cfg4)
    assert resumed.step == 2
    assert weights_digest(resumed.model) == digest_after_2
    # momentum buffers travel with the checkpoint
    opt_state = resumed.optimizer.state_dict()["state"]
    assert any("momentum_buffer" in v for v in opt_state.values())
    run_training(resumed, sampler_for(eps), cfg4, tmp_path, small_window())
    assert resumed.step == 4
    with open(tmp_path / "metrics.csv") as f:
        rows = list(csv.reader(f))
    assert [r[0] for r in rows[1:]] == ["0", "1", "2", "3"]
    assert rows.count(["episode_id", "seg_loss", "reg_loss", "total", "wall_time"]) == 1


def test_save_load_checkpoint_roundtrip(tmp_path):
    state = build_model(tiny_cnn_config(), seed=0)
    create_optimizer(state, train_cfg())
    state.step = 7
    save_checkpoint(state, tmp_path / "ck", fold="group1")
    fresh = build_model(tiny_cnn_config(), seed=3)
    assert weights_digest(fresh.model) != weights_digest(state.model)
    load_checkpoint(fresh, tmp_path / "ck")
    assert weights_digest(fresh.model) == weights_digest(state.model)
    assert fresh.step == 7


def test_missing_checkpoint_errors(tmp_path):
    state = build_model(tiny_cnn_config(), seed=0)
    with pytest.raises(TrainingError, match="run train first"):
        load_checkpoint(state, tmp_path / "nothing")
    with pytest.raises(TrainingError, match="run train first"):
        checkpoint_meta(tmp_path / "nothing")


def test_draw_episode_gives_up_on_empty_labels(tmp_path):
    state = build_model(tiny_cnn_config(), seed=0)
    bad = make_episode()
    bad.query_label = np.zeros_like(bad.query_label)

    def sampler(rng):
        return bad

    with pytest.raises(TrainingError, match="foreground"):
        run_training(state, sampler, train_cfg(episodes=1), tmp_path, small_window())

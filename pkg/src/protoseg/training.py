"""Episodic training: losses, the per-episode step, and the outer loop."""

import csv
import json
import time
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from .config import PrototypeConfig, TrainConfig, config_to_dict
from .encoder import ModelState, trainable_parameters
from .episodes import Episode
from .fewshot import BACKGROUND, classify_features, mask_to_grid, segment_query
from .prototype import assemble_prototype_set

_LOG_FLOOR = 1e-8


class TrainingError(Exception):
    pass


@dataclass
class LossReport:
    seg_loss: float
    reg_loss: float
    total: float
    episode_id: int = 0


def segmentation_loss(probabilities: torch.Tensor, target, class_ids=None) -> torch.Tensor:
    """Cross-entropy of a probability map against an integer label map.

    ``target`` holds class ids; ``class_ids`` gives the channel ordering
    (defaults to 0..C-1). Logs are floored to keep the loss finite.
    """
    if probabilities.ndim != 3:
        raise TrainingError(f"expected (C, H, W) probabilities, got {tuple(probabilities.shape)}")
    c = probabilities.shape[0]
    if class_ids is None:
        class_ids = list(range(c))
    if len(class_ids) != c:
        raise TrainingError(f"{c} channels but {len(class_ids)} class ids")
    t = target
    if torch.is_tensor(t):
        t = t.detach().cpu().numpy()
    t = np.asarray(t)
    if t.shape != tuple(probabilities.shape[1:]):
        raise TrainingError(
            f"target shape {t.shape} does not match probabilities {tuple(probabilities.shape[1:])}"
        )
    index = np.full(t.shape, -1, dtype=np.int64)
    for ch, cid in enumerate(class_ids):
        index[t == cid] = ch
    if (index < 0).any():
        bad = sorted(int(v) for v in set(np.unique(t)) - set(class_ids))
        raise TrainingError(f"target contains labels outside the class set: {bad}")
    idx = torch.from_numpy(index)
    picked = probabilities.gather(0, idx.unsqueeze(0))[0]
    return -(picked.clamp(min=_LOG_FLOOR).log()).mean()


def alignment_loss(
    forward,
    support_mask,
    prototype_cfg: PrototypeConfig,
    class_id: int = 1,
) -> torch.Tensor:
    """Swap roles: prototypes from the query's own hard prediction segment the
    support image, scored against the support's original label.

    Returns zero (with a warning) when the query prediction has no foreground
    to build prototypes from.
    """
    query_fmap = forward.query_features
    pred = forward.result.prediction  # hard labels at query resolution
    fg = mask_to_grid(pred == class_id, query_fmap.spatial_shape)
    if not fg.any() or fg.all():
        warnings.warn(
            "query prediction is single-class on the feature grid; "
            "skipping alignment term"
        )
        return torch.zeros((), dtype=query_fmap.values.dtype)
    protos = assemble_prototype_set(
        {BACKGROUND: [(query_fmap.values, ~fg)], class_id: [(query_fmap.values, fg)]},
        window=prototype_cfg.window,
        coverage_threshold=prototype_cfg.coverage_threshold,
    )
    total = None
    for fmap, mask in zip(forward.support_features, support_mask):
        result = classify_features(fmap.values, protos, np.asarray(mask).shape)
        target = np.where(np.asarray(mask), class_id, BACKGROUND)
        loss = segmentation_loss(result.probabilities, target, result.class_ids)
        total = loss if total is None else total + loss
    return total / len(forward.support_features)


def create_optimizer(state: ModelState, cfg: TrainConfig) -> ModelState:
    params = trainable_parameters(state)
    if not params:
        raise TrainingError("model has no trainable parameters")
    opt = cfg.optimizer
    if opt.kind != "sgd":
        raise TrainingError(f"unsupported optimizer {opt.kind!r}")
    state.optimizer = torch.optim.SGD(params, lr=opt.lr, momentum=opt.momentum)
    if opt.decay_every and opt.decay_every > 0:
        state.scheduler = torch.optim.lr_scheduler.StepLR(
            state.optimizer, step_size=opt.decay_every, gamma=opt.decay_gamma
        )
    return state


def train_episode(
    state: ModelState,
    episode: Episode,
    cfg: TrainConfig,
    prototype_cfg: Optional[PrototypeConfig] = None,
) -> LossReport:
    """One optimization step on one episode."""
    if prototype_cfg is None:
        prototype_cfg = PrototypeConfig()
    if state.optimizer is None:
        create_optimizer(state, cfg)
    if episode.query_label is None:
        raise TrainingError("training episode is missing a query label")
    state.model.train()
    forward = segment_query(
        state,
        episode.support,
        episode.query_image,
        state.config,
        prototype_cfg,
        class_id=episode.class_id,
    )
    target = np.where(np.asarray(episode.query_label), episode.class_id, BACKGROUND)
    seg = segmentation_loss(forward.result.probabilities, target, forward.result.class_ids)
    if cfg.reg_weight != 0:
        support_masks = [np.asarray(m) for _, m in episode.support]
        reg = alignment_loss(forward, support_masks, prototype_cfg, episode.class_id)
        total = seg + cfg.reg_weight * reg
        reg_value = float(reg.detach())
    else:
        reg_value = 0.0
        total = seg
    if not torch.isfinite(total):
        raise TrainingError(f"non-finite loss at step {state.step}")
    state.optimizer.zero_grad()
    total.backward()
    if cfg.grad_clip is not None:
        torch.nn.utils.clip_grad_norm_(trainable_parameters(state), cfg.grad_clip)
    state.optimizer.step()
    if state.scheduler is not None:
        state.scheduler.step()
    state.step += 1
    return LossReport(
        seg_loss=float(seg.detach()),
        reg_loss=reg_value,
        total=float(total.detach()),
        episode_id=state.step - 1,
    )


_MAX_RESAMPLES = 20


def run_training(
    state: ModelState,
    sampler: Callable[[np.random.Generator], Episode],
    cfg: TrainConfig,
    out_dir,
    prototype_cfg: Optional[PrototypeConfig] = None,
    fold: Optional[str] = None,
) -> Path:
    """Run the episodic loop, logging metrics and checkpointing.

    ``sampler`` draws one episode from the training pool; episodes whose
    query label lost all foreground under augmentation are redrawn.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    if state.optimizer is None:
        create_optimizer(state, cfg)
    metrics_path = out / "metrics.csv"
    sources_path = out / "episode_sources.csv"
    start_step = state.step
    t0 = time.monotonic()
    mode = "a" if start_step > 0 and metrics_path.exists() else "w"
    with open(metrics_path, mode, newline="") as mf, open(
        sources_path, mode, newline=""
    ) as sf:
        mw = csv.writer(mf)
        sw = csv.writer(sf)
        if mode == "w":
            mw.writerow(["episode_id", "seg_loss", "reg_loss", "total", "wall_time"])
            sw.writerow(["episode_id", "patient", "z_index", "class_id"])
        for _ in range(start_step, cfg.episodes):
            episode = _draw_episode(sampler, rng)
            report = train_episode(state, episode, cfg, prototype_cfg)
            mw.writerow(
                [
                    report.episode_id,
                    f"{report.seg_loss:.6f}",
                    f"{report.reg_loss:.6f}",
                    f"{report.total:.6f}",
                    f"{time.monotonic() - t0:.3f}",
                ]
            )
            src = episode.source or ("unknown", -1)
            sw.writerow([report.episode_id, src[0], src[1], episode.class_id])
            if cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
                save_checkpoint(state, out / f"checkpoint_{state.step:06d}", fold=fold)
    save_checkpoint(state, out / "checkpoint_final", fold=fold)
    return metrics_path


def _draw_episode(sampler, rng) -> Episode:
    for _ in range(_MAX_RESAMPLES):
        ep = sampler(rng)
        if ep.query_label is None or not np.asarray(ep.query_label).any():
            continue
        # pseudo-labels must leave room for both classes
        if all(
            np.asarray(m).any() and not np.asarray(m).all() for _, m in ep.support
        ):
            return ep
    raise TrainingError(
        f"failed to draw an episode with foreground after {_MAX_RESAMPLES} tries"
    )


def save_checkpoint(state: ModelState, ckpt_dir, fold: Optional[str] = None) -> Path:
    d = Path(ckpt_dir)
    d.mkdir(parents=True, exist_ok=True)
    torch.save(state.model.state_dict(), d / "weights.pt")
    opt_blob = {
        "optimizer": state.optimizer.state_dict() if state.optimizer else None,
        "scheduler": state.scheduler.state_dict() if state.scheduler else None,
    }
    torch.save(opt_blob, d / "optimizer.pt")
    meta = {
        "step": state.step,
        "fold": fold,
        "base_digest": state.base_digest,
        "encoder": config_to_dict(state.config),
    }
    with open(d / "meta.json", "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
    return d


def load_checkpoint(state: ModelState, ckpt_dir, cfg: Optional[TrainConfig] = None) -> ModelState:
    """Restore weights (and, when resuming, optimizer state and step)."""
    d = Path(ckpt_dir)
    weights = d / "weights.pt"
    if not weights.exists():
        raise TrainingError(f"no checkpoint at {d}; run train first")
    state.model.load_state_dict(torch.load(weights, map_location="cpu", weights_only=True))
    meta = json.loads((d / "meta.json").read_text())
    state.step = int(meta.get("step", 0))
    state.base_digest = meta.get("base_digest")
    opt_path = d / "optimizer.pt"
    if cfg is not None:
        create_optimizer(state, cfg)
        if opt_path.exists():
            blob = torch.load(opt_path, map_location="cpu", weights_only=False)
            if blob.get("optimizer"):
                state.optimizer.load_state_dict(blob["optimizer"])
            if blob.get("scheduler") and state.scheduler is not None:
                state.scheduler.load_state_dict(blob["scheduler"])
    return state


def checkpoint_meta(ckpt_dir) -> dict:
    d = Path(ckpt_dir)
    meta_path = d / "meta.json"
    if not meta_path.exists():
        raise TrainingError(f"no checkpoint metadata at {d}; run train first")
    return json.loads(meta_path.read_text())

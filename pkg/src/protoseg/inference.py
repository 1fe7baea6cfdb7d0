"""Volume segmentation: section-wise support matching, component filtering,
and test-time adaptation."""

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
from scipy import ndimage

from .config import InferenceConfig, OptimizerConfig, PrototypeConfig, TrainConfig, TTTConfig
from .data import SlicePool, SliceSample
from .encoder import ModelState
from .episodes import Episode
from .fewshot import segment_query
from .training import train_episode


class InferenceError(Exception):
    pass


@dataclass
class ConnectedComponent:
    label: int
    size: int
    mask: np.ndarray
    confidence: float = 0.0


def _structure(connectivity: int, ndim: int) -> np.ndarray:
    if ndim == 2:
        if connectivity == 4:
            return ndimage.generate_binary_structure(2, 1)
        if connectivity == 8:
            return np.ones((3, 3), dtype=bool)
    elif ndim == 3:
        if connectivity == 4:
            return ndimage.generate_binary_structure(3, 1)
        if connectivity == 8:
            return np.ones((3, 3, 3), dtype=bool)
    raise InferenceError(f"unsupported connectivity {connectivity} for {ndim}d masks")


def connected_components(mask: np.ndarray, connectivity: int = 8) -> List[ConnectedComponent]:
    """Label a binary mask; returned components are sorted by decreasing size."""
    mask = np.asarray(mask).astype(bool)
    labeled, n = ndimage.label(mask, structure=_structure(connectivity, mask.ndim))
    comps = []
    for lbl in range(1, n + 1):
        m = labeled == lbl
        comps.append(ConnectedComponent(label=lbl, size=int(m.sum()), mask=m))
    comps.sort(key=lambda c: (-c.size, c.label))
    return comps


def component_confidence(probability: np.ndarray, component_mask: np.ndarray) -> float:
    """Mean foreground probability over the component's pixels."""
    m = np.asarray(component_mask).astype(bool)
    if not m.any():
        raise InferenceError("cannot score an empty component")
    return float(np.asarray(probability)[m].mean())


def select_most_confident(
    mask: np.ndarray, probability: np.ndarray, connectivity: int = 8
) -> np.ndarray:
    """Keep only the connected component with the highest mean probability.

    Ties fall to the larger component, then to the lower component label.
    An empty mask stays empty.
    """
    mask = np.asarray(mask).astype(bool)
    if mask.shape != np.asarray(probability).shape:
        raise InferenceError(
            f"mask {mask.shape} and probability {np.asarray(probability).shape} disagree"
        )
    comps = connected_components(mask, connectivity)
    if not comps:
        return np.zeros_like(mask)
    for c in comps:
        c.confidence = component_confidence(probability, c.mask)
    best = max(comps, key=lambda c: (c.confidence, c.size, -c.label))
    return best.mask


def partition_sections(n: int, sections: int) -> List[Tuple[int, int]]:
    """Split a run of n slices into contiguous near-equal sections.

    Sizes differ by at most one, with the larger sections first. Returns
    (start, stop) offsets; fewer sections come back when n < sections.
    """
    if n < 1:
        raise InferenceError(f"cannot partition an empty range (n={n})")
    if sections < 1:
        raise InferenceError(f"section count must be positive, got {sections}")
    c = min(sections, n)
    base, extra = divmod(n, c)
    out = []
    start = 0
    for i in range(c):
        size = base + (1 if i < extra else 0)
        out.append((start, start + size))
        start += size
    return out


def section_reference_offsets(n: int, sections: int) -> List[int]:
    """Middle-slice offset of each section, relative to the run's start."""
    return [start + (stop - start) // 2 for start, stop in partition_sections(n, sections)]


def _class_range(slices: Sequence[SliceSample], class_id: int) -> Optional[Tuple[int, int]]:
    hit = [i for i, s in enumerate(slices) if s.has_class(class_id)]
    if not hit:
        return None
    return hit[0], hit[-1]


def _episode_image(pool: SlicePool, sample: SliceSample, input_mode: str):
    if input_mode == "replicate_1slice":
        return sample.image
    return pool.triplet(sample)


def _fg_mask(sample: SliceSample, class_id: int) -> np.ndarray:
    return sample.class_mask(class_id)


@dataclass
class VolumeSegmentation:
    prediction: np.ndarray  # (Z, H, W) bool
    fg_probability: np.ndarray  # (Z, H, W) float32, before component filtering
    support_slices: List[int]  # support z index used per section
    query_range: Optional[Tuple[int, int]]
    sections: List[Tuple[int, int]] = field(default_factory=list)


def segment_volume(
    state: ModelState,
    support_slices: Sequence[SliceSample],
    query_slices: Sequence[SliceSample],
    class_id: int,
    inference_cfg: Optional[InferenceConfig] = None,
    prototype_cfg: Optional[PrototypeConfig] = None,
) -> VolumeSegmentation:
    """Segment a query scan one slice at a time.

    The class-bearing runs of both scans are partitioned into the same
    number of contiguous sections; each query slice is matched with the
    middle slice of the corresponding support section. Slices outside the
    query's class-bearing run stay background.
    """
    if inference_cfg is None:
        inference_cfg = InferenceConfig()
    if prototype_cfg is None:
        prototype_cfg = PrototypeConfig()
    if not support_slices or not query_slices:
        raise InferenceError("support and query scans must both be non-empty")
    sup_patient = support_slices[0].source
    qry_patient = query_slices[0].source
    if sup_patient == qry_patient:
        raise InferenceError(
            f"support and query must come from different patients (both {sup_patient!r})"
        )
    sup_range = _class_range(support_slices, class_id)
    if sup_range is None:
        raise InferenceError(f"support scan has no slice containing class {class_id}")
    zdim = len(query_slices)
    hw = np.asarray(query_slices[0].image).shape
    pred = np.zeros((zdim, *hw), dtype=bool)
    prob = np.zeros((zdim, *hw), dtype=np.float32)
    qry_range = _class_range(query_slices, class_id)
    if qry_range is None:
        return VolumeSegmentation(pred, prob, [], None)

    sup_n = sup_range[1] - sup_range[0] + 1
    qry_n = qry_range[1] - qry_range[0] + 1
    c_eff = min(inference_cfg.sections, sup_n, qry_n)
    sup_sections = partition_sections(sup_n, c_eff)
    qry_sections = partition_sections(qry_n, c_eff)
    sup_pool = SlicePool(list(support_slices))
    qry_pool = SlicePool(list(query_slices))
    input_mode = state.config.input_mode

    refs = []
    for start, stop in sup_sections:
        mid = sup_range[0] + start + (stop - start) // 2
        if not _fg_mask(support_slices[mid], class_id).any():
            mid = _nearest_with_class(
                support_slices, class_id, mid, sup_range[0] + start, sup_range[0] + stop
            )
        refs.append(mid)

    state.model.eval()
    with torch.no_grad():
        for j, (start, stop) in enumerate(qry_sections):
            ref = support_slices[refs[j]]
            support_pair = (
                _episode_image(sup_pool, ref, input_mode),
                _fg_mask(ref, class_id),
            )
            for off in range(start, stop):
                z = qry_range[0] + off
                q = query_slices[z]
                forward = segment_query(
                    state,
                    [support_pair],
                    _episode_image(qry_pool, q, input_mode),
                    state.config,
                    prototype_cfg,
                    class_id=class_id,
                )
                fg = forward.result.foreground_probability(class_id)
                prob[z] = fg
                pred[z] = forward.result.prediction == class_id

    if inference_cfg.cca:
        if inference_cfg.cca_3d:
            pred = select_most_confident(pred, prob, inference_cfg.connectivity)
        else:
            for z in range(zdim):
                if pred[z].any():
                    pred[z] = select_most_confident(
                        pred[z], prob[z], inference_cfg.connectivity
                    )
    return VolumeSegmentation(pred, prob, refs, qry_range, qry_sections)


def _nearest_with_class(slices, class_id, center, lo, hi) -> int:
    for d in range(1, hi - lo + 1):
        for z in (center - d, center + d):
            if lo <= z < hi and _fg_mask(slices[z], class_id).any():
                return z
    raise InferenceError(
        f"no slice containing class {class_id} inside section [{lo}, {hi})"
    )


@dataclass
class TTTReport:
    steps: int
    eligible_slices: int
    skipped_empty: int


def adapt_to_query(
    state: ModelState,
    query_slices: Sequence[SliceSample],
    predicted_labels: np.ndarray,
    ttt: Optional[TTTConfig] = None,
    class_id: int = 1,
    prototype_cfg: Optional[PrototypeConfig] = None,
) -> TTTReport:
    """Adapt the model on the query scan using its own saved predictions.

    Each step treats one slice and its predicted mask as support, and an
    augmented copy as query. Slices whose prediction is all background are
    skipped. Zero iterations leaves the model untouched.
    """
    if ttt is None:
        ttt = TTTConfig()
    if ttt.iterations < 0:
        raise InferenceError(f"iteration count must be >= 0, got {ttt.iterations}")
    labels = np.asarray(predicted_labels).astype(bool)
    if labels.shape[0] != len(query_slices):
        raise InferenceError(
            f"{labels.shape[0]} label slices for {len(query_slices)} image slices"
        )
    eligible = [i for i in range(len(query_slices)) if labels[i].any()]
    skipped = len(query_slices) - len(eligible)
    if ttt.iterations == 0:
        return TTTReport(steps=0, eligible_slices=len(eligible), skipped_empty=skipped)
    if not eligible:
        raise InferenceError("every slice prediction is empty; nothing to adapt on")
    from .augment import augment_pair

    pool = SlicePool(list(query_slices))
    input_mode = state.config.input_mode
    rng = np.random.default_rng(ttt.aug.seed)
    cfg = TrainConfig(
        episodes=ttt.iterations,
        optimizer=OptimizerConfig(lr=ttt.lr),
        reg_weight=1.0,
        seed=ttt.aug.seed,
    )
    saved_opt, saved_sched, saved_step = state.optimizer, state.scheduler, state.step
    state.optimizer, state.scheduler, state.step = None, None, 0
    try:
        for k in range(ttt.iterations):
            i = eligible[k % len(eligible)]
            sample = query_slices[i]
            mask = labels[i]
            image = _episode_image(pool, sample, input_mode)
            q_img, q_lbl = augment_pair(np.asarray(image), mask, ttt.aug, rng)
            episode = Episode(
                support=[(image, mask)],
                query_image=q_img,
                query_label=q_lbl,
                class_id=class_id,
                source=(sample.source, sample.z_index),
            )
            train_episode(state, episode, cfg, prototype_cfg)
    finally:
        state.optimizer, state.scheduler, state.step = saved_opt, saved_sched, saved_step
    return TTTReport(
        steps=ttt.iterations, eligible_slices=len(eligible), skipped_empty=skipped
    )

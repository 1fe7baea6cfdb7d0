"""One episode forward pass: support examples in, query segmentation out."""

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import cv2
import numpy as np
import torch

from .config import EncoderConfig, PrototypeConfig
from .encoder import FeatureMap, ModelState, encode
from .prototype import PrototypeError, assemble_prototype_set
from .similarity import SegmentationResult, class_similarity, predict_probabilities

BACKGROUND = 0


def mask_to_grid(mask: np.ndarray, grid_shape: Tuple[int, int]) -> np.ndarray:
    """Nearest-neighbor downsample of a binary mask to the feature grid."""
    mask = np.asarray(mask).astype(np.uint8)
    gh, gw = int(grid_shape[0]), int(grid_shape[1])
    if mask.shape == (gh, gw):
        return mask.astype(bool)
    out = cv2.resize(mask, (gw, gh), interpolation=cv2.INTER_NEAREST)
    return out.astype(bool)


def grid_class_masks(mask: np.ndarray, grid_shape: Tuple[int, int]):
    """Majority-vote (foreground, background) masks on the feature grid.

    A class that exists at full resolution never vanishes: when no cell
    reaches majority coverage, the best-covered cell is claimed instead.
    """
    mask = np.asarray(mask).astype(bool)
    gh, gw = int(grid_shape[0]), int(grid_shape[1])
    if mask.shape == (gh, gw):
        fg = mask.copy()
    else:
        frac = cv2.resize(
            mask.astype(np.float32), (gw, gh), interpolation=cv2.INTER_AREA
        )
        fg = frac >= 0.5
        if mask.any() and not fg.any():
            fg = np.zeros((gh, gw), dtype=bool)
            fg[np.unravel_index(np.argmax(frac), frac.shape)] = True
        if (~mask).any() and fg.all():
            fg[np.unravel_index(np.argmin(frac), frac.shape)] = False
    return fg, ~fg


@dataclass
class EpisodeForward:
    result: SegmentationResult
    query_features: FeatureMap
    support_features: List[FeatureMap]
    support_grid_masks: List[np.ndarray]


def segment_query(
    state: ModelState,
    support: Sequence[tuple],
    query_image,
    encoder_cfg: EncoderConfig,
    prototype_cfg: Optional[PrototypeConfig] = None,
    class_id: int = 1,
    output_size: Optional[Tuple[int, int]] = None,
) -> EpisodeForward:
    """Segment one query against (image, mask) support pairs of one class.

    Background prototypes come from the complement of each support mask, so
    every episode is a two-class problem over {background, class_id}.
    """
    if prototype_cfg is None:
        prototype_cfg = PrototypeConfig()
    if len(support) == 0:
        raise PrototypeError("episode has no support examples")
    support_feats = []
    fg_examples = []
    bg_examples = []
    grid_masks = []
    for image, mask in support:
        fmap = encode(image, encoder_cfg, state)
        fg, bg = grid_class_masks(np.asarray(mask), fmap.spatial_shape)
        support_feats.append(fmap)
        grid_masks.append(fg)
        fg_examples.append((fmap.values, fg))
        bg_examples.append((fmap.values, bg))
    query_fmap = encode(query_image, encoder_cfg, state)
    protos = assemble_prototype_set(
        {BACKGROUND: bg_examples, class_id: fg_examples},
        window=prototype_cfg.window,
        coverage_threshold=prototype_cfg.coverage_threshold,
    )
    result = classify_features(
        query_fmap.values, protos, output_size or _query_size(query_image)
    )
    return EpisodeForward(
        result=result,
        query_features=query_fmap,
        support_features=support_feats,
        support_grid_masks=grid_masks,
    )


def classify_features(features, prototype_set, output_size) -> SegmentationResult:
    """Fused-similarity softmax segmentation of a feature grid."""
    sims = [
        class_similarity(prototype_set.for_class(cid), features, cid)
        for cid in prototype_set.class_ids
    ]
    return predict_probabilities(sims, output_size=output_size)


def _query_size(query_image) -> Tuple[int, int]:
    arr = query_image
    if torch.is_tensor(arr):
        arr = arr.detach().cpu().numpy()
    arr = np.asarray(arr)
    if arr.ndim == 3:
        return tuple(arr.shape[1:])
    return tuple(arr.shape)

"""Episode construction for self-supervised training."""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .augment import augment_pair
from .config import AugmentationSpec
from .data import SlicePool


class EpisodeError(Exception):
    pass


@dataclass
class Episode:
    """One support/query unit. Images are (H, W) or (3, H, W) slice triplets."""

    support: list  # k (image, mask) pairs
    query_image: np.ndarray
    query_label: Optional[np.ndarray]  # absent at deployment inference
    n_way: int = 1
    k_shot: int = 1
    class_id: int = 1
    source: Optional[tuple] = None  # (patient_id, z_index) provenance

    def __post_init__(self):
        if len(self.support) < 1:
            raise EpisodeError("support set must contain at least one example")
        self.k_shot = len(self.support)


def _lookup_superpixels(superpixels, sample):
    if callable(superpixels):
        return superpixels(sample)
    return superpixels[(sample.source, sample.z_index)]


def sample_training_episode(
    pool,
    superpixels,
    aug: AugmentationSpec,
    rng: np.random.Generator,
    input_mode: str = "replicate_1slice",
) -> Episode:
    """Draw one slice + one random superpixel as the pseudo-labeled support,
    and augment the same slice into the query.

    superpixels: mapping keyed by (source, z_index) or a callable on the
    slice sample.
    """
    if len(pool) == 0:
        raise EpisodeError("cannot sample an episode from an empty pool")
    if not isinstance(pool, SlicePool):
        pool = SlicePool(pool)
    idx = int(rng.integers(len(pool)))
    sample = pool[idx]
    spmap = _lookup_superpixels(superpixels, sample)
    if spmap.num_segments < 1:
        raise EpisodeError(
            f"slice ({sample.source}, z={sample.z_index}) has no superpixels"
        )
    region = int(rng.integers(spmap.num_segments))
    pseudo_label = spmap.region_mask(region)
    if input_mode in ("stack_3slice", "slice_adapter"):
        support_image = pool.triplet(sample)
    else:
        support_image = sample.image
    query_image, query_label = augment_pair(support_image, pseudo_label, aug, rng)
    return Episode(
        support=[(support_image, pseudo_label)],
        query_image=query_image,
        query_label=query_label,
        n_way=1,
        class_id=1,
        source=(sample.source, sample.z_index),
    )

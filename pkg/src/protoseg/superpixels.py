"""Graph-based superpixel pseudo-labels and their on-disk cache."""

import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from skimage.segmentation import felzenszwalb

from .config import FelzenszwalbParams

CACHE_ENV_VAR = "PROTOSEG_CACHE"


class SuperpixelError(Exception):
    pass


@dataclass
class SuperpixelMap:
    segments: np.ndarray  # (H, W) int32 region ids in [0, num_segments)
    num_segments: int

    def __post_init__(self):
        if self.num_segments < 1:
            raise SuperpixelError("superpixel map must have at least one region")

    def region_mask(self, region_id):
        return self.segments == region_id


def generate_superpixels(image, params: FelzenszwalbParams) -> SuperpixelMap:
    """Felzenszwalb graph-based segmentation with compacted region ids.

    Deterministic for fixed (image, params); regions smaller than
    params.min_size are merged by the underlying algorithm.
    """
    image = np.asarray(image, dtype=np.float64)
    if not np.isfinite(image).all():
        raise SuperpixelError("image contains non-finite pixels")
    segments = felzenszwalb(
        image, scale=params.scale, sigma=params.sigma, min_size=params.min_size
    )
    # Compact ids into a contiguous [0, n) range.
    _, compact = np.unique(segments, return_inverse=True)
    compact = compact.reshape(segments.shape).astype(np.int32)
    return SuperpixelMap(segments=compact, num_segments=int(compact.max()) + 1)


def cache_root(data_cfg=None, out_dir=None):
    """Cache directory: explicit config > PROTOSEG_CACHE > <out_dir>/cache."""
    if data_cfg is not None and data_cfg.cache_root:
        return Path(data_cfg.cache_root)
    env = os.environ.get(CACHE_ENV_VAR)
    if env:
        return Path(env)
    return Path(out_dir or ".") / "cache"


class SuperpixelCache:
    """Content-addressed store of one integer region array per slice.

    The key directory is derived from (dataset id, parameters, resolution);
    writes go through a temp file + atomic rename so a single writer can
    coexist with concurrent readers.
    """

    def __init__(self, root, dataset_id, params: FelzenszwalbParams, resolution):
        blob = json.dumps(
            {
                "dataset": dataset_id,
                "scale": params.scale,
                "sigma": params.sigma,
                "min_size": params.min_size,
                "resolution": list(resolution),
            },
            sort_keys=True,
        ).encode()
        self.key = hashlib.sha256(blob).hexdigest()[:16]
        self.dir = Path(root) / "superpixels" / self.key
        self.dir.mkdir(parents=True, exist_ok=True)

    def _path(self, source, z_index):
        return self.dir / f"{source}_z{z_index:04d}.npy"

    def has(self, source, z_index):
        return self._path(source, z_index).exists()

    def get(self, source, z_index) -> SuperpixelMap:
        segments = np.load(self._path(source, z_index))
        return SuperpixelMap(segments=segments, num_segments=int(segments.max()) + 1)

    def put(self, source, z_index, spmap: SuperpixelMap):
        path = self._path(source, z_index)
        tmp = path.with_suffix(".tmp.npy")
        np.save(tmp, spmap.segments)
        os.replace(tmp, path)

    def get_or_compute(self, sample, params):
        """Returns (map, was_cache_hit)."""
        if self.has(sample.source, sample.z_index):
            return self.get(sample.source, sample.z_index), True
        spmap = generate_superpixels(sample.image, params)
        self.put(sample.source, sample.z_index, spmap)
        return spmap, False

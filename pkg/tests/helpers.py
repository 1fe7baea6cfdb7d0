"""Shared builders for the test suite."""

import numpy as np
import torch

from protoseg.config import CNNParams, EncoderConfig, PrototypeConfig
from protoseg.encoder import build_model


def tiny_cnn_config(res=(32, 32), upsample=(16, 16), width=16, out_channels=16, **kw):
    return EncoderConfig(
        backbone="dilated_cnn",
        train_resolution=res,
        test_resolution=res,
        feature_upsample=upsample,
        cnn=CNNParams(width=width, out_channels=out_channels),
        **kw,
    )


def tiny_model(config=None, seed=0):
    cfg = config or tiny_cnn_config()
    return build_model(cfg, seed=seed), cfg


def small_window():
    return PrototypeConfig(window=(2, 2))


def blob_image(shape=(32, 32), center=(16, 16), radius=6, intensity=0.8, base=0.1):
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w]
    mask = (yy - center[0]) ** 2 + (xx - center[1]) ** 2 <= radius**2
    img = np.full(shape, base, dtype=np.float32)
    img[mask] = intensity
    return img, mask


def random_features(rng, d, h, w):
    return torch.from_numpy(rng.standard_normal((d, h, w)).astype(np.float32))


def weights_digest(model):
    import hashlib

    h = hashlib.sha256()
    for name, p in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def flood_components(mask, connectivity):
    """BFS component labelling oracle, raster-scan seed order."""
    from collections import deque

    mask = np.asarray(mask, dtype=bool)
    if connectivity == 4:
        offsets = [(-1, 0), (1, 0), (0, -1), (0, 1)]
    else:
        offsets = [
            (dr, dc) for dr in (-1, 0, 1) for dc in (-1, 0, 1) if (dr, dc) != (0, 0)
        ]
    seen = np.zeros_like(mask)
    comps = []
    h, w = mask.shape
    for r in range(h):
        for c in range(w):
            if not mask[r, c] or seen[r, c]:
                continue
            comp = np.zeros_like(mask)
            queue = deque([(r, c)])
            seen[r, c] = True
            while queue:
                cr, cc = queue.popleft()
                comp[cr, cc] = True
                for dr, dc in offsets:
                    nr, nc = cr + dr, cc + dc
                    if 0 <= nr < h and 0 <= nc < w and mask[nr, nc] and not seen[nr, nc]:
                        seen[nr, nc] = True
                        queue.append((nr, nc))
            comps.append(comp)
    return comps

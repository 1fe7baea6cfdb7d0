"""Prototype extraction from dense features and grid-aligned masks.

Each class is represented by a pool of local prototypes, one per
sufficiently-covered window of the feature grid, plus a single global
masked-average prototype. The global prototype guarantees at least one
representative even for objects smaller than a window.
"""

from dataclasses import dataclass, field
from typing import List, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch

LOCAL = "local"
GLOBAL = "global"


class PrototypeError(Exception):
    pass


@dataclass
class Prototype:
    vector: torch.Tensor  # (D,)
    class_id: int
    kind: str
    grid_pos: Optional[Tuple[int, int]] = None  # window index (row, col) for locals
    source_index: int = 0  # which support example produced it


@dataclass
class PrototypeSet:
    prototypes: List[Prototype] = field(default_factory=list)

    def __len__(self):
        return len(self.prototypes)

    @property
    def class_ids(self):
        return sorted({p.class_id for p in self.prototypes})

    def for_class(self, class_id: int) -> List[Prototype]:
        return [p for p in self.prototypes if p.class_id == class_id]


def _as_feature_tensor(features):
    if hasattr(features, "values") and torch.is_tensor(getattr(features, "values")):
        features = features.values
    if not torch.is_tensor(features):
        raise PrototypeError("features must be a tensor of shape (D, H, W)")
    if features.ndim != 3:
        raise PrototypeError(f"features must be (D, H, W), got {tuple(features.shape)}")
    return features


def _as_mask(mask, spatial_shape):
    if torch.is_tensor(mask):
        mask = mask.detach().cpu().numpy()
    mask = np.asarray(mask)
    if mask.shape != tuple(spatial_shape):
        raise PrototypeError(
            f"mask shape {mask.shape} does not match feature grid {tuple(spatial_shape)}"
        )
    return mask.astype(bool)


def pool_local_prototypes(
    features,
    mask,
    window: Tuple[int, int] = (4, 4),
    coverage_threshold: float = 0.95,
    class_id: int = 1,
    source_index: int = 0,
) -> List[Prototype]:
    """Average features over non-overlapping windows of the grid.

    A window yields a prototype only when the mask covers at least
    ``coverage_threshold`` of it. Edge windows may be smaller than the
    nominal size and are pooled over their actual extent.
    """
    feats = _as_feature_tensor(features)
    _, gh, gw = feats.shape
    m = _as_mask(mask, (gh, gw))
    wh, ww = int(window[0]), int(window[1])
    if wh < 1 or ww < 1:
        raise PrototypeError(f"window must be positive, got {window}")
    out = []
    for bi, r0 in enumerate(range(0, gh, wh)):
        r1 = min(r0 + wh, gh)
        for bj, c0 in enumerate(range(0, gw, ww)):
            c1 = min(c0 + ww, gw)
            patch = m[r0:r1, c0:c1]
            if patch.mean() < coverage_threshold:
                continue
            vec = feats[:, r0:r1, c0:c1].mean(dim=(1, 2))
            out.append(
                Prototype(
                    vector=vec,
                    class_id=class_id,
                    kind=LOCAL,
                    grid_pos=(bi, bj),
                    source_index=source_index,
                )
            )
    return out


def compute_class_prototype(
    features, mask, class_id: int = 1, source_index: int = 0
) -> Prototype:
    """Masked average over the whole grid; requires a non-empty mask."""
    feats = _as_feature_tensor(features)
    m = _as_mask(mask, feats.shape[1:])
    n = int(m.sum())
    if n == 0:
        raise PrototypeError(f"class {class_id} mask is empty; no prototype to compute")
    w = torch.from_numpy(m).to(feats.dtype)
    vec = (feats * w).sum(dim=(1, 2)) / n
    return Prototype(vector=vec, class_id=class_id, kind=GLOBAL, source_index=source_index)


def assemble_prototype_set(
    class_examples: Mapping[int, Sequence[tuple]],
    window: Tuple[int, int] = (4, 4),
    coverage_threshold: float = 0.95,
) -> PrototypeSet:
    """Build the full pool from (features, mask) support examples per class.

    Examples whose mask is empty contribute nothing; a class empty across
    all of its examples is an error.
    """
    protos: List[Prototype] = []
    for class_id in sorted(class_examples):
        found = False
        for idx, (features, mask) in enumerate(class_examples[class_id]):
            feats = _as_feature_tensor(features)
            m = _as_mask(mask, feats.shape[1:])
            if not m.any():
                continue
            found = True
            protos.extend(
                pool_local_prototypes(
                    feats, m, window, coverage_threshold, class_id, idx
                )
            )
            protos.append(compute_class_prototype(feats, m, class_id, idx))
        if not found:
            raise PrototypeError(
                f"class {class_id} has an empty mask in every support example"
            )
    return PrototypeSet(protos)

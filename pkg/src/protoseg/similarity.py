"""Prototype-to-feature similarity, per-class fusion, and pixel classification."""

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .prototype import Prototype, PrototypeError

COSINE_SCALE = 20.0
_EPS = 1e-8


@dataclass
class ClassSimilarity:
    class_id: int
    fused: torch.Tensor  # (H, W) fused similarity for this class


@dataclass
class SegmentationResult:
    probabilities: torch.Tensor  # (C, H, W), channels ordered like class_ids
    class_ids: List[int]
    resolution: Tuple[int, int]

    @property
    def prediction(self) -> np.ndarray:
        """Per-pixel winning class id."""
        idx = self.probabilities.argmax(dim=0).detach().cpu().numpy()
        lut = np.asarray(self.class_ids)
        return lut[idx]

    def foreground_probability(self, class_id: int) -> np.ndarray:
        ch = self.class_ids.index(class_id)
        return self.probabilities[ch].detach().cpu().numpy()


def local_similarity_maps(prototypes: Sequence[Prototype], features) -> torch.Tensor:
    """Scaled cosine similarity between each prototype and every feature cell.

    Returns a (L, H, W) tensor; values lie in [-COSINE_SCALE, COSINE_SCALE].
    """
    if hasattr(features, "values") and torch.is_tensor(getattr(features, "values")):
        features = features.values
    if not torch.is_tensor(features) or features.ndim != 3:
        raise PrototypeError("features must be a (D, H, W) tensor")
    if len(prototypes) == 0:
        raise PrototypeError("need at least one prototype")
    d = features.shape[0]
    vecs = []
    for p in prototypes:
        v = p.vector if isinstance(p, Prototype) else p
        if v.shape != (d,):
            raise PrototypeError(
                f"prototype dimension {tuple(v.shape)} does not match features ({d},)"
            )
        vecs.append(v)
    pmat = torch.stack(vecs)  # (L, D)
    flat = features.reshape(d, -1)  # (D, N)
    dots = pmat @ flat  # (L, N)
    pn = pmat.norm(dim=1, keepdim=True)  # (L, 1)
    fn = flat.norm(dim=0, keepdim=True)  # (1, N)
    cos = dots / (pn * fn + _EPS)
    cos = cos.clamp(-1.0, 1.0)
    return (COSINE_SCALE * cos).reshape(len(prototypes), *features.shape[1:])


def fuse_similarities(sim_maps: torch.Tensor) -> torch.Tensor:
    """Collapse the per-prototype maps into one map per class.

    At each pixel the maps are combined as a softmax-weighted sum over the
    prototype axis, so the best-matching prototype dominates smoothly.
    """
    if not torch.is_tensor(sim_maps) or sim_maps.ndim != 3 or sim_maps.shape[0] == 0:
        raise PrototypeError("expected a non-empty (L, H, W) similarity stack")
    weights = torch.softmax(sim_maps, dim=0)
    return (sim_maps * weights).sum(dim=0)


def class_similarity(prototypes: Sequence[Prototype], features, class_id: int) -> ClassSimilarity:
    maps = local_similarity_maps(prototypes, features)
    return ClassSimilarity(class_id=class_id, fused=fuse_similarities(maps))


def predict_probabilities(
    class_sims: Sequence[ClassSimilarity],
    output_size: Optional[Tuple[int, int]] = None,
) -> SegmentationResult:
    """Per-pixel softmax over the fused class maps, optionally upsampled.

    Upsampling is bilinear on the probabilities, which keeps each pixel's
    class distribution summing to one.
    """
    if len(class_sims) < 2:
        raise PrototypeError("need at least two classes to normalize over")
    shape = tuple(class_sims[0].fused.shape)
    for cs in class_sims:
        if tuple(cs.fused.shape) != shape:
            raise PrototypeError("class similarity maps disagree in shape")
    stack = torch.stack([cs.fused for cs in class_sims])  # (C, H, W)
    probs = torch.softmax(stack, dim=0)
    if output_size is not None and tuple(output_size) != shape:
        probs = F.interpolate(
            probs.unsqueeze(0),
            size=tuple(output_size),
            mode="bilinear",
            align_corners=False,
        )[0]
    return SegmentationResult(
        probabilities=probs,
        class_ids=[cs.class_id for cs in class_sims],
        resolution=tuple(probs.shape[1:]),
    )

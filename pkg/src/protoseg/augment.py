"""Geometric and intensity augmentations for episodic training."""

import math
from dataclasses import dataclass

import cv2
import numpy as np
from scipy.ndimage import gaussian_filter

from .config import AugmentationSpec, GeometricAug, IntensityAug


def _exact_trig(degrees):
    # Right-angle rotations must map the pixel grid onto itself exactly.
    if degrees % 90 == 0:
        quarter = int(degrees // 90) % 4
        return [(1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0)][quarter]
    rad = math.radians(degrees)
    return math.cos(rad), math.sin(rad)


@dataclass
class GeometricTransform:
    """One sampled geometric transform, applicable to images and masks alike."""

    matrix: np.ndarray  # 2x3 forward affine, acting on (x, y) pixel coords
    shape: tuple  # (H, W)
    elastic_dx: np.ndarray = None
    elastic_dy: np.ndarray = None

    def apply(self, arr, is_mask=False):
        """Warp (H, W) or (C, H, W); masks use nearest-neighbor sampling."""
        arr = np.asarray(arr)
        if arr.ndim == 3:
            out = np.stack([self.apply(c, is_mask) for c in arr])
            return out
        h, w = self.shape
        interp = cv2.INTER_NEAREST if is_mask else cv2.INTER_LINEAR
        src = arr.astype(np.uint8) if is_mask else arr.astype(np.float32)
        warped = cv2.warpAffine(
            src, self.matrix, (w, h), flags=interp,
            borderMode=cv2.BORDER_CONSTANT, borderValue=0,
        )
        if self.elastic_dx is not None:
            xs, ys = np.meshgrid(np.arange(w, dtype=np.float32), np.arange(h, dtype=np.float32))
            warped = cv2.remap(
                warped, xs + self.elastic_dx, ys + self.elastic_dy, interp,
                borderMode=cv2.BORDER_CONSTANT, borderValue=0,
            )
        if is_mask:
            return warped.astype(bool)
        return warped

    @staticmethod
    def identity(shape):
        return GeometricTransform(
            matrix=np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]), shape=tuple(shape)
        )


def sample_geometric(spec: GeometricAug, shape, rng) -> GeometricTransform:
    """Draw one affine (+ optional elastic) transform about the image center."""
    h, w = shape
    rot = rng.uniform(*spec.rotation)
    scale = rng.uniform(*spec.scale)
    shear = rng.uniform(*spec.shear)
    tx = rng.uniform(*spec.translate) * w
    ty = rng.uniform(*spec.translate) * h
    cos, sin = _exact_trig(rot)
    shear_t = math.tan(math.radians(shear))
    # rotate @ shear @ scale, centered, then translate
    lin = np.array([[cos, -sin], [sin, cos]]) @ np.array([[1.0, shear_t], [0.0, 1.0]]) * scale
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    offset = np.array([cx + tx, cy + ty]) - lin @ np.array([cx, cy])
    matrix = np.concatenate([lin, offset[:, None]], axis=1)
    dx = dy = None
    if spec.elastic and spec.elastic_magnitude > 0:
        dx = gaussian_filter(rng.uniform(-1, 1, (h, w)), sigma=8.0, mode="constant")
        dy = gaussian_filter(rng.uniform(-1, 1, (h, w)), sigma=8.0, mode="constant")
        norm = max(np.abs(dx).max(), np.abs(dy).max(), 1e-8)
        dx = (dx / norm * spec.elastic_magnitude).astype(np.float32)
        dy = (dy / norm * spec.elastic_magnitude).astype(np.float32)
    return GeometricTransform(matrix=matrix, shape=(h, w), elastic_dx=dx, elastic_dy=dy)


def apply_intensity(image, spec: IntensityAug, rng):
    """Gamma, contrast, brightness, and additive noise; output clipped to [0, 1]."""
    img = np.clip(np.asarray(image, dtype=np.float32), 0.0, 1.0)
    gamma = rng.uniform(*spec.gamma)
    contrast = rng.uniform(*spec.contrast)
    brightness = rng.uniform(*spec.brightness)
    img = np.power(img, gamma)
    mean = img.mean()
    img = (img - mean) * contrast + mean + brightness
    if spec.noise_std > 0:
        # one noise field shared across channels so replicated slices stay equal
        img = img + rng.normal(0.0, spec.noise_std, img.shape[-2:])
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def augment_pair(image, label, spec: AugmentationSpec, rng):
    """Build the augmented (query image, query label) from one slice.

    The image receives intensity then geometric transforms; the label only
    the geometric one, sampled jointly so both stay aligned.
    """
    shape = image.shape[-2:]
    geo = sample_geometric(spec.geometric, shape, rng)
    aug_image = geo.apply(apply_intensity(image, spec.intensity, rng))
    aug_label = geo.apply(label, is_mask=True)
    return aug_image, aug_label

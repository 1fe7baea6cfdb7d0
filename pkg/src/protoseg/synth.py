"""Synthetic volumetric dataset: smoothed ellipsoid "organs" with known masks."""

from pathlib import Path

import numpy as np
import yaml
from scipy.ndimage import gaussian_filter

from . import nifti

# Per-class placement templates on a unit cube; jittered per scan.
_ORGAN_TEMPLATES = {
    1: {"center": (0.27, 0.27, 0.38), "radii": (0.14, 0.14, 0.24), "intensity": 0.45},
    2: {"center": (0.72, 0.72, 0.60), "radii": (0.16, 0.16, 0.26), "intensity": 0.65},
    3: {"center": (0.30, 0.72, 0.52), "radii": (0.15, 0.13, 0.24), "intensity": 0.95},
}
_DISTRACTOR = {"center": (0.75, 0.25, 0.52), "radii": (0.10, 0.10, 0.18), "intensity": 0.70}


def _ellipsoid_mask(shape, center, radii):
    # Rounder along z (exponent 4) so cross-sections stay organ-like instead
    # of tapering to points at the first and last slices.
    h, w, z = shape
    yy, xx, zz = np.meshgrid(
        np.arange(h), np.arange(w), np.arange(z), indexing="ij"
    )
    cy, cx, cz = center
    ry, rx, rz = radii
    d = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 + ((zz - cz) / rz) ** 4
    return d <= 1.0


def make_scan(
    shape, rng, classes=(1, 2, 3), distractor=False, smooth_sigma=0.7, noise_std=0.03
):
    """One synthetic scan: (voxels float32, labels uint8) arrays of `shape`."""
    h, w, z = shape
    voxels = 0.08 + rng.normal(0.0, noise_std, shape).astype(np.float32)
    labels = np.zeros(shape, dtype=np.uint8)
    blobs = [(cid, _ORGAN_TEMPLATES[cid]) for cid in classes]
    if distractor:
        blobs.append((0, _DISTRACTOR))
    for cid, tpl in blobs:
        center = [
            tpl["center"][i] * s + rng.uniform(-0.05, 0.05) * s
            for i, s in enumerate(shape)
        ]
        radii = [
            max(1.5, tpl["radii"][i] * s * rng.uniform(0.85, 1.15))
            for i, s in enumerate(shape)
        ]
        mask = _ellipsoid_mask(shape, center, radii)
        voxels[mask] = tpl["intensity"]
        if cid > 0:
            labels[mask] = cid
    voxels = gaussian_filter(voxels, sigma=smooth_sigma).astype(np.float32)
    return voxels, labels


def make_synthetic_dataset(
    out_dir,
    n_scans=8,
    shape=(32, 32, 12),
    classes=(1, 2, 3),
    distractor=False,
    seed=0,
    name="synth",
    smooth_sigma=0.7,
    noise_std=0.03,
):
    """Generate scans + labels as NIfTI files and a dataset manifest.

    Returns the manifest path.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    entries = []
    for i in range(n_scans):
        voxels, labels = make_scan(
            shape, rng, classes=classes, distractor=distractor,
            smooth_sigma=smooth_sigma, noise_std=noise_std,
        )
        image_name = f"vol_{i:03d}.nii.gz"
        label_name = f"vol_{i:03d}_label.nii.gz"
        nifti.write_volume(out_dir / image_name, voxels)
        nifti.write_volume(out_dir / label_name, labels)
        entries.append(
            {"image": image_name, "label": label_name, "patient_id": f"p{i:03d}"}
        )
    manifest = {
        "name": name,
        "modality": "SYNTH",
        "classes": {int(c): f"blob_{c}" for c in classes},
        "scans": entries,
    }
    manifest_path = out_dir / "manifest.yaml"
    with open(manifest_path, "w") as f:
        yaml.safe_dump(manifest, f, sort_keys=False)
    return manifest_path


def default_synth_config(manifest_path, out_dir, resolution=(48, 48)):
    """Desk-scale run configuration matched to the generated dataset."""
    from .config import (
        AugmentationSpec,
        DataConfig,
        EncoderConfig,
        ExperimentSpec,
        FelzenszwalbParams,
        IntensityAug,
        PrototypeConfig,
        RunConfig,
        TrainConfig,
    )

    res = tuple(resolution)
    cfg = RunConfig(
        data=DataConfig(
            manifest=str(manifest_path),
            # region growth tuned for small slices (defaults assume 256x256)
            felzenszwalb=FelzenszwalbParams(scale=50.0, sigma=0.5, min_size=60),
        ),
        encoder=EncoderConfig(
            backbone="dilated_cnn",
            train_resolution=res,
            test_resolution=res,
            feature_upsample=(res[0] // 2, res[1] // 2),
        ),
        prototype=PrototypeConfig(window=(2, 2)),
        train=TrainConfig(episodes=500, checkpoint_every=250),
        experiment=ExperimentSpec(
            dataset="SYNTH",
            organ_groups={"group0": [1], "group1": [2, 3]},
            variants=("base", "cca"),
        ),
        # gentle photometric jitter; the blobs are told apart by intensity,
        # so heavy gamma/brightness shifts would erase the signal
        aug=AugmentationSpec(
            intensity=IntensityAug(
                gamma=(0.85, 1.2),
                noise_std=0.02,
                brightness=(-0.05, 0.05),
                contrast=(0.95, 1.05),
            )
        ),
        out_dir=str(Path(out_dir) / "runs"),
    )
    return cfg.validate()

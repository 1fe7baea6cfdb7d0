"""Volumetric scan ingestion, slice reformatting, and class-exclusion filtering."""

from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
import yaml

from . import nifti


class DataError(Exception):
    pass


@dataclass
class VolumeScan:
    """A 3D intensity volume with per-class voxel masks.

    voxels is (H, W, Z) with axial slices along the last axis; masks maps
    class id -> binary (H, W, Z) array on the same grid.
    """

    voxels: np.ndarray
    masks: dict
    patient_id: str
    modality: str = "CT"

    def __post_init__(self):
        for cid, m in self.masks.items():
            if m.shape != self.voxels.shape:
                raise DataError(
                    f"mask for class {cid} has shape {m.shape}, "
                    f"volume is {self.voxels.shape}"
                )

    @property
    def num_slices(self):
        return self.voxels.shape[2]

    def class_slice_range(self, class_id):
        """Inclusive (lo, hi) z-range of slices containing class_id, or None."""
        mask = self.masks.get(class_id)
        if mask is None:
            return None
        present = np.flatnonzero(mask.any(axis=(0, 1)))
        if present.size == 0:
            return None
        return int(present[0]), int(present[-1])


@dataclass
class SliceSample:
    image: np.ndarray  # (H, W) float32
    labels: dict  # class id -> binary (H, W)
    z_index: int
    source: str  # patient id

    def __post_init__(self):
        for cid, lab in self.labels.items():
            if lab.shape != self.image.shape:
                raise DataError(
                    f"label for class {cid} has shape {lab.shape}, "
                    f"image is {self.image.shape}"
                )

    def class_mask(self, class_id) -> np.ndarray:
        mask = self.labels.get(class_id)
        if mask is None:
            return np.zeros(self.image.shape, dtype=bool)
        return mask

    def has_class(self, class_id) -> bool:
        mask = self.labels.get(class_id)
        return mask is not None and bool(mask.any())


@dataclass
class ScanEntry:
    image: Path
    label: Path
    patient_id: str


@dataclass
class DatasetManifest:
    name: str
    modality: str
    classes: dict  # class id -> name
    scans: list
    root: Path = field(default_factory=Path)

    @property
    def class_ids(self):
        return sorted(self.classes)


def load_manifest(path) -> DatasetManifest:
    """Parse a dataset manifest; errors name the offending entry."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    with open(path) as f:
        doc = yaml.safe_load(f)
    if not isinstance(doc, dict):
        raise DataError(f"{path}: manifest must be a mapping")
    for key in ("name", "modality", "classes", "scans"):
        if key not in doc:
            raise DataError(f"{path}: missing manifest key {key!r}")
    classes = {int(k): str(v) for k, v in doc["classes"].items()}
    scans = []
    for i, entry in enumerate(doc["scans"]):
        for key in ("image", "label", "patient_id"):
            if key not in entry:
                raise DataError(f"{path}: scan entry {i} missing {key!r}")
        scans.append(
            ScanEntry(
                image=path.parent / entry["image"],
                label=path.parent / entry["label"],
                patient_id=str(entry["patient_id"]),
            )
        )
    return DatasetManifest(
        name=str(doc["name"]),
        modality=str(doc["modality"]),
        classes=classes,
        scans=scans,
        root=path.parent,
    )


def normalize_intensity(voxels, modality, ct_window=(-275.0, 125.0), mri_percentiles=(0.5, 99.5)):
    """Map raw intensities to [0, 1].

    CT: clip to the HU window then min-max against the window bounds.
    MRI: clip at the given volume percentiles then min-max against them.
    SYNTH: plain per-volume min-max.
    """
    voxels = voxels.astype(np.float32)
    if modality == "CT":
        lo, hi = ct_window
        clipped = np.clip(voxels, lo, hi)
        return (clipped - lo) / (hi - lo)
    if modality == "MRI":
        lo, hi = np.percentile(voxels, mri_percentiles)
        if hi <= lo:
            return np.zeros_like(voxels)
        return (np.clip(voxels, lo, hi) - lo) / (hi - lo)
    if modality == "SYNTH":
        lo, hi = float(voxels.min()), float(voxels.max())
        if hi <= lo:
            return np.zeros_like(voxels)
        return (voxels - lo) / (hi - lo)
    raise DataError(f"unknown modality {modality!r}")


def _companion_label_path(image_path):
    image_path = Path(image_path)
    name = image_path.name
    for ext in (".nii.gz", ".nii"):
        if name.endswith(ext):
            return image_path.parent / (name[: -len(ext)] + "_label" + ext)
    raise DataError(f"cannot derive label path for {image_path}")


def load_volume(
    path,
    class_catalog,
    label_path=None,
    modality="CT",
    patient_id=None,
    ct_window=(-275.0, 125.0),
    mri_percentiles=(0.5, 99.5),
) -> VolumeScan:
    """Load an intensity volume plus its companion label volume.

    The label volume holds one integer class id per voxel (0 = background);
    it is split into per-class binary masks according to class_catalog.
    """
    path = Path(path)
    if label_path is None:
        label_path = _companion_label_path(path)
    try:
        voxels, _ = nifti.read_volume(path)
    except nifti.NiftiError as e:
        raise DataError(str(e)) from e
    try:
        labels, _ = nifti.read_volume(label_path)
    except nifti.NiftiError as e:
        raise DataError(str(e)) from e
    labels = np.rint(np.asarray(labels)).astype(np.int32)
    if labels.shape != voxels.shape:
        raise DataError(
            f"label volume shape {labels.shape} does not match image {voxels.shape}"
        )
    present = set(np.unique(labels).tolist()) - {0}
    unknown = present - set(class_catalog)
    if unknown:
        raise DataError(f"label volume contains unknown class ids {sorted(unknown)}")
    masks = {cid: (labels == cid) for cid in class_catalog}
    normalized = normalize_intensity(voxels, modality, ct_window, mri_percentiles)
    return VolumeScan(
        voxels=normalized,
        masks=masks,
        patient_id=patient_id or path.stem.split(".")[0],
        modality=modality,
    )


def load_dataset(manifest: DatasetManifest, data_cfg=None) -> list:
    ct_window = data_cfg.ct_window if data_cfg else (-275.0, 125.0)
    mri_pcts = data_cfg.mri_percentiles if data_cfg else (0.5, 99.5)
    scans = []
    for entry in manifest.scans:
        if not entry.image.exists():
            raise DataError(f"manifest entry {entry.patient_id}: missing file {entry.image}")
        if not entry.label.exists():
            raise DataError(f"manifest entry {entry.patient_id}: missing file {entry.label}")
        scans.append(
            load_volume(
                entry.image,
                manifest.class_ids,
                label_path=entry.label,
                modality=manifest.modality,
                patient_id=entry.patient_id,
                ct_window=ct_window,
                mri_percentiles=mri_pcts,
            )
        )
    return scans


def resize_image(image, target):
    """Bilinear resize to (H, W)."""
    h, w = target
    if image.shape == (h, w):
        return image.astype(np.float32, copy=False)
    return cv2.resize(image.astype(np.float32), (w, h), interpolation=cv2.INTER_LINEAR)


def resize_mask(mask, target):
    """Nearest-neighbor resize; keeps masks binary."""
    h, w = target
    if mask.shape == (h, w):
        return mask.astype(np.uint8, copy=False)
    return cv2.resize(mask.astype(np.uint8), (w, h), interpolation=cv2.INTER_NEAREST)


def reformat_and_resize(scan: VolumeScan, target) -> list:
    """Extract axial slices and resize them to the target (H, W)."""
    h, w = target
    if h <= 0 or w <= 0:
        raise DataError(f"target dims must be positive, got {target}")
    samples = []
    for z in range(scan.num_slices):
        image = resize_image(scan.voxels[:, :, z], target)
        labels = {
            cid: resize_mask(mask[:, :, z], target).astype(bool)
            for cid, mask in scan.masks.items()
        }
        samples.append(
            SliceSample(image=image, labels=labels, z_index=z, source=scan.patient_id)
        )
    return samples


def filter_setting2(pool, test_classes) -> list:
    """Drop every slice containing any pixel of a held-out test class."""
    kept = []
    for s in pool:
        contaminated = any(
            s.labels.get(cid) is not None and s.labels[cid].any() for cid in test_classes
        )
        if not contaminated:
            kept.append(s)
    return kept


class SlicePool:
    """Slice list with per-scan neighbor lookup for 3-slice inputs."""

    def __init__(self, slices):
        self.slices = list(slices)
        self._index = {(s.source, s.z_index): i for i, s in enumerate(self.slices)}

    def __len__(self):
        return len(self.slices)

    def __getitem__(self, i):
        return self.slices[i]

    def __iter__(self):
        return iter(self.slices)

    def neighbor(self, sample: SliceSample, dz):
        """Neighboring slice image at z + dz; edge slices replicate themselves."""
        key = (sample.source, sample.z_index + dz)
        if key in self._index:
            return self.slices[self._index[key]].image
        return sample.image

    def triplet(self, sample: SliceSample):
        """(3, H, W) stack of the slice and its two z-neighbors."""
        return np.stack(
            [self.neighbor(sample, -1), sample.image, self.neighbor(sample, +1)]
        )

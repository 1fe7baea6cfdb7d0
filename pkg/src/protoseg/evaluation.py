"""Scan-level evaluation: Dice scoring, the cross-patient protocol, reports."""

import copy
import csv
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .config import ExperimentSpec, InferenceConfig, PrototypeConfig, TTTConfig
from .data import DatasetManifest, VolumeScan, reformat_and_resize
from .inference import segment_volume, adapt_to_query


class EvaluationError(Exception):
    pass


def dice_score(a: np.ndarray, b: np.ndarray) -> float:
    """Overlap score 2|A∩B| / (|A|+|B|); two empty masks count as 1.0."""
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    if a.shape != b.shape:
        raise EvaluationError(f"mask shapes disagree: {a.shape} vs {b.shape}")
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / denom


@dataclass
class ScanResult:
    variant: str
    fold: str
    class_id: int
    scan_id: str
    dice: float


@dataclass
class MetricsRow:
    variant: str
    fold: str
    class_label: str  # class name, or "mean" for the fold average
    mean_dice_pct: float
    std_dice_pct: float
    n_scans: int


def _slices_with_class(scan: VolumeScan, class_id: int) -> bool:
    return class_id in scan.masks and scan.masks[class_id].any()


def class_holders(scans: Sequence[VolumeScan], class_id: int) -> List[VolumeScan]:
    """Scans that actually contain the class, in stable patient order."""
    return sorted(
        (s for s in scans if _slices_with_class(s, class_id)),
        key=lambda s: s.patient_id,
    )


def pair_support(
    holders: Sequence[VolumeScan], query_index: int, seed_parts: Sequence[int]
) -> VolumeScan:
    """Seeded draw of a support scan from the other patients."""
    query = holders[query_index]
    candidates = [s for s in holders if s.patient_id != query.patient_id]
    if not candidates:
        raise EvaluationError(
            f"no support candidate for patient {query.patient_id!r}; "
            "need at least two patients holding the class"
        )
    rng = np.random.default_rng(list(seed_parts) + [query_index])
    return candidates[int(rng.integers(len(candidates)))]


def fold_seed(fold: str) -> int:
    """Stable integer for a fold name, independent of which folds run."""
    return zlib.crc32(fold.encode())


def _default_segmenter(state, support_slices, query_slices, class_id, inference_cfg, prototype_cfg):
    return segment_volume(
        state, support_slices, query_slices, class_id, inference_cfg, prototype_cfg
    )


def run_experiment(
    spec: ExperimentSpec,
    manifest: DatasetManifest,
    scans: Sequence[VolumeScan],
    model_loader: Callable[[str, str], object],
    out_dir,
    resolution: Tuple[int, int],
    inference_cfg: Optional[InferenceConfig] = None,
    prototype_cfg: Optional[PrototypeConfig] = None,
    ttt_cfg: Optional[TTTConfig] = None,
    segmenter: Optional[Callable] = None,
    sources_csv: Optional[Mapping[str, object]] = None,
) -> Tuple[List[ScanResult], List[MetricsRow]]:
    """Evaluate every (fold, variant, class, query scan) combination.

    Each scan holding a test class is queried once; its support scan is a
    seeded draw from the other patients holding that class. Model weights
    are restored after every adapted scan so runs stay independent.
    """
    if inference_cfg is None:
        inference_cfg = InferenceConfig()
    if segmenter is None:
        segmenter = _default_segmenter
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    folds = sorted(spec.organ_groups)
    resized = {s.patient_id: reformat_and_resize(s, resolution) for s in scans}
    results: List[ScanResult] = []
    for fold in folds:
        test_classes = sorted(spec.organ_groups[fold])
        if sources_csv is not None and fold in sources_csv:
            audit_training_sources(
                sources_csv[fold], scans, test_classes, resolution
            )
        for variant in spec.variants:
            state = model_loader(fold, variant)
            for class_id in test_classes:
                holders = class_holders(scans, class_id)
                if len(holders) < 2:
                    raise EvaluationError(
                        f"class {class_id} appears in fewer than two patients; "
                        "cannot pair support with query"
                    )
                for qi, query in enumerate(holders):
                    support = pair_support(
                        holders,
                        qi,
                        [spec.seeds[0] if spec.seeds else 0, fold_seed(fold), class_id],
                    )
                    qry_slices = resized[query.patient_id]
                    sup_slices = resized[support.patient_id]
                    truth = np.stack([s.class_mask(class_id) for s in qry_slices])
                    d = _score_variant(
                        state,
                        variant,
                        sup_slices,
                        qry_slices,
                        class_id,
                        truth,
                        inference_cfg,
                        prototype_cfg,
                        ttt_cfg,
                        segmenter,
                    )
                    results.append(
                        ScanResult(variant, fold, class_id, query.patient_id, d)
                    )
    table = aggregate(results, manifest)
    write_results(results, out / "results.csv")
    report(table, out)
    return results, table


def predict_variant(
    state,
    variant,
    sup_slices,
    qry_slices,
    class_id,
    inference_cfg=None,
    prototype_cfg=None,
    ttt_cfg=None,
    segmenter=None,
):
    """Segment one query scan under a named variant.

    The ttt variant adapts a temporary copy of the weights on the query's
    own first-pass predictions, then restores them.
    """
    if inference_cfg is None:
        inference_cfg = InferenceConfig()
    if segmenter is None:
        segmenter = _default_segmenter
    cfg = copy.deepcopy(inference_cfg)
    if variant == "base":
        cfg.cca = False
        return segmenter(state, sup_slices, qry_slices, class_id, cfg, prototype_cfg)
    if variant in ("cca", "slice_adapter"):
        cfg.cca = True
        return segmenter(state, sup_slices, qry_slices, class_id, cfg, prototype_cfg)
    if variant == "ttt":
        cfg.cca = True
        snapshot = copy.deepcopy(state.model.state_dict())
        try:
            first = segmenter(state, sup_slices, qry_slices, class_id, cfg, prototype_cfg)
            adapt_to_query(
                state, qry_slices, first.prediction, ttt_cfg, class_id, prototype_cfg
            )
            return segmenter(state, sup_slices, qry_slices, class_id, cfg, prototype_cfg)
        finally:
            state.model.load_state_dict(snapshot)
    raise EvaluationError(f"unknown variant {variant!r}")


def _score_variant(
    state,
    variant,
    sup_slices,
    qry_slices,
    class_id,
    truth,
    inference_cfg,
    prototype_cfg,
    ttt_cfg,
    segmenter,
):
    seg = predict_variant(
        state,
        variant,
        sup_slices,
        qry_slices,
        class_id,
        inference_cfg,
        prototype_cfg,
        ttt_cfg,
        segmenter,
    )
    return dice_score(seg.prediction, truth)


def aggregate(results: Sequence[ScanResult], manifest: DatasetManifest) -> List[MetricsRow]:
    """Per-class mean/std rows plus a cross-class mean row per (variant, fold)."""
    rows: List[MetricsRow] = []
    keys = sorted({(r.variant, r.fold) for r in results})
    for variant, fold in keys:
        class_means = []
        class_ids = sorted({r.class_id for r in results if r.variant == variant and r.fold == fold})
        for cid in class_ids:
            vals = np.array(
                [
                    r.dice
                    for r in results
                    if r.variant == variant and r.fold == fold and r.class_id == cid
                ]
            )
            name = manifest.classes.get(cid, str(cid))
            rows.append(
                MetricsRow(
                    variant,
                    fold,
                    name,
                    float(vals.mean() * 100),
                    float(vals.std() * 100),
                    len(vals),
                )
            )
            class_means.append(vals.mean() * 100)
        rows.append(
            MetricsRow(
                variant,
                fold,
                "mean",
                float(np.mean(class_means)),
                float(np.std(class_means)),
                len(class_means),
            )
        )
    return rows


def write_results(results: Sequence[ScanResult], path) -> Path:
    path = Path(path)
    ordered = sorted(results, key=lambda r: (r.variant, r.fold, r.class_id, r.scan_id))
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["variant", "fold", "class", "scan_id", "dice"])
        for r in ordered:
            w.writerow([r.variant, r.fold, r.class_id, r.scan_id, f"{r.dice:.6f}"])
    return path


def report(table: Sequence[MetricsRow], out_dir) -> Path:
    """Write the aggregate table as CSV and a readable text table."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ordered = sorted(table, key=lambda r: (r.variant, r.fold, r.class_label == "mean", r.class_label))
    with open(out / "metrics.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["variant", "fold", "class", "mean_dice_pct", "std_dice_pct", "n_scans"])
        for r in ordered:
            w.writerow(
                [r.variant, r.fold, r.class_label, f"{r.mean_dice_pct:.2f}", f"{r.std_dice_pct:.2f}", r.n_scans]
            )
    lines = [
        f"{'variant':<14}{'fold':<12}{'class':<16}{'dice%':>8}{'std':>8}{'n':>4}"
    ]
    for r in ordered:
        lines.append(
            f"{r.variant:<14}{r.fold:<12}{r.class_label:<16}"
            f"{r.mean_dice_pct:>8.2f}{r.std_dice_pct:>8.2f}{r.n_scans:>4}"
        )
    (out / "metrics.txt").write_text("\n".join(lines) + "\n")
    return out / "metrics.csv"


def audit_training_sources(
    sources_csv, scans: Sequence[VolumeScan], test_classes: Sequence[int], resolution
) -> int:
    """Verify no training episode was drawn from a slice showing a test class.

    Returns the number of episodes checked; raises on the first violation.
    """
    path = Path(sources_csv)
    if not path.exists():
        raise EvaluationError(f"no episode provenance at {path}; run train first")
    by_patient = {s.patient_id: s for s in scans}
    cache = {}
    checked = 0
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            patient = row["patient"]
            z = int(row["z_index"])
            if patient not in by_patient:
                continue
            if patient not in cache:
                cache[patient] = reformat_and_resize(by_patient[patient], resolution)
            sample = cache[patient][z]
            bad = [c for c in test_classes if sample.has_class(c)]
            if bad:
                raise EvaluationError(
                    f"training episode {row['episode_id']} used slice "
                    f"({patient}, z={z}) containing held-out class(es) {bad}"
                )
            checked += 1
    return checked

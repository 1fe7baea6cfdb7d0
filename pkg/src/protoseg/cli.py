"""Command-line interface: preprocess, train, infer, ttt, eval, synth."""

import copy
import dataclasses
import functools
import json
from pathlib import Path

import click
import numpy as np

from . import __version__, nifti
from .config import (
    VARIANTS,
    ConfigError,
    RunConfig,
    config_digest,
    encoder_from_dict,
    load_config,
    save_config,
)
from .data import (
    DataError,
    filter_setting2,
    load_dataset,
    load_manifest,
    reformat_and_resize,
)
from .encoder import EncoderError, build_model
from .episodes import EpisodeError, sample_training_episode
from .evaluation import (
    EvaluationError,
    class_holders,
    fold_seed,
    pair_support,
    predict_variant,
    run_experiment,
)
from .inference import InferenceError, segment_volume, adapt_to_query
from .prototype import PrototypeError
from .superpixels import SuperpixelCache, SuperpixelError, cache_root
from .synth import default_synth_config, make_synthetic_dataset
from .training import TrainingError, checkpoint_meta, load_checkpoint, run_training

_PKG_ERRORS = (
    ConfigError,
    DataError,
    EncoderError,
    EpisodeError,
    EvaluationError,
    InferenceError,
    PrototypeError,
    SuperpixelError,
    TrainingError,
    nifti.NiftiError,
    FileNotFoundError,
)


def friendly_errors(f):
    @functools.wraps(f)
    def wrapper(*args, **kwargs):
        try:
            return f(*args, **kwargs)
        except _PKG_ERRORS as e:
            raise click.ClickException(str(e))

    return wrapper


def common_options(f):
    f = click.option("--force", is_flag=True, help="Overwrite results from a different config.")(f)
    f = click.option("--out", "out_dir", type=click.Path(), default=None, help="Run directory root.")(f)
    f = click.option("--seed", type=int, default=None, help="Override the root seed.")(f)
    f = click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)(f)
    return f


def _resolve(config_path, seed, out_dir) -> RunConfig:
    cfg = load_config(config_path) if config_path else RunConfig().validate()
    if seed is not None:
        cfg.seed = seed
        cfg.train.seed = seed
        cfg.aug.seed = seed
        cfg.ttt.aug.seed = seed
    if out_dir is not None:
        cfg.out_dir = str(out_dir)
    return cfg


def _stage(cfg: RunConfig, *parts) -> Path:
    return Path(cfg.out_dir).joinpath(*parts)


def _snapshot(cfg: RunConfig, stage_dir: Path, command: str, force: bool, **extra) -> str:
    digest = config_digest(cfg)
    stage_dir.mkdir(parents=True, exist_ok=True)
    stamp = stage_dir / "run.json"
    if stamp.exists():
        old = json.loads(stamp.read_text()).get("digest")
        if old != digest and not force:
            raise click.ClickException(
                f"{stage_dir} holds results for config digest {old}; the current "
                f"config digests to {digest}. Pass --force to overwrite."
            )
    save_config(cfg, stage_dir / "config.yaml")
    stamp.write_text(
        json.dumps(
            {"command": command, "digest": digest, "version": __version__, **extra},
            indent=2,
            sort_keys=True,
        )
    )
    click.echo(f"config digest: {digest}")
    return digest


def _pick_fold(cfg: RunConfig, fold):
    groups = cfg.experiment.organ_groups
    if not groups:
        raise click.ClickException("config experiment.organ_groups is empty")
    names = ", ".join(sorted(groups))
    if fold is None:
        if len(groups) == 1:
            return next(iter(groups))
        raise click.ClickException(f"--fold is required (available: {names})")
    if fold not in groups:
        raise click.ClickException(f"unknown fold {fold!r} (available: {names})")
    return fold


def _manifest(cfg: RunConfig):
    if not cfg.data.manifest:
        raise click.ClickException(
            "config data.manifest is required; run `protoseg synth` for a sample dataset"
        )
    return load_manifest(cfg.data.manifest)


def _eval_resolution(cfg: RunConfig):
    if cfg.encoder.backbone == "foundation_vit_large":
        return tuple(cfg.encoder.test_resolution)
    return tuple(cfg.encoder.train_resolution)


def _load_state_for(cfg: RunConfig, fold: str, variant: str):
    ckpt = _stage(cfg, "train", fold, "checkpoint_final")
    if not (ckpt / "meta.json").exists():
        raise click.ClickException(
            f"no trained checkpoint at {ckpt}; run `protoseg train --fold {fold}` first"
        )
    meta = checkpoint_meta(ckpt)
    if meta.get("fold") not in (None, fold):
        raise click.ClickException(
            f"checkpoint at {ckpt} was trained for fold {meta.get('fold')!r}, not {fold!r}"
        )
    enc = encoder_from_dict(meta["encoder"])
    if variant == "slice_adapter" and enc.input_mode != "slice_adapter":
        raise click.ClickException(
            "the slice_adapter variant needs a checkpoint trained with "
            "encoder.input_mode=slice_adapter"
        )
    state = build_model(enc, cfg.seed)
    load_checkpoint(state, ckpt)
    return state


def _pred_name(patient_id: str, class_id: int) -> str:
    return f"pred_{patient_id}_c{class_id}.nii.gz"


def _save_volume_mask(path, stack):
    # (Z, H, W) -> (H, W, Z) on disk
    nifti.write_volume(path, np.transpose(np.asarray(stack), (1, 2, 0)))


def _load_volume_mask(path):
    data, _ = nifti.read_volume(path)
    return np.transpose(data, (2, 0, 1)) > 0.5


@click.group()
@click.version_option(__version__)
def main():
    """Few-shot volumetric segmentation pipeline."""


@main.command()
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--seed", type=int, default=0)
@click.option("--scans", type=int, default=8, help="Number of synthetic volumes.")
@friendly_errors
def synth(out_dir, seed, scans):
    """Generate a small synthetic dataset plus a matching starter config."""
    out = Path(out_dir)
    manifest_path = make_synthetic_dataset(
        out / "data",
        n_scans=scans,
        shape=(48, 48, 16),
        distractor=True,
        seed=seed,
        smooth_sigma=0.5,
        noise_std=0.02,
    )
    cfg = default_synth_config(manifest_path, out)
    cfg_path = save_config(cfg, out / "config.yaml")
    click.echo(f"dataset manifest: {manifest_path}")
    click.echo(f"starter config:   {cfg_path}")


@main.command()
@common_options
@friendly_errors
def preprocess(config_path, seed, out_dir, force):
    """Compute (or reuse) the pseudo-label regions for every training slice."""
    cfg = _resolve(config_path, seed, out_dir)
    stage = _stage(cfg, "preprocess")
    _snapshot(cfg, stage, "preprocess", force)
    manifest = _manifest(cfg)
    scans = load_dataset(manifest, cfg.data)
    res = tuple(cfg.encoder.train_resolution)
    cache = SuperpixelCache(
        cache_root(cfg.data, cfg.out_dir), manifest.name, cfg.data.felzenszwalb, res
    )
    hits = misses = 0
    for scan in scans:
        for sample in reformat_and_resize(scan, res):
            _, was_hit = cache.get_or_compute(sample, cfg.data.felzenszwalb)
            if was_hit:
                hits += 1
            else:
                misses += 1
    summary = {
        "slices": hits + misses,
        "cache_hits": hits,
        "cache_misses": misses,
        "cache_dir": str(cache.dir),
    }
    (stage / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    click.echo(
        f"regions ready for {hits + misses} slices "
        f"({misses} computed, {hits} from cache) in {cache.dir}"
    )


@main.command()
@common_options
@click.option("--fold", default=None, help="Which organ group to hold out.")
@friendly_errors
def train(config_path, seed, out_dir, force, fold):
    """Train the episodic model on self-supervised pseudo-labels."""
    cfg = _resolve(config_path, seed, out_dir)
    fold = _pick_fold(cfg, fold)
    stage = _stage(cfg, "train", fold)
    _snapshot(cfg, stage, "train", force, fold=fold, seed=cfg.seed)
    manifest = _manifest(cfg)
    scans = load_dataset(manifest, cfg.data)
    res = tuple(cfg.encoder.train_resolution)
    slices = [s for scan in scans for s in reformat_and_resize(scan, res)]
    test_classes = cfg.experiment.organ_groups[fold]
    pool = filter_setting2(slices, test_classes)
    if not pool:
        raise click.ClickException(
            f"holding out classes {sorted(test_classes)} removed every training slice"
        )
    cache = SuperpixelCache(
        cache_root(cfg.data, cfg.out_dir), manifest.name, cfg.data.felzenszwalb, res
    )

    def lookup(sample):
        return cache.get_or_compute(sample, cfg.data.felzenszwalb)[0]

    state = build_model(cfg.encoder, cfg.seed)
    final = stage / "checkpoint_final"
    if not force and (final / "meta.json").exists():
        load_checkpoint(state, final, cfg.train)
        click.echo(f"resuming from {final} at step {state.step}")

    def sampler(rng):
        return sample_training_episode(pool, lookup, cfg.aug, rng, cfg.encoder.input_mode)

    metrics = run_training(state, sampler, cfg.train, stage, cfg.prototype, fold)
    click.echo(f"trained through step {state.step}; metrics at {metrics}")
    click.echo(f"checkpoint: {final}")


def _iter_eval_pairs(cfg, fold, scans, resized):
    seed0 = cfg.experiment.seeds[0] if cfg.experiment.seeds else 0
    for class_id in sorted(cfg.experiment.organ_groups[fold]):
        holders = class_holders(scans, class_id)
        if len(holders) < 2:
            raise click.ClickException(
                f"class {class_id} appears in fewer than two patients"
            )
        for qi, query in enumerate(holders):
            support = pair_support(holders, qi, [seed0, fold_seed(fold), class_id])
            yield class_id, query, support, resized[query.patient_id], resized[support.patient_id]


@main.command()
@common_options
@click.option("--fold", default=None)
@click.option("--variant", type=click.Choice(VARIANTS), default="cca")
@friendly_errors
def infer(config_path, seed, out_dir, force, fold, variant):
    """Segment every eligible query scan and save the predicted volumes."""
    cfg = _resolve(config_path, seed, out_dir)
    fold = _pick_fold(cfg, fold)
    stage = _stage(cfg, "infer", fold, variant)
    _snapshot(cfg, stage, "infer", force, fold=fold, variant=variant)
    state = _load_state_for(cfg, fold, variant)
    manifest = _manifest(cfg)
    scans = load_dataset(manifest, cfg.data)
    res = _eval_resolution(cfg)
    resized = {s.patient_id: reformat_and_resize(s, res) for s in scans}
    index = []
    for class_id, query, support, qry_slices, sup_slices in _iter_eval_pairs(
        cfg, fold, scans, resized
    ):
        seg = predict_variant(
            state, variant, sup_slices, qry_slices, class_id,
            cfg.inference, cfg.prototype, cfg.ttt,
        )
        name = _pred_name(query.patient_id, class_id)
        _save_volume_mask(stage / name, seg.prediction.astype(np.uint8))
        if cfg.inference.save_probabilities:
            nifti.write_volume(
                stage / f"prob_{query.patient_id}_c{class_id}.nii.gz",
                np.transpose(seg.fg_probability, (1, 2, 0)),
            )
        index.append(
            {
                "class": class_id,
                "patient": query.patient_id,
                "support": support.patient_id,
                "prediction": name,
            }
        )
        click.echo(f"segmented {query.patient_id} class {class_id} (support {support.patient_id})")
    (stage / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True))
    click.echo(f"wrote {len(index)} prediction volumes to {stage}")


@main.command()
@common_options
@click.option("--fold", default=None)
@click.option(
    "--variant",
    type=click.Choice(VARIANTS),
    default="cca",
    help="Which saved predictions seed the adaptation.",
)
@friendly_errors
def ttt(config_path, seed, out_dir, force, fold, variant):
    """Adapt the model per query scan on its own saved predictions."""
    cfg = _resolve(config_path, seed, out_dir)
    fold = _pick_fold(cfg, fold)
    stage = _stage(cfg, "ttt", fold)
    _snapshot(cfg, stage, "ttt", force, fold=fold, variant=variant)
    state = _load_state_for(cfg, fold, variant)
    manifest = _manifest(cfg)
    scans = load_dataset(manifest, cfg.data)
    res = _eval_resolution(cfg)
    resized = {s.patient_id: reformat_and_resize(s, res) for s in scans}
    src = _stage(cfg, "infer", fold, variant)
    inference_cfg = copy.deepcopy(cfg.inference)
    inference_cfg.cca = True
    reports = []
    for class_id, query, support, qry_slices, sup_slices in _iter_eval_pairs(
        cfg, fold, scans, resized
    ):
        pred_path = src / _pred_name(query.patient_id, class_id)
        if not pred_path.exists():
            raise click.ClickException(
                f"missing predictions at {pred_path}; run "
                f"`protoseg infer --fold {fold} --variant {variant}` first"
            )
        labels = _load_volume_mask(pred_path)
        snapshot = copy.deepcopy(state.model.state_dict())
        try:
            rep = adapt_to_query(
                state, qry_slices, labels, cfg.ttt, class_id, cfg.prototype
            )
            seg = segment_volume(
                state, sup_slices, qry_slices, class_id, inference_cfg, cfg.prototype
            )
        finally:
            state.model.load_state_dict(snapshot)
        _save_volume_mask(stage / _pred_name(query.patient_id, class_id), seg.prediction)
        reports.append(
            {
                "class": class_id,
                "patient": query.patient_id,
                "steps": rep.steps,
                "eligible_slices": rep.eligible_slices,
                "skipped_empty": rep.skipped_empty,
            }
        )
        click.echo(
            f"adapted on {query.patient_id} class {class_id}: {rep.steps} steps, "
            f"{rep.skipped_empty} empty slices skipped"
        )
    (stage / "ttt_report.json").write_text(json.dumps(reports, indent=2, sort_keys=True))
    click.echo(f"wrote {len(reports)} adapted prediction volumes to {stage}")


@main.command(name="eval")
@common_options
@click.option("--fold", default=None, help="Restrict to one fold (default: all).")
@click.option("--variant", type=click.Choice(VARIANTS), default=None, help="Restrict to one variant.")
@friendly_errors
def eval_cmd(config_path, seed, out_dir, force, fold, variant):
    """Score every fold/variant/class/scan combination and tabulate Dice."""
    cfg = _resolve(config_path, seed, out_dir)
    groups = cfg.experiment.organ_groups
    if fold is not None:
        fold = _pick_fold(cfg, fold)
        groups = {fold: groups[fold]}
    if not groups:
        raise click.ClickException("config experiment.organ_groups is empty")
    variants = (variant,) if variant else tuple(cfg.experiment.variants)
    spec = dataclasses.replace(cfg.experiment, organ_groups=groups, variants=variants)
    stage = _stage(cfg, "eval")
    _snapshot(cfg, stage, "eval", force, folds=sorted(groups), variants=list(variants))
    manifest = _manifest(cfg)
    scans = load_dataset(manifest, cfg.data)

    cache = {}

    def model_loader(fold_name, variant_name):
        key = (fold_name, "slice_adapter" if variant_name == "slice_adapter" else "any")
        if key not in cache:
            cache[key] = _load_state_for(cfg, fold_name, variant_name)
        return cache[key]

    sources = {f: _stage(cfg, "train", f, "episode_sources.csv") for f in groups}
    run_experiment(
        spec,
        manifest,
        scans,
        model_loader,
        stage,
        _eval_resolution(cfg),
        cfg.inference,
        cfg.prototype,
        cfg.ttt,
        sources_csv=sources,
    )
    click.echo((stage / "metrics.txt").read_text().rstrip())
    click.echo(f"per-scan results: {stage / 'results.csv'}")


if __name__ == "__main__":
    main()

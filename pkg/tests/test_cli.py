import csv
import json
from types import SimpleNamespace

import pytest
from click.testing import CliRunner

from protoseg.cli import main
from protoseg.config import load_config, save_config


def invoke(runner, args):
    result = runner.invoke(main, [str(a) for a in args])
    return result


def seg_losses(metrics_csv):
    with open(metrics_csv) as f:
        return [row["seg_loss"] for row in csv.DictReader(f)]


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    runner = CliRunner()
    r = invoke(runner, ["synth", "--out", root, "--scans", 4, "--seed", 0])
    assert r.exit_code == 0, r.output
    cfg_path = root / "config.yaml"
    cfg = load_config(cfg_path)
    cfg.train.episodes = 4
    cfg.train.checkpoint_every = 2
    save_config(cfg, cfg_path)
    args = ["--config", cfg_path]
    r_pre = invoke(runner, ["preprocess", *args])
    assert r_pre.exit_code == 0, r_pre.output
    r_train = invoke(runner, ["train", *args, "--fold", "group0"])
    assert r_train.exit_code == 0, r_train.output
    return SimpleNamespace(
        root=root,
        runs=root / "runs",
        runner=runner,
        args=args,
        synth_output=r.output,
        preprocess_output=r_pre.output,
        train_output=r_train.output,
    )


def test_version_smoke():
    r = CliRunner().invoke(main, ["--version"])
    assert r.exit_code == 0


def test_synth_writes_dataset_and_config(pipeline):
    data = pipeline.root / "data"
    assert (data / "manifest.yaml").exists()
    vols = sorted(p.name for p in data.glob("vol_*.nii.gz"))
    assert len(vols) == 8  # 4 volumes + 4 label volumes
    assert (pipeline.root / "config.yaml").exists()
    assert "manifest" in pipeline.synth_output


def test_preprocess_first_run_computes(pipeline):
    assert "(64 computed, 0 from cache)" in pipeline.preprocess_output
    summary = json.loads((pipeline.runs / "preprocess" / "summary.json").read_text())
    assert summary["slices"] == 64
    assert summary["cache_misses"] == 64


def test_preprocess_second_run_hits_cache(pipeline):
    r = invoke(pipeline.runner, ["preprocess", *pipeline.args])
    assert r.exit_code == 0, r.output
    assert "(0 computed, 64 from cache)" in r.output
    summary = json.loads((pipeline.runs / "preprocess" / "summary.json").read_text())
    assert summary["cache_hits"] == 64


def test_train_artifacts(pipeline):
    stage = pipeline.runs / "train" / "group0"
    assert "config digest:" in pipeline.train_output
    losses = seg_losses(stage / "metrics.csv")
    assert len(losses) == 4
    assert (stage / "checkpoint_000002").is_dir()
    assert (stage / "checkpoint_000004").is_dir()
    meta = json.loads((stage / "checkpoint_final" / "meta.json").read_text())
    assert meta["step"] == 4
    assert meta["fold"] == "group0"
    with open(stage / "episode_sources.csv") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 4
    assert all(r["patient"].startswith("p") for r in rows)


def test_train_seed_reproducible(pipeline, tmp_path):
    out_b = tmp_path / "again"
    r = invoke(
        pipeline.runner, ["train", *pipeline.args, "--out", out_b, "--fold", "group0"]
    )
    assert r.exit_code == 0, r.output
    assert seg_losses(out_b / "train" / "group0" / "metrics.csv") == seg_losses(
        pipeline.runs / "train" / "group0" / "metrics.csv"
    )


def test_fold_required_when_ambiguous(pipeline):
    r = invoke(pipeline.runner, ["train", *pipeline.args])
    assert r.exit_code != 0
    assert "--fold is required" in r.output
    assert "group0" in r.output and "group1" in r.output


def test_unknown_fold_lists_available(pipeline):
    r = invoke(pipeline.runner, ["train", *pipeline.args, "--fold", "groupX"])
    assert r.exit_code != 0
    assert "unknown fold 'groupX'" in r.output
    assert "group0, group1" in r.output


def test_infer_requires_checkpoint(pipeline):
    r = invoke(pipeline.runner, ["infer", *pipeline.args, "--fold", "group1"])
    assert r.exit_code != 0
    assert "protoseg train --fold group1" in r.output


def test_eval_requires_training_provenance(pipeline):
    r = invoke(pipeline.runner, ["eval", *pipeline.args, "--fold", "group1"])
    assert r.exit_code != 0
    assert "run train first" in r.output


def test_ttt_requires_saved_predictions(pipeline):
    r = invoke(
        pipeline.runner,
        ["ttt", *pipeline.args, "--fold", "group0", "--variant", "base"],
    )
    assert r.exit_code != 0
    assert "protoseg infer --fold group0 --variant base" in r.output


def test_digest_conflict_needs_force(pipeline):
    r = invoke(pipeline.runner, ["preprocess", *pipeline.args, "--seed", 5])
    assert r.exit_code != 0
    assert "Pass --force" in r.output
    r2 = invoke(pipeline.runner, ["preprocess", *pipeline.args, "--seed", 5, "--force"])
    assert r2.exit_code == 0, r2.output
    # restore the canonical stamp for any later stage checks
    r3 = invoke(pipeline.runner, ["preprocess", *pipeline.args, "--force"])
    assert r3.exit_code == 0, r3.output


def test_train_resume_is_noop_when_done(pipeline):
    r = invoke(pipeline.runner, ["train", *pipeline.args, "--fold", "group0"])
    assert r.exit_code == 0, r.output
    assert "resuming from" in r.output
    assert "at step 4" in r.output
    assert len(seg_losses(pipeline.runs / "train" / "group0" / "metrics.csv")) == 4


def test_infer_writes_predictions_and_index(pipeline):
    r = invoke(
        pipeline.runner,
        ["infer", *pipeline.args, "--fold", "group0", "--variant", "cca"],
    )
    assert r.exit_code == 0, r.output
    stage = pipeline.runs / "infer" / "group0" / "cca"
    index = json.loads((stage / "index.json").read_text())
    assert len(index) == 4  # every patient holds class 1
    for entry in index:
        assert entry["class"] == 1
        assert entry["support"] != entry["patient"]
        assert (stage / entry["prediction"]).exists()


def test_ttt_after_infer(pipeline):
    cfg_path = pipeline.root / "config_ttt.yaml"
    cfg = load_config(pipeline.args[1])
    cfg.ttt.iterations = 2
    save_config(cfg, cfg_path)
    r = invoke(
        pipeline.runner,
        ["ttt", "--config", cfg_path, "--fold", "group0", "--variant", "cca", "--force"],
    )
    assert r.exit_code == 0, r.output
    stage = pipeline.runs / "ttt" / "group0"
    report = json.loads((stage / "ttt_report.json").read_text())
    assert len(report) == 4
    assert all(e["steps"] == 2 for e in report)
    assert all((stage / f"pred_{e['patient']}_c1.nii.gz").exists() for e in report)


def test_eval_restricted_variant(pipeline):
    r = invoke(
        pipeline.runner,
        ["eval", *pipeline.args, "--fold", "group0", "--variant", "base"],
    )
    assert r.exit_code == 0, r.output
    assert "mean" in r.output
    stage = pipeline.runs / "eval"
    with open(stage / "metrics.csv") as f:
        rows = list(csv.DictReader(f))
    assert rows and all(row["variant"] == "base" for row in rows)
    assert all(row["fold"] == "group0" for row in rows)
    with open(stage / "results.csv") as f:
        per_scan = list(csv.DictReader(f))
    assert len(per_scan) == 4
    assert all(0.0 <= float(row["dice"]) <= 1.0 for row in per_scan)

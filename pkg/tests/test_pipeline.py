from __future__ import annotations

import dataclasses
import json

import numpy as np
import pytest

from stitchrl.bridge import BridgeConfig
from stitchrl.env import EnvSpec
from stitchrl.pipeline import (RunConfig, StageError, Variant, config_hash, expand_variant, load_run_config,
                               read_metrics_csv, run_pipeline)
from stitchrl.report import EnvMismatchError, MissingArtifactError, aggregate, collect_rows, write_report
from stitchrl.rl import RlConfig
from stitchrl.stitch import StitchConfig


def tiny_config(out_dir, **kw) -> RunConfig:
    base = dict(n_episodes=60, seeds=(0, 1), bridge_pairs=256, model_epochs=2, sarsa_steps=50,
                out_dir=str(out_dir), stitch=StitchConfig(M=16), bridge=BridgeConfig(train_iters=50),
                rl=RlConfig(steps=100, eval_episodes=20, lr=1e-3))
    base.update(kw)
    return RunConfig(**base)


@pytest.fixture(scope="module")
def smoke_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("smoke")
    cfg = tiny_config(root)
    run_pipeline(cfg)
    return cfg, root


def test_config_roundtrip(tmp_path):
    cfg = tiny_config(tmp_path, variants=(Variant.BACKBONE, Variant.ABLATION_Q), env=EnvSpec(seed=5))
    (tmp_path / "c.yaml").write_text(cfg.dump_yaml())
    back = load_run_config(tmp_path / "c.yaml")
    assert back == cfg
    assert config_hash(back.to_dict()) == config_hash(cfg.to_dict())


def test_config_rejects_unknown_keys(tmp_path):
    (tmp_path / "c.yaml").write_text("seeds: [0]\nbogus: 1\n")
    with pytest.raises(ValueError, match="bogus"):
        load_run_config(tmp_path / "c.yaml")
    with pytest.raises(ValueError):
        RunConfig(seeds=())
    with pytest.raises(ValueError):
        RunConfig(preset="huge")


def test_presets():
    assert RunConfig().episodes == 1024
    assert RunConfig(preset="full").episodes == 8192
    assert RunConfig(n_episodes=7).episodes == 7


def test_variant_expansion():
    base = StitchConfig()
    assert [a.name for a in expand_variant(Variant.ABLATION_STRATEGY, base)] == ["low_to_high", "high_to_low", "random"]
    assert [a.name for a in expand_variant(Variant.ABLATION_SAMPLING, base)] == ["priority", "uniform"]
    assert [a.stitch.q for a in expand_variant(Variant.ABLATION_Q, base)] == [25.0, 50.0, 75.0]
    assert expand_variant(Variant.BACKBONE, base)[0].kind == "none"


def test_smoke_artifacts(smoke_run):
    cfg, root = smoke_run
    rows = read_metrics_csv(root / "comparison.csv")
    assert [(r["dataset_variant"], r["seed"]) for r in rows] == [
        ("backbone", "0"), ("backbone", "1"), ("treatstitch", "0"), ("treatstitch", "1"),
        ("treatstitch_sb", "0"), ("treatstitch_sb", "1")]
    for r in rows:
        assert np.isfinite(float(r["mean_return"])) and r["wis"] != "" and r["dr"] != ""
        if r["dataset_variant"] == "backbone":
            assert r["n_stitched"] == "0" and r["n_sb"] == "0"
    assert len({r["env_hash"] for r in rows}) == 1
    for name in ("augmented.jsonl", "qnet.npz", "metrics.csv", "validity.json", "bridge.npz", "models.npz",
                 "bridge_trace.csv", "provenance.json"):
        assert (root / "seed_0" / "treatstitch_sb" / name).exists(), name
    v = json.loads((root / "seed_0" / "treatstitch" / "validity.json").read_text())
    assert v["state_violations"] == 0 and v["nonjunction_mismatches"] == 0


def test_resume_skips_completed_stages(smoke_run, caplog):
    cfg, root = smoke_run
    before = (root / "comparison.csv").read_bytes()
    stamp = (root / "seed_0" / "backbone" / "qnet.npz").stat().st_mtime_ns
    with caplog.at_level("INFO", logger="stitchrl.pipeline"):
        run_pipeline(cfg)
    assert not any(m.startswith("run ") for m in caplog.messages)
    assert (root / "seed_0" / "backbone" / "qnet.npz").stat().st_mtime_ns == stamp
    assert (root / "comparison.csv").read_bytes() == before


def test_resume_after_missing_artifact(smoke_run):
    cfg, root = smoke_run
    metrics = root / "seed_1" / "backbone" / "metrics.csv"
    old = metrics.read_bytes()
    metrics.unlink()
    run_pipeline(cfg)
    assert metrics.read_bytes() == old


def test_byte_identical_reruns(smoke_run, tmp_path):
    cfg, root = smoke_run
    again = dataclasses.replace(cfg, out_dir=str(tmp_path / "again"))
    run_pipeline(again)
    assert (tmp_path / "again" / "comparison.csv").read_bytes() == (root / "comparison.csv").read_bytes()
    for seed in cfg.seeds:
        for arm in ("backbone", "treatstitch", "treatstitch_sb"):
            a = (root / f"seed_{seed}" / arm / "metrics.csv").read_bytes()
            b = (tmp_path / "again" / f"seed_{seed}" / arm / "metrics.csv").read_bytes()
            assert a == b


def test_threads_match_sequential(smoke_run, tmp_path):
    cfg, root = smoke_run
    par = dataclasses.replace(cfg, out_dir=str(tmp_path / "par"))
    run_pipeline(par, threads=2)
    assert (tmp_path / "par" / "comparison.csv").read_bytes() == (root / "comparison.csv").read_bytes()


def test_stage_failure_names_stage(tmp_path, monkeypatch):
    import stitchrl.pipeline as pl

    def boom(*a, **k):
        raise FloatingPointError("diverged")

    monkeypatch.setattr(pl, "train_cql", boom)
    cfg = tiny_config(tmp_path, seeds=(0,), variants=(Variant.TREATSTITCH,), stitch=StitchConfig(M=4))
    with pytest.raises(StageError) as err:
        run_pipeline(cfg)
    assert err.value.stage == "train" and "treatstitch" in str(err.value.path)
    assert "diverged" in str(err.value)
    # the augment stage completed and is reused on the next attempt
    monkeypatch.undo()
    prov = json.loads((tmp_path / "seed_0" / "treatstitch" / "provenance.json").read_text())
    assert "augment" in prov and "train" not in prov
    run_pipeline(cfg)
    assert (tmp_path / "seed_0" / "treatstitch" / "metrics.csv").exists()


def test_ablation_rows(tmp_path):
    cfg = tiny_config(tmp_path, seeds=(0,), variants=(Variant.ABLATION_STRATEGY,), stitch=StitchConfig(M=4),
                      ope=False, verify=False)
    run_pipeline(cfg)
    rows = read_metrics_csv(tmp_path / "comparison.csv")
    assert sorted(r["dataset_variant"] for r in rows) == ["high_to_low", "low_to_high", "random"]
    assert all(r["wis"] == "" for r in rows)


def test_report(smoke_run, tmp_path):
    cfg, root = smoke_run
    paths = write_report([root], tmp_path / "rep")
    for p in paths.values():
        assert p.exists()
    summary = read_metrics_csv(paths["summary"])
    rows = read_metrics_csv(root / "comparison.csv")
    for s in summary:
        vals = [float(r["mean_return"]) for r in rows if r["dataset_variant"] == s["dataset_variant"]]
        assert float(s["mean_return_mean"]) == pytest.approx(np.mean(vals), abs=1e-12)
        assert float(s["mean_return_std"]) == pytest.approx(np.std(vals), abs=1e-12)
        assert s["n_seeds"] == "2"
    assert "treatstitch" in paths["chart"].read_text()
    assert "<svg" in paths["returns_svg"].read_text()


def test_report_errors(smoke_run, tmp_path):
    cfg, root = smoke_run
    (tmp_path / "empty").mkdir()
    with pytest.raises(MissingArtifactError) as err:
        write_report([tmp_path / "empty"])
    assert "comparison.csv" in str(err.value)
    rows = collect_rows([root])
    for r in rows:
        r["env_hash"] = "x" if r["seed"] == "0" else "y"
    other = tmp_path / "other"
    other.mkdir()
    for name in ("config.yaml", "env.json"):
        (other / name).write_bytes((root / name).read_bytes())
    text = (root / "comparison.csv").read_text()
    first = read_metrics_csv(root / "comparison.csv")[0]["env_hash"]
    (other / "comparison.csv").write_text(text.replace(first, "0" * len(first)))
    for sub in root.glob("seed_*/*/metrics.csv"):
        dst = other / sub.relative_to(root)
        dst.parent.mkdir(parents=True, exist_ok=True)
        dst.write_bytes(sub.read_bytes())
    with pytest.raises(EnvMismatchError):
        collect_rows([root, other])
    assert len(aggregate(collect_rows([root]))) == 3

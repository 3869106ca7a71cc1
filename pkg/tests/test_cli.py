from __future__ import annotations

import json
import subprocess
import sys

import pytest

from stitchrl.cli import build_parser, main

TINY = """\
n_episodes: 40
seeds: [0]
bridge_pairs: 128
model_epochs: 2
sarsa_steps: 30
stitch: {M: 8}
bridge: {train_iters: 30}
rl: {steps: 60, eval_episodes: 10, lr: 0.001}
"""


def run(capsys, *argv):
    rc = main([str(a) for a in argv])
    out = capsys.readouterr()
    return rc, out.out, out.err


def jout(text):
    return json.loads(text)


@pytest.fixture
def cfg_file(tmp_path):
    p = tmp_path / "run.yaml"
    p.write_text(TINY)
    return p


def test_global_flags_before_or_after_subcommand(cfg_file):
    p = build_parser()
    a = p.parse_args(["--seed", "3", "--config", str(cfg_file), "make-env"])
    b = p.parse_args(["make-env", "--seed", "3", "--config", str(cfg_file)])
    assert (a.seed, a.config) == (b.seed, b.config) == (3, str(cfg_file))


def test_stage_by_stage(tmp_path, cfg_file, capsys):
    c = ["--config", cfg_file]
    env, data = tmp_path / "env.json", tmp_path / "data.jsonl"
    rc, out, _ = run(capsys, *c, "--seed", 4, "--out", env, "make-env")
    assert rc == 0 and len(jout(out)["env_hash"]) > 0
    rc, out, _ = run(capsys, *c, "collect", "--env", env, "--out", data)
    assert rc == 0 and jout(out)["trajectories"] == 40
    rc, out, _ = run(capsys, *c, "split", "--data", data, "--q", 50, "--out", tmp_path / "split")
    info = jout(out)
    assert info["high"] + info["low"] == 40 and (tmp_path / "split" / "high.jsonl").exists()
    aug = tmp_path / "aug.jsonl"
    rc, out, _ = run(capsys, *c, "stitch", "--data", data, "--out", aug)
    assert rc == 0 and jout(out)["requested"] == 8
    bridge = tmp_path / "bridge.npz"
    rc, out, _ = run(capsys, *c, "train-bridge", "--data", data, "--out", bridge)
    assert rc == 0 and (tmp_path / "bridge_trace.csv").exists()
    models = tmp_path / "models.npz"
    rc, out, _ = run(capsys, *c, "train-models", "--data", data, "--env", env, "--out", models)
    assert rc == 0 and "action_accuracy" in jout(out)
    sb = tmp_path / "sb.jsonl"
    rc, out, _ = run(capsys, *c, "augment-sb", "--data", data, "--bridge", bridge, "--models", models, "--out", sb)
    rep = jout(out)
    assert rep["direct_count"] + rep["sb_count"] == rep["produced"]
    qnet = tmp_path / "qnet.npz"
    rc, out, _ = run(capsys, *c, "train-rl", "--data", aug, "--out", qnet)
    assert rc == 0 and qnet.exists()
    rc, out, _ = run(capsys, *c, "eval", "--env", env, "--qnet", qnet, "--episodes", 5)
    assert jout(out)["episodes"] == 5
    rc, out, _ = run(capsys, *c, "ope", "--env", env, "--data", data, "--qnet", qnet)
    assert set(jout(out)) == {"wis", "dr"}
    rc, out, _ = run(capsys, *c, "verify", "--augmented", aug, "--original", data, "--out", tmp_path / "v")
    assert rc == 0 and "junctions" in out and (tmp_path / "v" / "validity.json").exists()


def test_pipeline_and_report(tmp_path, cfg_file, capsys):
    root = tmp_path / "run"
    rc, out, _ = run(capsys, "pipeline", "--config", cfg_file, "--out", root)
    assert rc == 0 and out.strip().endswith("comparison.csv")
    assert (root / "report" / "summary.csv").exists()
    rc, out, _ = run(capsys, "report", root, "--out", tmp_path / "rep", "--no-figures")
    assert rc == 0 and not (tmp_path / "rep" / "returns.svg").exists()


def test_errors_are_reported(tmp_path, capsys):
    (tmp_path / "empty").mkdir()
    rc, _, err = run(capsys, "report", tmp_path / "empty")
    assert rc == 1 and "missing artifacts" in err
    rc, _, err = run(capsys, "collect", "--env", tmp_path / "nope.json")
    assert rc == 1 and err.startswith("error:")
    bad = tmp_path / "bad.yaml"
    bad.write_text("nonsense_key: 1\n")
    rc, _, err = run(capsys, "--config", bad, "make-env")
    assert rc == 1 and "nonsense_key" in err
    with pytest.raises(SystemExit):
        main(["no-such-command"])


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "stitchrl.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "pipeline" in res.stdout

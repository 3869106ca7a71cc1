"""Command-line entry point: one subcommand per pipeline stage plus ``pipeline`` and ``report``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import bridge as br
from .data import load_dataset, save_dataset, split_by_return
from .dynamics import DynamicsModels, sb_augment, train_models
from .env import BehaviorPolicy, ConfigError, collect_dataset, load_env, sample_env, save_env
from .ope import dr_estimate, wis_estimate
from .pipeline import RunConfig, StageError, load_qnet, load_run_config, run_pipeline, save_qnet
from .report import EnvMismatchError, MissingArtifactError, write_report
from .rl import evaluate_policy, q_policy, train_cql
from .stitch import augment
from .validity import check_theorem1, estimate_lipschitz

log = logging.getLogger("stitchrl")


def _config(args) -> RunConfig:
    cfg = load_run_config(args.config) if args.config else RunConfig()
    return cfg


def _out(args, default: str) -> Path:
    p = Path(args.out or default)
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def _seed(args, fallback: int) -> int:
    return fallback if args.seed is None else args.seed


def _dump(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True, default=str))


def cmd_make_env(args):
    import dataclasses
    cfg = _config(args)
    spec = cfg.env if args.seed is None else dataclasses.replace(cfg.env, seed=args.seed)
    inst = sample_env(spec)
    out = _out(args, "env.json")
    save_env(inst, out)
    _dump({"env": str(out), "env_hash": inst.spec_hash})


def cmd_collect(args):
    cfg = _config(args)
    env = load_env(args.env)
    n = args.episodes or cfg.episodes
    eps = cfg.behavior_epsilon if args.epsilon is None else args.epsilon
    ds = collect_dataset(env, BehaviorPolicy(env, eps), n, seed=_seed(args, cfg.data_seed))
    out = _out(args, "data.jsonl")
    save_dataset(ds, out)
    _dump({"data": str(out), "trajectories": len(ds), "transitions": ds.n_transitions})


def cmd_split(args):
    cfg = _config(args)
    ds = load_dataset(args.data)
    q = cfg.stitch.q if args.q is None else args.q
    high, low, phi = split_by_return(ds, q, cfg.stitch.gamma)
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(high, out / "high.jsonl")
    save_dataset(low, out / "low.jsonl")
    _dump({"phi": phi, "q": q, "high": len(high), "low": len(low)})


def cmd_stitch(args):
    cfg = _config(args)
    ds = load_dataset(args.data)
    aug, rep = augment(ds, cfg.stitch, _seed(args, 0))
    out = _out(args, "augmented.jsonl")
    save_dataset(aug, out)
    out.with_suffix(".report.json").write_text(json.dumps(rep, indent=2, sort_keys=True))
    _dump({k: rep[k] for k in ("requested", "produced", "misses", "phi")})


def cmd_train_bridge(args):
    cfg = _config(args)
    ds = load_dataset(args.data)
    rng = np.random.default_rng(_seed(args, 0))
    pairs = br.make_training_pairs(ds, cfg.bridge_pairs, rng, cfg.bridge.pair_band)
    res = br.train_bridge(pairs, cfg.bridge, rng)
    out = _out(args, "bridge.npz")
    res.net.save(out, {"pairs": cfg.bridge_pairs, "pair_band": list(cfg.bridge.pair_band)})
    res.write_trace(out.with_name(out.stem + "_trace.csv"))
    _dump({"bridge": str(out), "final_fwd": float(res.fwd_losses[-1]) if len(res.fwd_losses) else None,
           "final_bwd": float(res.bwd_losses[-1]) if len(res.bwd_losses) else None})


def cmd_train_models(args):
    cfg = _config(args)
    ds = load_dataset(args.data)
    bounds = load_env(args.env).reward_bounds if args.env else None
    models = train_models(ds, cfg.model_epochs, cfg.model_lr, _seed(args, 0), reward_bounds=bounds)
    out = _out(args, "models.npz")
    models.save(out)
    _dump({"models": str(out), **models.metrics})


def cmd_augment_sb(args):
    cfg = _config(args)
    ds = load_dataset(args.data)
    net = br.BridgeNet.load(args.bridge)
    models = DynamicsModels.load(args.models)
    aug, rep = sb_augment(ds, cfg.stitch, net, cfg.bridge, models, _seed(args, 0))
    out = _out(args, "augmented_sb.jsonl")
    save_dataset(aug, out)
    out.with_suffix(".report.json").write_text(json.dumps(rep, indent=2, sort_keys=True))
    _dump({k: rep[k] for k in ("requested", "produced", "direct_count", "sb_count", "k_histogram")})


def cmd_train_rl(args):
    cfg = _config(args)
    ds = load_dataset(args.data)
    res = train_cql(ds, cfg.rl, _seed(args, 0))
    out = _out(args, "qnet.npz")
    save_qnet(res.qnet, out)
    _dump({"qnet": str(out), "final_loss": float(res.losses[-1]) if len(res.losses) else None})


def cmd_eval(args):
    cfg = _config(args)
    env = load_env(args.env)
    pol = q_policy(load_qnet(args.qnet))
    n = args.episodes or cfg.rl.eval_episodes
    mean, std = evaluate_policy(env, pol, n, _seed(args, cfg.eval_seed))
    _dump({"mean_return": mean, "std_return": std, "episodes": n})


def cmd_ope(args):
    cfg = _config(args)
    env = load_env(args.env)
    ds = load_dataset(args.data)
    pol = q_policy(load_qnet(args.qnet))
    beh = BehaviorPolicy(env, cfg.behavior_epsilon)
    wis = wis_estimate(ds, pol, beh.probs, cfg.ope_gamma)
    dr = dr_estimate(ds, pol, beh.probs, cfg.ope_gamma, _seed(args, 0), steps=cfg.sarsa_steps)
    _dump({"wis": wis, "dr": dr})


def cmd_verify(args):
    cfg = _config(args)
    aug = load_dataset(args.augmented)
    orig = load_dataset(args.original)
    L, pairs = estimate_lipschitz(orig)
    rep = check_theorem1(aug, orig, cfg.stitch.delta if args.delta is None else args.delta, L)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "validity.json").write_text(rep.to_json())
        (out / "validity.txt").write_text(rep.summary())
    sys.stdout.write(rep.summary())
    return 1 if rep.state_violations or rep.nonjunction_mismatches else 0


def cmd_report(args):
    paths = write_report(args.runs, args.out, figures=not args.no_figures)
    _dump({k: str(v) for k, v in paths.items()})


def cmd_pipeline(args):
    import dataclasses
    cfg = _config(args)
    changes = {}
    if args.out:
        changes["out_dir"] = args.out
    if args.seed is not None:
        changes["seeds"] = (args.seed,)
    if changes:
        cfg = dataclasses.replace(cfg, **changes)
    root = run_pipeline(cfg, threads=args.threads)
    if not args.no_report:
        write_report([root])
    print(root / "comparison.csv")


def build_parser() -> argparse.ArgumentParser:
    def global_flags(suppress: bool) -> argparse.ArgumentParser:
        # subcommands repeat the global flags; SUPPRESS keeps them from resetting values given earlier
        dflt = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
        g = argparse.ArgumentParser(add_help=False)
        g.add_argument("--config", default=dflt(None), help="YAML run configuration")
        g.add_argument("--seed", type=int, default=dflt(None))
        g.add_argument("--out", default=dflt(None), help="output file or directory")
        g.add_argument("--threads", type=int, default=dflt(1))
        g.add_argument("-v", "--verbose", action="store_true", default=dflt(False))
        return g

    common = global_flags(suppress=True)
    p = argparse.ArgumentParser(prog="stitchrl", description="Trajectory stitching for offline RL",
                                parents=[global_flags(suppress=False)])
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_, parents=[common])
        sp.set_defaults(func=fn)
        return sp

    add("make-env", cmd_make_env, "sample an environment instance")
    sp = add("collect", cmd_collect, "log behaviour-policy episodes")
    sp.add_argument("--env", required=True)
    sp.add_argument("--episodes", type=int)
    sp.add_argument("--epsilon", type=float)
    sp = add("split", cmd_split, "split a dataset at a return percentile")
    sp.add_argument("--data", required=True)
    sp.add_argument("--q", type=float)
    sp = add("stitch", cmd_stitch, "direct trajectory stitching")
    sp.add_argument("--data", required=True)
    sp = add("train-bridge", cmd_train_bridge, "train the bridging-state generator")
    sp.add_argument("--data", required=True)
    sp = add("train-models", cmd_train_models, "train inverse-dynamics and reward models")
    sp.add_argument("--data", required=True)
    sp.add_argument("--env", help="environment file, for reward clamping bounds")
    sp = add("augment-sb", cmd_augment_sb, "stitching with bridged fallbacks")
    sp.add_argument("--data", required=True)
    sp.add_argument("--bridge", required=True)
    sp.add_argument("--models", required=True)
    sp = add("train-rl", cmd_train_rl, "train CQL on a dataset")
    sp.add_argument("--data", required=True)
    sp = add("eval", cmd_eval, "roll out a trained Q policy")
    sp.add_argument("--env", required=True)
    sp.add_argument("--qnet", required=True)
    sp.add_argument("--episodes", type=int)
    sp = add("ope", cmd_ope, "WIS and DR estimates of a trained policy")
    sp.add_argument("--env", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--qnet", required=True)
    sp = add("verify", cmd_verify, "check stitched data against the original support")
    sp.add_argument("--augmented", required=True)
    sp.add_argument("--original", required=True)
    sp.add_argument("--delta", type=float)
    sp = add("report", cmd_report, "summarize one or more run directories")
    sp.add_argument("runs", nargs="+")
    sp.add_argument("--no-figures", action="store_true")
    sp = add("pipeline", cmd_pipeline, "run every stage for every variant and seed")
    sp.add_argument("--no-report", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return 2
    os.environ.setdefault("OMP_NUM_THREADS", str(args.threads))
    try:
        rc = args.func(args)
    except (MissingArtifactError, EnvMismatchError, StageError, ConfigError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return int(rc or 0)


if __name__ == "__main__":
    sys.exit(main())

"""Run configuration and the end-to-end experiment pipeline.

Layout of a run directory::

    <out>/config.yaml          resolved configuration
    <out>/env.json             sampled environment
    <out>/data.jsonl           logged behaviour data
    <out>/seed_<s>/<variant>/  augmented data, models, metrics.csv, validity.json
    <out>/comparison.csv       one metrics row per (variant, seed)

Each stage writes ``provenance.json`` next to its artifacts recording the hash of
the configuration that produced them; a rerun skips a stage whose artifacts exist
with a matching hash.
"""
from __future__ import annotations

import csv
import dataclasses
import enum
import hashlib
import io
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import bridge as br
from .data import Dataset, load_dataset, save_dataset
from .dynamics import DynamicsModels, sb_augment, train_models
from .env import BehaviorPolicy, EnvSpec, collect_dataset, load_env, sample_env, save_env
from .nn import load_checkpoint, save_checkpoint
from .ope import dr_estimate, wis_estimate
from .rl import InputScaler, QNet, RlConfig, evaluate_policy, q_policy, train_cql
from .stitch import Sampling, StitchConfig, Strategy, augment
from .validity import check_theorem1, estimate_lipschitz

log = logging.getLogger(__name__)

PRESET_EPISODES = {"restricted": 2 ** 10, "full": 2 ** 13}
METRIC_COLUMNS = ["run_id", "dataset_variant", "seed", "mean_return", "std_return", "wis", "dr",
                  "train_steps", "beta", "gamma", "n_trajectories", "n_stitched", "n_sb",
                  "env_hash", "config_hash"]


class StageError(RuntimeError):
    def __init__(self, stage: str, path, cause: Exception):
        super().__init__(f"stage {stage!r} failed ({path}): {cause}")
        self.stage, self.path = stage, Path(path)


class Variant(str, enum.Enum):
    BACKBONE = "backbone"
    TREATSTITCH = "treatstitch"
    TREATSTITCH_SB = "treatstitch_sb"
    ABLATION_Q = "ablation_q"
    ABLATION_STRATEGY = "ablation_strategy"
    ABLATION_SAMPLING = "ablation_sampling"


@dataclass(frozen=True)
class Arm:
    """One trained dataset variant: a name plus how its data is built."""
    name: str
    kind: str                      # "none" | "direct" | "sb"
    stitch: StitchConfig | None = None


def expand_variant(v: Variant, base: StitchConfig, ablation_qs=(25.0, 50.0, 75.0)) -> list[Arm]:
    rep = dataclasses.replace
    if v is Variant.BACKBONE:
        return [Arm("backbone", "none")]
    if v is Variant.TREATSTITCH:
        return [Arm("treatstitch", "direct", base)]
    if v is Variant.TREATSTITCH_SB:
        return [Arm("treatstitch_sb", "sb", base)]
    if v is Variant.ABLATION_Q:
        return [Arm(f"q{q:g}", "direct", rep(base, q=q)) for q in ablation_qs]
    if v is Variant.ABLATION_STRATEGY:
        return [Arm(s.value, "direct", rep(base, strategy=s)) for s in Strategy]
    return [Arm(s.value, "direct", rep(base, sampling=s)) for s in Sampling]


@dataclass(frozen=True)
class RunConfig:
    env: EnvSpec = field(default_factory=EnvSpec)
    stitch: StitchConfig = field(default_factory=StitchConfig)
    bridge: br.BridgeConfig = field(default_factory=br.BridgeConfig)
    rl: RlConfig = field(default_factory=RlConfig)
    preset: str = "restricted"
    n_episodes: int | None = None       # overrides the preset size
    behavior_epsilon: float = 0.3
    data_seed: int = 1
    eval_seed: int = 12345
    seeds: tuple[int, ...] = (0, 1, 2)
    variants: tuple[Variant, ...] = (Variant.BACKBONE, Variant.TREATSTITCH, Variant.TREATSTITCH_SB)
    bridge_pairs: int = 4096
    model_epochs: int = 20
    model_lr: float = 1e-3
    sarsa_steps: int = 2000
    ope: bool = True
    ope_gamma: float = 1.0
    verify: bool = True
    out_dir: str = "runs/default"

    def __post_init__(self):
        if not self.seeds:
            raise ValueError("seeds must be nonempty")
        if self.preset not in PRESET_EPISODES:
            raise ValueError(f"unknown preset {self.preset!r}; choose from {sorted(PRESET_EPISODES)}")
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "variants", tuple(Variant(v) for v in self.variants))

    @property
    def episodes(self) -> int:
        return self.n_episodes if self.n_episodes is not None else PRESET_EPISODES[self.preset]

    def to_dict(self) -> dict:
        return {
            "env": self.env.to_dict(),
            "stitch": self.stitch.to_dict(),
            "bridge": self.bridge.to_dict(),
            "rl": self.rl.to_dict(),
            "preset": self.preset,
            "n_episodes": self.n_episodes,
            "behavior_epsilon": self.behavior_epsilon,
            "data_seed": self.data_seed,
            "eval_seed": self.eval_seed,
            "seeds": list(self.seeds),
            "variants": [v.value for v in self.variants],
            "bridge_pairs": self.bridge_pairs,
            "model_epochs": self.model_epochs,
            "model_lr": self.model_lr,
            "sarsa_steps": self.sarsa_steps,
            "ope": self.ope,
            "ope_gamma": self.ope_gamma,
            "verify": self.verify,
            "out_dir": self.out_dir,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown run config keys: {sorted(unknown)}")
        if "env" in d:
            d["env"] = EnvSpec.from_dict(d["env"])
        for key, typ in (("stitch", StitchConfig), ("bridge", br.BridgeConfig), ("rl", RlConfig)):
            if key in d:
                sub = dict(d[key])
                bad = set(sub) - {f.name for f in dataclasses.fields(typ)}
                if bad:
                    raise ValueError(f"unknown {key} keys: {sorted(bad)}")
                for k, v in sub.items():
                    if isinstance(v, list):
                        sub[k] = tuple(v)
                d[key] = typ(**sub)
        for key in ("seeds", "variants"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def dump_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)


def load_run_config(path) -> RunConfig:
    with open(path) as fh:
        raw = yaml.safe_load(fh) or {}
    if not isinstance(raw, dict):
        raise ValueError(f"{path}: top level must be a mapping")
    return RunConfig.from_dict(raw)


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


# -- stage bookkeeping --------------------------------------------------------

def _provenance_path(d: Path) -> Path:
    return d / "provenance.json"


def _read_provenance(d: Path) -> dict:
    p = _provenance_path(d)
    return json.loads(p.read_text()) if p.exists() else {}


def _stage_done(d: Path, stage: str, h: str, artifacts) -> bool:
    entry = _read_provenance(d).get(stage)
    return bool(entry) and entry.get("config_hash") == h and all((d / a).exists() for a in artifacts)


def _mark(d: Path, stage: str, h: str, artifacts) -> None:
    prov = _read_provenance(d)
    prov[stage] = {"config_hash": h, "artifacts": list(artifacts)}
    _provenance_path(d).write_text(json.dumps(prov, indent=2, sort_keys=True))


def _run_stage(d: Path, stage: str, h: str, artifacts, fn) -> bool:
    """Run ``fn`` unless the stage is already complete; returns True when it ran."""
    d.mkdir(parents=True, exist_ok=True)
    if _stage_done(d, stage, h, artifacts):
        log.info("skip %s (%s)", stage, d)
        return False
    log.info("run %s (%s)", stage, d)
    try:
        fn()
    except Exception as exc:
        raise StageError(stage, d / artifacts[0] if artifacts else d, exc) from exc
    _mark(d, stage, h, artifacts)
    return True


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# -- qnet checkpoints ---------------------------------------------------------

def save_qnet(qnet: QNet, path, meta=None) -> None:
    save_checkpoint(path, {"online": qnet.online}, {
        "mean": qnet.scaler.mean.tolist(), "std": qnet.scaler.std.tolist(),
        "updates": qnet.updates, **(meta or {})})


def load_qnet(path) -> QNet:
    nets, meta = load_checkpoint(path)
    net = nets["online"]
    q = QNet(net, net.copy(), InputScaler(meta["mean"], meta["std"]))
    q.updates = int(meta.get("updates", 0))
    return q


def format_float(x) -> str:
    return "" if x is None else repr(float(x))


def write_metrics_csv(path, rows: list[dict]) -> None:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=METRIC_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (format_float(v) if isinstance(v, float) else v) for k, v in r.items()})
    Path(path).write_text(buf.getvalue())


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# -- the pipeline ---------------------------------------------------------------

def _arm_hash(cfg: RunConfig, arm: Arm, seed: int) -> str:
    parts = {"env": cfg.env.to_dict(), "episodes": cfg.episodes, "eps": cfg.behavior_epsilon,
             "data_seed": cfg.data_seed, "seed": seed, "arm": arm.name, "kind": arm.kind,
             "rl": cfg.rl.to_dict(), "eval_seed": cfg.eval_seed, "ope": cfg.ope, "ope_gamma": cfg.ope_gamma, "verify": cfg.verify,
             "sarsa_steps": cfg.sarsa_steps}
    if arm.stitch is not None:
        parts["stitch"] = arm.stitch.to_dict()
    if arm.kind == "sb":
        parts.update(bridge=cfg.bridge.to_dict(), pairs=cfg.bridge_pairs,
                     model_epochs=cfg.model_epochs, model_lr=cfg.model_lr)
    return config_hash(parts)


def _seed_streams(seed: int) -> dict[str, np.random.Generator]:
    names = ("stitch", "bridge", "models", "rl", "ope")
    return {n: np.random.default_rng([int(seed), i]) for i, n in enumerate(names)}


def run_arm(cfg: RunConfig, arm: Arm, seed: int, root: Path, env, ds: Dataset) -> dict:
    d = root / f"seed_{seed}" / arm.name
    h = _arm_hash(cfg, arm, seed)
    streams = _seed_streams(seed)
    data_path = d / "augmented.jsonl"

    def build():
        if arm.kind == "none":
            aug, rep = ds, {"requested": 0, "produced": 0}
        elif arm.kind == "direct":
            aug, rep = augment(ds, arm.stitch, streams["stitch"])
        else:
            pairs = br.make_training_pairs(ds, cfg.bridge_pairs, streams["bridge"], cfg.bridge.pair_band)
            res = br.train_bridge(pairs, cfg.bridge, streams["bridge"])
            res.net.save(d / "bridge.npz", {"config_hash": h})
            res.write_trace(d / "bridge_trace.csv")
            models = train_models(ds, cfg.model_epochs, cfg.model_lr, streams["models"],
                                  reward_bounds=env.reward_bounds)
            models.save(d / "models.npz")
            aug, rep = sb_augment(ds, arm.stitch, res.net, cfg.bridge, models, streams["stitch"])
            rep["model_metrics"] = models.metrics
        rep["config_hash"] = h
        save_dataset(aug, data_path)
        _write_json(d / "augment_report.json", rep)

    _run_stage(d, "augment", h, ["augmented.jsonl", "augment_report.json"], build)

    def train():
        aug = load_dataset(data_path)
        res = train_cql(aug, cfg.rl, streams["rl"])
        save_qnet(res.qnet, d / "qnet.npz", {"config_hash": h})
        np.savetxt(d / "rl_loss.csv", res.losses, fmt="%.17g", header="loss", comments="")

    _run_stage(d, "train", h, ["qnet.npz"], train)

    def evaluate():
        aug = load_dataset(data_path)
        qnet = load_qnet(d / "qnet.npz")
        pol = q_policy(qnet)
        mean, std = evaluate_policy(env, pol, cfg.rl.eval_episodes, cfg.eval_seed)
        wis = dr = None
        if cfg.ope:
            beh = BehaviorPolicy(env, cfg.behavior_epsilon)
            wis = wis_estimate(ds, pol, beh.probs, cfg.ope_gamma)
            dr = dr_estimate(ds, pol, beh.probs, cfg.ope_gamma, streams["ope"], steps=cfg.sarsa_steps)
        sources = [t.source.value for t in aug.trajectories]
        row = {"run_id": f"{arm.name}-s{seed}", "dataset_variant": arm.name, "seed": seed,
               "mean_return": mean, "std_return": std, "wis": wis, "dr": dr,
               "train_steps": cfg.rl.steps, "beta": float(cfg.rl.beta), "gamma": float(cfg.rl.gamma),
               "n_trajectories": len(aug), "n_stitched": sources.count("Stitched"),
               "n_sb": sources.count("StitchedSB"), "env_hash": env.spec_hash, "config_hash": h}
        write_metrics_csv(d / "metrics.csv", [row])

    _run_stage(d, "eval", h, ["metrics.csv"], evaluate)

    if cfg.verify and arm.kind != "none":
        def verify():
            aug = load_dataset(data_path)
            L, n_pairs = estimate_lipschitz(ds)
            rep = check_theorem1(aug, ds, arm.stitch.delta, L)
            out = rep.to_dict()
            out.update(lipschitz_pairs=n_pairs, config_hash=h)
            _write_json(d / "validity.json", out)
            (d / "validity.txt").write_text(rep.summary())

        _run_stage(d, "verify", h, ["validity.json", "validity.txt"], verify)
    return read_metrics_csv(d / "metrics.csv")[0]


def _seed_job(args):
    cfg, seed, root = args
    env = load_env(root / "env.json")
    ds = load_dataset(root / "data.jsonl")
    rows = []
    for v in cfg.variants:
        for arm in expand_variant(v, cfg.stitch):
            rows.append(run_arm(cfg, arm, seed, root, env, ds))
    return rows


def run_pipeline(cfg: RunConfig, threads: int = 1) -> Path:
    """make-env, collect, then per seed: augment, train, eval, verify; finally the comparison CSV."""
    root = Path(cfg.out_dir)
    root.mkdir(parents=True, exist_ok=True)
    (root / "config.yaml").write_text(cfg.dump_yaml())
    env_h = config_hash({"env": cfg.env.to_dict()})
    _run_stage(root, "make-env", env_h, ["env.json"], lambda: save_env(sample_env(cfg.env), root / "env.json"))
    data_h = config_hash({"env": cfg.env.to_dict(), "episodes": cfg.episodes,
                          "eps": cfg.behavior_epsilon, "data_seed": cfg.data_seed})

    def collect():
        env = load_env(root / "env.json")
        ds = collect_dataset(env, BehaviorPolicy(env, cfg.behavior_epsilon), cfg.episodes, seed=cfg.data_seed)
        save_dataset(ds, root / "data.jsonl")

    _run_stage(root, "collect", data_h, ["data.jsonl"], collect)

    jobs = [(cfg, s, root) for s in cfg.seeds]
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(_seed_job, jobs))
    else:
        results = [_seed_job(j) for j in jobs]
    rows = [r for per_seed in results for r in per_seed]
    rows.sort(key=lambda r: (r["dataset_variant"], int(r["seed"])))
    with open(root / "comparison.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return root

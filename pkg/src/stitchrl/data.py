"""Trajectory and dataset model, returns, percentile split and JSON-Lines I/O."""
from __future__ import annotations

import enum
import json
import math
from fractions import Fraction
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np

FORMAT_VERSION = 1


class Outcome(str, enum.Enum):
    REMISSION = "Remission"
    ADVERSE = "AdverseEvent"
    TRUNCATED = "Truncated"


class Source(str, enum.Enum):
    REAL = "Real"
    STITCHED = "Stitched"
    STITCHED_SB = "StitchedSB"


class DatasetFormatError(ValueError):
    """Malformed or incompatible dataset file."""


class Step(NamedTuple):
    state: np.ndarray
    action: int
    reward: float
    synthetic: bool


@dataclass
class Trajectory:
    """One episode: per-step states, actions, rewards and synthetic flags.

    ``states[i]`` is the observation the action ``actions[i]`` was taken in.
    The observation after the last step is not stored.
    """

    id: str
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    outcome: Outcome
    source: Source = Source.REAL
    synthetic: np.ndarray | None = None
    stitch_meta: dict | None = None

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        self.actions = np.asarray(self.actions, dtype=np.int64)
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        n = len(self.actions)
        if self.synthetic is None:
            self.synthetic = np.zeros(n, dtype=bool)
        self.synthetic = np.asarray(self.synthetic, dtype=bool)
        self.outcome = Outcome(self.outcome)
        self.source = Source(self.source)
        if n == 0:
            raise ValueError(f"trajectory {self.id!r} is empty")
        if self.states.ndim != 2 or self.states.shape[0] != n or len(self.rewards) != n or len(self.synthetic) != n:
            raise ValueError(f"trajectory {self.id!r} has inconsistent step arrays")
        if not np.all(np.isfinite(self.states)):
            raise ValueError(f"trajectory {self.id!r} has non-finite states")
        if self.source is Source.REAL and self.synthetic.any():
            raise ValueError(f"real trajectory {self.id!r} contains synthetic steps")
        if self.source is Source.STITCHED_SB and (self.stitch_meta or {}).get("K", 0) < 1:
            raise ValueError(f"SB-stitched trajectory {self.id!r} needs stitch_meta.K >= 1")

    def __len__(self) -> int:
        return len(self.actions)

    @property
    def steps(self) -> Iterator[Step]:
        for s, a, r, syn in zip(self.states, self.actions, self.rewards, self.synthetic):
            yield Step(s, int(a), float(r), bool(syn))

    @property
    def terminal(self) -> bool:
        return self.outcome is not Outcome.TRUNCATED


def discounted_return(traj: Trajectory, gamma: float) -> float:
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must be in [0, 1], got {gamma}")
    powers = gamma ** np.arange(len(traj.rewards), dtype=np.float64)
    return float(np.dot(powers, traj.rewards))


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def from_states(cls, states: np.ndarray) -> "NormStats":
        states = np.asarray(states, dtype=np.float64)
        mean = states.mean(axis=0)
        std = states.std(axis=0)
        std = np.where(std > 0, std, 1.0)
        return cls(mean, std)


@dataclass
class Dataset:
    trajectories: list[Trajectory]
    env_hash: str
    n_symptoms: int
    n_treatments: int
    norm_stats: NormStats | None = None

    def __post_init__(self):
        if self.norm_stats is None:
            real = [t.states for t in self.trajectories if t.source is Source.REAL]
            if not real:
                raise ValueError("cannot compute normalization statistics without real trajectories")
            self.norm_stats = NormStats.from_states(np.concatenate(real))

    def __len__(self) -> int:
        return len(self.trajectories)

    def __iter__(self):
        return iter(self.trajectories)

    def view(self, trajectories: list[Trajectory]) -> "Dataset":
        """Dataset over a subset (or superset) of trajectories sharing this one's statistics."""
        return Dataset(list(trajectories), self.env_hash, self.n_symptoms, self.n_treatments, self.norm_stats)

    def returns(self, gamma: float) -> np.ndarray:
        return np.array([discounted_return(t, gamma) for t in self.trajectories])

    @property
    def n_transitions(self) -> int:
        return sum(len(t) for t in self.trajectories)

    def normalize(self, states: np.ndarray) -> np.ndarray:
        """Row-wise :func:`normalize_state` for an (n, d) array."""
        z = (np.atleast_2d(states) - self.norm_stats.mean) / self.norm_stats.std
        norms = np.linalg.norm(z, axis=1)
        out = np.zeros_like(z)
        ok = norms > 0
        out[ok] = z[ok] / norms[ok, None]
        out[~ok, 0] = 1.0
        return out

    def denormalize(self, units: np.ndarray, scale: float | np.ndarray = 1.0) -> np.ndarray:
        """Inverse z-score of ``units * scale``; the norm removed by normalization is supplied as ``scale``."""
        units = np.atleast_2d(units)
        scale = np.asarray(scale, dtype=np.float64).reshape(-1, 1) if np.ndim(scale) else scale
        return units * scale * self.norm_stats.std + self.norm_stats.mean

    def transitions(self):
        """Flat transition arrays ``(s, a, r, s_next, done)`` over every trajectory.

        The last step of each trajectory is marked done and gets its own state as
        a placeholder successor, since the post-episode observation is not stored.
        """
        s, a, r, s2, d = [], [], [], [], []
        for t in self.trajectories:
            n = len(t)
            s.append(t.states)
            a.append(t.actions)
            r.append(t.rewards)
            nxt = np.empty_like(t.states)
            nxt[:-1] = t.states[1:]
            nxt[-1] = t.states[-1]
            s2.append(nxt)
            done = np.zeros(n, dtype=bool)
            done[-1] = True
            d.append(done)
        return (np.concatenate(s), np.concatenate(a), np.concatenate(r),
                np.concatenate(s2), np.concatenate(d))


def normalize_state(ds: Dataset, s: np.ndarray) -> np.ndarray:
    return ds.normalize(np.asarray(s, dtype=np.float64))[0]


def nearest_rank_percentile(values, q: float) -> float:
    values = np.sort(np.asarray(values, dtype=np.float64))
    if values.size == 0:
        raise ValueError("percentile of an empty collection")
    # decimal reading of q keeps e.g. q=7, N=100 at rank 7 rather than 8
    rank = max(1, math.ceil(Fraction(str(q)) * values.size / 100))
    return float(values[rank - 1])


def split_by_return(ds: Dataset, q: float, gamma: float) -> tuple[Dataset, Dataset, float]:
    """Split into (high, low, threshold) around the ``q``-th nearest-rank percentile of returns."""
    if len(ds) == 0:
        raise ValueError("cannot split an empty dataset")
    if not 0.0 < q < 100.0:
        raise ValueError(f"q must be in (0, 100), got {q}")
    rets = ds.returns(gamma)
    phi = nearest_rank_percentile(rets, q)
    high = [t for t, r in zip(ds.trajectories, rets) if r >= phi]
    low = [t for t, r in zip(ds.trajectories, rets) if r < phi]
    if not low and len(ds) > 1:
        # all returns tie at or above phi: index split on the return-sorted order
        order = np.argsort(rets, kind="stable")
        half = len(ds) // 2
        low = [ds.trajectories[i] for i in sorted(order[:half])]
        high = [ds.trajectories[i] for i in sorted(order[half:])]
    return ds.view(high), ds.view(low), phi


# -- JSON-Lines serialization -------------------------------------------------

_HEADER_KEYS = {"format_version", "env_hash", "n_symptoms", "n_treatments", "norm_stats"}
_TRAJ_KEYS = {"id", "source", "outcome", "stitch_meta", "steps"}
_STEP_KEYS = {"s", "a", "r", "syn"}


def _traj_to_obj(t: Trajectory) -> dict:
    obj = {"id": t.id, "source": t.source.value, "outcome": t.outcome.value}
    if t.stitch_meta is not None:
        obj["stitch_meta"] = t.stitch_meta
    obj["steps"] = [
        {"s": [float(x) for x in s], "a": int(a), "r": float(r), "syn": bool(syn)}
        for s, a, r, syn in zip(t.states, t.actions, t.rewards, t.synthetic)
    ]
    return obj


def dumps_dataset(ds: Dataset) -> str:
    header = {
        "format_version": FORMAT_VERSION,
        "env_hash": ds.env_hash,
        "n_symptoms": ds.n_symptoms,
        "n_treatments": ds.n_treatments,
        "norm_stats": {"mean": [float(x) for x in ds.norm_stats.mean],
                       "std": [float(x) for x in ds.norm_stats.std]},
    }
    lines = [json.dumps(header)]
    lines.extend(json.dumps(_traj_to_obj(t)) for t in ds.trajectories)
    return "\n".join(lines) + "\n"


def save_dataset(ds: Dataset, path: str | Path) -> None:
    Path(path).write_text(dumps_dataset(ds))


def _parse_traj(obj: dict, lineno: int) -> Trajectory:
    extra = set(obj) - _TRAJ_KEYS
    if extra:
        raise DatasetFormatError(f"line {lineno}: unknown trajectory fields {sorted(extra)}")
    steps = obj["steps"]
    for st in steps:
        if set(st) != _STEP_KEYS:
            raise DatasetFormatError(f"line {lineno}: step fields must be {sorted(_STEP_KEYS)}, got {sorted(st)}")
    return Trajectory(
        id=obj["id"],
        states=np.array([st["s"] for st in steps], dtype=np.float64),
        actions=np.array([st["a"] for st in steps], dtype=np.int64),
        rewards=np.array([st["r"] for st in steps], dtype=np.float64),
        synthetic=np.array([st["syn"] for st in steps], dtype=bool),
        outcome=Outcome(obj["outcome"]),
        source=Source(obj["source"]),
        stitch_meta=obj.get("stitch_meta"),
    )


def loads_dataset(text: str) -> Dataset:
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise DatasetFormatError("empty dataset file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"line 1: malformed header ({exc.msg})") from None
    if header.get("format_version") != FORMAT_VERSION:
        raise DatasetFormatError(
            f"format_version {header.get('format_version')!r} unsupported (expected {FORMAT_VERSION})"
        )
    if set(header) != _HEADER_KEYS:
        raise DatasetFormatError(f"line 1: header fields must be {sorted(_HEADER_KEYS)}, got {sorted(header)}")
    trajs = []
    for i, line in enumerate(lines[1:], start=2):
        try:
            obj = json.loads(line)
            trajs.append(_parse_traj(obj, i))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, DatasetFormatError):
                raise
            raise DatasetFormatError(
                f"line {i}: cannot parse trajectory (last good line {i - 1}): {exc}"
            ) from None
    ns = header["norm_stats"]
    return Dataset(trajs, header["env_hash"], int(header["n_symptoms"]), int(header["n_treatments"]),
                   NormStats(np.array(ns["mean"], dtype=np.float64), np.array(ns["std"], dtype=np.float64)))


def load_dataset(path: str | Path) -> Dataset:
    return loads_dataset(Path(path).read_text())


def datasets_equal(a: Dataset, b: Dataset) -> bool:
    if (a.env_hash, a.n_symptoms, a.n_treatments) != (b.env_hash, b.n_symptoms, b.n_treatments):
        return False
    if not (np.array_equal(a.norm_stats.mean, b.norm_stats.mean) and np.array_equal(a.norm_stats.std, b.norm_stats.std)):
        return False
    if len(a) != len(b):
        return False
    for x, y in zip(a.trajectories, b.trajectories):
        if (x.id, x.outcome, x.source, x.stitch_meta) != (y.id, y.outcome, y.source, y.stitch_meta):
            return False
        for f in ("states", "actions", "rewards", "synthetic"):
            if not np.array_equal(getattr(x, f), getattr(y, f)):
                return False
    return True

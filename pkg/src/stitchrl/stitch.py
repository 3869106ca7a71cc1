"""Direct trajectory stitching.

Trajectories are split at a return percentile, a low-return prefix donor and a
high-return suffix donor are drawn by Boltzmann priority sampling, and the two
are joined at their most similar pair of (normalized) intermediate states when
that similarity clears the threshold.
"""
from __future__ import annotations

import enum
import warnings
from dataclasses import asdict, dataclass, replace

import numpy as np

from .data import Dataset, Source, Trajectory, split_by_return


class Sampling(str, enum.Enum):
    PRIORITY = "priority"
    UNIFORM = "uniform"


class Strategy(str, enum.Enum):
    LOW_TO_HIGH = "low_to_high"
    HIGH_TO_LOW = "high_to_low"
    RANDOM = "random"


@dataclass(frozen=True)
class StitchConfig:
    delta: float = 0.95
    q: float = 50.0
    gamma: float = 1.0
    M: int = 256
    # None: scaled by the dataset's return range (see resolve_alphas)
    alpha_start: float | None = None
    alpha_end: float | None = None
    sampling: Sampling = Sampling.PRIORITY
    strategy: Strategy = Strategy.LOW_TO_HIGH
    max_attempts_per_stitch: int = 100
    min_margin: int = 1
    alpha_start_scale: float = 0.1
    alpha_end_scale: float = 50.0

    def __post_init__(self):
        object.__setattr__(self, "sampling", Sampling(self.sampling))
        object.__setattr__(self, "strategy", Strategy(self.strategy))
        if not -1.0 < self.delta:
            raise ValueError(f"delta must be > -1, got {self.delta}")
        for name in ("alpha_start", "alpha_end"):
            v = getattr(self, name)
            if v is not None and v <= 0:
                raise ValueError(f"{name} must be > 0, got {v}")
        if self.M < 1:
            raise ValueError("M must be >= 1")
        if self.max_attempts_per_stitch < 1:
            raise ValueError("max_attempts_per_stitch must be >= 1")
        if self.min_margin < 0:
            raise ValueError("min_margin must be >= 0")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must be in [0, 1], got {self.gamma}")

    def resolve_alphas(self, returns: np.ndarray) -> "StitchConfig":
        spread = float(np.ptp(returns)) if len(returns) else 0.0
        spread = spread if spread > 0 else 1.0
        a0 = self.alpha_start if self.alpha_start is not None else self.alpha_start_scale * spread
        a1 = self.alpha_end if self.alpha_end is not None else self.alpha_end_scale * spread
        return replace(self, alpha_start=a0, alpha_end=a1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sampling"] = self.sampling.value
        d["strategy"] = self.strategy.value
        return d


@dataclass(frozen=True)
class StitchPoint:
    t: int
    t_prime: int
    similarity: float


def boltzmann_probs(returns, alpha: float, negate: bool = False) -> np.ndarray:
    if alpha <= 0:
        raise ValueError(f"alpha must be > 0, got {alpha}")
    r = np.asarray(returns, dtype=np.float64)
    if r.size == 0:
        raise ValueError("cannot sample from an empty group")
    logits = (-r if negate else r) / alpha
    w = np.exp(logits - logits.max())
    return w / w.sum()


def boltzmann_sample(group: Dataset, alpha: float, negate: bool, rng: np.random.Generator,
                     gamma: float = 1.0, returns: np.ndarray | None = None) -> Trajectory:
    if len(group) == 0:
        raise ValueError("cannot sample from an empty group")
    if returns is None:
        returns = group.returns(gamma)
    p = boltzmann_probs(returns, alpha, negate)
    return group.trajectories[int(rng.choice(len(p), p=p))]


def alpha_at(m: int, cfg: StitchConfig) -> float:
    if cfg.alpha_start is None or cfg.alpha_end is None:
        raise ValueError("resolve alpha_start/alpha_end before scheduling")
    if not 1 <= m <= cfg.M:
        raise ValueError(f"step {m} outside [1, {cfg.M}]")
    frac = (m - 1) / max(cfg.M - 1, 1)
    return cfg.alpha_start + frac * (cfg.alpha_end - cfg.alpha_start)


def cosine_similarity(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ValueError(f"shape mismatch {u.shape} vs {v.shape}")
    c = float(np.dot(u, v) / (np.linalg.norm(u) * np.linalg.norm(v)))
    return min(1.0, max(-1.0, c))


def find_stitch_point(tau_a: Trajectory, tau_b: Trajectory, ds_norm: Dataset,
                      cfg: StitchConfig) -> StitchPoint | None:
    """Best (t, t') pair inside the margin window, or None when a trajectory is too short.

    ``t`` indexes ``tau_a`` (suffix donor) and ``t'`` indexes ``tau_b`` (prefix
    donor). Ties go to the smallest ``t``, then the smallest ``t'``.
    """
    m = cfg.min_margin
    if len(tau_a) < 2 * m + 1 or len(tau_b) < 2 * m + 1:
        return None
    ua = ds_norm.normalize(tau_a.states[m:len(tau_a) - m])
    ub = ds_norm.normalize(tau_b.states[m:len(tau_b) - m])
    sim = np.clip(ua @ ub.T, -1.0, 1.0)
    i, j = np.unravel_index(int(np.argmax(sim)), sim.shape)
    return StitchPoint(int(i) + m, int(j) + m, float(sim[i, j]))


def stitch(tau_a: Trajectory, tau_b: Trajectory, t: int, t_prime: int, new_id: str = "stitched") -> Trajectory:
    """``tau_b[0..t']`` followed by ``tau_a[t+1..]``; the outcome is ``tau_a``'s."""
    if not (0 <= t < len(tau_a) and 0 <= t_prime < len(tau_b)):
        raise ValueError(f"cut indices ({t}, {t_prime}) outside trajectories of length {len(tau_a)}, {len(tau_b)}")
    pre = slice(0, t_prime + 1)
    suf = slice(t + 1, len(tau_a))
    return Trajectory(
        id=new_id,
        states=np.concatenate([tau_b.states[pre], tau_a.states[suf]]),
        actions=np.concatenate([tau_b.actions[pre], tau_a.actions[suf]]),
        rewards=np.concatenate([tau_b.rewards[pre], tau_a.rewards[suf]]),
        synthetic=np.concatenate([tau_b.synthetic[pre], tau_a.synthetic[suf]]),
        outcome=tau_a.outcome,
        source=Source.STITCHED,
        stitch_meta={"parents": [tau_a.id, tau_b.id], "t": int(t), "t_prime": int(t_prime)},
    )


# -- the augmentation loop ----------------------------------------------------

@dataclass
class SlotResult:
    accepted: bool
    attempts: int
    tau_a: Trajectory | None = None
    tau_b: Trajectory | None = None
    point: StitchPoint | None = None


class Sampler:
    """Draws (suffix donor, prefix donor) pairs for a fixed dataset and config."""

    def __init__(self, ds: Dataset, cfg: StitchConfig):
        self.ds = ds
        all_returns = ds.returns(cfg.gamma)
        self.cfg = cfg.resolve_alphas(all_returns)
        if self.cfg.strategy is Strategy.RANDOM:
            self.high = self.low = ds
            self.phi = None
        else:
            self.high, self.low, self.phi = split_by_return(ds, self.cfg.q, self.cfg.gamma)
            if len(self.low) == 0:
                # a single trajectory cannot be split; it donates to itself
                self.low = self.high
        self.high_ret = self.high.returns(cfg.gamma)
        self.low_ret = self.low.returns(cfg.gamma)

    def _draw(self, group, rets, negate, alpha, rng):
        if self.cfg.sampling is Sampling.UNIFORM or self.cfg.strategy is Strategy.RANDOM:
            return group.trajectories[int(rng.integers(len(group)))]
        return boltzmann_sample(group, alpha, negate, rng, returns=rets)

    def draw_pair(self, m: int, rng: np.random.Generator) -> tuple[Trajectory, Trajectory]:
        alpha = alpha_at(m, self.cfg)
        hi = self._draw(self.high, self.high_ret, False, alpha, rng)
        lo = self._draw(self.low, self.low_ret, True, alpha, rng)
        if self.cfg.strategy is Strategy.HIGH_TO_LOW:
            return lo, hi
        return hi, lo

    def search(self, m: int, rng: np.random.Generator) -> SlotResult:
        """Repeat draws until a pair clears ``delta``; keep the best pair seen otherwise."""
        best = SlotResult(False, 0)
        for attempt in range(1, self.cfg.max_attempts_per_stitch + 1):
            tau_a, tau_b = self.draw_pair(m, rng)
            pt = find_stitch_point(tau_a, tau_b, self.ds, self.cfg)
            if pt is None:
                continue
            if best.point is None or pt.similarity > best.point.similarity:
                best = SlotResult(False, attempt, tau_a, tau_b, pt)
            if pt.similarity >= self.cfg.delta:
                return SlotResult(True, attempt, tau_a, tau_b, pt)
        best.attempts = self.cfg.max_attempts_per_stitch
        return best


def slot_rngs(rng, M: int) -> list[np.random.Generator]:
    base = int(np.random.default_rng(rng).integers(2**62))
    return [np.random.default_rng([base, m]) for m in range(1, M + 1)]


def similarity_histogram(sims, bins: int = 20) -> dict:
    counts, edges = np.histogram(np.asarray(sims, dtype=np.float64), bins=bins, range=(-1.0, 1.0))
    return {"edges": [float(e) for e in edges], "counts": [int(c) for c in counts]}


def augment(ds: Dataset, cfg: StitchConfig, rng) -> tuple[Dataset, dict]:
    """Original dataset plus up to ``M`` stitched trajectories, with a summary report."""
    if len(ds) == 0:
        raise ValueError("cannot augment an empty dataset")
    sampler = Sampler(ds, cfg)
    out = list(ds.trajectories)
    attempts, sims, misses = [], [], 0
    for m, srng in enumerate(slot_rngs(rng, cfg.M), start=1):
        res = sampler.search(m, srng)
        attempts.append(res.attempts)
        if not res.accepted:
            misses += 1
            continue
        traj = stitch(res.tau_a, res.tau_b, res.point.t, res.point.t_prime, new_id=f"stitch{m:06d}")
        traj.stitch_meta["similarity"] = res.point.similarity
        out.append(traj)
        sims.append(res.point.similarity)
    report = {
        "requested": cfg.M,
        "produced": len(sims),
        "misses": misses,
        "attempts": attempts,
        "similarity_histogram": similarity_histogram(sims),
        "strategy": sampler.cfg.strategy.value,
        "sampling": sampler.cfg.sampling.value,
        "delta": cfg.delta,
        "q": cfg.q,
        "phi": sampler.phi,
        "alpha_start": sampler.cfg.alpha_start,
        "alpha_end": sampler.cfg.alpha_end,
        "warnings": [],
    }
    if not sims:
        msg = f"no stitch reached similarity {cfg.delta} in {cfg.M} slots"
        report["warnings"].append(msg)
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
    return ds.view(out), report

"""Empirical checks of the OOD bound for stitched data, Lipschitz estimation and bridge lengths."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import Dataset, Source, Trajectory

_END = b"END"
STOCHASTIC_NOTE = ("next-state deviations are reported against an empirical Lipschitz constant; "
                   "the bound assumes deterministic dynamics and the simulator is stochastic")


def state_bound(delta: float) -> float:
    return math.sqrt(max(0.0, 2.0 * (1.0 - delta)))


def _key(s, a, r, s_next) -> bytes:
    tail = _END if s_next is None else np.ascontiguousarray(s_next, dtype=np.float64).tobytes()
    return (np.ascontiguousarray(s, dtype=np.float64).tobytes() + int(a).to_bytes(4, "little", signed=True)
            + np.float64(r).tobytes() + tail)


def _traj_transitions(traj: Trajectory):
    """(index, s, a, r, s_next or None) for every step; the last has no stored successor."""
    n = len(traj)
    for i in range(n):
        yield i, traj.states[i], traj.actions[i], traj.rewards[i], (traj.states[i + 1] if i + 1 < n else None)


def transition_keys(ds: Dataset) -> set[bytes]:
    return {_key(s, a, r, s2) for t in ds.trajectories for _, s, a, r, s2 in _traj_transitions(t)}


def support_scan(augmented: Dataset, original: Dataset) -> dict:
    """Byte-level membership of every non-synthetic stitched transition in the original data.

    The direct-stitch junction transition is counted separately since its successor
    belongs to the other parent by construction; its step contents (s, a, r) are
    still required to match a logged step.
    """
    keys = transition_keys(original)
    step_keys = {_key(s, a, r, None)[:-len(_END)] for t in original.trajectories
                 for _, s, a, r, _s2 in _traj_transitions(t)}
    checked = matched = junctions = junction_steps_matched = 0
    for traj in augmented.trajectories:
        if traj.source is Source.REAL:
            continue
        j = traj.stitch_meta.get("t_prime") if traj.source is Source.STITCHED else None
        for i, s, a, r, s2 in _traj_transitions(traj):
            if traj.synthetic[i]:
                continue
            if i == j:
                junctions += 1
                junction_steps_matched += _key(s, a, r, None)[:-len(_END)] in step_keys
                continue
            checked += 1
            matched += _key(s, a, r, s2) in keys
    return {"checked": checked, "matched": matched, "fraction": matched / checked if checked else 1.0,
            "junctions": junctions, "junction_steps_matched": junction_steps_matched}


class _ActionIndex:
    """Normalized (s, s') of the original non-terminal transitions, partitioned by action."""

    def __init__(self, ds: Dataset):
        s, a, _, s2, done = ds.transitions()
        keep = ~done
        ns, ns2 = ds.normalize(s[keep]), ds.normalize(s2[keep])
        a = a[keep]
        self.by_action = {int(k): (ns[a == k], ns2[a == k]) for k in np.unique(a)}
        self.all_states = ds.normalize(s)

    def nearest(self, a: int, u):
        if a not in self.by_action:
            return None
        ss, ss2 = self.by_action[a]
        i = int(np.argmin(np.sum((ss - u) ** 2, axis=1)))
        return ss[i], ss2[i]


@dataclass
class ValidityReport:
    delta: float
    lipschitz: float
    state_bound: float
    next_state_bound: float
    n_stitched: int = 0
    n_sb: int = 0
    transitions_checked: int = 0
    junctions: int = 0
    state_violations: int = 0
    next_state_exceedances: int = 0
    nonjunction_mismatches: int = 0
    synthetic_steps: int = 0
    max_junction_state_dev: float = 0.0
    max_junction_next_dev: float = 0.0
    per_trajectory: list = field(default_factory=list)
    k_histogram: dict = field(default_factory=dict)
    note: str = STOCHASTIC_NOTE

    @property
    def violations(self) -> int:
        return self.state_violations + self.next_state_exceedances + self.nonjunction_mismatches

    def to_dict(self) -> dict:
        d = asdict(self)
        d["violations"] = self.violations
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def summary(self) -> str:
        rows = [
            ("delta", f"{self.delta:g}"),
            ("estimated L", f"{self.lipschitz:.4f}"),
            ("state bound", f"{self.state_bound:.6f}"),
            ("next-state bound", f"{self.next_state_bound:.6f}"),
            ("stitched / SB trajectories", f"{self.n_stitched} / {self.n_sb}"),
            ("transitions checked", str(self.transitions_checked)),
            ("junctions", str(self.junctions)),
            ("max junction state dev", f"{self.max_junction_state_dev:.6f}"),
            ("max junction next-state dev", f"{self.max_junction_next_dev:.6f}"),
            ("state-side violations", str(self.state_violations)),
            ("next-state exceedances", str(self.next_state_exceedances)),
            ("non-junction mismatches", str(self.nonjunction_mismatches)),
            ("synthetic steps (unchecked)", str(self.synthetic_steps)),
        ]
        w = max(len(k) for k, _ in rows)
        lines = [f"# {self.note}"] + [f"{k.ljust(w)}  {v}" for k, v in rows]
        return "\n".join(lines) + "\n"


def check_theorem1(augmented: Dataset, original: Dataset, delta: float, L: float,
                   tol: float = 1e-12) -> ValidityReport:
    """Check stitched transitions against the original data.

    Non-junction, non-synthetic transitions must be byte-identical to an original
    transition (distance 0). At a direct-stitch junction the state side is the
    distance between the normalized cut states of the two parents, which must not
    exceed sqrt(2(1 - delta)) (up to ``tol`` of floating-point slack). The
    next-state side compares the junction successor with the successor of the
    nearest same-action original transition and is reported against L times the
    state bound. Synthetic bridge steps are counted but not checked.
    """
    b_s = state_bound(delta)
    b_n = L * b_s
    rep = ValidityReport(delta=delta, lipschitz=float(L), state_bound=b_s, next_state_bound=b_n)
    keys = transition_keys(original)
    by_id = {t.id: t for t in original.trajectories}
    index = None
    for traj in augmented.trajectories:
        if traj.source is Source.REAL:
            continue
        if traj.source is Source.STITCHED:
            rep.n_stitched += 1
        else:
            rep.n_sb += 1
        meta = traj.stitch_meta or {}
        j = meta.get("t_prime") if traj.source is Source.STITCHED else None
        worst_s = worst_n = 0.0
        mism = 0
        for i, s, a, r, s2 in _traj_transitions(traj):
            if traj.synthetic[i]:
                rep.synthetic_steps += 1
                continue
            rep.transitions_checked += 1
            if i == j:
                rep.junctions += 1
                donor = by_id[meta["parents"][0]]
                u_bar, u_donor = original.normalize(np.vstack([s, donor.states[meta["t"]]]))
                d_s = float(np.linalg.norm(u_bar - u_donor))
                if d_s > b_s + tol:
                    rep.state_violations += 1
                d_n = 0.0
                if s2 is not None:
                    if index is None:
                        index = _ActionIndex(original)
                    hit = index.nearest(int(a), u_bar)
                    if hit is not None:
                        d_n = float(np.linalg.norm(original.normalize(s2)[0] - hit[1]))
                        if d_n > b_n + tol:
                            rep.next_state_exceedances += 1
                worst_s, worst_n = max(worst_s, d_s), max(worst_n, d_n)
                rep.max_junction_state_dev = max(rep.max_junction_state_dev, d_s)
                rep.max_junction_next_dev = max(rep.max_junction_next_dev, d_n)
            elif _key(s, a, r, s2) not in keys:
                mism += 1
        rep.nonjunction_mismatches += mism
        rep.per_trajectory.append({"id": traj.id, "source": traj.source.value, "state_dev": worst_s,
                                   "next_state_dev": worst_n, "mismatches": mism})
    rep.k_histogram = bridge_length_stats(augmented)
    return rep


def estimate_lipschitz(ds: Dataset, radius: float = 0.5, min_dist: float = 1e-6,
                       normalized: bool = True, chunk: int = 1024) -> tuple[float, int]:
    """Max over same-action nearest-neighbour pairs of ||next - next'|| / ||s - s'||.

    Each transition is paired with its nearest same-action neighbour whose distance
    lies in (min_dist, radius]. Distances are taken in normalized state space
    unless ``normalized`` is False. Returns ``(L, pairs_used)``.
    """
    s, a, _, s2, done = ds.transitions()
    keep = ~done
    s, a, s2 = s[keep], a[keep], s2[keep]
    if normalized and len(s):
        s, s2 = ds.normalize(s), ds.normalize(s2)
    best_l, pairs = 0.0, 0
    for k in np.unique(a):
        xs, ys = s[a == k], s2[a == k]
        if len(xs) < 2:
            continue
        sq = np.sum(xs * xs, axis=1)
        for lo in range(0, len(xs), chunk):
            blk = xs[lo:lo + chunk]
            d2 = sq[lo:lo + chunk, None] + sq[None, :] - 2.0 * blk @ xs.T
            d = np.sqrt(np.maximum(d2, 0.0))
            d[(d <= min_dist) | (d > radius)] = np.inf
            j = np.argmin(d, axis=1)
            ok = np.isfinite(d[np.arange(len(blk)), j])
            if not ok.any():
                continue
            rows = np.arange(lo, lo + len(blk))[ok]
            j = j[ok]
            # recompute exactly rather than through the expanded-square identity
            dist = np.linalg.norm(xs[rows] - xs[j], axis=1)
            good = (dist > min_dist) & (dist <= radius)
            if not good.any():
                continue
            ratio = np.linalg.norm(ys[rows[good]] - ys[j[good]], axis=1) / dist[good]
            pairs += int(good.sum())
            best_l = max(best_l, float(ratio.max()))
    if pairs == 0:
        raise ValueError(f"no same-action transition pairs within radius {radius}; try a larger radius")
    return best_l, pairs


def bridge_length_stats(ds: Dataset) -> dict[int, int]:
    hist: dict[int, int] = {}
    for t in ds.trajectories:
        if t.source is Source.STITCHED_SB:
            k = int(t.stitch_meta["K"])
            hist[k] = hist.get(k, 0) + 1
    return dict(sorted(hist.items()))

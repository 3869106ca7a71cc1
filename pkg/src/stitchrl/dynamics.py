"""Inverse-dynamics and reward models, bridge completion, and bridge-assisted stitching."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .bridge import BridgeConfig, BridgeNet, choose_K, generate_bridge
from .data import Dataset, Source, Trajectory
from .nn import Adam, Mlp, MlpSpec, load_checkpoint, save_checkpoint
from .rl import InputScaler, softmax_sq_loss
from .stitch import Sampler, StitchConfig, similarity_histogram, slot_rngs, stitch


@dataclass
class DynamicsModels:
    inverse: Mlp          # (s, s') -> per-action scores
    reward: Mlp           # (s, onehot a) -> reward
    scaler: InputScaler
    n_actions: int
    reward_bounds: tuple[float, float] | None = None
    metrics: dict = field(default_factory=dict)
    losses: np.ndarray = field(default=None, repr=False)

    def action_scores(self, s, s_next) -> np.ndarray:
        x = np.hstack([self.scaler(s), self.scaler(s_next)])
        return self.inverse(x)

    def predict_reward(self, s, a) -> np.ndarray:
        a = np.atleast_1d(np.asarray(a, dtype=np.int64))
        onehot = np.zeros((len(a), self.n_actions))
        onehot[np.arange(len(a)), a] = 1.0
        r = self.reward(np.hstack([self.scaler(s), onehot]))[:, 0]
        if self.reward_bounds is not None:
            r = np.clip(r, *self.reward_bounds)
        return r

    def save(self, path) -> None:
        save_checkpoint(path, {"inverse": self.inverse, "reward": self.reward}, {
            "mean": self.scaler.mean.tolist(), "std": self.scaler.std.tolist(),
            "n_actions": self.n_actions,
            "reward_bounds": list(self.reward_bounds) if self.reward_bounds else None,
            "metrics": self.metrics,
        })

    @classmethod
    def load(cls, path) -> "DynamicsModels":
        nets, meta = load_checkpoint(path)
        rb = meta.get("reward_bounds")
        return cls(nets["inverse"], nets["reward"], InputScaler(meta["mean"], meta["std"]),
                   int(meta["n_actions"]), tuple(rb) if rb else None, meta.get("metrics", {}))


def _onehot(a, k):
    out = np.zeros((len(a), k))
    out[np.arange(len(a)), a] = 1.0
    return out


def train_models(ds: Dataset, epochs: int, lr: float, rng, batch_size: int = 256,
                 hidden=(64, 64), reward_bounds=None, holdout: float = 0.1) -> DynamicsModels:
    """Fit inverse dynamics (softmax vs one-hot squared error) and reward regression jointly.

    Metrics (action accuracy, reward RMSE) come from a ``holdout`` fraction of
    transitions kept out of training.
    """
    rng = np.random.default_rng(rng)
    s, a, r, s2, done = ds.transitions()
    if len(a) == 0:
        raise ValueError("dataset has no transitions")
    scaler = InputScaler.from_dataset(ds)
    n_a, d = ds.n_treatments, ds.n_symptoms
    inv = Mlp(MlpSpec((2 * d, *hidden, n_a), "relu"), rng)
    rew = Mlp(MlpSpec((d + n_a, *hidden, 1), "relu"), rng)
    opt = Adam(inv.params + rew.params, lr=lr)

    perm = rng.permutation(len(a))
    n_val = int(round(holdout * len(a))) if len(a) >= 10 else 0
    val, tr = perm[:n_val], perm[n_val:]
    x_inv = np.hstack([scaler(s), scaler(s2)])
    x_rew = np.hstack([scaler(s), _onehot(a, n_a)])
    has_next = ~done   # the last step of a trajectory has no stored successor

    losses = []
    for _ in range(epochs):
        order = rng.permutation(tr)
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            iidx = idx[has_next[idx]]
            grads_inv = [np.zeros_like(p) for p in inv.params]
            l_inv = 0.0
            if len(iidx):
                out, cache = inv.forward(x_inv[iidx], keep=True)
                l_inv, g = softmax_sq_loss(out, a[iidx])
                grads_inv, _ = inv.backward(cache, g)
            pred, cache = rew.forward(x_rew[idx], keep=True)
            res = pred[:, 0] - r[idx]
            l_rew = float(np.mean(res * res))
            grads_rew, _ = rew.backward(cache, (2.0 * res / len(idx))[:, None])
            opt.step(grads_inv + grads_rew)
            losses.append(l_inv + l_rew)

    models = DynamicsModels(inv, rew, scaler, n_a, reward_bounds, losses=np.array(losses))
    if n_val:
        vi = val[has_next[val]]
        acc = float(np.mean(np.argmax(inv(x_inv[vi]), axis=1) == a[vi])) if len(vi) else float("nan")
        rmse = float(np.sqrt(np.mean((rew(x_rew[val])[:, 0] - r[val]) ** 2)))
        models.metrics = {"action_accuracy": acc, "reward_rmse": rmse, "n_holdout": int(n_val)}
    return models


def infer_action(models: DynamicsModels, s, s_next) -> int:
    return int(np.argmax(models.action_scores(np.atleast_2d(s), np.atleast_2d(s_next))[0]))


def complete_bridge(states, prev_state, next_state, models: DynamicsModels):
    """Label K generated states with inferred actions and predicted rewards.

    State ``i`` is paired with state ``i+1`` (the last with ``next_state``) to
    infer its action. Returns ``(states, actions, rewards)`` of length K. The
    transition into the bridge from ``prev_state`` is labelled separately by
    :func:`label_entry`.
    """
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    if len(states) < 1:
        raise ValueError("bridge needs at least one state")
    succ = np.vstack([states[1:], np.atleast_2d(next_state)])
    acts = np.argmax(models.action_scores(states, succ), axis=1)
    rews = models.predict_reward(states, acts)
    return states, acts.astype(np.int64), rews


def label_entry(models: DynamicsModels, prev_state, first_bridge_state) -> tuple[int, float]:
    a = infer_action(models, prev_state, first_bridge_state)
    return a, float(models.predict_reward(np.atleast_2d(prev_state), [a])[0])


def sb_stitch(tau_c: Trajectory, tau_d: Trajectory, t_c: int, t_d: int, bridge_states,
              models: DynamicsModels, new_id: str) -> Trajectory:
    """``tau_c[0..t_c]`` (last step relabelled), the bridge, then ``tau_d[t_d..]``."""
    b_s, b_a, b_r = complete_bridge(bridge_states, tau_c.states[t_c], tau_d.states[t_d], models)
    a0, r0 = label_entry(models, tau_c.states[t_c], b_s[0])
    pre = slice(0, t_c + 1)
    suf = slice(t_d, len(tau_d))
    pre_a = tau_c.actions[pre].copy()
    pre_r = tau_c.rewards[pre].copy()
    pre_syn = tau_c.synthetic[pre].copy()
    pre_a[-1], pre_r[-1], pre_syn[-1] = a0, r0, True
    K = len(b_s)
    return Trajectory(
        id=new_id,
        states=np.concatenate([tau_c.states[pre], b_s, tau_d.states[suf]]),
        actions=np.concatenate([pre_a, b_a, tau_d.actions[suf]]),
        rewards=np.concatenate([pre_r, b_r, tau_d.rewards[suf]]),
        synthetic=np.concatenate([pre_syn, np.ones(K, dtype=bool), tau_d.synthetic[suf]]),
        outcome=tau_d.outcome,
        source=Source.STITCHED_SB,
        stitch_meta={"parents": [tau_d.id, tau_c.id], "t": int(t_d), "t_prime": int(t_c), "K": int(K),
                     "junction_labels": "inferred", "bridge_space": "normalized"},
    )


def bridge_between(ds: Dataset, net: BridgeNet, cfg: BridgeConfig, s_from, s_to, rng) -> np.ndarray:
    """Generate bridge states between two raw states; returns raw-space states of shape (K, dim).

    The bridge runs between the unit-normalized endpoints; each emitted direction
    is mapped back with a z-score norm interpolated between the endpoints' norms.
    """
    z_from = (s_from - ds.norm_stats.mean) / ds.norm_stats.std
    z_to = (s_to - ds.norm_stats.mean) / ds.norm_stats.std
    u_from, u_to = ds.normalize(np.vstack([s_from, s_to]))
    K = choose_K(u_from, u_to, cfg)
    units = generate_bridge(net, u_from, u_to, K, cfg, rng)
    n0, n1 = np.linalg.norm(z_from), np.linalg.norm(z_to)
    frac = np.arange(1, K + 1) / K
    norms = (1 - frac) * n0 + frac * n1
    dirs = units / np.maximum(np.linalg.norm(units, axis=1, keepdims=True), 1e-12)
    return ds.denormalize(dirs, norms)


def sb_augment(ds: Dataset, stitch_cfg: StitchConfig, bridge_net: BridgeNet, bridge_cfg: BridgeConfig,
               models: DynamicsModels, rng) -> tuple[Dataset, dict]:
    """Direct stitching where possible; bridge the best pair found when a slot misses."""
    if len(ds) == 0:
        raise ValueError("cannot augment an empty dataset")
    sampler = Sampler(ds, stitch_cfg)
    out = list(ds.trajectories)
    sims, ks, attempts = [], [], []
    direct = sb = skipped = 0
    for m, srng in enumerate(slot_rngs(rng, stitch_cfg.M), start=1):
        res = sampler.search(m, srng)
        attempts.append(res.attempts)
        if res.point is None:
            skipped += 1
            continue
        pt = res.point
        if res.accepted:
            traj = stitch(res.tau_a, res.tau_b, pt.t, pt.t_prime, new_id=f"stitch{m:06d}")
            traj.stitch_meta["similarity"] = pt.similarity
            direct += 1
        else:
            # prefix donor is tau_b (cut t'), suffix donor tau_a (resume at t)
            states = bridge_between(ds, bridge_net, bridge_cfg,
                                    res.tau_b.states[pt.t_prime], res.tau_a.states[pt.t], srng)
            traj = sb_stitch(res.tau_b, res.tau_a, pt.t_prime, pt.t, states, models, new_id=f"sbstitch{m:06d}")
            traj.stitch_meta["similarity"] = pt.similarity
            ks.append(len(states))
            sb += 1
        sims.append(pt.similarity)
        out.append(traj)
    k_hist: dict[int, int] = {}
    for k in ks:
        k_hist[k] = k_hist.get(k, 0) + 1
    report = {
        "requested": stitch_cfg.M,
        "produced": direct + sb,
        "misses": skipped,
        "direct_count": direct,
        "sb_count": sb,
        "k_histogram": {str(k): v for k, v in sorted(k_hist.items())},
        "attempts": attempts,
        "similarity_histogram": similarity_histogram(sims),
        "strategy": sampler.cfg.strategy.value,
        "sampling": sampler.cfg.sampling.value,
        "delta": stitch_cfg.delta,
        "q": stitch_cfg.q,
        "phi": sampler.phi,
        "warnings": [],
    }
    if direct + sb == 0:
        msg = "no stitched trajectories produced"
        report["warnings"].append(msg)
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
    return ds.view(out), report

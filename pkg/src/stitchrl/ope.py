"""Off-policy value estimators: trajectory-wise weighted importance sampling and doubly robust."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .nn import Adam, Mlp, MlpSpec
from .rl import InputScaler

RATIO_CLIP = (1e-6, 1e6)


class ZeroBehaviorProbError(ValueError):
    pass


def _step_ratios(ds: Dataset, target_policy, behavior_probs):
    """Per-trajectory arrays of pi_target(a|s) / pi_behavior(a|s) over logged actions."""
    out = []
    for traj in ds.trajectories:
        rows = np.arange(len(traj))
        pb = np.asarray(behavior_probs(traj.states))[rows, traj.actions]
        bad = np.flatnonzero(pb <= 0)
        if bad.size:
            raise ZeroBehaviorProbError(
                f"behavior probability is zero for logged action at trajectory {traj.id} step {int(bad[0])}")
        pt = np.asarray(target_policy.probs(traj.states))[rows, traj.actions]
        out.append(pt / pb)
    return out


def wis_details(ds: Dataset, target_policy, behavior_probs, gamma: float) -> dict:
    ratios = _step_ratios(ds, target_policy, behavior_probs)
    clipped = 0
    weights = np.empty(len(ratios))
    for i, rho in enumerate(ratios):
        c = np.clip(rho, *RATIO_CLIP)
        clipped += int(np.count_nonzero(c != rho))
        weights[i] = np.prod(c)
    returns = ds.returns(gamma)
    value = float(np.sum(weights * returns) / np.sum(weights))
    return {"value": value, "clipped_steps": clipped, "weights": weights, "returns": returns}


def wis_estimate(ds: Dataset, target_policy, behavior_probs, gamma: float) -> float:
    """sum_i w_i G_i / sum_i w_i with w_i the product of clipped per-step ratios."""
    return wis_details(ds, target_policy, behavior_probs, gamma)["value"]


@dataclass
class SarsaFit:
    net: Mlp
    scaler: InputScaler
    val_td: float
    best_step: int

    def __call__(self, states) -> np.ndarray:
        return self.net(self.scaler(states))


def _sarsa_arrays(ds: Dataset):
    s, a, r, s2, done = ds.transitions()
    a2 = np.zeros_like(a)
    pos = 0
    for traj in ds.trajectories:
        n = len(traj)
        a2[pos:pos + n - 1] = traj.actions[1:]
        pos += n
    return s, a, r, s2, a2, done


def fit_sarsa(ds: Dataset, gamma: float, rng, steps: int = 3000, lr: float = 1e-3, batch_size: int = 256,
              hidden=(64, 64), eval_every: int = 250, val_frac: float = 0.1, target_sync: int = 250) -> SarsaFit:
    """Q-hat fitted with the TD loss MSE(r + gamma Q(s', a'), Q(s, a)) using logged next actions.

    The parameters with the lowest TD error on a held-out split are kept.
    """
    rng = np.random.default_rng(rng)
    s, a, r, s2, a2, done = _sarsa_arrays(ds)
    scaler = InputScaler.from_dataset(ds)
    x, x2 = scaler(s), scaler(s2)
    perm = rng.permutation(len(a))
    n_val = max(1, int(round(val_frac * len(a)))) if len(a) > 1 else 0
    val, tr = perm[:n_val], perm[n_val:] if n_val < len(a) else perm
    net = Mlp(MlpSpec((ds.n_symptoms, *hidden, ds.n_treatments), "relu"), rng)
    target = net.copy()
    opt = Adam(net.params, lr=lr)

    def td_error(idx, q_next_net):
        y = r[idx] + gamma * q_next_net(x2[idx])[np.arange(len(idx)), a2[idx]] * (~done[idx])
        q = net(x[idx])[np.arange(len(idx)), a[idx]]
        return q - y

    eval_idx = val if len(val) else tr
    best = (float(np.mean(td_error(eval_idx, net) ** 2)), 0, net.copy())
    for i in range(1, steps + 1):
        idx = tr[rng.integers(len(tr), size=batch_size)]
        y = r[idx] + gamma * target(x2[idx])[np.arange(len(idx)), a2[idx]] * (~done[idx])
        out, cache = net.forward(x[idx], keep=True)
        g = np.zeros_like(out)
        g[np.arange(len(idx)), a[idx]] = 2.0 * (out[np.arange(len(idx)), a[idx]] - y) / len(idx)
        grads, _ = net.backward(cache, g)
        opt.step(grads)
        if i % target_sync == 0:
            target = net.copy()
        if i % eval_every == 0 or i == steps:
            err = float(np.mean(td_error(eval_idx, net) ** 2))
            if err < best[0]:
                best = (err, i, net.copy())
    return SarsaFit(best[2], scaler, best[0], best[1])


def dr_terms(ds: Dataset, target_policy, behavior_probs, gamma: float, q_hat) -> np.ndarray:
    """Per-transition DR_i = V(s) + rho (r + gamma V(s') - Q(s, a)), V(s) = sum_a pi(a|s) Q(s, a)."""
    ratios = np.concatenate(_step_ratios(ds, target_policy, behavior_probs))
    s, a, r, s2, done = ds.transitions()
    q = np.asarray(q_hat(s))
    q2 = np.asarray(q_hat(s2))
    v = np.sum(np.asarray(target_policy.probs(s)) * q, axis=1)
    v2 = np.sum(np.asarray(target_policy.probs(s2)) * q2, axis=1) * (~done)
    return v + ratios * (r + gamma * v2 - q[np.arange(len(a)), a])


def dr_estimate(ds: Dataset, target_policy, behavior_probs, gamma: float, rng, q_hat=None, **fit_kwargs) -> float:
    """Doubly robust estimate; ``q_hat`` (states -> (n, A) values) is fitted by SARSA when not given."""
    if q_hat is None:
        q_hat = fit_sarsa(ds, gamma, rng, **fit_kwargs)
    return float(np.mean(dr_terms(ds, target_policy, behavior_probs, gamma, q_hat)))

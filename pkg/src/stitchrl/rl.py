"""Conservative Q-learning, plain fitted-Q, behaviour cloning and rollout evaluation."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .data import Dataset
from .env import EnvInstance, episode_rng, reset, step
from .nn import Adam, Mlp, MlpSpec, NumericError


@dataclass(frozen=True)
class RlConfig:
    batch_size: int = 256
    lr: float = 3e-5
    steps: int = 20_000
    gamma: float = 0.0
    beta: float = 1.0
    target_sync: int = 1000
    eval_episodes: int = 200
    hidden: tuple[int, ...] = (64, 64)
    bc_lr: float = 1e-3
    bc_steps: int = 5000

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must be in [0, 1], got {self.gamma}")
        if self.batch_size < 1 or self.target_sync < 1:
            raise ValueError("batch_size and target_sync must be >= 1")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


class InputScaler:
    """z-scores raw symptom vectors with fixed dataset statistics."""

    def __init__(self, mean, std):
        self.mean = np.asarray(mean, dtype=np.float64)
        self.std = np.asarray(std, dtype=np.float64)

    @classmethod
    def from_dataset(cls, ds: Dataset) -> "InputScaler":
        return cls(ds.norm_stats.mean, ds.norm_stats.std)

    def __call__(self, states):
        return (np.atleast_2d(states) - self.mean) / self.std


@dataclass
class QNet:
    online: Mlp
    target: Mlp
    scaler: InputScaler
    sync_period: int = 1000
    updates: int = 0

    @classmethod
    def create(cls, n_in: int, n_actions: int, hidden, scaler: InputScaler, sync_period: int, rng) -> "QNet":
        net = Mlp(MlpSpec((n_in, *hidden, n_actions), "relu"), rng)
        return cls(net, net.copy(), scaler, sync_period)

    def q(self, states) -> np.ndarray:
        return self.online(self.scaler(states))

    def q_target(self, states) -> np.ndarray:
        return self.target(self.scaler(states))

    def sync(self) -> None:
        self.target = self.online.copy()


@dataclass
class Batch:
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s2: np.ndarray
    done: np.ndarray


def _bellman_targets(batch: Batch, qnet: QNet, gamma: float) -> np.ndarray:
    if gamma == 0.0:
        return batch.r.copy()
    nxt = qnet.q_target(batch.s2).max(axis=1)
    return batch.r + gamma * nxt * (~batch.done)


def cql_loss(batch: Batch, qnet: QNet, cfg: RlConfig, with_grad: bool = False):
    """Squared Bellman error plus ``beta`` times (mean over actions of Q minus Q at the logged action).

    With ``with_grad`` also returns the forward cache and dLoss/dQ for backprop.
    """
    n = len(batch.a)
    if n == 0:
        raise ValueError("empty batch")
    y = _bellman_targets(batch, qnet, cfg.gamma)
    q, cache = qnet.online.forward(qnet.scaler(batch.s), keep=True)
    rows = np.arange(n)
    q_data = q[rows, batch.a]
    td = q_data - y
    bellman = float(np.mean(td * td))
    gap = q.mean(axis=1) - q_data
    loss = bellman + cfg.beta * float(np.mean(gap))
    if not with_grad:
        return loss
    n_a = q.shape[1]
    g = np.full_like(q, cfg.beta / (n * n_a))
    g[rows, batch.a] += 2.0 * td / n - cfg.beta / n
    return loss, cache, g


class TransitionSampler:
    def __init__(self, ds: Dataset):
        self.s, self.a, self.r, self.s2, self.done = ds.transitions()

    def __len__(self):
        return len(self.a)

    def sample(self, rng: np.random.Generator, size: int) -> Batch:
        idx = rng.integers(len(self.a), size=size)
        return Batch(self.s[idx], self.a[idx], self.r[idx], self.s2[idx], self.done[idx])


@dataclass
class TrainResult:
    qnet: QNet
    losses: np.ndarray = field(repr=False)


def train_cql(ds: Dataset, cfg: RlConfig, rng) -> TrainResult:
    """Minibatch CQL over every transition in ``ds`` (real and stitched alike)."""
    rng = np.random.default_rng(rng)
    sampler = TransitionSampler(ds)
    if len(sampler) < 1:
        raise ValueError("dataset has no transitions")
    qnet = QNet.create(ds.n_symptoms, ds.n_treatments, cfg.hidden, InputScaler.from_dataset(ds),
                       cfg.target_sync, rng)
    opt = Adam(qnet.online.params, lr=cfg.lr)
    losses = np.empty(cfg.steps)
    for i in range(cfg.steps):
        batch = sampler.sample(rng, cfg.batch_size)
        loss, cache, g = cql_loss(batch, qnet, cfg, with_grad=True)
        if not np.isfinite(loss):
            raise NumericError(f"non-finite CQL loss at step {i}")
        grads, _ = qnet.online.backward(cache, g)
        opt.step(grads)
        losses[i] = loss
        qnet.updates += 1
        if qnet.updates % cfg.target_sync == 0:
            qnet.sync()
    return TrainResult(qnet, losses)


def train_fqi(ds: Dataset, cfg: RlConfig, rng) -> TrainResult:
    """Plain fitted-Q (DQN-style) baseline: CQL with the regularizer switched off."""
    from dataclasses import replace
    return train_cql(ds, replace(cfg, beta=0.0), rng)


# -- policies -----------------------------------------------------------------

def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


class GreedyPolicy:
    """argmax over per-action scores; ties go to the smallest treatment id."""

    def __init__(self, score_fn, n_actions: int):
        self.score_fn = score_fn
        self.n_actions = n_actions

    def act(self, states, rngs=None) -> np.ndarray:
        return np.argmax(self.score_fn(np.atleast_2d(states)), axis=1)

    def probs(self, states) -> np.ndarray:
        a = self.act(states)
        p = np.zeros((len(a), self.n_actions))
        p[np.arange(len(a)), a] = 1.0
        return p


def q_policy(qnet: QNet) -> GreedyPolicy:
    return GreedyPolicy(qnet.q, qnet.online.spec.n_out)


class RandomPolicy:
    def __init__(self, n_actions: int):
        self.n_actions = n_actions

    def act(self, states, rngs) -> np.ndarray:
        return np.array([int(r.integers(self.n_actions)) for r in rngs], dtype=np.int64)

    def probs(self, states) -> np.ndarray:
        n = np.atleast_2d(states).shape[0]
        return np.full((n, self.n_actions), 1.0 / self.n_actions)


class EnvBehaviorPolicy:
    """Adapter giving :class:`stitchrl.env.BehaviorPolicy` the batched ``act`` interface."""

    def __init__(self, behavior):
        self.behavior = behavior
        self.n_actions = behavior.inst.spec.n_treatments

    def act(self, states, rngs) -> np.ndarray:
        return np.array([self.behavior.sample(s, r) for s, r in zip(np.atleast_2d(states), rngs)], dtype=np.int64)

    def probs(self, states) -> np.ndarray:
        return self.behavior.probs(states)


@dataclass
class BcResult:
    net: Mlp
    scaler: InputScaler
    losses: np.ndarray = field(repr=False)

    def policy(self) -> GreedyPolicy:
        return GreedyPolicy(lambda s: self.net(self.scaler(s)), self.net.spec.n_out)


def softmax_sq_loss(logits: np.ndarray, actions: np.ndarray):
    """Mean over rows of ||softmax(logits) - onehot(action)||^2 and its gradient w.r.t. logits."""
    n, k = logits.shape
    p = _softmax(logits)
    y = np.zeros_like(p)
    y[np.arange(n), actions] = 1.0
    diff = p - y
    loss = float(np.mean(np.sum(diff * diff, axis=1)))
    gp = 2.0 * diff / n
    gz = p * (gp - np.sum(gp * p, axis=1, keepdims=True))
    return loss, gz


def train_bc(ds: Dataset, cfg: RlConfig, rng) -> BcResult:
    rng = np.random.default_rng(rng)
    s, a, *_ = ds.transitions()
    scaler = InputScaler.from_dataset(ds)
    net = Mlp(MlpSpec((ds.n_symptoms, *cfg.hidden, ds.n_treatments), "relu"), rng)
    opt = Adam(net.params, lr=cfg.bc_lr)
    x_all = scaler(s)
    losses = np.empty(cfg.bc_steps)
    for i in range(cfg.bc_steps):
        idx = rng.integers(len(a), size=cfg.batch_size)
        out, cache = net.forward(x_all[idx], keep=True)
        loss, g = softmax_sq_loss(out, a[idx])
        grads, _ = net.backward(cache, g)
        opt.step(grads)
        losses[i] = loss
    return BcResult(net, scaler, losses)


# -- evaluation -----------------------------------------------------------------

def rollout_returns(env: EnvInstance, policy, n_episodes: int, seed: int) -> np.ndarray:
    """Undiscounted return of each of ``n_episodes`` seeded rollouts.

    Episodes run in lockstep so greedy network policies are evaluated in one
    batch per time step; each episode owns its generator, so results match a
    sequential rollout.
    """
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    rngs = [episode_rng(seed, i) for i in range(n_episodes)]
    hidden = np.zeros(n_episodes, dtype=np.int64)
    obs = np.zeros((n_episodes, env.spec.n_symptoms))
    for i, r in enumerate(rngs):
        h, o = reset(env, r)
        hidden[i], obs[i] = h, o
    totals = np.zeros(n_episodes)
    active = np.arange(n_episodes)
    for _ in range(env.spec.max_episode_len):
        if active.size == 0:
            break
        acts = policy.act(obs[active], [rngs[i] for i in active])
        still = []
        for i, a in zip(active, acts):
            h, o, rew, done, _ = step(env, int(hidden[i]), int(a), rngs[i])
            totals[i] += rew
            hidden[i], obs[i] = h, o
            if not done:
                still.append(i)
        active = np.array(still, dtype=np.int64)
    return totals


def evaluate_policy(env: EnvInstance, policy, n_episodes: int, seed: int) -> tuple[float, float]:
    rets = rollout_returns(env, policy, n_episodes, seed)
    return float(rets.mean()), float(rets.std())

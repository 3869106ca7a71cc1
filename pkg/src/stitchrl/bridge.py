"""Bridging-state generator: conditional denoising score matching plus Euler-Maruyama.

One network takes ``(x, time, x_start, x_target)`` and returns two score heads.
The forward head is fit on start states perturbed with Brownian noise of
variance ``sigma**2 * t``; the backward head on target states perturbed at the
complementary time ``1 - t``. Targets are the negative normalized noise.
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import Dataset
from .nn import Adam, Mlp, MlpSpec, NumericError, load_checkpoint, save_checkpoint


@dataclass(frozen=True)
class BridgeConfig:
    sigma: float = 0.5
    eps_stab: float = 1e-3
    batch_size: int = 128
    train_iters: int = 5000
    lr: float = 1e-3
    K_max: int = 8
    step_scale: float = 0.15
    hidden: tuple[int, ...] = (128, 128)
    # multiplier on sigma**2 in the sampler drift; 1.0 is the exact Brownian-bridge pull
    drift_scale: float = 1.0
    pair_band: tuple[float, float] = (0.05, 1.5)

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError(f"sigma must be > 0, got {self.sigma}")
        if self.eps_stab <= 0:
            raise ValueError(f"eps_stab must be > 0, got {self.eps_stab}")
        if self.K_max < 1:
            raise ValueError("K_max must be >= 1")
        if self.step_scale <= 0:
            raise ValueError("step_scale must be > 0")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        object.__setattr__(self, "pair_band", (float(self.pair_band[0]), float(self.pair_band[1])))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        d["pair_band"] = list(self.pair_band)
        return d


def score_target(eps, t, sigma: float, eps_stab: float, direction: str = "fwd"):
    """Negative normalized noise used as the denoising target.

    ``fwd`` scales by ``sigma*sqrt(t)``, ``bwd`` by ``sigma*sqrt(1-t)``.
    """
    eps = np.asarray(eps, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if direction == "fwd":
        scale = sigma * np.sqrt(t)
    elif direction == "bwd":
        scale = sigma * np.sqrt(1.0 - t)
    else:
        raise ValueError(f"direction must be 'fwd' or 'bwd', got {direction!r}")
    if scale.ndim == 1 and eps.ndim == 2:
        scale = scale[:, None]
    return -eps / (scale + eps_stab)


class BridgeNet:
    """Shared MLP trunk with a forward and a backward score head.

    The raw network output for a row is divided by ``sigma*sqrt(time) + eps_stab``
    (the row's own time input), so the network itself regresses unit-scale
    noise while the heads stay on the score scale.
    """

    def __init__(self, dim: int, cfg: BridgeConfig, rng=None, mlp: Mlp | None = None):
        self.dim = dim
        self.sigma = cfg.sigma
        self.eps_stab = cfg.eps_stab
        self.feature_clip = 8.0
        self.mlp = mlp if mlp is not None else Mlp(
            MlpSpec((4 * dim + 1, *cfg.hidden, 2 * dim), "tanh"), rng)

    def _inputs(self, x, time, x_start, x_target):
        x = np.atleast_2d(x)
        n = x.shape[0]
        time = np.broadcast_to(np.asarray(time, dtype=np.float64), (n,)).reshape(n, 1)
        xs = np.broadcast_to(np.atleast_2d(x_start), x.shape)
        xt = np.broadcast_to(np.atleast_2d(x_target), x.shape)
        c = self._scale(time)
        # offsets from both endpoints, rescaled to unit noise level and clipped
        rel_s = np.clip((x - xs) * c, -self.feature_clip, self.feature_clip)
        rel_t = np.clip((x - xt) * c, -self.feature_clip, self.feature_clip)
        return np.hstack([rel_s, rel_t, time, xs, xt]), time

    def _scale(self, time):
        return 1.0 / (self.sigma * np.sqrt(np.clip(time, 0.0, None)) + self.eps_stab)

    def heads(self, x, time, x_start, x_target):
        inp, tcol = self._inputs(x, time, x_start, x_target)
        out = self.mlp(inp) * self._scale(tcol)
        return out[:, :self.dim], out[:, self.dim:]

    def fwd(self, x, time, x_start, x_target):
        return self.heads(x, time, x_start, x_target)[0]

    def bwd(self, x, time, x_start, x_target):
        return self.heads(x, time, x_start, x_target)[1]

    def save(self, path, meta=None):
        save_checkpoint(path, {"bridge": self.mlp},
                        {"dim": self.dim, "sigma": self.sigma, "eps_stab": self.eps_stab, **(meta or {})})

    @classmethod
    def load(cls, path) -> "BridgeNet":
        nets, meta = load_checkpoint(path)
        cfg = BridgeConfig(sigma=meta["sigma"], eps_stab=meta["eps_stab"])
        return cls(int(meta["dim"]), cfg, mlp=nets["bridge"])


def make_training_pairs(ds: Dataset, n_pairs: int, rng, band: tuple[float, float] = (0.05, 1.5)):
    """Cross-trajectory pairs of normalized states whose distance lies in ``band``.

    Returns ``(x_start, x_target)`` arrays of shape (n_pairs, dim). If nothing
    passes the band, it is widened once before giving up.
    """
    rng = np.random.default_rng(rng)
    if len(ds) < 2:
        raise ValueError("need at least two trajectories to form cross-trajectory pairs")
    lengths = np.array([len(t) for t in ds.trajectories])
    offsets = np.concatenate([[0], np.cumsum(lengths)])
    units = ds.normalize(np.concatenate([t.states for t in ds.trajectories]))
    traj_of = np.repeat(np.arange(len(ds)), lengths)
    total = len(units)

    def draw(lo, hi):
        got_s, got_t, have = [], [], 0
        budget = 50 * n_pairs + 1000
        drawn = 0
        while have < n_pairs and drawn < budget:
            k = max(256, 2 * (n_pairs - have))
            i = rng.integers(total, size=k)
            j = rng.integers(total, size=k)
            drawn += k
            d = np.linalg.norm(units[i] - units[j], axis=1)
            ok = (traj_of[i] != traj_of[j]) & (d >= lo) & (d <= hi)
            i, j = i[ok], j[ok]
            got_s.append(units[i])
            got_t.append(units[j])
            have += len(i)
        if have == 0:
            return None
        return np.concatenate(got_s)[:n_pairs], np.concatenate(got_t)[:n_pairs]

    del offsets
    lo, hi = band
    pairs = draw(lo, hi)
    if pairs is None:
        pairs = draw(lo / 10.0, 2.0)
    if pairs is None:
        raise ValueError(f"no cross-trajectory state pairs within distance band even after widening from {band}")
    if len(pairs[0]) < n_pairs:
        raise ValueError(f"only {len(pairs[0])} of {n_pairs} pairs found within the distance band")
    return pairs


def bridge_loss(net: BridgeNet, xs, xt, t, eps_f, eps_b, with_grad: bool = False):
    """Forward plus backward denoising score-matching loss on one batch.

    Returns ``(total, fwd, bwd)`` and, with ``with_grad``, the parameter gradients.
    """
    sigma, stab = net.sigma, net.eps_stab
    n, d = xs.shape
    x_f = xs + sigma * np.sqrt(t)[:, None] * eps_f
    x_b = xt + sigma * np.sqrt(1.0 - t)[:, None] * eps_b
    tgt_f = score_target(eps_f, t, sigma, stab, "fwd")
    tgt_b = score_target(eps_b, t, sigma, stab, "bwd")
    inp_f, tc_f = net._inputs(x_f, t, xs, xt)
    inp_b, tc_b = net._inputs(x_b, 1.0 - t, xs, xt)
    inp = np.vstack([inp_f, inp_b])
    scale = net._scale(np.vstack([tc_f, tc_b]))
    raw, cache = net.mlp.forward(inp, keep=True)
    out = raw * scale
    res_f = out[:n, :d] - tgt_f
    res_b = out[n:, d:] - tgt_b
    l_f = float(np.mean(np.sum(res_f * res_f, axis=1)))
    l_b = float(np.mean(np.sum(res_b * res_b, axis=1)))
    total = l_f + l_b
    if not with_grad:
        return total, l_f, l_b
    g_out = np.zeros_like(out)
    g_out[:n, :d] = 2.0 * res_f / n
    g_out[n:, d:] = 2.0 * res_b / n
    grads, _ = net.mlp.backward(cache, g_out * scale)
    return (total, l_f, l_b), grads


@dataclass
class BridgeTrainResult:
    net: BridgeNet
    fwd_losses: np.ndarray = field(repr=False)
    bwd_losses: np.ndarray = field(repr=False)

    def write_trace(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "fwd_loss", "bwd_loss"])
            for i, (f, b) in enumerate(zip(self.fwd_losses, self.bwd_losses)):
                w.writerow([i, repr(float(f)), repr(float(b))])


def train_bridge(pairs, cfg: BridgeConfig, rng) -> BridgeTrainResult:
    xs_all, xt_all = (np.asarray(p, dtype=np.float64) for p in pairs)
    if len(xs_all) == 0:
        raise ValueError("no training pairs")
    rng = np.random.default_rng(rng)
    dim = xs_all.shape[1]
    net = BridgeNet(dim, cfg, rng)
    opt = Adam(net.mlp.params, lr=cfg.lr)
    fl = np.empty(cfg.train_iters)
    bl = np.empty(cfg.train_iters)
    for it in range(cfg.train_iters):
        idx = rng.integers(len(xs_all), size=cfg.batch_size)
        t = rng.uniform(0.0, 1.0, size=cfg.batch_size)
        eps_f = rng.standard_normal((cfg.batch_size, dim))
        eps_b = rng.standard_normal((cfg.batch_size, dim))
        (total, l_f, l_b), grads = bridge_loss(net, xs_all[idx], xt_all[idx], t, eps_f, eps_b, with_grad=True)
        if not math.isfinite(total):
            raise NumericError(f"non-finite bridge loss at iteration {it}")
        opt.step(grads)
        fl[it], bl[it] = l_f, l_b
    return BridgeTrainResult(net, fl, bl)


def choose_K(x_start, x_target, cfg: BridgeConfig) -> int:
    dist = float(np.linalg.norm(np.asarray(x_target) - np.asarray(x_start)))
    return int(min(max(math.ceil(dist / cfg.step_scale), 1), cfg.K_max))


def generate_bridge(net: BridgeNet, x_start, x_target, K: int, cfg: BridgeConfig, rng,
                    sigma: float | None = None) -> np.ndarray:
    """Euler-Maruyama from ``x_start`` over ``K`` steps of size ``1/K``; returns the K emitted states.

    The drift is ``drift_scale * sigma**2`` times the learned target-anchored
    score, i.e. the backward head queried at the remaining time ``1 - k/K``.
    ``sigma`` overrides ``cfg.sigma`` for sampling only; 0 gives a drift- and noise-free path.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    rng = np.random.default_rng(rng)
    x_start = np.asarray(x_start, dtype=np.float64)
    x_target = np.asarray(x_target, dtype=np.float64)
    dt = 1.0 / K
    sigma = cfg.sigma if sigma is None else float(sigma)
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    x = x_start.copy()
    out = np.empty((K, x.size))
    for k in range(K):
        score = net.bwd(x, 1.0 - k * dt, x_start, x_target)[0]
        x = x + cfg.drift_scale * sigma * sigma * score * dt + sigma * math.sqrt(dt) * rng.standard_normal(x.size)
        if not np.all(np.isfinite(x)):
            raise NumericError(f"non-finite bridge state at step {k + 1}")
        out[k] = x
    return out


def generate_bridges(net: BridgeNet, x_start, x_target, K: int, cfg: BridgeConfig, rng,
                     sigma: float | None = None) -> np.ndarray:
    """Batched :func:`generate_bridge` for many (start, target) rows; shape (n, K, dim)."""
    if K < 1:
        raise ValueError("K must be >= 1")
    rng = np.random.default_rng(rng)
    sigma = cfg.sigma if sigma is None else float(sigma)
    xs = np.atleast_2d(np.asarray(x_start, dtype=np.float64))
    xt = np.atleast_2d(np.asarray(x_target, dtype=np.float64))
    dt = 1.0 / K
    x = xs.copy()
    out = np.empty((xs.shape[0], K, xs.shape[1]))
    for k in range(K):
        score = net.bwd(x, 1.0 - k * dt, xs, xt)
        x = x + cfg.drift_scale * sigma ** 2 * score * dt + sigma * math.sqrt(dt) * rng.standard_normal(x.shape)
        out[:, k] = x
    return out

"""Small dense MLPs with hand-written backprop and an Adam optimizer.

Everything here is float64 numpy. The networks are plain feed-forward stacks,
so reverse-mode differentiation is written out for that topology only.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CHECKPOINT_VERSION = 1


class NumericError(ArithmeticError):
    """Raised when a NaN or Inf shows up in activations, losses or gradients."""


@dataclass(frozen=True)
class MlpSpec:
    widths: tuple[int, ...]
    activation: str = "relu"

    def __post_init__(self):
        if len(self.widths) < 2:
            raise ValueError("an MLP needs at least an input and an output width")
        if any(int(w) < 1 for w in self.widths):
            raise ValueError(f"all widths must be >= 1, got {self.widths}")
        if self.activation not in ("relu", "tanh"):
            raise ValueError(f"unknown activation {self.activation!r}")
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))

    @property
    def n_in(self) -> int:
        return self.widths[0]

    @property
    def n_out(self) -> int:
        return self.widths[-1]


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {what}")


class Mlp:
    """Feed-forward network: affine layers, ReLU/Tanh on hidden layers, linear output.

    Parameters are kept as a flat list ``[W0, b0, W1, b1, ...]`` with ``W`` of
    shape (fan_in, fan_out), so a batch is a (rows, n_in) array.
    """

    def __init__(self, spec: MlpSpec, rng: np.random.Generator | int | None = None):
        self.spec = spec
        rng = np.random.default_rng(rng)
        self.params: list[np.ndarray] = []
        for fan_in, fan_out in zip(spec.widths[:-1], spec.widths[1:]):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            self.params.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
            self.params.append(np.zeros(fan_out))

    @property
    def n_layers(self) -> int:
        return len(self.params) // 2

    def copy(self) -> "Mlp":
        other = Mlp.__new__(Mlp)
        other.spec = self.spec
        other.params = [p.copy() for p in self.params]
        return other

    def _act(self, z):
        if self.spec.activation == "relu":
            return np.maximum(z, 0.0)
        return np.tanh(z)

    def _act_grad(self, z, a):
        if self.spec.activation == "relu":
            return (z > 0).astype(z.dtype)
        return 1.0 - a * a

    def forward(self, x: np.ndarray, keep: bool = False):
        """Evaluate the network on a batch.

        With ``keep=True`` returns ``(out, cache)`` where the cache feeds
        :meth:`backward`.
        """
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.spec.n_in:
            raise ValueError(f"expected batch of shape (n, {self.spec.n_in}), got {x.shape}")
        acts = [x]
        pre = []
        h = x
        last = self.n_layers - 1
        for i in range(self.n_layers):
            z = h @ self.params[2 * i] + self.params[2 * i + 1]
            if i < last:
                pre.append(z)
                h = self._act(z)
                acts.append(h)
            else:
                h = z
        _check_finite(h, "network output")
        if keep:
            return h, (acts, pre)
        return h

    __call__ = forward

    def backward(self, cache, grad_out: np.ndarray):
        """Backpropagate ``grad_out`` (dLoss/dOutput).

        Returns ``(param_grads, grad_input)``; param grads line up with
        :attr:`params`.
        """
        acts, pre = cache
        grad_out = np.asarray(grad_out, dtype=np.float64)
        if grad_out.shape != (acts[0].shape[0], self.spec.n_out):
            raise ValueError(
                f"upstream gradient shape {grad_out.shape} does not match output "
                f"({acts[0].shape[0]}, {self.spec.n_out})"
            )
        grads: list[np.ndarray] = [None] * len(self.params)  # type: ignore[list-item]
        g = grad_out
        for i in range(self.n_layers - 1, -1, -1):
            grads[2 * i] = acts[i].T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            g = g @ self.params[2 * i].T
            if i > 0:
                g = g * self._act_grad(pre[i - 1], acts[i])
        return grads, g

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params])

    def set_flat(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        off = 0
        for p in self.params:
            n = p.size
            p[...] = vec[off:off + n].reshape(p.shape)
            off += n
        if off != vec.size:
            raise ValueError(f"flat vector has {vec.size} entries, network has {off}")


@dataclass
class Adam:
    """Bias-corrected Adam over a list of parameter arrays (updated in place)."""

    params: list[np.ndarray]
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not self.m:
            self.m = [np.zeros_like(p) for p in self.params]
            self.v = [np.zeros_like(p) for p in self.params]

    def step(self, grads: list[np.ndarray]) -> None:
        if len(grads) != len(self.params):
            raise ValueError(f"got {len(grads)} gradient blocks for {len(self.params)} parameters")
        for i, (p, g) in enumerate(zip(self.params, grads)):
            if g.shape != p.shape:
                raise ValueError(f"gradient block {i} has shape {g.shape}, parameter has {p.shape}")
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient in parameter block {i}")
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def save_checkpoint(path: str | Path, nets: dict[str, Mlp], meta: dict | None = None) -> None:
    """Write one or more named networks to an ``.npz`` file with a JSON header."""
    path = Path(path)
    header = {
        "version": CHECKPOINT_VERSION,
        "nets": {name: {"widths": list(n.spec.widths), "activation": n.spec.activation}
                 for name, n in nets.items()},
        "meta": meta or {},
    }
    arrays = {"__header__": np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)}
    for name, net in nets.items():
        arrays[f"{name}"] = net.flat()
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path: str | Path) -> tuple[dict[str, Mlp], dict]:
    with np.load(Path(path)) as data:
        header = json.loads(bytes(data["__header__"]).decode())
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(
                f"checkpoint version {header.get('version')} unsupported (expected {CHECKPOINT_VERSION})"
            )
        nets = {}
        for name, info in header["nets"].items():
            net = Mlp(MlpSpec(tuple(info["widths"]), info["activation"]), rng=0)
            net.set_flat(data[name])
            nets[name] = net
    return nets, header["meta"]


def gradient_check(loss_fn, params: list[np.ndarray], grads: list[np.ndarray], n_probes: int = 64,
                   h: float = 1e-5, rng=None) -> float:
    """Largest relative error between analytic ``grads`` and central differences of ``loss_fn()``.

    ``n_probes`` parameter entries are picked at random across all blocks; each is
    nudged in place by +-h and restored. Relative error is
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-7)``.
    """
    rng = np.random.default_rng(rng)
    sizes = np.array([p.size for p in params])
    blocks = rng.choice(len(params), size=n_probes, p=sizes / sizes.sum())
    worst = 0.0
    for b in blocks:
        p, g = params[b].reshape(-1), grads[b].reshape(-1)
        j = int(rng.integers(p.size))
        old = p[j]
        p[j] = old + h
        up = loss_fn()
        p[j] = old - h
        down = loss_fn()
        p[j] = old
        num = (up - down) / (2.0 * h)
        worst = max(worst, abs(g[j] - num) / max(abs(g[j]), abs(num), 1e-7))
    return worst

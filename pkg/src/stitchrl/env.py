"""Hidden-state episodic treatment simulator and offline data collection.

The patient moves between latent disease states; the agent only sees a noisy
symptom vector. Each treatment has a cost; in a few remission-capable states a
couple of treatments can end the episode in remission, and every state carries
a small adverse-event hazard.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .data import Dataset, Outcome, Source, Trajectory

ENV_FILE_VERSION = 1


class ConfigError(ValueError):
    """Invalid configuration value; the message names the field."""


@dataclass(frozen=True)
class EnvSpec:
    n_treatments: int = 16
    n_disease_states: int = 16
    n_symptoms: int = 8
    remission_reward: float = 64.0
    adverse_penalty: float = -64.0
    adverse_threshold: float = 0.999
    treatment_cost_range: tuple[float, float] = (-4.0, -1.0)
    symptom_mean_range: tuple[float, float] = (0.0, 2.0)
    symptom_std_range: tuple[float, float] = (1.0, 2.0)
    remission_prob_range: tuple[float, float] = (0.8, 1.0)
    transition_prob_range: tuple[float, float] = (0.01, 0.2)
    max_episode_len: int = 32
    seed: int = 0
    # generative-model knobs not fixed by the benchmark table
    remission_state_fraction: float = 0.25
    effective_treatments: int = 2
    transitions_per_pair: int = 3
    severity_range: tuple[float, float] = (0.5, 2.0)

    def __post_init__(self):
        for name in ("treatment_cost_range", "symptom_mean_range", "symptom_std_range",
                     "remission_prob_range", "transition_prob_range", "severity_range"):
            val = getattr(self, name)
            object.__setattr__(self, name, (float(val[0]), float(val[1])))
        self.validate()

    def validate(self) -> None:
        for name in ("n_treatments", "n_disease_states", "n_symptoms", "max_episode_len",
                     "effective_treatments", "transitions_per_pair"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("treatment_cost_range", "symptom_mean_range", "symptom_std_range",
                     "remission_prob_range", "transition_prob_range", "severity_range"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise ConfigError(f"{name} must satisfy lower <= upper, got [{lo}, {hi}]")
        if self.symptom_std_range[0] <= 0:
            raise ConfigError(f"symptom_std_range must be strictly positive, got {self.symptom_std_range}")
        for name in ("remission_prob_range", "transition_prob_range"):
            lo, hi = getattr(self, name)
            if lo < 0 or hi > 1:
                raise ConfigError(f"{name} must lie in [0, 1], got [{lo}, {hi}]")
        if not 0.0 < self.adverse_threshold < 1.0:
            raise ConfigError(f"adverse_threshold must be in (0, 1), got {self.adverse_threshold}")
        if not 0.0 < self.remission_state_fraction <= 1.0:
            raise ConfigError(f"remission_state_fraction must be in (0, 1], got {self.remission_state_fraction}")
        if self.effective_treatments > self.n_treatments:
            raise ConfigError("effective_treatments cannot exceed n_treatments")
        if self.transitions_per_pair * self.transition_prob_range[1] > 1.0:
            raise ConfigError("transitions_per_pair * max transition probability exceeds 1")

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "EnvSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown env fields: {sorted(unknown)}")
        kw = {k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()}
        return cls(**kw)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def load_env_spec(path: str | Path) -> EnvSpec:
    raw = yaml.safe_load(Path(path).read_text()) or {}
    if "env" in raw and isinstance(raw["env"], dict):
        raw = raw["env"]
    return EnvSpec.from_dict(raw)


@dataclass
class EnvInstance:
    spec: EnvSpec
    transition: np.ndarray       # (states, treatments, states)
    emission_mean: np.ndarray    # (states, symptoms)
    emission_std: np.ndarray     # (states, symptoms)
    remission: np.ndarray        # (states, treatments)
    adverse_hazard: np.ndarray   # (states,)
    cost: np.ndarray             # (treatments,)
    remission_states: np.ndarray
    initial_dist: np.ndarray     # (states,)
    prototypes: np.ndarray = field(default=None)  # (treatments, symptoms)

    def __post_init__(self):
        if self.prototypes is None:
            self.prototypes = _treatment_prototypes(self)

    @property
    def spec_hash(self) -> str:
        return self.spec.hash()

    @property
    def reward_bounds(self) -> tuple[float, float]:
        s = self.spec
        return (s.adverse_penalty + s.treatment_cost_range[0], s.remission_reward + s.treatment_cost_range[1])

    def replace(self, **changes) -> "EnvInstance":
        return dataclasses.replace(self, **changes)


def _treatment_prototypes(inst: EnvInstance) -> np.ndarray:
    """Emission mean each treatment is 'meant' for.

    A treatment that can remit somewhere points at the mean of the state where it
    works best; otherwise at the state from which it most often leads into a
    remission-capable state.
    """
    n_s, n_a = inst.remission.shape
    protos = np.empty((n_a, inst.emission_mean.shape[1]))
    into_rem = inst.transition[:, :, inst.remission_states].sum(axis=2)
    for a in range(n_a):
        if inst.remission[:, a].max() > 0:
            s = int(np.argmax(inst.remission[:, a]))
        else:
            s = int(np.argmax(into_rem[:, a]))
        protos[a] = inst.emission_mean[s]
    return protos


def sample_env(spec: EnvSpec) -> EnvInstance:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    n_s, n_a, n_o = spec.n_disease_states, spec.n_treatments, spec.n_symptoms

    trans = np.zeros((n_s, n_a, n_s))
    k = min(spec.transitions_per_pair, n_s - 1)
    lo, hi = spec.transition_prob_range
    for s in range(n_s):
        others = np.array([x for x in range(n_s) if x != s])
        for a in range(n_a):
            if k > 0:
                dest = rng.choice(others, size=k, replace=False)
                trans[s, a, dest] = rng.uniform(lo, hi, size=k)
            trans[s, a, s] = 1.0 - trans[s, a].sum()

    mean = rng.uniform(*spec.symptom_mean_range, size=(n_s, n_o))
    std = rng.uniform(*spec.symptom_std_range, size=(n_s, n_o))

    n_rem = max(1, math.ceil(spec.remission_state_fraction * n_s))
    rem_states = np.sort(rng.choice(n_s, size=n_rem, replace=False))
    remission = np.zeros((n_s, n_a))
    for s in rem_states:
        acts = rng.choice(n_a, size=spec.effective_treatments, replace=False)
        remission[s, acts] = rng.uniform(*spec.remission_prob_range, size=spec.effective_treatments)

    severity = rng.uniform(*spec.severity_range, size=n_s)
    hazard = np.clip((1.0 - spec.adverse_threshold) * severity, 0.0, 1.0)
    cost = rng.uniform(*spec.treatment_cost_range, size=n_a)

    # episodes start outside the remission-capable states
    init = np.ones(n_s)
    if n_rem < n_s:
        init[rem_states] = 0.0
    init /= init.sum()

    return EnvInstance(spec, trans, mean, std, remission, hazard, cost, rem_states, init)


def _check_ids(inst: EnvInstance, hidden: int, action: int) -> None:
    if not 0 <= hidden < inst.spec.n_disease_states:
        raise ValueError(f"disease state {hidden} out of range [0, {inst.spec.n_disease_states})")
    if not 0 <= action < inst.spec.n_treatments:
        raise ValueError(f"treatment {action} out of range [0, {inst.spec.n_treatments})")


def emit(inst: EnvInstance, hidden: int, rng: np.random.Generator) -> np.ndarray:
    return rng.normal(inst.emission_mean[hidden], inst.emission_std[hidden])


def reset(inst: EnvInstance, rng: np.random.Generator) -> tuple[int, np.ndarray]:
    hidden = int(rng.choice(inst.spec.n_disease_states, p=inst.initial_dist))
    return hidden, emit(inst, hidden, rng)


def step(inst: EnvInstance, hidden: int, action: int, rng: np.random.Generator):
    """Advance one treatment step.

    Returns ``(next_hidden, observation, reward, done, outcome)``; ``outcome`` is
    None unless the episode ended in remission or an adverse event. Remission is
    checked before the adverse hazard.
    """
    _check_ids(inst, hidden, action)
    spec = inst.spec
    reward = float(inst.cost[action])
    if rng.random() < inst.remission[hidden, action]:
        return hidden, emit(inst, hidden, rng), reward + spec.remission_reward, True, Outcome.REMISSION
    if rng.random() < inst.adverse_hazard[hidden]:
        return hidden, emit(inst, hidden, rng), reward + spec.adverse_penalty, True, Outcome.ADVERSE
    nxt = int(rng.choice(spec.n_disease_states, p=inst.transition[hidden, action]))
    return nxt, emit(inst, nxt, rng), reward, False, None


# -- behaviour policy -------------------------------------------------------

def greedy_behavior_action(observation: np.ndarray, inst: EnvInstance) -> int:
    d = np.linalg.norm(inst.prototypes - np.asarray(observation), axis=1)
    return int(np.argmin(d))


def behavior_probs(observations: np.ndarray, inst: EnvInstance, epsilon: float) -> np.ndarray:
    """Action probabilities of the epsilon-greedy symptom-matching policy, shape (n, treatments)."""
    obs = np.atleast_2d(observations)
    n_a = inst.spec.n_treatments
    d = np.linalg.norm(obs[:, None, :] - inst.prototypes[None, :, :], axis=2)
    greedy = np.argmin(d, axis=1)
    p = np.full((obs.shape[0], n_a), epsilon / n_a)
    p[np.arange(obs.shape[0]), greedy] += 1.0 - epsilon
    return p


def behavior_policy(observation, inst: EnvInstance, epsilon: float, rng: np.random.Generator) -> int:
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError(f"epsilon must be in [0, 1], got {epsilon}")
    if epsilon > 0 and rng.random() < epsilon:
        return int(rng.integers(inst.spec.n_treatments))
    return greedy_behavior_action(observation, inst)


class BehaviorPolicy:
    """Callable wrapper so the collector and estimators see one policy object."""

    def __init__(self, inst: EnvInstance, epsilon: float = 0.1):
        if not 0.0 <= epsilon <= 1.0:
            raise ValueError(f"epsilon must be in [0, 1], got {epsilon}")
        self.inst = inst
        self.epsilon = epsilon

    def sample(self, observation, rng) -> int:
        return behavior_policy(observation, self.inst, self.epsilon, rng)

    def probs(self, observations) -> np.ndarray:
        return behavior_probs(observations, self.inst, self.epsilon)


def episode_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, int(index)])


def run_episode(inst: EnvInstance, choose, rng: np.random.Generator):
    """Roll out one episode; ``choose(obs, rng)`` returns a treatment id."""
    hidden, obs = reset(inst, rng)
    states, actions, rewards = [], [], []
    outcome = Outcome.TRUNCATED
    for _ in range(inst.spec.max_episode_len):
        a = choose(obs, rng)
        states.append(obs)
        actions.append(a)
        hidden, obs, r, done, out = step(inst, hidden, a, rng)
        rewards.append(r)
        if done:
            outcome = out
            break
    return np.array(states), np.array(actions, dtype=np.int64), np.array(rewards), outcome


def collect_dataset(inst: EnvInstance, policy, n_episodes: int, gamma: float = 1.0, seed: int = 0) -> Dataset:
    """Roll out ``n_episodes`` with ``policy`` (anything with ``sample(obs, rng)``).

    Episode ``i`` uses its own generator derived from ``(seed, i)``. ``gamma`` is
    accepted for interface symmetry; stored rewards are undiscounted.
    """
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    trajs = []
    for i in range(n_episodes):
        s, a, r, out = run_episode(inst, policy.sample, episode_rng(seed, i))
        trajs.append(Trajectory(f"ep{i:06d}", s, a, r, out, Source.REAL))
    return Dataset(trajs, inst.spec_hash, inst.spec.n_symptoms, inst.spec.n_treatments)


# -- env file I/O -----------------------------------------------------------

_ARRAYS = ("transition", "emission_mean", "emission_std", "remission", "adverse_hazard",
           "cost", "remission_states", "initial_dist", "prototypes")


def save_env(inst: EnvInstance, path: str | Path) -> None:
    obj = {"format_version": ENV_FILE_VERSION, "spec_hash": inst.spec_hash, "spec": inst.spec.to_dict()}
    for name in _ARRAYS:
        arr = getattr(inst, name)
        obj[name] = {"shape": list(arr.shape), "dtype": str(arr.dtype), "data": arr.ravel().tolist()}
    Path(path).write_text(json.dumps(obj))


def load_env(path: str | Path) -> EnvInstance:
    obj = json.loads(Path(path).read_text())
    if obj.get("format_version") != ENV_FILE_VERSION:
        raise ValueError(f"env file version {obj.get('format_version')!r} unsupported")
    spec = EnvSpec.from_dict(obj["spec"])
    if spec.hash() != obj["spec_hash"]:
        raise ValueError("env file spec hash does not match its spec")
    arrays = {name: np.array(obj[name]["data"], dtype=obj[name]["dtype"]).reshape(obj[name]["shape"])
              for name in _ARRAYS}
    return EnvInstance(spec, **arrays)

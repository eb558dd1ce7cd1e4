"""Deterministic toy MDPs with exact dynamic-programming oracles.

``chain(n, horizon)``: start at cell 0, actions left/right, reward 1 (and the
episode ends) on first arrival at cell ``n-1``.

``key_door(length, key_pos, door_pos, horizon)``: same corridor, but the door
only pays out (and ends the episode) once the key cell has been visited.

Every episode also ends after ``horizon`` steps. States are one-hot positions,
with a trailing has-key bit for ``key_door``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import Episode, Manifest, write_archive
from .errors import ConfigurationError, DataError

LEFT, RIGHT = 0, 1
N_ACTIONS = 2
TIE_BREAK_GAMMA = 0.99
RANDOM_SCORE_EPISODES = 1000


@dataclass(frozen=True)
class EnvState:
    pos: int
    has_key: bool
    t: int


@dataclass(frozen=True)
class EnvSpec:
    kind: str
    length: int
    horizon: int
    key_pos: int | None = None
    door_pos: int | None = None

    def __post_init__(self):
        if self.kind not in ("chain", "key_door"):
            raise ConfigurationError(f"unknown env kind {self.kind!r}")
        if self.horizon < 1:
            raise ConfigurationError("horizon must be >= 1")
        if self.length < 2:
            raise ConfigurationError("corridor length must be >= 2")
        if self.kind == "key_door":
            if self.key_pos is None or self.door_pos is None:
                raise ConfigurationError("key_door needs key_pos and door_pos")
            if not (0 <= self.key_pos < self.length and 0 <= self.door_pos < self.length):
                raise ConfigurationError("key_pos and door_pos must lie inside the corridor")
            if self.key_pos == self.door_pos:
                raise ConfigurationError("key_pos and door_pos must differ")

    @property
    def name(self) -> str:
        return self.kind

    @property
    def params(self) -> dict:
        if self.kind == "chain":
            return {"n": self.length, "horizon": self.horizon}
        return {"length": self.length, "key_pos": self.key_pos, "door_pos": self.door_pos,
                "horizon": self.horizon}

    @property
    def state_dim(self) -> int:
        return self.length + (1 if self.kind == "key_door" else 0)

    def reset(self, seed: int | None = None) -> EnvState:
        # dynamics are deterministic; the seed is accepted for interface parity
        return EnvState(0, self.kind == "key_door" and self.key_pos == 0, 0)

    def observe(self, state: EnvState) -> np.ndarray:
        obs = np.zeros(self.state_dim)
        obs[state.pos] = 1.0
        if self.kind == "key_door":
            obs[-1] = float(state.has_key)
        return obs

    def step(self, state: EnvState, action: int) -> tuple[EnvState, float, bool]:
        if action not in (LEFT, RIGHT):
            raise DataError(f"invalid action {action!r}; expected 0 (left) or 1 (right)")
        pos = min(max(state.pos + (1 if action == RIGHT else -1), 0), self.length - 1)
        t = state.t + 1
        reward, done = 0.0, False
        if self.kind == "chain":
            has_key = False
            if pos == self.length - 1:
                reward, done = 1.0, True
        else:
            has_key = state.has_key or pos == self.key_pos
            if pos == self.door_pos and has_key:
                reward, done = 1.0, True
        return EnvState(pos, has_key, t), reward, done or t >= self.horizon

    @cached_property
    def _dp(self):
        """Tables ``V[t, pos, key]`` (undiscounted) and ``Q[t, pos, key, a]`` for both criteria."""
        H, L = self.horizon, self.length
        V = np.zeros((H + 1, L, 2))
        W = np.zeros((H + 1, L, 2))  # discounted, for tie-breaking only
        Q = np.zeros((H, L, 2, N_ACTIONS))
        Qd = np.zeros((H, L, 2, N_ACTIONS))
        for t in range(H - 1, -1, -1):
            for pos in range(L):
                for key in (0, 1):
                    s = EnvState(pos, bool(key), t)
                    for a in (LEFT, RIGHT):
                        nxt, r, done = self.step(s, a)
                        k2 = int(nxt.has_key)
                        Q[t, pos, key, a] = r + (0.0 if done else V[t + 1, nxt.pos, k2])
                        Qd[t, pos, key, a] = r + (0.0 if done else TIE_BREAK_GAMMA * W[t + 1, nxt.pos, k2])
                    V[t, pos, key] = Q[t, pos, key].max()
                    W[t, pos, key] = Qd[t, pos, key].max()
        return V, Q, Qd

    def optimal_action(self, state: EnvState) -> int:
        _, Q, Qd = self._dp
        q, qd = Q[state.t, state.pos, int(state.has_key)], Qd[state.t, state.pos, int(state.has_key)]
        best = [a for a in (LEFT, RIGHT) if q[a] == q.max()]
        return max(best, key=lambda a: (qd[a], a))


def chain(n: int, horizon: int) -> EnvSpec:
    return EnvSpec("chain", n, horizon)


def key_door(length: int, key_pos: int, door_pos: int, horizon: int) -> EnvSpec:
    return EnvSpec("key_door", length, horizon, key_pos, door_pos)


def env_from_params(name: str, params: dict) -> EnvSpec:
    if name == "chain":
        return chain(params["n"], params["horizon"])
    if name == "key_door":
        return key_door(params["length"], params["key_pos"], params["door_pos"], params["horizon"])
    raise ConfigurationError(f"unknown env {name!r}")


def reset(env: EnvSpec, seed: int | None = None) -> EnvState:
    return env.reset(seed)


def step(env: EnvSpec, state: EnvState, action: int):
    return env.step(state, action)


def optimal_return(env: EnvSpec) -> float:
    """Exact optimal undiscounted return from the start state (finite-horizon DP)."""
    V, _, _ = env._dp
    s = env.reset()
    return float(V[0, s.pos, int(s.has_key)])


def brute_force_return(env: EnvSpec) -> float:
    """Best return over all ``2**horizon`` open-loop action sequences."""
    best = 0.0
    for seq in itertools.product((LEFT, RIGHT), repeat=env.horizon):
        s, total = env.reset(), 0.0
        for a in seq:
            s, r, done = env.step(s, a)
            total += r
            if done:
                break
        best = max(best, total)
    return best


# datasets ------------------------------------------------------------------

@dataclass(frozen=True)
class PolicySpec:
    epsilon: float
    label: str = "custom"

    def __post_init__(self):
        if not 0.0 <= self.epsilon <= 1.0:
            raise ConfigurationError(f"epsilon must lie in [0, 1], got {self.epsilon}")


POLICY_PRESETS = {
    "random": PolicySpec(1.0, "random"),
    "medium": PolicySpec(0.5, "medium"),
    "expert": PolicySpec(0.05, "expert"),
}


def run_episode(env: EnvSpec, policy: PolicySpec, rng: np.random.Generator) -> Episode:
    """Roll out an epsilon-greedy policy against the DP-optimal action."""
    s = env.reset()
    states, actions, rewards = [], [], []
    done = False
    while not done:
        if rng.random() < policy.epsilon:
            a = int(rng.integers(N_ACTIONS))
        else:
            a = env.optimal_action(s)
        states.append(env.observe(s))
        actions.append(a)
        s, r, done = env.step(s, a)
        rewards.append(r)
    return Episode(np.array(states), np.array(actions, dtype=np.int64), np.array(rewards))


def measure_random_score(env: EnvSpec, rng: np.random.Generator, episodes: int = RANDOM_SCORE_EPISODES) -> float:
    returns = [run_episode(env, POLICY_PRESETS["random"], rng).total_return for _ in range(episodes)]
    return float(np.mean(returns))


def generate_dataset(env: EnvSpec, policy_mix: Sequence[tuple[PolicySpec, int]], seed: int,
                     path=None) -> tuple[Manifest, list[Episode]]:
    """Roll out each policy for its episode count; optionally write the archive to ``path``."""
    for _, count in policy_mix:
        if count < 0:
            raise ConfigurationError("episode counts must be nonnegative")
    data_ss, score_ss = np.random.SeedSequence(seed).spawn(2)
    rng = np.random.default_rng(data_ss)
    episodes = [run_episode(env, pol, rng) for pol, count in policy_mix for _ in range(count)]
    manifest = Manifest(
        env_name=env.name,
        env_params=env.params,
        state_dim=env.state_dim,
        action_type="discrete",
        action_dim=N_ACTIONS,
        random_score=measure_random_score(env, np.random.default_rng(score_ss)),
        expert_score=optimal_return(env),
        episode_count=len(episodes),
        state_encoding="one_hot",
    )
    if path is not None:
        write_archive(Path(path), manifest, episodes)
    return manifest, episodes


def parse_mix(text: str) -> list[tuple[PolicySpec, int]]:
    """Parse ``expert:100,medium:100`` (labels or raw epsilons like ``0.2:50``)."""
    mix = []
    for part in filter(None, (p.strip() for p in text.split(","))):
        try:
            label, count = part.split(":")
            count = int(count)
        except ValueError as exc:
            raise ConfigurationError(f"bad mix entry {part!r}; expected label:count") from exc
        if label in POLICY_PRESETS:
            mix.append((POLICY_PRESETS[label], count))
        else:
            try:
                mix.append((PolicySpec(float(label)), count))
            except ValueError as exc:
                raise ConfigurationError(f"unknown policy {label!r}") from exc
    return mix

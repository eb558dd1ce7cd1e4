"""Offline trajectory data: return-to-go, archive I/O, window sampling.

Archive format (one JSON object per line, UTF-8):

* line 1, the manifest::

    {"schema_version": 1, "env_name": "chain", "env_params": {...},
     "state_dim": 8, "action_type": "discrete", "action_dim": 2,
     "state_encoding": "one_hot", "random_score": 0.07, "expert_score": 1.0,
     "episode_count": 200}

* every following line, one episode::

    {"states": [[...], ...], "actions": [...], "rewards": [...]}

Floats are written with Python's shortest round-trip repr, so a write/read
cycle reproduces every number exactly.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .errors import ConfigurationError, DataError, LoadError

SCHEMA_VERSION = 1
STD_FLOOR = 1e-6


@dataclass
class Manifest:
    env_name: str
    state_dim: int
    action_type: str
    action_dim: int
    random_score: float
    expert_score: float
    episode_count: int = 0
    state_encoding: str = "one_hot"
    env_params: dict = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        if self.action_type not in ("discrete", "continuous"):
            raise DataError(f"action_type must be discrete or continuous, got {self.action_type!r}")
        if not self.expert_score > self.random_score:
            raise DataError(
                f"expert_score ({self.expert_score}) must exceed random_score ({self.random_score})"
            )

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Episode:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        self.actions = np.asarray(self.actions)
        if self.states.ndim == 1:
            self.states = self.states[:, None]
        n = len(self.rewards)
        if n < 1 or len(self.states) != n or len(self.actions) != n:
            raise DataError(
                f"episode arrays must share a positive length "
                f"(states {len(self.states)}, actions {len(self.actions)}, rewards {n})"
            )

    def __len__(self) -> int:
        return len(self.rewards)

    @property
    def total_return(self) -> float:
        return float(self.rewards.sum())


@dataclass
class TrainingWindow:
    rtg: np.ndarray
    states: np.ndarray
    actions: np.ndarray
    timesteps: np.ndarray
    loss_mask: np.ndarray


def compute_rtg(rewards) -> np.ndarray:
    """Undiscounted suffix sums ``R_t = sum_{k >= t} r_k``."""
    r = np.asarray(rewards, dtype=np.float64)
    out = np.empty_like(r)
    acc = 0.0
    for t in range(len(r) - 1, -1, -1):
        acc = r[t] + acc
        out[t] = acc
    return out


# archive I/O ---------------------------------------------------------------

def _episode_to_json(ep: Episode) -> dict:
    return {
        "states": ep.states.tolist(),
        "actions": ep.actions.tolist(),
        "rewards": ep.rewards.tolist(),
    }


def write_archive(path, manifest: Manifest, episodes: Sequence[Episode]) -> None:
    manifest.episode_count = len(episodes)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(manifest.to_dict(), sort_keys=True) + "\n")
        for ep in episodes:
            fh.write(json.dumps(_episode_to_json(ep)) + "\n")


def _check_episode(ep: Episode, manifest: Manifest, idx: int) -> None:
    if ep.states.shape[1] != manifest.state_dim:
        raise LoadError(f"episode {idx}: state_dim {ep.states.shape[1]} != manifest {manifest.state_dim}")
    if not (np.isfinite(ep.states).all() and np.isfinite(ep.rewards).all()):
        raise LoadError(f"episode {idx}: non-finite state or reward")
    if manifest.action_type == "discrete":
        a = ep.actions
        if a.ndim != 1 or not np.issubdtype(a.dtype, np.integer):
            raise LoadError(f"episode {idx}: discrete actions must be a flat list of integers")
        if ((a < 0) | (a >= manifest.action_dim)).any():
            raise LoadError(f"episode {idx}: action out of range [0, {manifest.action_dim})")
    else:
        if ep.actions.ndim != 2 or ep.actions.shape[1] != manifest.action_dim:
            raise LoadError(f"episode {idx}: continuous actions must have dim {manifest.action_dim}")


def load_archive(path) -> tuple[Manifest, list[Episode]]:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].strip():
        raise LoadError(f"{path}: missing manifest line")
    try:
        head = json.loads(lines[0])
        if not isinstance(head, dict) or "env_name" not in head:
            raise ValueError("not a manifest object")
        version = head.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise LoadError(f"{path}: unsupported schema_version {version}")
        manifest = Manifest(**head)
    except LoadError:
        raise
    except (ValueError, TypeError, DataError) as exc:
        raise LoadError(f"{path}:1: bad manifest: {exc}") from exc

    episodes = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        idx = len(episodes)
        try:
            obj = json.loads(line)
            ep = Episode(obj["states"], obj["actions"], obj["rewards"])
        except (ValueError, KeyError, TypeError) as exc:
            raise LoadError(f"{path}:{lineno}: episode {idx}: {exc}") from exc
        try:
            _check_episode(ep, manifest, idx)
        except LoadError as exc:
            raise LoadError(f"{path}:{lineno}: {exc}") from exc
        episodes.append(ep)
    if manifest.episode_count != len(episodes):
        raise LoadError(
            f"{path}: manifest episode_count {manifest.episode_count} but {len(episodes)} episodes found"
        )
    return manifest, episodes


# sampling ------------------------------------------------------------------

class WindowSampler:
    """Draws K-step windows with every transition equally likely as a start."""

    def __init__(self, episodes: Sequence[Episode], K: int,
                 state_transform: Callable[[np.ndarray], np.ndarray] | None = None):
        if not episodes:
            raise DataError("cannot sample windows from an empty dataset")
        self.episodes = list(episodes)
        self.K = K
        self.rtgs = [compute_rtg(ep.rewards) for ep in self.episodes]
        self.states = [ep.states if state_transform is None else state_transform(ep.states)
                       for ep in self.episodes]
        self.lengths = np.array([len(ep) for ep in self.episodes])
        self.offsets = np.concatenate([[0], np.cumsum(self.lengths)])
        self.continuous = self.episodes[0].actions.ndim == 2

    @property
    def total(self) -> int:
        return int(self.offsets[-1])

    def window(self, ep_idx: int, start: int) -> TrainingWindow:
        ep, K = self.episodes[ep_idx], self.K
        end = min(start + K, len(ep))
        n = end - start
        sd = ep.states.shape[1]
        rtg = np.zeros(K)
        states = np.zeros((K, sd))
        actions = np.zeros((K,) + ep.actions.shape[1:], dtype=ep.actions.dtype)
        timesteps = np.zeros(K, dtype=np.int64)
        mask = np.zeros(K, dtype=bool)
        rtg[:n] = self.rtgs[ep_idx][start:end]
        states[:n] = self.states[ep_idx][start:end]
        actions[:n] = ep.actions[start:end]
        timesteps[:n] = np.arange(start, end)
        mask[:n] = True
        return TrainingWindow(rtg, states, actions, timesteps, mask)

    def sample(self, rng: np.random.Generator) -> TrainingWindow:
        flat = int(rng.integers(self.total))
        ep_idx = int(np.searchsorted(self.offsets, flat, side="right") - 1)
        return self.window(ep_idx, flat - int(self.offsets[ep_idx]))

    def sample_batch(self, batch_size: int, rng: np.random.Generator) -> dict:
        return collate([self.sample(rng) for _ in range(batch_size)])


def sample_window(episodes: Sequence[Episode], K: int, rng: np.random.Generator) -> TrainingWindow:
    return WindowSampler(episodes, K).sample(rng)


def collate(windows: Sequence[TrainingWindow]) -> dict:
    """Stack windows into tensors: rtg, states, actions, timesteps, mask."""
    actions = np.stack([w.actions for w in windows])
    return {
        "rtg": torch.as_tensor(np.stack([w.rtg for w in windows]), dtype=torch.float32),
        "states": torch.as_tensor(np.stack([w.states for w in windows]), dtype=torch.float32),
        "actions": torch.as_tensor(actions, dtype=torch.long if actions.ndim == 2 else torch.float32),
        "timesteps": torch.as_tensor(np.stack([w.timesteps for w in windows]), dtype=torch.long),
        "mask": torch.as_tensor(np.stack([w.loss_mask for w in windows])),
    }


def subsample(episodes: Sequence[Episode], target_transitions: int, rng: np.random.Generator) -> list[Episode]:
    """Whole episodes drawn without replacement until the transition count reaches the target.

    Selected episodes keep their original order. For a fixed generator state
    the selections for increasing targets are nested.
    """
    total = sum(len(ep) for ep in episodes)
    if target_transitions > total:
        raise ConfigurationError(f"target {target_transitions} exceeds {total} available transitions")
    if target_transitions < 0:
        raise ConfigurationError("target must be nonnegative")
    order = rng.permutation(len(episodes))
    chosen, count = [], 0
    for i in order:
        if count >= target_transitions:
            break
        chosen.append(int(i))
        count += len(episodes[i])
    return [episodes[i] for i in sorted(chosen)]


def normalize_states(episodes: Sequence[Episode], categorical: bool = False):
    """Per-dimension ``(mean, std, transform)``; identity transform for categorical states."""
    if not episodes:
        raise DataError("cannot normalize an empty dataset")
    all_states = np.concatenate([ep.states for ep in episodes])
    mean = all_states.mean(axis=0)
    std = np.maximum(all_states.std(axis=0), STD_FLOOR)
    if categorical:
        return np.zeros_like(mean), np.ones_like(std), lambda s: np.asarray(s, dtype=np.float64)
    return mean, std, lambda s: (np.asarray(s, dtype=np.float64) - mean) / std

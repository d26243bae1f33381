"""Trajectory data model: episodes, prefixes, normalization and JSONL I/O.

An episode is a fixed-length pairing of state and action vectors plus a
success/failure label. Datasets are stored line-delimited, one JSON record
per episode, with a leading metadata record carrying dimensions and
(optionally) the normalization statistics of the training split.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

SUCCESS = "success"
FAILURE = "failure"
LABELS = (SUCCESS, FAILURE)

# Standard deviations below this are treated as zero-variance and clamped
# to 1 so constant dimensions pass through shifted instead of exploding.
_STD_FLOOR = 1e-12


class DatasetFormatError(ValueError):
    """An episode file failed to parse or validate."""


def _as_float_matrix(values, what: str, episode_id: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise DatasetFormatError(
            f"episode {episode_id!r}: {what} must be a non-empty 2-D array, "
            f"got shape {arr.shape}"
        )
    return np.ascontiguousarray(arr)


@dataclass(frozen=True)
class Episode:
    """One trajectory: per-step states and actions plus an outcome label."""

    id: str
    label: str
    states: np.ndarray  # (T, n_s) float64
    actions: np.ndarray  # (T, n_a) float64

    def __post_init__(self):
        if self.label not in LABELS:
            raise DatasetFormatError(
                f"episode {self.id!r}: label must be one of {LABELS}, got {self.label!r}"
            )
        states = _as_float_matrix(self.states, "states", self.id)
        actions = _as_float_matrix(self.actions, "actions", self.id)
        if states.shape[0] != actions.shape[0]:
            raise DatasetFormatError(
                f"episode {self.id!r}: states ({states.shape[0]} steps) and "
                f"actions ({actions.shape[0]} steps) disagree on length"
            )
        if not np.isfinite(states).all() or not np.isfinite(actions).all():
            raise DatasetFormatError(f"episode {self.id!r} contains non-finite values")
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "actions", actions)

    @property
    def length(self) -> int:
        return self.states.shape[0]

    @property
    def n_s(self) -> int:
        return self.states.shape[1]

    @property
    def n_a(self) -> int:
        return self.actions.shape[1]


@dataclass(frozen=True)
class SubEpisode:
    """The first ``k_len`` steps of a parent episode (the unit detectors score)."""

    parent_id: str
    k_len: int
    states: np.ndarray
    actions: np.ndarray


def prefix(episode: Episode, k_len: int) -> SubEpisode:
    """Return the leading ``k_len`` steps of ``episode`` as a SubEpisode.

    The parent is never mutated; the sub-episode owns copies of its slices.
    """
    if not 1 <= k_len <= episode.length:
        raise ValueError(
            f"k_len={k_len} out of range [1, {episode.length}] "
            f"for episode {episode.id!r}"
        )
    return SubEpisode(
        parent_id=episode.id,
        k_len=k_len,
        states=episode.states[:k_len].copy(),
        actions=episode.actions[:k_len].copy(),
    )


def subepisode_of(episode: Episode) -> SubEpisode:
    """The full episode viewed as a sub-episode (cutoff at its own length)."""
    return prefix(episode, episode.length)


@dataclass(frozen=True)
class NormStats:
    """Per-dimension mean/std for states and actions, frozen at training time."""

    state_mean: np.ndarray
    state_std: np.ndarray
    action_mean: np.ndarray
    action_std: np.ndarray

    def to_dict(self) -> dict:
        return {
            "state_mean": self.state_mean.tolist(),
            "state_std": self.state_std.tolist(),
            "action_mean": self.action_mean.tolist(),
            "action_std": self.action_std.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(
            state_mean=np.asarray(d["state_mean"], dtype=np.float64),
            state_std=np.asarray(d["state_std"], dtype=np.float64),
            action_mean=np.asarray(d["action_mean"], dtype=np.float64),
            action_std=np.asarray(d["action_std"], dtype=np.float64),
        )

    def norm_states(self, x: np.ndarray) -> np.ndarray:
        return normalize(x, self.state_mean, self.state_std)

    def norm_actions(self, x: np.ndarray) -> np.ndarray:
        return normalize(x, self.action_mean, self.action_std)

    def denorm_states(self, x: np.ndarray) -> np.ndarray:
        return denormalize(x, self.state_mean, self.state_std)


def normalize(x: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != mean.shape[0]:
        raise ValueError(f"dimension mismatch: data has {x.shape[-1]} dims, stats have {mean.shape[0]}")
    return (x - mean) / std

def denormalize(x: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != mean.shape[0]:
        raise ValueError(f"dimension mismatch: data has {x.shape[-1]} dims, stats have {mean.shape[0]}")
    return x * std + mean


def compute_norm_stats(episodes: Sequence[Episode]) -> NormStats:
    """Mean/std over every step of ``episodes``; zero-variance dims get std 1."""
    states = np.concatenate([ep.states for ep in episodes], axis=0)
    actions = np.concatenate([ep.actions for ep in episodes], axis=0)

    def _stats(arr):
        mean = arr.mean(axis=0)
        std = arr.std(axis=0)
        return mean, np.where(std < _STD_FLOOR, 1.0, std)

    sm, ss = _stats(states)
    am, asd = _stats(actions)
    return NormStats(sm, ss, am, asd)


@dataclass
class Dataset:
    """An immutable-after-load collection of episodes plus frozen norm stats."""

    episodes: list[Episode]
    n_s: int
    n_a: int
    k_max: int
    norm_stats: NormStats
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for ep in self.episodes:
            if ep.n_s != self.n_s or ep.n_a != self.n_a:
                raise DatasetFormatError(
                    f"episode {ep.id!r}: dims ({ep.n_s}, {ep.n_a}) do not match "
                    f"dataset dims ({self.n_s}, {self.n_a})"
                )
            if ep.length > self.k_max:
                raise DatasetFormatError(
                    f"episode {ep.id!r}: length {ep.length} exceeds k_max={self.k_max}"
                )

    def __len__(self) -> int:
        return len(self.episodes)

    def label_counts(self) -> dict:
        counts = {SUCCESS: 0, FAILURE: 0}
        for ep in self.episodes:
            counts[ep.label] += 1
        return counts

    def successes(self) -> list[Episode]:
        return [ep for ep in self.episodes if ep.label == SUCCESS]

    def fingerprint(self) -> str:
        return dataset_fingerprint(self)


def dataset_fingerprint(dataset: Dataset) -> str:
    """Content hash over dimensions and every episode's raw bytes."""
    h = hashlib.sha256()
    h.update(f"{dataset.n_s},{dataset.n_a},{dataset.k_max};".encode())
    for ep in dataset.episodes:
        h.update(ep.id.encode())
        h.update(ep.label.encode())
        h.update(ep.states.tobytes())
        h.update(ep.actions.tobytes())
    return h.hexdigest()


def sample_training_window(
    episode: Episode, t_in: int, t_out: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Draw one supervised window: ``t_in + 1`` input steps and ``t_out`` targets.

    Picks an anchor k uniformly from the positions where both the input block
    (s_{k-t_in} .. s_k with matching actions) and the target block
    (s_{k+1} .. s_{k+t_out}) lie inside the episode, and returns copies of the
    three blocks.
    """
    if t_in < 0 or t_out < 1:
        raise ValueError(f"need t_in >= 0 and t_out >= 1, got ({t_in}, {t_out})")
    lo = t_in
    hi = episode.length - 1 - t_out  # inclusive upper anchor
    if hi < lo:
        raise ValueError(
            f"episode {episode.id!r} too short (T={episode.length}) "
            f"for t_in={t_in}, t_out={t_out}"
        )
    k = int(rng.integers(lo, hi + 1))
    s_block = episode.states[k - t_in : k + 1].copy()
    a_block = episode.actions[k - t_in : k + 1].copy()
    s_next = episode.states[k + 1 : k + 1 + t_out].copy()
    return s_block, a_block, s_next


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def save_dataset(dataset: Dataset, path) -> None:
    """Write one metadata line then one JSON record per episode.

    Floats go through Python's repr so a reload is bit-exact.
    """
    with open(path, "w", encoding="utf-8") as f:
        meta = {
            "meta": {
                "n_s": dataset.n_s,
                "n_a": dataset.n_a,
                "k_max": dataset.k_max,
                "norm_stats": dataset.norm_stats.to_dict(),
                "labels": dataset.label_counts(),
                "extra": dataset.meta,
            }
        }
        f.write(json.dumps(meta) + "\n")
        for ep in dataset.episodes:
            rec = {
                "id": ep.id,
                "label": ep.label,
                "states": ep.states.tolist(),
                "actions": ep.actions.tolist(),
            }
            f.write(json.dumps(rec) + "\n")


def load_dataset(path) -> Dataset:
    """Load a line-delimited episode file written by :func:`save_dataset`.

    The metadata record must come first. If it carries no norm_stats the
    statistics are computed from the loaded episodes (treat such a file as a
    training split; evaluation splits should embed the training stats).
    """
    episodes: list[Episode] = []
    meta_rec = None
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise DatasetFormatError(f"line {lineno}: invalid JSON ({e.msg})") from e
            if "meta" in rec:
                if meta_rec is not None:
                    raise DatasetFormatError(f"line {lineno}: duplicate metadata record")
                meta_rec = rec["meta"]
                continue
            try:
                episodes.append(
                    Episode(
                        id=str(rec["id"]),
                        label=rec["label"],
                        states=rec["states"],
                        actions=rec["actions"],
                    )
                )
            except KeyError as e:
                raise DatasetFormatError(f"line {lineno}: missing field {e}") from e
            except DatasetFormatError as e:
                raise DatasetFormatError(f"line {lineno}: {e}") from e

    if not episodes:
        raise DatasetFormatError("empty dataset")
    if meta_rec is None:
        raise DatasetFormatError("missing metadata record (first line tagged 'meta')")

    n_s = int(meta_rec["n_s"])
    n_a = int(meta_rec["n_a"])
    k_max = int(meta_rec["k_max"])
    if meta_rec.get("norm_stats"):
        stats = NormStats.from_dict(meta_rec["norm_stats"])
    else:
        stats = compute_norm_stats(episodes)
    return Dataset(
        episodes=episodes,
        n_s=n_s,
        n_a=n_a,
        k_max=k_max,
        norm_stats=stats,
        meta=meta_rec.get("extra", {}),
    )

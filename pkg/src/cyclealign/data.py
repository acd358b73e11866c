"""Unpaired transition datasets, batching, and the paired evaluation split."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from cyclealign import envs

DATASET_MAGIC = b"CYDS"
DATASET_VERSION = 1
MODES = {"random": 0, "reference": 1, "noisy_reference": 2}
_MODE_NAMES = {v: k for k, v in MODES.items()}
NOISE_FRACTION = 0.3
MIN_ENCODER_EXPANSION = 1e-3
_HEADER = struct.Struct("<4sI32sBIIQq")


class DatasetFormatError(ValueError):
    """A dataset file could not be decoded."""


@dataclass(frozen=True)
class TransitionTriple:
    obs_t: np.ndarray
    action_t: np.ndarray
    obs_next: np.ndarray


@dataclass(eq=False)
class TrajectoryDataset:
    """Transition triples stored column-wise as three float64 matrices."""

    env_spec_digest: bytes
    obs: np.ndarray
    actions: np.ndarray
    next_obs: np.ndarray
    collection_mode: str
    seed: int

    def __post_init__(self):
        n = len(self.obs)
        if len(self.actions) != n or len(self.next_obs) != n:
            raise ValueError("obs, actions and next_obs must have the same number of rows")
        if self.obs.shape[1:] != self.next_obs.shape[1:]:
            raise ValueError("obs and next_obs widths differ")
        if self.collection_mode not in MODES:
            raise ValueError(f"unknown collection mode {self.collection_mode!r}")
        for a in (self.obs, self.actions, self.next_obs):
            a.setflags(write=False)

    def __len__(self):
        return len(self.obs)

    def __getitem__(self, i):
        return TransitionTriple(self.obs[i], self.actions[i], self.next_obs[i])

    @property
    def triples(self):
        return [self[i] for i in range(len(self))]

    @property
    def obs_dim(self):
        return self.obs.shape[1]

    @property
    def action_dim(self):
        return self.actions.shape[1]

    def subset(self, indices):
        idx = np.asarray(indices)
        return TrajectoryDataset(self.env_spec_digest, self.obs[idx].copy(), self.actions[idx].copy(),
                                 self.next_obs[idx].copy(), self.collection_mode, self.seed)

    def head(self, count):
        return self.subset(np.arange(min(count, len(self))))

    def equals(self, other):
        return (self.env_spec_digest == other.env_spec_digest
                and self.collection_mode == other.collection_mode
                and self.seed == other.seed
                and _same_bits(self.obs, other.obs)
                and _same_bits(self.actions, other.actions)
                and _same_bits(self.next_obs, other.next_obs))


def _same_bits(a, b):
    return a.shape == b.shape and a.tobytes() == b.tobytes()


# ---------------------------------------------------------------------------
# collection


def _episode_streams(seed, episodes):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(episodes)]


def collect(spec: envs.EnvSpec, mode: str, episodes: int, horizon: int, seed: int,
            return_states=False):
    """Roll out ``episodes`` episodes of ``horizon`` steps each.

    Each episode owns a generator spawned from ``seed``; it draws the reset
    state and the episode's action/noise block up front, so the rollout
    itself can step all episodes together while staying identical to a
    one-episode-at-a-time collection.  Triples are ordered episode-major.
    """
    if mode not in MODES:
        raise ValueError(f"unknown collection mode {mode!r}; expected one of {sorted(MODES)}")
    if episodes < 1 or horizon < 1:
        raise ValueError("episodes and horizon must be >= 1")
    m, bound = spec.action_dim, spec.action_bound
    streams = _episode_streams(seed, episodes)
    s = np.empty((episodes, spec.state_dim))
    draws = np.empty((episodes, horizon, m))
    for e, rng in enumerate(streams):
        s[e] = envs.reset(spec, rng)
        if mode == "random":
            draws[e] = rng.uniform(-bound, bound, size=(horizon, m))
        elif mode == "noisy_reference":
            draws[e] = rng.normal(0.0, NOISE_FRACTION * bound, size=(horizon, m))
        else:
            draws[e] = 0.0
    states = np.empty((episodes, horizon + 1, spec.state_dim))
    actions = np.empty((episodes, horizon, m))
    states[:, 0] = s
    for t in range(horizon):
        if mode == "random":
            a = draws[:, t]
        else:
            a = envs.clamp_action(spec, envs.reference_policy(spec, s) + draws[:, t])
        s = envs.step(spec, s, a)
        actions[:, t] = a
        states[:, t + 1] = s
    flat_s = states[:, :-1].reshape(-1, spec.state_dim)
    flat_next = states[:, 1:].reshape(-1, spec.state_dim)
    if spec.modality == "scrambled":
        bound_ratio = envs.encoder_expansion_bound(spec, flat_s)
        if bound_ratio < MIN_ENCODER_EXPANSION:
            raise ValueError(f"scrambled sensor folds sampled states together "
                             f"(expansion ratio {bound_ratio:.2e})")
    ds = TrajectoryDataset(
        spec.digest(),
        envs.observe(spec, flat_s),
        actions.reshape(-1, m).copy(),
        envs.observe(spec, flat_next),
        mode,
        int(seed),
    )
    if return_states:
        return ds, flat_s
    return ds


# ---------------------------------------------------------------------------
# file format


def dataset_to_bytes(ds: TrajectoryDataset) -> bytes:
    header = _HEADER.pack(DATASET_MAGIC, DATASET_VERSION, ds.env_spec_digest, MODES[ds.collection_mode],
                          ds.obs_dim, ds.action_dim, len(ds), ds.seed)
    body = np.concatenate([ds.obs, ds.actions, ds.next_obs], axis=1).astype("<f8")
    return header + body.tobytes()


def dataset_from_bytes(data: bytes) -> TrajectoryDataset:
    if len(data) < 4:
        raise DatasetFormatError("truncated: file shorter than magic")
    if data[:4] != DATASET_MAGIC:
        raise DatasetFormatError(f"bad magic {data[:4]!r}, expected {DATASET_MAGIC!r}")
    if len(data) < 8:
        raise DatasetFormatError("truncated: missing version")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != DATASET_VERSION:
        raise DatasetFormatError(f"version mismatch: file has {version}, reader supports {DATASET_VERSION}")
    if len(data) < _HEADER.size:
        raise DatasetFormatError("truncated: incomplete header")
    _, _, digest, mode, do, da, count, seed = _HEADER.unpack_from(data, 0)
    if mode not in _MODE_NAMES:
        raise DatasetFormatError(f"unknown mode code {mode}")
    width = 2 * do + da
    expected = _HEADER.size + 8 * width * count
    if len(data) < expected:
        raise DatasetFormatError(f"truncated: expected {expected} bytes, got {len(data)}")
    if len(data) > expected:
        raise DatasetFormatError(f"trailing bytes: expected {expected}, got {len(data)}")
    body = np.frombuffer(data, dtype="<f8", offset=_HEADER.size).astype(np.float64).reshape(count, width)
    return TrajectoryDataset(digest, body[:, :do].copy(), body[:, do:do + da].copy(),
                             body[:, do + da:].copy(), _MODE_NAMES[mode], seed)


def save(ds: TrajectoryDataset, path):
    """Write atomically (temp file then rename)."""
    write_atomic(path, dataset_to_bytes(ds))


def load(path) -> TrajectoryDataset:
    with open(path, "rb") as f:
        return dataset_from_bytes(f.read())


def write_atomic(path, data: bytes):
    path = os.fspath(path)
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# batching


class BatchSampler:
    """Epoch-wise shuffled index batches without replacement.

    Every epoch is a fresh seeded permutation cut into consecutive batches;
    the final short batch of an epoch is kept unless ``drop_last``.
    """

    def __init__(self, size, batch_size, seed, drop_last=False):
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if batch_size > size:
            raise ValueError(f"batch size {batch_size} exceeds dataset size {size}")
        self.size = size
        self.batch_size = batch_size
        self.drop_last = drop_last
        self.rng = np.random.default_rng(seed)
        self.epoch = 0
        self._order = None
        self._pos = 0

    def batches_per_epoch(self):
        full, rest = divmod(self.size, self.batch_size)
        return full if (self.drop_last or rest == 0) else full + 1

    def next_indices(self):
        if self._order is None or self._pos >= self.size or (
                self.drop_last and self._pos + self.batch_size > self.size):
            self._order = self.rng.permutation(self.size)
            self._pos = 0
            self.epoch += 1
        idx = self._order[self._pos:self._pos + self.batch_size]
        self._pos += self.batch_size
        return idx


def sample_batch(ds: TrajectoryDataset, batch_size: int, sampler: BatchSampler):
    """Draw the next batch as ``(obs, actions, next_obs)`` matrices."""
    if batch_size != sampler.batch_size:
        raise ValueError("batch_size does not match the sampler")
    if batch_size > len(ds):
        raise ValueError(f"batch size {batch_size} exceeds dataset size {len(ds)}")
    idx = sampler.next_indices()
    return ds.obs[idx], ds.actions[idx], ds.next_obs[idx]


# ---------------------------------------------------------------------------
# paired ground truth (evaluation only)


@dataclass(eq=False)
class PairedEvalSet:
    """Ground-truth (state_Y, obs_X) pairs; never handed to a training routine."""

    states_y: np.ndarray
    obs_x: np.ndarray

    def __len__(self):
        return len(self.states_y)

    def __iter__(self):
        return iter(zip(self.states_y, self.obs_x))


def _compatible(spec_x, spec_y):
    return (spec_x.family == spec_y.family and spec_x.state_dim == spec_y.state_dim
            and spec_x.action_dim == spec_y.action_dim)


def build_paired_eval(spec_x: envs.EnvSpec, spec_y: envs.EnvSpec, count: int, seed: int,
                      horizon=50) -> PairedEvalSet:
    """Sample ``count`` states from random-action rollouts of ``spec_y`` and
    record both representations."""
    if not _compatible(spec_x, spec_y):
        raise ValueError("paired evaluation needs X and Y over the same family and state space")
    if count < 1:
        raise ValueError("count must be >= 1")
    episodes = -(-count // horizon)
    _, states = collect(spec_y.with_(modality="state"), "random", episodes, horizon, seed,
                        return_states=True)
    pick = np.random.default_rng([seed, 7]).permutation(len(states))[:count]
    states = states[np.sort(pick)]
    return PairedEvalSet(envs.observe(spec_y, states), envs.observe(spec_x, states))


def check_disjoint(a: PairedEvalSet, b: PairedEvalSet):
    rows_a = {r.tobytes() for r in np.ascontiguousarray(a.states_y)}
    if any(r.tobytes() in rows_a for r in np.ascontiguousarray(b.states_y)):
        raise ValueError("paired splits overlap")


def standardization(ds: TrajectoryDataset):
    """Per-coordinate (mean, std) of a dataset's observations; std floored at 1e-8."""
    allobs = np.concatenate([ds.obs, ds.next_obs])
    return allobs.mean(axis=0), np.maximum(allobs.std(axis=0), 1e-8)


"""Per-class Gaussian memory: estimation, adaptation through the adapter, snapshots."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import linalg
from .errors import (
    AdapterDimMismatch,
    DuplicateClass,
    MissingCheckpoint,
    ShapeMismatch,
    TooFewSamples,
    TooFewSamplesForClass,
)

MEMORY_MAGIC = b"AGMEM1"
ADAPT_MODES = ("none", "mean_only", "cov_only", "full")


@dataclass
class ClassGaussian:
    class_id: int
    mean: np.ndarray
    cov: np.ndarray
    task_id: int


class GaussianMemory:
    """Ordered map of class id to :class:`ClassGaussian`, with cached Cholesky factors."""

    def __init__(self, latent_dim):
        self.latent_dim = int(latent_dim)
        self.entries = {}
        self._factors = {}

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries.values())

    def __contains__(self, class_id):
        return class_id in self.entries

    def __getitem__(self, class_id):
        return self.entries[class_id]

    def class_ids(self):
        return list(self.entries)

    def task_ids(self):
        return sorted({e.task_id for e in self.entries.values()})

    def of_task(self, task_id):
        return [e for e in self.entries.values() if e.task_id == task_id]

    def add(self, entry: ClassGaussian):
        if entry.class_id in self.entries:
            raise DuplicateClass(f"class {entry.class_id} is already memorized")
        self._check(entry.mean, entry.cov)
        self.entries[entry.class_id] = entry

    def replace(self, class_id, mean, cov):
        self._check(mean, cov)
        entry = self.entries[class_id]
        entry.mean = np.asarray(mean, dtype=float)
        entry.cov = np.asarray(cov, dtype=float)
        self._factors.pop(class_id, None)

    def factor(self, class_id):
        if class_id not in self._factors:
            self._factors[class_id] = linalg.cholesky(self.entries[class_id].cov)
        return self._factors[class_id]

    def copy(self):
        other = GaussianMemory(self.latent_dim)
        for e in self.entries.values():
            other.entries[e.class_id] = ClassGaussian(e.class_id, e.mean.copy(), e.cov.copy(), e.task_id)
        return other

    def stored_floats(self):
        return len(self.entries) * (self.latent_dim + self.latent_dim * (self.latent_dim + 1) // 2)

    def _check(self, mean, cov):
        s = self.latent_dim
        if np.shape(mean) != (s,) or np.shape(cov) != (s, s):
            raise ShapeMismatch(f"expected mean ({s},) and cov ({s}, {s}), got {np.shape(mean)}, {np.shape(cov)}")


def shrink_cov(cov, gamma):
    """``cov + gamma * I``."""
    if gamma < 0:
        raise ValueError(f"shrink gamma must be >= 0, got {gamma}")
    cov = np.asarray(cov, dtype=float)
    if gamma == 0:
        return cov.copy()
    return cov + gamma * np.eye(cov.shape[0])


def memorize_task(memory, extractor, task, shrink=0.0):
    """Estimate one Gaussian per class of ``task`` from the extractor's features.

    ``task`` is anything with ``task_id``, ``classes`` and ``train()`` returning
    ``(inputs, global_labels)``. Returns the newly added entries.
    """
    x, y = task.train()
    required = memory.latent_dim + 1
    for c in task.classes:
        if c in memory:
            raise DuplicateClass(f"class {c} is already memorized")
        count = int(np.sum(y == c))
        if count < required:
            raise TooFewSamplesForClass(c, count, required)
    feats = extractor.predict(x)
    added = []
    for c in task.classes:
        mean, cov = linalg.estimate_gaussian(feats[y == c])
        entry = ClassGaussian(int(c), mean, shrink_cov(cov, shrink), int(task.task_id))
        memory.add(entry)
        added.append(entry)
    return added


def adapt_all(memory, adapter, n_samples, seed, current_task, mode="full", shrink=0.0):
    """Transport every entry from tasks before ``current_task`` through the adapter.

    ``full`` samples ``n_samples`` points from each old Gaussian, maps them
    through the adapter and re-estimates mean and covariance. ``mean_only``
    replaces only the mean by ``adapter(mean)``; ``cov_only`` keeps the old
    mean but takes the transported covariance. Each class draws from its own
    stream ``seeded_rng(seed, class_id)``.
    """
    if mode not in ADAPT_MODES:
        raise ValueError(f"unknown adapt mode {mode!r}")
    old = [e for e in memory if e.task_id < current_task]
    if mode == "none" or not old:
        return []
    s = memory.latent_dim
    dims = getattr(adapter, "dims", None)
    if dims is not None and (dims[0] != s or dims[-1] != s):
        raise AdapterDimMismatch(f"adapter maps {dims[0]} -> {dims[-1]}, memory dim is {s}")
    if mode == "mean_only":
        for e in old:
            memory.replace(e.class_id, adapter.predict(e.mean[None, :])[0], e.cov)
        return old
    if n_samples < s + 1:
        raise TooFewSamples(f"need at least {s + 1} transported samples for S={s}, got {n_samples}")
    updates = []
    for e in old:
        rng = linalg.seeded_rng(seed, e.class_id)
        points = linalg.sample_gaussian(e.mean, e.cov, n_samples, rng)
        mapped = adapter.predict(points)
        if mapped.shape[1] != s:
            raise AdapterDimMismatch(f"adapter produced dim {mapped.shape[1]}, expected {s}")
        mean, cov = linalg.estimate_gaussian(mapped)
        cov = shrink_cov(cov, shrink)
        if mode == "cov_only":
            mean = e.mean
        updates.append((e, mean, cov))
    for e, mean, cov in updates:
        memory.replace(e.class_id, mean, cov)
    return old


# Snapshot layout (little-endian): b"AGMEM1", uint32 S, uint32 entry count,
# then per entry float64 values: class_id, task_id, mean (S), upper triangle of
# the covariance in row-major order (S(S+1)/2).


def save_memory(memory, path):
    s = memory.latent_dim
    iu = np.triu_indices(s)
    buf = bytearray(MEMORY_MAGIC)
    buf += struct.pack("<II", s, len(memory))
    for e in memory:
        row = np.concatenate(([e.class_id, e.task_id], e.mean, e.cov[iu]))
        buf += row.astype("<f8").tobytes()
    Path(path).write_bytes(bytes(buf))


def load_memory(path) -> GaussianMemory:
    path = Path(path)
    if not path.is_file():
        raise MissingCheckpoint(f"memory snapshot not found: {path}")
    raw = path.read_bytes()
    if raw[:6] != MEMORY_MAGIC or len(raw) < 14:
        raise MissingCheckpoint(f"{path} is not a memory snapshot (bad magic)")
    s, count = struct.unpack_from("<II", raw, 6)
    width = 2 + s + s * (s + 1) // 2
    body = raw[14:]
    if len(body) != 8 * width * count:
        raise MissingCheckpoint(f"{path} has {len(body)} payload bytes, expected {8 * width * count}")
    rows = np.frombuffer(body, dtype="<f8").reshape(count, width)
    iu = np.triu_indices(s)
    memory = GaussianMemory(s)
    for row in rows:
        cov = np.zeros((s, s))
        cov[iu] = row[2 + s:]
        cov = cov + np.triu(cov, 1).T
        memory.add(ClassGaussian(int(row[0]), row[2:2 + s].copy(), cov, int(row[1])))
    return memory

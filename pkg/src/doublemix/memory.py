"""Replay memory holding retained exemplars and mixed semantic+acoustic samples."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audio import COMPOSERS, AudioClip
from .bench import manifest_record


class MemoryConstructionError(RuntimeError):
    pass


@dataclass
class CapacityPolicy:
    fraction: float = 0.10
    min_per_task: int = 20
    max_per_task: int = 100

    def count(self, n: int) -> int:
        """clamp(ceil(fraction * n), min, min(max, n))"""
        upper = min(self.max_per_task, n)
        return int(max(min(math.ceil(self.fraction * n - 1e-12), upper), min(self.min_per_task, upper)))


@dataclass
class MemoryEntry:
    clip: AudioClip
    source_task: int
    mixed: bool = False

    @property
    def labels(self):
        return self.clip.labels


@dataclass
class ReplayMemory:
    entries: list = field(default_factory=list)
    policy: CapacityPolicy = field(default_factory=CapacityPolicy)

    def __len__(self):
        return len(self.entries)

    def add(self, entries) -> None:
        self.entries.extend(entries)

    def plain(self) -> list:
        return [e for e in self.entries if not e.mixed]

    def mixed(self) -> list:
        return [e for e in self.entries if e.mixed]

    def source_tasks(self) -> set:
        return {e.source_task for e in self.entries}

    def write_manifest(self, path) -> None:
        with Path(path).open("w") as fh:
            for e in self.entries:
                rec = manifest_record(e.clip, e.source_task, "memory", source_task=e.source_task,
                                      mixed=e.mixed)
                fh.write(json.dumps(rec) + "\n")


def select_exemplars(task_train, task_id: int, seed: int,
                     policy: CapacityPolicy | None = None) -> list[MemoryEntry]:
    """Seeded, class-stratified sample without replacement.

    The per-task count follows ``policy``; classes receive shares proportional
    to their size (largest remainder).
    """
    policy = policy or CapacityPolicy()
    task_train = list(task_train)
    if not task_train:
        raise ValueError("cannot select exemplars from an empty train split")
    rng = np.random.default_rng(seed)
    n_keep = policy.count(len(task_train))
    by_class: dict = {}
    for i, clip in enumerate(task_train):
        key = tuple(sorted(lab.key for lab in clip.labels))
        by_class.setdefault(key, []).append(i)
    keys = sorted(by_class)
    quotas = [n_keep * len(by_class[k]) / len(task_train) for k in keys]
    alloc = [int(q) for q in quotas]
    for j in sorted(range(len(keys)), key=lambda j: (alloc[j] - quotas[j], j))[: n_keep - sum(alloc)]:
        alloc[j] += 1
    picked = []
    for k, n in zip(keys, alloc):
        idx = by_class[k]
        picked += [idx[i] for i in rng.choice(len(idx), size=n, replace=False)]
    return [MemoryEntry(task_train[i], task_id) for i in sorted(picked)]


def make_mixed_samples(semantic_pool, acoustic_pool, mode: str, count: int, seed: int,
                       forbidden_pairs=frozenset()) -> list[MemoryEntry]:
    """Compose ``count`` semantic+acoustic clips from the two pools.

    Pool items are :class:`MemoryEntry`; the mixed entry inherits the semantic
    source task. Pairings listed in ``forbidden_pairs`` (``(semantic id,
    acoustic id)``) are never produced.
    """
    if not semantic_pool or not acoustic_pool:
        raise MemoryConstructionError("both pools must be non-empty")
    compose = COMPOSERS[mode]
    forbidden = set(forbidden_pairs)
    allowed = [
        (i, j)
        for i, s in enumerate(semantic_pool)
        for j, a in enumerate(acoustic_pool)
        if (s.clip.semantic.class_id, a.clip.acoustic.class_id) not in forbidden
    ]
    if not allowed:
        raise MemoryConstructionError("every available pairing is reserved for testing")
    rng = np.random.default_rng(seed)
    out = []
    for k in rng.integers(0, len(allowed), size=count):
        i, j = allowed[k]
        s, a = semantic_pool[i], acoustic_pool[j]
        clip = compose(s.clip, a.clip)
        clip.uid = f"mix-{s.clip.uid}+{a.clip.uid}-{mode}"
        out.append(MemoryEntry(clip, s.source_task, mixed=True))
    return out


def sample_batch(memory: ReplayMemory, batch_size: int, seed) -> list[MemoryEntry]:
    """Uniform draw with replacement. ``seed`` may be an int or a Generator."""
    if not memory.entries:
        raise ValueError("memory is empty")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return [memory.entries[i] for i in rng.integers(0, len(memory.entries), size=batch_size)]

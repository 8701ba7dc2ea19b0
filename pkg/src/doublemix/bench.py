"""Continual task streams over the synthetic corpus.

Training label sets are disjoint across tasks; the evaluator consumes test
splits cumulatively. Optional combined-event tasks are test-only and use
(semantic, acoustic) pairings that never occur in any train split.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audio import (ACOUSTIC, COMPOSERS, SEMANTIC, AudioClip, EventLabel, class_name,
                    synth_clip, wav_write)


class SpecError(ValueError):
    pass


def default_grouping(num_semantic: int, num_acoustic: int, num_tasks: int) -> list[list[str]]:
    """Split each kind's class ids into ``num_tasks`` contiguous runs, one run per task."""
    groups = [[] for _ in range(num_tasks)]
    for prefix, n in (("s", num_semantic), ("a", num_acoustic)):
        for t, ids in enumerate(np.array_split(np.arange(n), num_tasks)):
            groups[t] += [f"{prefix}{k}" for k in ids]
    return groups


@dataclass
class CorpusSpec:
    num_semantic_classes: int = 6
    num_acoustic_classes: int = 3
    clips_per_class: int = 66
    tasks: list = field(default_factory=list)
    seed: int = 0
    combined_mode: str = "none"
    num_combined_tasks: int = 4
    combined_clips_per_task: int = 30
    min_duration_s: float = 1.0
    max_duration_s: float = 2.0
    name: str = "synthetic"

    def __post_init__(self):
        if not self.tasks:
            self.tasks = default_grouping(self.num_semantic_classes, self.num_acoustic_classes, 3)
        self.tasks = [list(group) for group in self.tasks]

    def validate(self) -> None:
        if self.combined_mode not in ("none", "splice", "overlay"):
            raise SpecError(f"unknown combined_mode {self.combined_mode!r}")
        if self.clips_per_class < 3:
            raise SpecError("need at least 3 clips per class for train/val/test")
        universe = {f"s{k}" for k in range(self.num_semantic_classes)}
        universe |= {f"a{m}" for m in range(self.num_acoustic_classes)}
        seen: dict[str, int] = {}
        for t, group in enumerate(self.tasks):
            if not group:
                raise SpecError(f"task {t} has no classes")
            for key in group:
                if key not in universe:
                    raise SpecError(f"task {t} names unknown class {key!r}")
                if key in seen:
                    raise SpecError(f"class {key} assigned to tasks {seen[key]} and {t}")
                seen[key] = t
        missing = universe - set(seen)
        if missing:
            raise SpecError(f"classes without a task: {sorted(missing)}")

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusSpec":
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "CorpusSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class Task:
    task_id: int
    labels: frozenset
    train: list = field(default_factory=list)
    val: list = field(default_factory=list)
    test: list = field(default_factory=list)
    combined: bool = False


@dataclass
class TaskStream:
    tasks: list
    combined_tasks: list = field(default_factory=list)
    combined_mode: str = "none"
    name: str = "synthetic"

    @property
    def label_universe(self) -> dict:
        return {task.task_id: task.labels for task in self.tasks}

    @property
    def task_ids(self) -> list:
        return [task.task_id for task in self.tasks]

    def forbidden_pairs(self) -> set:
        """(semantic id, acoustic id) pairings reserved for combined test tasks."""
        pairs = set()
        for task in self.combined_tasks:
            for clip in task.test:
                pairs.add((clip.semantic.class_id, clip.acoustic.class_id))
        return pairs

    def cumulative_test(self, t: int) -> list:
        return [clip for task in self.tasks[: t + 1] for clip in task.test]

    def manifest(self) -> list[dict]:
        rows = []
        for task in self.tasks + self.combined_tasks:
            for split in ("train", "val", "test"):
                for clip in getattr(task, split):
                    rows.append(manifest_record(clip, task.task_id, split))
        return rows


def manifest_record(clip: AudioClip, task_id: int, split: str, path: str | None = None,
                    **extra) -> dict:
    labels = sorted(clip.labels, key=lambda lab: (lab.kind, lab.class_id))
    rec = {
        "path": path if path is not None else clip.uid,
        "kinds": [lab.kind for lab in labels],
        "class_ids": [lab.class_id for lab in labels],
        "task_id": task_id,
        "split": split,
    }
    rec.update(extra)
    return rec


def _clip_seed(seed: int, *parts: int) -> int:
    return int(np.random.SeedSequence([seed, *parts]).generate_state(1)[0])


def _make_label(key: str, task_id: int) -> EventLabel:
    kind = SEMANTIC if key[0] == "s" else ACOUSTIC
    return EventLabel(kind, int(key[1:]), class_name(kind, int(key[1:])), task_id)


def _synth_single(spec: CorpusSpec, label: EventLabel, idx: int, salt: int = 0) -> AudioClip:
    kind_code = 0 if label.kind == SEMANTIC else 1
    s = _clip_seed(spec.seed, salt, kind_code, label.class_id, idx)
    dur = np.random.default_rng(s).uniform(spec.min_duration_s, spec.max_duration_s)
    kw = {"semantic": label.class_id} if label.kind == SEMANTIC else {"acoustic": label.class_id}
    clip = synth_clip(duration_s=round(float(dur), 3), seed=s, task_id=label.task_id, **kw)
    clip.labels = frozenset({label})
    clip.uid = f"{spec.name}-{label.key}-{salt}-{idx:04d}"
    return clip


def _split_counts(n: int) -> tuple[int, int, int]:
    n_val = max(1, int(round(0.1 * n)))
    n_test = max(1, int(round(0.1 * n)))
    return n - n_val - n_test, n_val, n_test


def build_task_stream(spec: CorpusSpec) -> TaskStream:
    spec.validate()
    rng = np.random.default_rng(_clip_seed(spec.seed, 7))
    tasks = []
    for t, group in enumerate(spec.tasks):
        labels = [_make_label(key, t) for key in group]
        train, val, test = [], [], []
        # stratified 80/10/10 so every class reaches every split
        for label in labels:
            clips = [_synth_single(spec, label, i) for i in range(spec.clips_per_class)]
            order = rng.permutation(len(clips))
            n_tr, n_va, _ = _split_counts(len(clips))
            train += [clips[i] for i in order[:n_tr]]
            val += [clips[i] for i in order[n_tr:n_tr + n_va]]
            test += [clips[i] for i in order[n_tr + n_va:]]
        for split in (train, val, test):
            perm = rng.permutation(len(split))
            split[:] = [split[i] for i in perm]
        tasks.append(Task(t, frozenset(labels), train, val, test))

    combined = []
    if spec.combined_mode != "none":
        combined = _combined_tasks(spec, tasks, rng)
    return TaskStream(tasks, combined, spec.combined_mode, spec.name)


def _combined_tasks(spec: CorpusSpec, tasks: list, rng: np.random.Generator) -> list:
    owner = {lab.key: lab for task in tasks for lab in task.labels}
    sems = sorted(k for k in owner if k[0] == "s")
    acs = sorted(k for k in owner if k[0] == "a")
    pairs = [(s, a) for s in sems for a in acs]
    if not pairs:
        raise SpecError("combined tasks need both semantic and acoustic classes")
    n = min(spec.num_combined_tasks, len(pairs))
    chosen = [pairs[i] for i in sorted(rng.choice(len(pairs), size=n, replace=False))]
    compose = COMPOSERS[spec.combined_mode]
    out = []
    base_id = len(tasks)
    for j, (s, a) in enumerate(chosen):
        clips = []
        for i in range(spec.combined_clips_per_task):
            sem = _synth_single(spec, owner[s], i, salt=1000 + j)
            ac = _synth_single(spec, owner[a], i, salt=2000 + j)
            clip = compose(sem, ac)
            clip.labels = frozenset({owner[s], owner[a]})
            clip.uid = f"{spec.name}-mix{j}-{s}{a}-{i:04d}"
            clips.append(clip)
        out.append(Task(base_id + j, frozenset({owner[s], owner[a]}), test=clips, combined=True))
    return out


def check_stream(stream: TaskStream) -> None:
    """Raise if train labels overlap across tasks or a test split misses a label."""
    seen = set()
    for task in stream.tasks:
        train_labels = {lab for clip in task.train for lab in clip.labels}
        if train_labels & seen:
            raise SpecError(f"task {task.task_id} reuses training labels {train_labels & seen}")
        seen |= train_labels
        test_labels = {lab for clip in task.test for lab in clip.labels}
        if not set(task.labels) <= test_labels:
            raise SpecError(f"task {task.task_id} test split misses {set(task.labels) - test_labels}")
    train_pairs = {
        (clip.semantic.class_id, clip.acoustic.class_id)
        for task in stream.tasks for clip in task.train
        if clip.semantic is not None and clip.acoustic is not None
    }
    if train_pairs & stream.forbidden_pairs():
        raise SpecError("combined test pairings leak into training")


def permute_order(stream: TaskStream, permutation) -> TaskStream:
    """Reorder tasks; ``permutation[j]`` is the position of the task run j-th."""
    permutation = list(permutation)
    if sorted(permutation) != list(range(len(stream.tasks))):
        raise SpecError(f"{permutation} is not a permutation of {len(stream.tasks)} tasks")
    return TaskStream([stream.tasks[i] for i in permutation], stream.combined_tasks,
                      stream.combined_mode, stream.name)


def write_corpus(stream: TaskStream, out_dir) -> Path:
    """Write every clip as WAV plus a line-delimited JSON manifest."""
    out = Path(out_dir)
    (out / "wav").mkdir(parents=True, exist_ok=True)
    manifest = out / "manifest.jsonl"
    with manifest.open("w") as fh:
        for task in stream.tasks + stream.combined_tasks:
            for split in ("train", "val", "test"):
                for clip in getattr(task, split):
                    rel = f"wav/{clip.uid}.wav"
                    wav_write(clip, out / rel)
                    fh.write(json.dumps(manifest_record(clip, task.task_id, split, rel)) + "\n")
    return manifest

"""Experiment harness: run a method over a curriculum, write per-seed results, summarise."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .audio import synth_clip
from .bench import CorpusSpec, build_task_stream, check_stream, permute_order
from .estimators import METHODS, DoubleMixture, MultiTask, make_learner
from .losses import ConfigError
from .memory import MemoryEntry
from .metrics import ResultMatrix, as_percent, avg_accuracy, avg_forgetting
from .model import MoeDecoderModel, _uniform
from .numerics import grad_check_vmap
from .trainer import TrainConfig, make_batch, mixture_objective

log = logging.getLogger(__name__)

RUN_FILES = ("config.json", "R.csv", "metrics.json", "train_log.jsonl", "plot.csv")
OPTIONAL_FILES = ("checkpoint.npz", "memory.jsonl")
REPORT_COLUMNS = ["method", "dataset", "avg_acc_mean", "avg_acc_std", "forgetting_mean",
                  "forgetting_std", "seeds"]


@dataclass
class ExperimentConfig:
    corpus: CorpusSpec = field(default_factory=CorpusSpec)
    method: str = "double_mixture"
    train: TrainConfig = field(default_factory=TrainConfig)
    task_order: object = "default"
    output_dir: str = "runs"
    seeds: list = field(default_factory=lambda: [1, 2, 3])
    method_params: dict = field(default_factory=dict)
    save_checkpoint: bool = False

    def __post_init__(self):
        if isinstance(self.corpus, dict):
            self.corpus = CorpusSpec.from_dict(self.corpus)
        if isinstance(self.train, dict):
            self.train = TrainConfig(**self.train)
        self.validate()

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {sorted(METHODS)}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        self.corpus.validate()
        if self.task_order != "default":
            order = list(self.task_order)
            if sorted(order) != list(range(len(self.corpus.tasks))):
                raise ConfigError(f"task_order {order} is not a permutation of "
                                  f"{len(self.corpus.tasks)} tasks")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["corpus"] = self.corpus.to_dict()
        if d["task_order"] != "default":
            d["task_order"] = list(d["task_order"])
        return d


@dataclass
class RunResult:
    method: str
    dataset: str
    seed: int
    R: ResultMatrix
    task_order: list
    combined: dict
    log: list
    run_dir: Path | None = None

    @property
    def avg_acc(self) -> float:
        return avg_accuracy(self.R)

    @property
    def avg_forgetting(self) -> float | None:
        # a jointly trained model has no intermediate checkpoints to forget from
        return None if self.method == "mtl" else avg_forgetting(self.R)

    @property
    def combined_acc(self) -> float | None:
        return float(np.mean(list(self.combined.values()))) if self.combined else None

    def metrics(self) -> dict:
        final = self.R.values[-1]
        out = {
            "method": self.method,
            "dataset": self.dataset,
            "seed": self.seed,
            "task_order": self.task_order,
            "avg_acc": as_percent(self.avg_acc),
            "avg_forgetting": None if self.avg_forgetting is None else as_percent(self.avg_forgetting),
            "per_task": {str(t): as_percent(a) for t, a in zip(self.task_order, final)},
            "combined": {str(t): as_percent(a) for t, a in self.combined.items()},
        }
        if self.combined:
            out["combined_avg_acc"] = as_percent(self.combined_acc)
        return out


def learner_params(config: ExperimentConfig, seed: int, stream) -> dict:
    tc = config.train
    params = dict(lr=tc.initial_lr, epochs=tc.epochs_per_task, batch_size=tc.batch_size,
                  lr_decay=tc.lr_decay_factor, clip_norm=tc.clip_norm,
                  weight_decay=tc.weight_decay, random_state=seed)
    if config.method.startswith("double_mixture"):
        params.update(lam=tc.lam, eta=tc.eta, forbidden_pairs=stream.forbidden_pairs())
        if stream.combined_mode != "none":
            params["mix_mode"] = stream.combined_mode
        else:
            # mixed samples only pay off on curricula that teach combined events
            params["mixed_ratio"] = 0.0
    params.update(config.method_params)
    return params


def run_seed(config: ExperimentConfig, seed: int, out_dir=None) -> RunResult:
    """Train ``config.method`` over one seed's stream and fill the result matrix."""
    corpus = CorpusSpec.from_dict({**config.corpus.to_dict(), "seed": seed})
    stream = build_task_stream(corpus)
    if config.task_order != "default":
        stream = permute_order(stream, config.task_order)
    check_stream(stream)
    learner = make_learner(config.method, **learner_params(config, seed, stream))
    T = len(stream.tasks)
    R = ResultMatrix(T)
    if isinstance(learner, MultiTask):
        learner.fit(stream)
        for t in range(T):
            for i in range(t + 1):
                R.record(t, i, learner.score(stream.tasks[i].test))
    else:
        for t, task in enumerate(stream.tasks):
            learner.partial_fit(task.train, task.task_id, val=task.val)
            for i in range(t + 1):
                R.record(t, i, learner.score(stream.tasks[i].test))
            log.info("%s seed %d: trained task %d, row %s", config.method, seed, task.task_id,
                     np.round(R.values[t, : t + 1], 3).tolist())
    combined = {task.task_id: learner.score(task.test) for task in stream.combined_tasks}
    rows = [dict(row, method=config.method, seed=seed)
            for record in learner.history_ for row in record.log]
    for event in getattr(learner, "mix_log_", []):
        rows.append(dict(event, method=config.method, seed=seed, event="mixed_memory"))
    result = RunResult(config.method, corpus.name, seed, R, stream.task_ids, combined, rows)
    if out_dir is not None:
        result.run_dir = write_run(result, config, corpus, out_dir, learner)
    return result


def write_run(result: RunResult, config: ExperimentConfig, corpus: CorpusSpec, out_dir,
              learner=None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    snapshot = config.to_dict()
    snapshot["corpus"] = corpus.to_dict()
    snapshot["seeds"] = [result.seed]
    (out / "config.json").write_text(json.dumps(snapshot, indent=2, sort_keys=True) + "\n")
    result.R.to_csv(out / "R.csv")
    (out / "metrics.json").write_text(json.dumps(result.metrics(), indent=2, sort_keys=True) + "\n")
    with (out / "train_log.jsonl").open("w") as fh:
        for row in result.log:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    with (out / "plot.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["checkpoint", "trained_task", "mean_seen_acc"]
                   + [f"task{t}" for t in result.task_order])
        vals = result.R.values
        for t, task_id in enumerate(result.task_order):
            row = vals[t, : t + 1]
            w.writerow([t, task_id, f"{as_percent(float(row.mean())):.2f}"]
                       + [f"{as_percent(float(v)):.2f}" for v in row]
                       + [""] * (len(result.task_order) - t - 1))
    if config.save_checkpoint and learner is not None:
        learner.model_.save(out / "checkpoint.npz")
        if isinstance(learner, DoubleMixture) and hasattr(learner, "memory_"):
            learner.memory_.write_manifest(out / "memory.jsonl")
    return out


def check_run_dir(path) -> list[str]:
    """Problems with a run directory's file set; an empty list means it is complete."""
    path = Path(path)
    present = {p.name for p in path.iterdir()} if path.is_dir() else set()
    problems = [f"missing {name}" for name in RUN_FILES if name not in present]
    problems += [f"unexpected {name}" for name in sorted(present)
                 if name not in RUN_FILES and name not in OPTIONAL_FILES]
    return problems


def run(config: ExperimentConfig) -> list[RunResult]:
    """Run every seed of ``config`` into ``output_dir/<method>/seed_<s>``."""
    results = []
    for seed in config.seeds:
        out = Path(config.output_dir) / config.method / f"seed_{seed}"
        results.append(run_seed(config, seed, out))
        problems = check_run_dir(out)
        if problems:
            raise RuntimeError(f"{out}: {', '.join(problems)}")
    return results


def collect_metrics(root) -> list[dict]:
    return [json.loads(p.read_text()) for p in sorted(Path(root).rglob("metrics.json"))]


def _mean_std(values):
    values = [v for v in values if v is not None]
    if not values:
        return "", ""
    arr = np.asarray(values, dtype=float)
    return f"{arr.mean():.2f}", f"{arr.std():.2f}"


def emit_report(metrics, path) -> list[dict]:
    """Summary CSV with one row per (method, dataset); std is the population std."""
    groups: dict = {}
    for m in metrics:
        groups.setdefault((m["method"], m["dataset"]), []).append(m)
    rows = []
    for (method, dataset), ms in sorted(groups.items()):
        acc_mean, acc_std = _mean_std([m["avg_acc"] for m in ms])
        fgt_mean, fgt_std = _mean_std([m["avg_forgetting"] for m in ms])
        rows.append({"method": method, "dataset": dataset, "avg_acc_mean": acc_mean,
                     "avg_acc_std": acc_std, "forgetting_mean": fgt_mean,
                     "forgetting_std": fgt_std,
                     "seeds": ";".join(str(m["seed"]) for m in sorted(ms, key=lambda m: m["seed"]))})
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
        w.writeheader()
        w.writerows(rows)
    return rows


def objective_gradient_check(seed: int, d: int = 16, bottleneck: int = 4, heads: int = 2,
                             epsilon: float = 1e-4) -> float:
    """Finite-difference check of the full objective on a two-expert, two-block model.

    Up-projections and router columns are drawn like any other weight so that
    every trainable group carries a non-trivial gradient.
    """
    model = MoeDecoderModel(d=d, heads=heads, bottleneck=bottleneck, decoder_layers=2, seed=seed)
    task = [synth_clip(semantic=1, duration_s=0.5, seed=seed, task_id=1),
            synth_clip(acoustic=2, duration_s=0.5, seed=seed + 1, task_id=1)]
    replay = [MemoryEntry(synth_clip(semantic=0, acoustic=0, duration_s=0.5, seed=seed + 2,
                                     task_id=0), source_task=0)]
    clips = task + [e.clip for e in replay]
    model.add_labels({lab for clip in clips for lab in clip.labels})
    model.add_expert(0, freeze_previous=False)
    model.add_expert(1, freeze_previous=False)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for block in model.blocks:
            for expert in block.moe.experts:
                expert.w_up.copy_(_uniform(gen, bottleneck, d, fan_in=bottleneck))
            for col in block.moe.router.columns:
                col.copy_(_uniform(gen, *col.shape, fan_in=d))
    config = TrainConfig()
    batch = make_batch(model, clips)
    gold = [model.expert_index(1)] * len(task) + [model.expert_index(0)]
    return grad_check_vmap(lambda: mixture_objective(model, batch, len(task), gold, config)[0],
                           model, model.trainable_parameters(), epsilon)


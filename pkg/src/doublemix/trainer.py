"""Batching, evaluation and the per-task training loop."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .audio import featurize
from .losses import ConfigError, data_loss, gate_loss, total_loss
from .memory import ReplayMemory, sample_batch
from .model import BOS, EOS, MoeDecoderModel
from .numerics import OptimizerState, adamw_step, cross_entropy

IGNORE = -100


class StateError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lam: float = 0.5
    eta: float = 0.1
    epochs_per_task: int = 10
    batch_size: int = 16
    initial_lr: float = 1e-4
    lr_decay_factor: float = 0.8
    clip_norm: float = 5.0
    weight_decay: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError("lam must lie in [0, 1]")
        if self.eta < 0:
            raise ConfigError("eta must be non-negative")
        if self.initial_lr <= 0 or self.clip_norm <= 0 or self.batch_size < 1:
            raise ConfigError("initial_lr, clip_norm and batch_size must be positive")
        if not 0 < self.lr_decay_factor <= 1:
            raise ConfigError("lr_decay_factor must lie in (0, 1]")


@dataclass
class TaskRecord:
    task_id: int
    val_curve: list = field(default_factory=list)
    lr_curve: list = field(default_factory=list)
    final_lr: float = 0.0
    wall_time_s: float = 0.0
    log: list = field(default_factory=list)


_FEATURE_CACHE: dict = {}


def clip_features(clip) -> np.ndarray:
    key = (clip.uid, len(clip.samples))
    hit = _FEATURE_CACHE.get(key)
    if hit is None:
        hit = _FEATURE_CACHE[key] = featurize(clip).frames
    return hit


@dataclass
class Batch:
    mem: torch.Tensor
    mem_mask: torch.Tensor
    inputs: torch.Tensor
    targets: torch.Tensor

    @property
    def pos_mask(self) -> torch.Tensor:
        return self.targets != IGNORE

    def __len__(self):
        return self.inputs.shape[0]


def make_batch(model: MoeDecoderModel, clips) -> Batch:
    """Teacher-forcing batch: inputs ``<bos> labels``, targets ``labels <eos>``."""
    mem, mask = model.encode([clip_features(c) for c in clips])
    bos, eos = model.token_index[BOS], model.token_index[EOS]
    seqs = [[bos] + model.encode_labels(c.labels) + [eos] for c in clips]
    P = max(len(s) for s in seqs) - 1
    inputs = torch.full((len(seqs), P), eos, dtype=torch.long)
    targets = torch.full((len(seqs), P), IGNORE, dtype=torch.long)
    for i, s in enumerate(seqs):
        inputs[i, : len(s) - 1] = torch.tensor(s[:-1])
        targets[i, : len(s) - 1] = torch.tensor(s[1:])
    return Batch(mem, mask, inputs, targets)


def predict_labels(model: MoeDecoderModel, clips, batch_size: int = 64, max_len: int = 4):
    out = []
    for start in range(0, len(clips), batch_size):
        chunk = clips[start:start + batch_size]
        mem, mask = model.encode([clip_features(c) for c in chunk])
        out += [model.tokens_to_labels(ids) for ids in model.decode_batch(mem, mask, max_len)]
    return out


def evaluate(model: MoeDecoderModel, clips) -> float:
    """Exact-match accuracy of greedy-decoded label sets."""
    clips = list(clips)
    if not clips:
        raise ValueError("cannot evaluate on an empty clip list")
    preds = predict_labels(model, clips)
    return sum(p == frozenset(c.labels) for p, c in zip(preds, clips)) / len(clips)


def fit_epochs(model: MoeDecoderModel, train, val, config: TrainConfig, step_fn, task_id: int,
               rng: np.random.Generator, params=None) -> TaskRecord:
    """Run ``epochs_per_task`` epochs of minibatch AdamW.

    ``step_fn(clips)`` must populate ``.grad`` on the trainable parameters and
    return a dict of scalar stats. After each epoch the learning rate is
    multiplied by ``lr_decay_factor`` unless validation accuracy improved.
    """
    start = time.perf_counter()
    params = model.trainable_parameters() if params is None else params
    state = OptimizerState(config.initial_lr, config.weight_decay, config.clip_norm)
    record = TaskRecord(task_id)
    best = -1.0
    for epoch in range(config.epochs_per_task):
        order = rng.permutation(len(train))
        sums: dict = {}
        n_batches = 0
        for s in range(0, len(train), config.batch_size):
            clips = [train[i] for i in order[s:s + config.batch_size]]
            for p in params:
                p.grad = None
            stats = step_fn(clips)
            adamw_step(state, params)
            for k, v in stats.items():
                sums[k] = sums.get(k, 0.0) + v
            n_batches += 1
        val_acc = evaluate(model, val) if val else float("nan")
        row = {"task_id": task_id, "epoch": epoch,
               "train_loss": sums.get("train_loss", 0.0) / n_batches,
               "gate_loss": sums.get("gate_loss", 0.0) / n_batches,
               "val_acc": val_acc, "lr": state.learning_rate}
        record.log.append(row)
        record.val_curve.append(val_acc)
        record.lr_curve.append(state.learning_rate)
        if val:
            if val_acc > best:
                best = val_acc
            else:
                state.learning_rate *= config.lr_decay_factor
    record.final_lr = state.learning_rate
    record.wall_time_s = time.perf_counter() - start
    return record


def mixture_objective(model: MoeDecoderModel, batch: Batch, n_task: int, gold_experts,
                      config: TrainConfig, use_gate: bool = True):
    """``L_data + eta * L_gate`` on a batch whose first ``n_task`` rows are task clips
    and whose remaining rows are replay. Returns ``(total, gate)``."""
    logits, trace = model.decode_logits(batch.mem, batch.mem_mask, batch.inputs)
    l_task = cross_entropy(logits[:n_task], batch.targets[:n_task])
    if len(batch) > n_task:
        l_mem = cross_entropy(logits[n_task:], batch.targets[n_task:])
        l_data = data_loss(l_task, l_mem, config.lam)
    else:
        l_data = l_task
    l_gate = torch.zeros(())
    if use_gate and config.eta > 0:
        l_gate = gate_loss(trace.instance_logits(batch.pos_mask), gold_experts)
    return total_loss(l_data, l_gate, config.eta if use_gate else 0.0), l_gate


def double_mixture_loss(model: MoeDecoderModel, clips, task_id: int, replay, config: TrainConfig,
                        use_gate: bool = True):
    """Objective on task clips plus replay entries; replay instances are gated
    towards the expert of their source task."""
    replay = list(replay)
    batch = make_batch(model, list(clips) + [e.clip for e in replay])
    gold = None
    if use_gate and config.eta > 0:
        gold = [model.expert_index(task_id)] * len(clips)
        gold += [model.expert_index(e.source_task) for e in replay]
    return mixture_objective(model, batch, len(clips), gold, config, use_gate)


def double_mixture_step(model: MoeDecoderModel, clips, task_id: int, memory: ReplayMemory | None,
                        config: TrainConfig, rng: np.random.Generator, use_gate: bool = True):
    """One loss evaluation + backward. The replay batch has the task batch's size."""
    replay = []
    if memory is not None and len(memory) and config.lam < 1.0:
        replay = sample_batch(memory, len(clips), rng)
    loss, l_gate = double_mixture_loss(model, clips, task_id, replay, config, use_gate)
    loss.backward()
    return {"train_loss": loss.item(), "gate_loss": l_gate.item()}


def train_task(model: MoeDecoderModel, task, memory: ReplayMemory | None, config: TrainConfig,
               rng: np.random.Generator | None = None, use_gate: bool = True) -> TaskRecord:
    """Train the expert owned by ``task.task_id`` (plus routers and head)."""
    if task.task_id not in model.expert_owners:
        raise StateError(f"no expert for task {task.task_id}; call add_expert first")
    rng = np.random.default_rng(config.seed) if rng is None else rng
    model.add_labels({lab for clip in task.train for lab in clip.labels})
    return fit_epochs(
        model, task.train, task.val, config,
        lambda clips: double_mixture_step(model, clips, task.task_id, memory, config, rng, use_gate),
        task.task_id, rng)

"""Continual learners with a scikit-learn estimator surface.

Every learner is trained task by task with ``partial_fit(train_clips,
task_id, val=...)`` and scored with ``predict`` / ``score``. All of them share
the same frozen-encoder decoder; they differ in how the adapter layer grows
and in what the loss sees.
"""
from __future__ import annotations

import copy

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .backbone import pretrain_backbone
from .losses import agem_project, ewc_penalty, lwf_loss
from .memory import (CapacityPolicy, MemoryConstructionError, ReplayMemory, make_mixed_samples,
                     sample_batch, select_exemplars)
from .model import MoeDecoderModel
from .numerics import cross_entropy
from .trainer import (TrainConfig, double_mixture_step, evaluate, fit_epochs, make_batch,
                      predict_labels)
from .validation import check_clips, check_task_id


class ContinualLearner(BaseEstimator):
    """Sequential fine-tuning of one shared adapter per decoder block (FT)."""

    def __init__(self, *, lr=1e-4, epochs=10, batch_size=16, lr_decay=0.8, clip_norm=5.0,
                 weight_decay=0.01, d_model=64, n_heads=4, bottleneck=16, decoder_layers=2,
                 random_state=0, backbone="pretext"):
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr_decay = lr_decay
        self.clip_norm = clip_norm
        self.weight_decay = weight_decay
        self.d_model = d_model
        self.n_heads = n_heads
        self.bottleneck = bottleneck
        self.decoder_layers = decoder_layers
        self.random_state = random_state
        self.backbone = backbone

    # -- hooks ------------------------------------------------------------
    def _train_config(self) -> TrainConfig:
        return TrainConfig(lam=1.0, eta=0.0, epochs_per_task=self.epochs,
                           batch_size=self.batch_size, initial_lr=self.lr,
                           lr_decay_factor=self.lr_decay, clip_norm=self.clip_norm,
                           weight_decay=self.weight_decay, seed=self.random_state)

    def _begin_task(self, task_id, train):
        if self.model_.num_experts == 0:
            self.model_.add_expert(task_id)

    def _step(self, clips, task_id):
        batch = make_batch(self.model_, clips)
        logits, _ = self.model_.decode_logits(batch.mem, batch.mem_mask, batch.inputs)
        loss = cross_entropy(logits, batch.targets)
        loss.backward()
        return {"train_loss": loss.item()}

    def _end_task(self, task_id, train):
        pass

    # -- estimator API ----------------------------------------------------
    def _init_model(self):
        self.model_ = MoeDecoderModel(d=self.d_model, heads=self.n_heads,
                                      bottleneck=self.bottleneck,
                                      decoder_layers=self.decoder_layers, seed=self.random_state)
        if self.backbone == "pretext":
            self.model_.load_backbone(pretrain_backbone(
                d=self.d_model, heads=self.n_heads, bottleneck=self.bottleneck,
                decoder_layers=self.decoder_layers))
        elif self.backbone is not None:
            raise ValueError(f"backbone must be 'pretext' or None, got {self.backbone!r}")
        self.config_ = self._train_config()
        self.tasks_seen_ = []
        self.history_ = []

    def _task_rng(self, task_id) -> np.random.Generator:
        return np.random.default_rng([self.random_state, len(self.tasks_seen_), task_id])

    def partial_fit(self, X, task_id, val=None):
        """Train on one task's clips; ``task_id`` must be new."""
        X = check_clips(X)
        val = check_clips(val, allow_empty=True) if val is not None else []
        if not hasattr(self, "model_"):
            self._init_model()
        check_task_id(task_id, self.tasks_seen_)
        self.rng_ = self._task_rng(task_id)
        self.model_.add_labels({lab for clip in X for lab in clip.labels})
        self._begin_task(task_id, X)
        record = fit_epochs(self.model_, X, val, self.config_,
                            lambda clips: self._step(clips, task_id), task_id, self.rng_)
        self._end_task(task_id, X)
        self.tasks_seen_.append(task_id)
        self.history_.append(record)
        return self

    def fit(self, X, y=None):
        """Train over every task of a :class:`~doublemix.bench.TaskStream` in order."""
        for key in [k for k in vars(self) if k.endswith("_") and not k.startswith("_")]:
            delattr(self, key)
        for task in X.tasks:
            self.partial_fit(task.train, task.task_id, val=task.val)
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        return predict_labels(self.model_, check_clips(X))

    def score(self, X, y=None):
        check_is_fitted(self, "model_")
        return evaluate(self.model_, check_clips(X))


class FineTune(ContinualLearner):
    pass


class MultiTask(ContinualLearner):
    """Joint training on the union of all tasks (upper bound)."""

    def fit(self, X, y=None):
        tasks = X.tasks if hasattr(X, "tasks") else list(X)
        self._init_model()
        train = [c for task in tasks for c in task.train]
        val = [c for task in tasks for c in task.val]
        self.partial_fit(train, 0, val=val)
        self.tasks_seen_ = [task.task_id for task in tasks]
        return self


class _MemoryMixin:
    def _init_memory(self):
        self.memory_ = ReplayMemory(policy=CapacityPolicy(
            self.memory_fraction, self.memory_min, self.memory_max))

    def _store_exemplars(self, task_id, train):
        seed = [self.random_state, 97, len(self.tasks_seen_)]
        entries = select_exemplars(train, task_id, np.random.default_rng(seed).integers(2**32),
                                   self.memory_.policy)
        self.memory_.add(entries)
        return entries


class ExperienceReplay(_MemoryMixin, ContinualLearner):
    """Replays retained exemplars; loss is the mean of task and replay cross-entropy."""

    def __init__(self, *, memory_fraction=0.1, memory_min=20, memory_max=100, lr=1e-4, epochs=10,
                 batch_size=16, lr_decay=0.8, clip_norm=5.0, weight_decay=0.01, d_model=64,
                 n_heads=4, bottleneck=16, decoder_layers=2, random_state=0, backbone="pretext"):
        super().__init__(lr=lr, epochs=epochs, batch_size=batch_size, lr_decay=lr_decay,
                         clip_norm=clip_norm, weight_decay=weight_decay, d_model=d_model,
                         n_heads=n_heads, bottleneck=bottleneck, decoder_layers=decoder_layers,
                         random_state=random_state, backbone=backbone)
        self.memory_fraction = memory_fraction
        self.memory_min = memory_min
        self.memory_max = memory_max

    def _init_model(self):
        super()._init_model()
        self._init_memory()

    def _step(self, clips, task_id):
        loss = er_step(self.model_, clips, self._replay(len(clips)))
        loss.backward()
        return {"train_loss": loss.item()}

    def _replay(self, n):
        if not len(self.memory_):
            return []
        return [e.clip for e in sample_batch(self.memory_, n, self.rng_)]

    def _end_task(self, task_id, train):
        self._store_exemplars(task_id, train)


def er_step(model, task_clips, replay_clips):
    """Mean of task and replay cross-entropies; pure task loss without replay."""
    batch = make_batch(model, list(task_clips) + list(replay_clips))
    logits, _ = model.decode_logits(batch.mem, batch.mem_mask, batch.inputs)
    n = len(task_clips)
    loss = cross_entropy(logits[:n], batch.targets[:n])
    if replay_clips:
        loss = 0.5 * (loss + cross_entropy(logits[n:], batch.targets[n:]))
    return loss


class AGEM(ExperienceReplay):
    """Projects the task gradient whenever it conflicts with the replay gradient."""

    def _step(self, clips, task_id):
        params = self.model_.trainable_parameters()
        batch = make_batch(self.model_, clips)
        logits, _ = self.model_.decode_logits(batch.mem, batch.mem_mask, batch.inputs)
        loss = cross_entropy(logits, batch.targets)
        replay = self._replay(len(clips))
        if not replay:
            loss.backward()
            return {"train_loss": loss.item()}
        g = _flat_grad(loss, params)
        rb = make_batch(self.model_, replay)
        r_logits, _ = self.model_.decode_logits(rb.mem, rb.mem_mask, rb.inputs)
        g_ref = _flat_grad(cross_entropy(r_logits, rb.targets), params)
        _assign_flat_grad(agem_project(g, g_ref), params)
        return {"train_loss": loss.item()}


def _flat_grad(loss, params) -> torch.Tensor:
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    return torch.cat([(torch.zeros_like(p) if g is None else g).reshape(-1)
                      for p, g in zip(params, grads)])


def _assign_flat_grad(flat, params) -> None:
    offset = 0
    for p in params:
        n = p.numel()
        p.grad = flat[offset:offset + n].view_as(p).clone()
        offset += n


class EWC(ContinualLearner):
    """Diagonal empirical-Fisher quadratic penalty anchored at each task boundary."""

    def __init__(self, *, ewc_strength=100.0, lr=1e-4, epochs=10, batch_size=16, lr_decay=0.8,
                 clip_norm=5.0, weight_decay=0.01, d_model=64, n_heads=4, bottleneck=16,
                 decoder_layers=2, random_state=0, backbone="pretext"):
        super().__init__(lr=lr, epochs=epochs, batch_size=batch_size, lr_decay=lr_decay,
                         clip_norm=clip_norm, weight_decay=weight_decay, d_model=d_model,
                         n_heads=n_heads, bottleneck=bottleneck, decoder_layers=decoder_layers,
                         random_state=random_state, backbone=backbone)
        self.ewc_strength = ewc_strength

    def _init_model(self):
        super()._init_model()
        self.fisher_ = {}
        self.anchors_ = {}

    def _named_trainable(self):
        return [(n, p) for n, p in self.model_.named_parameters() if p.requires_grad]

    def _step(self, clips, task_id):
        batch = make_batch(self.model_, clips)
        logits, _ = self.model_.decode_logits(batch.mem, batch.mem_mask, batch.inputs)
        loss = cross_entropy(logits, batch.targets)
        if self.fisher_:
            named = [(n, p) for n, p in self._named_trainable() if n in self.fisher_]
            loss = loss + ewc_penalty([p for _, p in named], [self.fisher_[n] for n, _ in named],
                                      [self.anchors_[n] for n, _ in named], self.ewc_strength)
        loss.backward()
        return {"train_loss": loss.item()}

    def _end_task(self, task_id, train):
        named = self._named_trainable()
        params = [p for _, p in named]
        fisher = [torch.zeros_like(p) for p in params]
        for clip in train:
            batch = make_batch(self.model_, [clip])
            logits, _ = self.model_.decode_logits(batch.mem, batch.mem_mask, batch.inputs)
            grads = torch.autograd.grad(cross_entropy(logits, batch.targets), params,
                                        allow_unused=True)
            for f, g in zip(fisher, grads):
                if g is not None:
                    f += g.detach() ** 2
        for (name, p), f in zip(named, fisher):
            f /= len(train)
            self.fisher_[name] = self.fisher_.get(name, torch.zeros_like(p)) + f
            self.anchors_[name] = p.detach().clone()


class LwF(ContinualLearner):
    """Distils the previous-boundary model's old-class logits into the student."""

    def __init__(self, *, alpha=1.0, temperature=2.0, lr=1e-4, epochs=10, batch_size=16,
                 lr_decay=0.8, clip_norm=5.0, weight_decay=0.01, d_model=64, n_heads=4,
                 bottleneck=16, decoder_layers=2, random_state=0, backbone="pretext"):
        super().__init__(lr=lr, epochs=epochs, batch_size=batch_size, lr_decay=lr_decay,
                         clip_norm=clip_norm, weight_decay=weight_decay, d_model=d_model,
                         n_heads=n_heads, bottleneck=bottleneck, decoder_layers=decoder_layers,
                         random_state=random_state, backbone=backbone)
        self.alpha = alpha
        self.temperature = temperature

    def _init_model(self):
        super()._init_model()
        self.teacher_ = None

    def _step(self, clips, task_id):
        batch = make_batch(self.model_, clips)
        logits, _ = self.model_.decode_logits(batch.mem, batch.mem_mask, batch.inputs)
        loss = cross_entropy(logits, batch.targets)
        if self.teacher_ is not None:
            old = self.teacher_.label_tokens()
            # the teacher cannot read tokens added after it was frozen; decoding is causal,
            # so positions before the first such token are still valid to distil
            known = batch.inputs < self.teacher_.vocab_size
            keep = batch.pos_mask & (known.cumprod(dim=1) == 1)
            inputs = torch.where(known, batch.inputs, torch.zeros_like(batch.inputs))
            with torch.no_grad():
                t_logits, _ = self.teacher_.decode_logits(batch.mem, batch.mem_mask, inputs)
            loss = lwf_loss(logits[keep][:, old], t_logits[keep][:, old], loss,
                            self.alpha, self.temperature)
        loss.backward()
        return {"train_loss": loss.item()}

    def _end_task(self, task_id, train):
        self.teacher_ = copy.deepcopy(self.model_)
        self.teacher_.requires_grad_(False)


class DoubleMixture(_MemoryMixin, ContinualLearner):
    """Mixture of per-task adapter experts plus a mixed replay memory.

    ``use_experts=False`` keeps a single shared adapter and drops the gate
    loss; ``use_memory=False`` trains on task data alone.
    """

    def __init__(self, *, lam=0.5, eta=0.1, use_experts=True, use_memory=True, mix_mode="splice",
                 mixed_ratio=1.0, forbidden_pairs=None, memory_fraction=0.1, memory_min=20,
                 memory_max=100, lr=1e-4, epochs=10, batch_size=16, lr_decay=0.8, clip_norm=5.0,
                 weight_decay=0.01, d_model=64, n_heads=4, bottleneck=16, decoder_layers=2,
                 random_state=0, backbone="pretext"):
        super().__init__(lr=lr, epochs=epochs, batch_size=batch_size, lr_decay=lr_decay,
                         clip_norm=clip_norm, weight_decay=weight_decay, d_model=d_model,
                         n_heads=n_heads, bottleneck=bottleneck, decoder_layers=decoder_layers,
                         random_state=random_state, backbone=backbone)
        self.lam = lam
        self.eta = eta
        self.use_experts = use_experts
        self.use_memory = use_memory
        self.mix_mode = mix_mode
        self.mixed_ratio = mixed_ratio
        self.forbidden_pairs = forbidden_pairs
        self.memory_fraction = memory_fraction
        self.memory_min = memory_min
        self.memory_max = memory_max

    def _train_config(self) -> TrainConfig:
        cfg = super()._train_config()
        cfg.lam = self.lam if self.use_memory else 1.0
        cfg.eta = self.eta if self.use_experts else 0.0
        return cfg

    def _init_model(self):
        super()._init_model()
        self._init_memory()
        self.mix_log_ = []

    def _begin_task(self, task_id, train):
        if self.use_experts:
            self.model_.add_expert(task_id)
        elif self.model_.num_experts == 0:
            self.model_.add_expert(task_id)

    def _step(self, clips, task_id):
        memory = self.memory_ if self.use_memory else None
        return double_mixture_step(self.model_, clips, task_id, memory, self.config_, self.rng_,
                                   use_gate=self.use_experts)

    def _end_task(self, task_id, train):
        if not self.use_memory:
            return
        plain = self._store_exemplars(task_id, train)
        count = int(round(self.mixed_ratio * len(plain)))
        if count == 0:
            return
        sem_pool = [e for e in self.memory_.plain()
                    if e.clip.semantic is not None and e.clip.acoustic is None]
        ac_pool = [e for e in self.memory_.plain()
                   if e.clip.acoustic is not None and e.clip.semantic is None]
        rng = np.random.default_rng([self.random_state, 131, len(self.tasks_seen_)])
        seed = rng.integers(2**32)
        try:
            mixed = make_mixed_samples(sem_pool, ac_pool, self.mix_mode, count, seed,
                                       self.forbidden_pairs or ())
        except MemoryConstructionError as exc:
            self.mix_log_.append({"task_id": task_id, "skipped": str(exc)})
            return
        self.memory_.add(mixed)
        self.mix_log_.append({"task_id": task_id, "mixed": len(mixed)})


METHODS = {
    "double_mixture": lambda **kw: DoubleMixture(**kw),
    "double_mixture_no_experts": lambda **kw: DoubleMixture(use_experts=False, **kw),
    "double_mixture_no_memory": lambda **kw: DoubleMixture(use_memory=False, **kw),
    "ft": lambda **kw: FineTune(**kw),
    "mtl": lambda **kw: MultiTask(**kw),
    "er": lambda **kw: ExperienceReplay(**kw),
    "agem": lambda **kw: AGEM(**kw),
    "ewc": lambda **kw: EWC(**kw),
    "lwf": lambda **kw: LwF(**kw),
}


def make_learner(method: str, **params) -> ContinualLearner:
    try:
        factory = METHODS[method]
    except KeyError:
        raise ValueError(f"unknown method {method!r}; choose from {sorted(METHODS)}") from None
    return factory(**params)

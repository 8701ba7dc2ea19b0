"""Pretext pretraining of the shared decoder attention.

Continual learners only train adapters, routers and the output head, so the
decoder attention has to arrive already able to read event-bearing frames.
It is trained once, on a vocabulary of pulse carriers and tones that the
benchmark never uses, and then loaded frozen into every model.
"""
from __future__ import annotations

import numpy as np

from .audio import COMPOSERS, synth_clip
from .model import ENCODER_SEED, MoeDecoderModel
from .numerics import cross_entropy
from .trainer import TrainConfig, fit_epochs, make_batch

BACKBONE_SEED = 7919
PRETEXT_SEMANTIC = tuple(range(6, 12))
PRETEXT_ACOUSTIC = tuple(range(3, 6))

_CACHE: dict = {}


def pretext_clips(clips_per_class: int = 24, clips_per_pair: int = 4, seed: int = BACKBONE_SEED):
    rng = np.random.default_rng(seed)

    def dur():
        return round(float(rng.uniform(1.0, 2.0)), 3)

    clips = []
    for k in PRETEXT_SEMANTIC:
        clips += [synth_clip(semantic=k, duration_s=dur(), seed=int(rng.integers(2**31)))
                  for _ in range(clips_per_class)]
    for m in PRETEXT_ACOUSTIC:
        clips += [synth_clip(acoustic=m, duration_s=dur(), seed=int(rng.integers(2**31)))
                  for _ in range(clips_per_class)]
    for k in PRETEXT_SEMANTIC:
        for m in PRETEXT_ACOUSTIC:
            for i in range(clips_per_pair):
                compose = COMPOSERS["splice" if i % 2 else "overlay"]
                sem = synth_clip(semantic=k, duration_s=dur(), seed=int(rng.integers(2**31)))
                ac = synth_clip(acoustic=m, duration_s=dur(), seed=int(rng.integers(2**31)))
                clips.append(compose(sem, ac))
    return clips


def pretrain_backbone(d: int = 64, heads: int = 4, bottleneck: int = 16, decoder_layers: int = 2,
                      encoder_layers: int = 2, pool: int = 2, encoder_seed: int = ENCODER_SEED,
                      epochs: int = 8, lr: float = 3e-3, seed: int = BACKBONE_SEED) -> dict:
    """Train decoder attention on the pretext vocabulary; returns the attention weights.

    Results are cached per configuration for the lifetime of the process.
    """
    key = (d, heads, bottleneck, decoder_layers, encoder_layers, pool, encoder_seed, epochs, lr,
           seed)
    if key in _CACHE:
        return {k: v.clone() for k, v in _CACHE[key].items()}
    model = MoeDecoderModel(d=d, heads=heads, bottleneck=bottleneck, encoder_layers=encoder_layers,
                            decoder_layers=decoder_layers, pool=pool, seed=seed,
                            encoder_seed=encoder_seed)
    clips = pretext_clips(seed=seed)
    model.add_labels({lab for clip in clips for lab in clip.labels})
    model.add_expert(0)
    for block in model.blocks:
        block.self_attn.requires_grad_(True)
        block.cross_attn.requires_grad_(True)
    params = [p for p in model.parameters() if p.requires_grad]
    config = TrainConfig(lam=1.0, eta=0.0, epochs_per_task=epochs, initial_lr=lr, seed=seed)

    def step(batch_clips):
        batch = make_batch(model, batch_clips)
        logits, _ = model.decode_logits(batch.mem, batch.mem_mask, batch.inputs)
        loss = cross_entropy(logits, batch.targets)
        loss.backward()
        return {"train_loss": loss.item()}

    fit_epochs(model, clips, [], config, step, 0, np.random.default_rng(seed), params=params)
    state = model.backbone_state()
    _CACHE[key] = state
    return {k: v.clone() for k, v in state.items()}

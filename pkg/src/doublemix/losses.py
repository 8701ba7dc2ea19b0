"""Training objectives: data/gate/total losses and the baseline penalties."""
from __future__ import annotations

import torch

from .numerics import DimensionError, cross_entropy, log_softmax, softmax


class ConfigError(ValueError):
    pass


def data_loss(task_loss, memory_loss, lam: float = 0.5):
    """Convex blend ``lam * task + (1 - lam) * memory``."""
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"lambda must lie in [0, 1], got {lam}")
    if lam == 1.0:
        return task_loss
    return lam * task_loss + (1.0 - lam) * memory_loss


def gate_loss(block_logits, gold_ids) -> torch.Tensor:
    """Cross-entropy of block-summed router logits against gold expert ids.

    ``block_logits`` is a sequence (one per decoder block) of ``(batch,
    experts)`` tensors, or a single already-summed ``(batch, experts)`` tensor.
    """
    if isinstance(block_logits, torch.Tensor):
        summed = block_logits
    else:
        widths = {lg.shape[-1] for lg in block_logits}
        if len(widths) != 1:
            raise DimensionError("decoder blocks disagree on expert count")
        summed = sum(block_logits)
    gold = torch.as_tensor(gold_ids, dtype=torch.long).reshape(-1)
    if summed.dim() == 1:
        summed = summed[None]
    if (gold >= summed.shape[-1]).any() or (gold < 0).any():
        raise ValueError(f"gold id out of range for {summed.shape[-1]} experts")
    return cross_entropy(summed, gold)


def total_loss(data, gate, eta: float = 0.1):
    return data + eta * gate


def agem_project(g: torch.Tensor, g_ref: torch.Tensor) -> torch.Tensor:
    """Project ``g`` onto the half-space ``g . g_ref >= 0`` when it points away."""
    if g.shape != g_ref.shape:
        raise DimensionError("gradient vectors differ in length")
    ref_sq = torch.dot(g_ref, g_ref)
    if ref_sq <= 0:
        return g
    dot = torch.dot(g, g_ref)
    if dot >= 0:
        return g
    return g - (dot / ref_sq) * g_ref


def ewc_penalty(params, fisher, anchors, strength: float = 100.0) -> torch.Tensor:
    """``strength / 2 * sum F (theta - theta*)^2`` over aligned sequences."""
    params, fisher, anchors = list(params), list(fisher), list(anchors)
    if not (len(params) == len(fisher) == len(anchors)):
        raise DimensionError("params, fisher and anchors differ in length")
    total = torch.zeros((), dtype=torch.float64)
    for p, f, a in zip(params, fisher, anchors):
        if p.shape != f.shape or p.shape != a.shape:
            raise DimensionError(f"shape mismatch {tuple(p.shape)} / {tuple(f.shape)} / {tuple(a.shape)}")
        total = total + (f * (p - a) ** 2).sum()
    return 0.5 * strength * total


def distillation_kl(student_logits, teacher_logits, temperature: float = 2.0) -> torch.Tensor:
    """Mean over rows of KL(softmax(teacher/T) || softmax(student/T))."""
    if student_logits.shape != teacher_logits.shape:
        raise DimensionError("student and teacher logits differ in shape")
    p_t = softmax(teacher_logits / temperature)
    kl = (p_t * (log_softmax(teacher_logits / temperature)
                 - log_softmax(student_logits / temperature))).sum(dim=-1)
    return kl.mean()


def lwf_loss(student_logits, teacher_logits, task_loss, alpha: float = 1.0,
             temperature: float = 2.0):
    """Task loss plus ``alpha * T^2`` times the distillation KL (old-class logits only)."""
    if alpha == 0 or student_logits.numel() == 0:
        return task_loss
    return task_loss + alpha * temperature ** 2 * distillation_kl(
        student_logits, teacher_logits, temperature)

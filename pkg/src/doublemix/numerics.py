"""Dense float64 tensor helpers, AdamW with gradient clipping, and a
finite-difference gradient checker.

Autodiff is delegated to torch; everything here runs in float64 on CPU.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
import torch

DTYPE = torch.float64

torch.set_default_dtype(DTYPE)


class DimensionError(ValueError):
    pass


class GradCheckError(RuntimeError):
    pass


def tensor(data, requires_grad: bool = False) -> torch.Tensor:
    """Wrap ``data`` as a float64 tensor, rejecting NaN and Inf."""
    t = torch.as_tensor(np.asarray(data, dtype=np.float64), dtype=DTYPE).clone()
    if not torch.isfinite(t).all():
        raise ValueError("tensor values must be finite")
    t.requires_grad_(requires_grad)
    return t


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() < 1 or b.dim() < 1 or a.shape[-1] != b.shape[0 if b.dim() == 1 else -2]:
        raise DimensionError(f"cannot multiply {tuple(a.shape)} by {tuple(b.shape)}")
    return a @ b


def softmax(v: torch.Tensor, dim: int = -1) -> torch.Tensor:
    if v.numel() == 0 or v.shape[dim] == 0:
        raise ValueError("softmax of an empty vector")
    shifted = v - v.max(dim=dim, keepdim=True).values.detach()
    e = torch.exp(shifted)
    return e / e.sum(dim=dim, keepdim=True)


def log_softmax(v: torch.Tensor, dim: int = -1) -> torch.Tensor:
    if v.numel() == 0 or v.shape[dim] == 0:
        raise ValueError("log_softmax of an empty vector")
    shifted = v - v.max(dim=dim, keepdim=True).values.detach()
    return shifted - torch.log(torch.exp(shifted).sum(dim=dim, keepdim=True))


def cross_entropy(logits: torch.Tensor, target, ignore_index: int = -100) -> torch.Tensor:
    """Mean of ``-log softmax(logits)[target]`` over non-ignored rows.

    ``logits`` is a vector (with an int target) or ``(..., V)`` with an integer
    target tensor of the leading shape.
    """
    if logits.dim() == 1:
        target = int(target)
        if not 0 <= target < logits.shape[0]:
            raise ValueError(f"target {target} out of range for {logits.shape[0]} classes")
        return -log_softmax(logits)[target]
    target = torch.as_tensor(target, dtype=torch.long)
    flat = logits.reshape(-1, logits.shape[-1])
    tgt = target.reshape(-1)
    keep = tgt != ignore_index
    if not keep.any():
        return flat.sum() * 0.0
    tgt = tgt[keep]
    if (tgt < 0).any() or (tgt >= flat.shape[-1]).any():
        raise ValueError("target out of range")
    lp = log_softmax(flat[keep])
    return -lp.gather(1, tgt[:, None]).mean()


def clip_gradients(params: Iterable[torch.Tensor], max_norm: float) -> float:
    """Scale grads in place so their global L2 norm is at most ``max_norm``.

    Returns the factor applied (1.0 when no clipping happened).
    """
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    grads = [p.grad for p in params if p.grad is not None]
    if not grads:
        return 1.0
    total = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if total <= max_norm:
        return 1.0
    factor = max_norm / total
    for g in grads:
        g.mul_(factor)
    return factor


@dataclass
class OptimizerState:
    learning_rate: float = 1e-4
    weight_decay: float = 0.01
    clip_norm: float = 5.0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    exp_avg: dict = field(default_factory=dict)
    exp_avg_sq: dict = field(default_factory=dict)


def adamw_step(state: OptimizerState, params: Sequence[torch.Tensor]) -> None:
    """One AdamW update (decoupled weight decay, bias-corrected moments).

    Parameters with ``requires_grad=False`` or no gradient are left untouched.
    Gradients are clipped to ``state.clip_norm`` first.
    """
    live = [p for p in params if p.requires_grad and p.grad is not None]
    clip_gradients(live, state.clip_norm)
    state.step += 1
    b1, b2 = state.betas
    bc1 = 1 - b1 ** state.step
    bc2 = 1 - b2 ** state.step
    lr = state.learning_rate
    with torch.no_grad():
        for p in live:
            key = id(p)
            m = state.exp_avg.get(key)
            if m is None:
                m = state.exp_avg[key] = torch.zeros_like(p)
                state.exp_avg_sq[key] = torch.zeros_like(p)
            v = state.exp_avg_sq[key]
            g = p.grad
            p.mul_(1 - lr * state.weight_decay)
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            denom = (v / bc2).sqrt_().add_(state.eps)
            p.addcdiv_(m, denom, value=-lr / bc1)


def grad_check(
    loss_fn: Callable[[], torch.Tensor],
    params: Sequence[torch.Tensor],
    epsilon: float = 1e-6,
) -> float:
    """Max relative error between autograd and central differences.

    The relative error for each element is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    if not 1e-6 <= epsilon <= 1e-3:
        raise ValueError("epsilon must lie in [1e-6, 1e-3]")
    params = list(params)
    base = loss_fn()
    if float(loss_fn().detach()) != float(base.detach()):
        raise GradCheckError("loss function is not deterministic")
    analytic = torch.autograd.grad(base, params, allow_unused=True)
    worst = 0.0
    with torch.no_grad():
        for p, a in zip(params, analytic):
            a = torch.zeros_like(p) if a is None else a
            flat = p.view(-1)
            af = a.reshape(-1)
            for i in range(flat.numel()):
                orig = float(flat[i])
                flat[i] = orig + epsilon
                up = float(loss_fn())
                flat[i] = orig - epsilon
                down = float(loss_fn())
                flat[i] = orig
                num = (up - down) / (2 * epsilon)
                ana = float(af[i])
                err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
                worst = max(worst, err)
    return worst


class _Closure(torch.nn.Module):
    def __init__(self, owner: torch.nn.Module, fn):
        super().__init__()
        self.owner = owner
        self.fn = fn

    def forward(self):
        return self.fn()


def grad_check_vmap(
    loss_fn: Callable[[], torch.Tensor],
    module: torch.nn.Module,
    params: Sequence[torch.Tensor] | None = None,
    epsilon: float = 1e-6,
    chunk: int = 128,
) -> float:
    """Same measure as :func:`grad_check`, vectorised over perturbations.

    ``loss_fn`` must read every parameter through ``module`` so that
    ``torch.func.functional_call`` can substitute perturbed copies.
    """
    if not 1e-6 <= epsilon <= 1e-3:
        raise ValueError("epsilon must lie in [1e-6, 1e-3]")
    named = {id(p): n for n, p in module.named_parameters()}
    params = [p for p in module.parameters() if p.requires_grad] if params is None else list(params)
    if any(id(p) not in named for p in params):
        raise ValueError("every checked parameter must belong to module")
    base = loss_fn()
    if float(loss_fn().detach()) != float(base.detach()):
        raise GradCheckError("loss function is not deterministic")
    analytic = torch.autograd.grad(base, params, allow_unused=True)
    closure = _Closure(module, loss_fn)
    worst = 0.0
    with torch.no_grad():
        for p, a in zip(params, analytic):
            a = torch.zeros(p.numel()) if a is None else a.reshape(-1)
            key = "owner." + named[id(p)]
            flat = p.detach().reshape(-1)
            evaluate = torch.func.vmap(
                lambda v: torch.func.functional_call(closure, {key: v.view(p.shape)}, ()))
            for s in range(0, flat.numel(), chunk):
                step = epsilon * torch.eye(flat.numel())[s:s + chunk]
                num = (evaluate(flat + step) - evaluate(flat - step)) / (2 * epsilon)
                ana = a[s:s + chunk]
                denom = torch.clamp(torch.maximum(ana.abs(), num.abs()), min=1e-8)
                worst = max(worst, float(((ana - num).abs() / denom).max()))
    return worst


def seed_everything(seed: int) -> np.random.Generator:
    torch.manual_seed(seed)
    return np.random.default_rng(seed)

"""Adam with bias correction, global-norm gradient clipping, and the
validation-plateau learning-rate halving rule.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Sequence

import torch

from .errors import NumericError, ShapeError

Tensor = torch.Tensor


@dataclass
class AdamState:
    """Per-parameter first/second moments plus the shared step counter."""

    step: int = 0
    m: Dict[str, Tensor] = field(default_factory=dict)
    v: Dict[str, Tensor] = field(default_factory=dict)

    @classmethod
    def init_like(cls, params: Dict[str, Tensor]) -> "AdamState":
        return cls(
            step=0,
            m={k: torch.zeros_like(p) for k, p in params.items()},
            v={k: torch.zeros_like(p) for k, p in params.items()},
        )


def adam_step(
    params: Dict[str, Tensor],
    grads: Dict[str, Tensor],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update, in place; advances state.step.

    Aborts (before touching any parameter) on a non-finite gradient,
    naming the offending parameter path.
    """
    for path, p in params.items():
        g = grads.get(path)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeError(
                f"adam_step: gradient shape {tuple(g.shape)} != parameter "
                f"shape {tuple(p.shape)} for '{path}'"
            )
        if not torch.isfinite(g).all():
            raise NumericError(f"adam_step: non-finite gradient for parameter '{path}'")
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    with torch.no_grad():
        for path, p in params.items():
            g = grads.get(path)
            if g is None:
                g = torch.zeros_like(p)
            m = state.m[path]
            v = state.v[path]
            m.mul_(beta1).add_(g, alpha=1.0 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
            p.add_(-lr * (m / bc1) / ((v / bc2).sqrt() + eps))


def clip_grad_norm(grads: Dict[str, Tensor], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm.

    Returns the pre-clip norm.
    """
    total = 0.0
    for g in grads.values():
        if g is not None:
            total += float((g.double() ** 2).sum())
    norm = math.sqrt(total)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        with torch.no_grad():
            for g in grads.values():
                if g is not None:
                    g.mul_(scale)
    return norm


def lr_schedule(
    epoch: int,
    val_loss_history: Sequence[float],
    warmup_epochs: int = 50,
    window: int = 3,
) -> float:
    """Learning-rate multiplier in effect after ``epoch`` completed epochs.

    Past the warmup, the rate is halved whenever the validation loss has
    not decreased over ``window`` consecutive epochs; a halving resets the
    window, so the next one needs ``window`` fresh comparisons. Pure
    function of (epoch, history): the multiplier is reconstructed by
    scanning the history, and it never increases.
    """
    if epoch > len(val_loss_history):
        raise ShapeError(
            f"lr_schedule: history has {len(val_loss_history)} epochs, "
            f"but epoch {epoch} was requested"
        )
    mult = 1.0
    last_halve = 0
    for e in range(1, epoch + 1):
        if e <= warmup_epochs or e < window + 1:
            continue
        if e - window < last_halve:
            continue
        # epoch j's loss is history[j-1]; require no decrease across the window
        if all(val_loss_history[k] >= val_loss_history[k - 1] for k in range(e - window, e)):
            mult *= 0.5
            last_halve = e
    return mult

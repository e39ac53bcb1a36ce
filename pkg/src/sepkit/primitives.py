"""Differentiable numeric building blocks with a uniform forward/backward contract.

Every operation is a shape-checked functional wrapper over torch, so
reverse-mode gradients are available throughout the stack; ``grad_check``
verifies any composition of them against central finite differences. All
ops accept an optional leading batch dimension beyond the documented core
shape and are deterministic for fixed inputs.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import torch
import torch.nn.functional as F

from .errors import ConfigError, NumericError, ShapeError

Tensor = torch.Tensor


def _check_finite(name: str, *tensors: Tensor) -> None:
    for t in tensors:
        if not torch.isfinite(t).all():
            raise NumericError(f"{name}: non-finite value encountered")


def conv1d(x: Tensor, weight: Tensor, bias: Optional[Tensor], stride: int = 1) -> Tensor:
    """Valid (unpadded) 1-D convolution over the trailing time axis.

    x: [C_in, T] or [B, C_in, T]; weight: [C_out, C_in, K]; bias: [C_out].
    Output time length is (T - K) // stride + 1.
    """
    if stride < 1:
        raise ConfigError(f"conv1d: stride must be >= 1, got {stride}")
    if x.dim() not in (2, 3):
        raise ShapeError(f"conv1d: input must be [C,T] or [B,C,T], got {x.dim()} dims")
    if weight.dim() != 3:
        raise ShapeError(f"conv1d: weight must be [C_out,C_in,K], got {weight.dim()} dims")
    c_out, c_in, k = weight.shape
    if x.shape[-2] != c_in:
        raise ShapeError(
            f"conv1d: input channel dim is {x.shape[-2]}, weight expects C_in={c_in}"
        )
    if x.shape[-1] < k:
        raise ShapeError(f"conv1d: time dim {x.shape[-1]} shorter than kernel {k}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"conv1d: bias dim {tuple(bias.shape)} != ({c_out},)")
    batched = x.dim() == 3
    xb = x if batched else x.unsqueeze(0)
    y = F.conv1d(xb, weight, bias, stride=stride)
    return y if batched else y.squeeze(0)


def transposed_conv1d(
    x: Tensor, weight: Tensor, bias: Optional[Tensor], stride: int = 1
) -> Tensor:
    """Exact adjoint of :func:`conv1d`'s linear map.

    x: [C_in, T] or [B, C_in, T]; weight: [C_in, C_out, K]; bias: [C_out].
    Output time length is (T - 1) * stride + K.
    """
    if stride < 1:
        raise ConfigError(f"transposed_conv1d: stride must be >= 1, got {stride}")
    if x.dim() not in (2, 3):
        raise ShapeError(
            f"transposed_conv1d: input must be [C,T] or [B,C,T], got {x.dim()} dims"
        )
    if weight.dim() != 3:
        raise ShapeError(
            f"transposed_conv1d: weight must be [C_in,C_out,K], got {weight.dim()} dims"
        )
    c_in, c_out, _ = weight.shape
    if x.shape[-2] != c_in:
        raise ShapeError(
            f"transposed_conv1d: input channel dim is {x.shape[-2]}, weight expects C_in={c_in}"
        )
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"transposed_conv1d: bias dim {tuple(bias.shape)} != ({c_out},)")
    batched = x.dim() == 3
    xb = x if batched else x.unsqueeze(0)
    y = F.conv_transpose1d(xb, weight, bias, stride=stride)
    return y if batched else y.squeeze(0)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """y = x @ weight.T + bias over the trailing dim, batched over leading dims."""
    if weight.dim() != 2:
        raise ShapeError(f"linear: weight must be [D_out,D_in], got {weight.dim()} dims")
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(
            f"linear: trailing dim {x.shape[-1]} != weight D_in={weight.shape[1]}"
        )
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias dim {tuple(bias.shape)} != ({weight.shape[0]},)")
    return F.linear(x, weight, bias)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Zero-mean / unit-variance over the trailing dim, then affine."""
    if eps <= 0:
        raise ConfigError(f"layer_norm: eps must be positive, got {eps}")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(
            f"layer_norm: gamma/beta must have dim ({d},), got "
            f"{tuple(gamma.shape)} / {tuple(beta.shape)}"
        )
    return F.layer_norm(x, (d,), gamma, beta, eps)


def mhsa(
    x: Tensor,
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
    bq: Optional[Tensor],
    bk: Optional[Tensor],
    bv: Optional[Tensor],
    bo: Optional[Tensor],
    heads: int,
    return_weights: bool = False,
):
    """Scaled dot-product multi-head self-attention.

    x: [L, D] or [..., L, D]. Softmax is over the key axis with scale
    1/sqrt(D/heads); the output projection maps back to D. With
    ``return_weights`` the per-head attention matrix [..., H, L, L] is
    returned alongside the output.
    """
    d = x.shape[-1]
    if d % heads != 0:
        raise ConfigError(f"mhsa: model dim {d} not divisible by heads={heads}")
    if x.dim() < 2:
        raise ShapeError(f"mhsa: input must be at least [L,D], got {x.dim()} dims")
    d_head = d // heads
    lead = x.shape[:-2]
    length = x.shape[-2]

    q = linear(x, wq, bq)
    k = linear(x, wk, bk)
    v = linear(x, wv, bv)

    def split(t: Tensor) -> Tensor:
        # [..., L, D] -> [..., H, L, d_head]
        return t.reshape(*lead, length, heads, d_head).transpose(-3, -2)

    q, k, v = split(q), split(k), split(v)
    scores = q @ k.transpose(-2, -1) / math.sqrt(d_head)
    attn = torch.softmax(scores, dim=-1)
    ctx = attn @ v
    ctx = ctx.transpose(-3, -2).reshape(*lead, length, d)
    out = linear(ctx, wo, bo)
    if return_weights:
        return out, attn
    return out


def depthwise_conv1d(x: Tensor, weight: Tensor) -> Tensor:
    """Per-channel convolution with zero 'same' padding; length preserved.

    x: [C, T] or [B, C, T]; weight: [C, K] with K odd.
    """
    if weight.dim() != 2:
        raise ShapeError(f"depthwise_conv1d: weight must be [C,K], got {weight.dim()} dims")
    c, k = weight.shape
    if k % 2 == 0:
        raise ConfigError(f"depthwise_conv1d: kernel must be odd for same padding, got {k}")
    if x.dim() not in (2, 3):
        raise ShapeError(
            f"depthwise_conv1d: input must be [C,T] or [B,C,T], got {x.dim()} dims"
        )
    if x.shape[-2] != c:
        raise ShapeError(
            f"depthwise_conv1d: input channel dim {x.shape[-2]} != weight channels {c}"
        )
    batched = x.dim() == 3
    xb = x if batched else x.unsqueeze(0)
    y = F.conv1d(xb, weight.unsqueeze(1), None, padding=k // 2, groups=c)
    return y if batched else y.squeeze(0)


def swish(x: Tensor) -> Tensor:
    return x * torch.sigmoid(x)


def glu(x: Tensor, dim: int = -1) -> Tensor:
    """Halves ``dim``; second half gates the first through a sigmoid."""
    if x.shape[dim] % 2 != 0:
        raise ShapeError(f"glu: dim {dim} has odd extent {x.shape[dim]}")
    return F.glu(x, dim=dim)


def prelu(x: Tensor, slope: Tensor) -> Tensor:
    """PReLU with a single learned slope for the negative part."""
    if slope.numel() != 1:
        raise ShapeError(f"prelu: slope must be a single parameter, got {slope.numel()}")
    return F.prelu(x, slope.reshape(1))


_SIMPLE_ELEMENTWISE: dict[str, Callable[[Tensor], Tensor]] = {
    "relu": torch.relu,
    "sigmoid": torch.sigmoid,
    "tanh": torch.tanh,
    "swish": swish,
}


def elementwise(kind: str, x: Tensor, aux=None) -> Tensor:
    """Dispatch for the standard activations: relu|sigmoid|tanh|swish|prelu|glu.

    ``aux`` is the slope parameter for prelu and the split dim for glu.
    """
    if kind in _SIMPLE_ELEMENTWISE:
        return _SIMPLE_ELEMENTWISE[kind](x)
    if kind == "prelu":
        if aux is None:
            raise ConfigError("elementwise: prelu requires a slope parameter")
        return prelu(x, aux)
    if kind == "glu":
        return glu(x, dim=-1 if aux is None else aux)
    raise ConfigError(f"elementwise: unknown kind '{kind}'")


def global_avg_pool_time(x: Tensor) -> Tensor:
    """Mean over the trailing (frame) axis: [..., C, T] -> [..., C]."""
    if x.dim() < 2:
        raise ShapeError(f"global_avg_pool_time: input must be [C,T]-like, got {x.dim()} dims")
    if x.shape[-1] < 1:
        raise ShapeError("global_avg_pool_time: empty time axis")
    return x.mean(dim=-1)


@dataclass
class GradReport:
    """Outcome of one finite-difference check.

    ``worst_index`` is the flat coordinate, counted across the checked
    inputs in order, where the relative error peaked.
    """

    op_name: str
    max_rel_error: float
    worst_index: int
    h: float

    def ok(self, tol: float) -> bool:
        return self.max_rel_error < tol


def grad_check(
    op_closure: Callable[..., object],
    inputs: Sequence[Tensor],
    h: float = 1e-5,
    op_name: str = "op",
    max_coords_per_input: Optional[int] = None,
    seed: int = 0,
    refine_h: Sequence[float] = (),
) -> GradReport:
    """Compare the analytic gradient of sum(outputs) against central differences.

    All inputs are promoted to float64 leaves. The relative error per
    coordinate uses denominator max(|analytic|, |numeric|, 1e-8) and the
    maximum over all probed coordinates is reported. By default every
    coordinate is probed; ``max_coords_per_input`` caps the probe count per
    input with a deterministic subsample (needed for whole-network checks
    where exhaustive probing is infeasible).

    ``refine_h`` lists extra step sizes tried (best result kept) for
    coordinates that stay above 1e-6 relative error at the primary step.
    One fixed step cannot serve deep compositions: near a ReLU-family kink
    the probe must shrink below the kink distance, while coordinates with
    tiny gradients need a larger step to rise above f64 rounding of the
    loss. Step-size refinement is the standard resolution of that
    truncation/cancellation trade-off.
    """
    if h <= 0:
        raise ConfigError(f"grad_check: h must be positive, got {h}")
    leaves = [t.detach().clone().double().requires_grad_(True) for t in inputs]

    def scalar_of(ts: Sequence[Tensor]) -> Tensor:
        out = op_closure(*ts)
        outs = out if isinstance(out, (tuple, list)) else (out,)
        total = None
        for o in outs:
            if not torch.isfinite(o).all():
                raise NumericError(f"grad_check({op_name}): non-finite forward output")
            total = o.sum() if total is None else total + o.sum()
        if total is None:
            raise NumericError(f"grad_check({op_name}): closure produced no outputs")
        return total

    analytic = torch.autograd.grad(scalar_of(leaves), leaves, allow_unused=True)

    picker = random.Random(seed)
    max_rel = 0.0
    worst = 0
    offset = 0
    with torch.no_grad():
        frozen = [leaf.detach().clone() for leaf in leaves]
        for which, ana in enumerate(analytic):
            n = frozen[which].numel()
            if max_coords_per_input is not None and n > max_coords_per_input:
                coords = sorted(picker.sample(range(n), max_coords_per_input))
            else:
                coords = list(range(n))
            flat = frozen[which].view(-1)
            for i in coords:
                orig = flat[i].item()
                a = 0.0 if ana is None else ana.view(-1)[i].item()
                rel = math.inf
                for step in (h, *refine_h):
                    flat[i] = orig + step
                    f_plus = scalar_of(frozen).item()
                    flat[i] = orig - step
                    f_minus = scalar_of(frozen).item()
                    flat[i] = orig
                    numeric = (f_plus - f_minus) / (2.0 * step)
                    rel = min(rel, abs(a - numeric) / max(abs(a), abs(numeric), 1e-8))
                    if rel <= 1e-6:
                        break
                if rel > max_rel:
                    max_rel = rel
                    worst = offset + i
            offset += n
    return GradReport(op_name=op_name, max_rel_error=max_rel, worst_index=worst, h=h)

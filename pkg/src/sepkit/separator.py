"""The masking network: SE blocks, SE-Conformer and Transformer layers,
dual-path blocks over chunked features, multi-block fusion, and the gated
mask head that turns fused features into per-speaker masks.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Optional, Sequence

import torch
from torch import nn

from .errors import ConfigError, ShapeError
from .frontend import ChunkTensor, Decoder, Encoder, Waveform, overlap_add, segment
from .primitives import (
    depthwise_conv1d,
    glu,
    global_avg_pool_time,
    layer_norm,
    linear,
    mhsa,
    prelu,
    swish,
)

Tensor = torch.Tensor

FUSION_KINDS = ("mbfa", "sum", "concat")
LAYER_KINDS = ("se_conformer", "transformer")


def default_kernel_ladder(count: int, start: int = 3) -> tuple[int, ...]:
    """Strictly increasing odd kernel sizes: start, start+2, ..."""
    if start % 2 == 0:
        start += 1
    return tuple(start + 2 * i for i in range(count))


@dataclass
class SeparatorConfig:
    """Full architectural hyperparameter record.

    ``desk()`` is small enough to train on a laptop CPU; ``paper_scale()``
    holds the published full-size settings (documented reference only, not
    trainable at desk scale).
    """

    channels: int = 32
    chunk_size: int = 20
    num_blocks: int = 2
    intra_layers: int = 2
    inter_layers: int = 2
    attention_heads: int = 4
    intra_kernels: tuple[int, ...] = (3, 5)
    inter_kernels: Optional[tuple[int, ...]] = None  # only used by se_conformer inter
    se_reduction: int = 4
    mbfa_decay: float = 0.6
    num_speakers: int = 2
    fusion: str = "mbfa"
    intra_type: str = "se_conformer"
    inter_type: str = "transformer"
    use_se_block: bool = True
    ffn_mult: int = 2
    encoder_kernel: int = 16
    encoder_stride: int = 8
    sample_rate: int = 8000

    @classmethod
    def desk(cls, **overrides) -> "SeparatorConfig":
        cfg = cls(**overrides)
        cfg.validate()
        return cfg

    @classmethod
    def paper_scale(cls, **overrides) -> "SeparatorConfig":
        base = dict(
            channels=256,
            chunk_size=250,
            num_blocks=3,
            intra_layers=4,
            inter_layers=6,
            attention_heads=8,
            intra_kernels=(13, 15, 17, 19),
            ffn_mult=4,
        )
        base.update(overrides)
        cfg = cls(**base)
        cfg.validate()
        return cfg

    def resolved_inter_kernels(self) -> tuple[int, ...]:
        if self.inter_kernels is not None:
            return tuple(self.inter_kernels)
        return default_kernel_ladder(self.inter_layers, start=self.intra_kernels[0])

    def problems(self) -> list[str]:
        errs: list[str] = []
        if self.channels < 1:
            errs.append(f"channels must be >= 1, got {self.channels}")
        if self.chunk_size < 2 or self.chunk_size % 2 != 0:
            errs.append(f"chunk_size must be even and >= 2, got {self.chunk_size}")
        if self.num_blocks < 1:
            errs.append(f"num_blocks must be >= 1, got {self.num_blocks}")
        if self.intra_layers < 1:
            errs.append(f"intra_layers must be >= 1, got {self.intra_layers}")
        if self.inter_layers < 1:
            errs.append(f"inter_layers must be >= 1, got {self.inter_layers}")
        if self.attention_heads < 1 or self.channels % max(self.attention_heads, 1) != 0:
            errs.append(
                f"attention_heads must divide channels ({self.channels}), "
                f"got {self.attention_heads}"
            )
        ladder = tuple(self.intra_kernels)
        if len(ladder) != self.intra_layers:
            errs.append(
                f"intra_kernels must list one kernel per intra layer "
                f"({self.intra_layers}), got {len(ladder)}"
            )
        if any(k % 2 == 0 for k in ladder):
            errs.append(f"intra_kernels must all be odd, got {ladder}")
        if any(b <= a for a, b in zip(ladder, ladder[1:])):
            errs.append(f"intra_kernels must be strictly increasing, got {ladder}")
        if self.inter_kernels is not None:
            inter = tuple(self.inter_kernels)
            if len(inter) != self.inter_layers:
                errs.append(
                    f"inter_kernels must list one kernel per inter layer "
                    f"({self.inter_layers}), got {len(inter)}"
                )
            if any(k % 2 == 0 for k in inter):
                errs.append(f"inter_kernels must all be odd, got {inter}")
            if any(b <= a for a, b in zip(inter, inter[1:])):
                errs.append(f"inter_kernels must be strictly increasing, got {inter}")
        if self.se_reduction < 1 or self.channels % max(self.se_reduction, 1) != 0:
            errs.append(
                f"se_reduction must divide channels ({self.channels}), "
                f"got {self.se_reduction}"
            )
        if not (0.0 < self.mbfa_decay <= 1.0):
            errs.append(f"mbfa_decay must be in (0, 1], got {self.mbfa_decay}")
        if self.num_speakers < 1:
            errs.append(f"num_speakers must be >= 1, got {self.num_speakers}")
        if self.fusion not in FUSION_KINDS:
            errs.append(f"fusion must be one of {FUSION_KINDS}, got '{self.fusion}'")
        if self.intra_type not in LAYER_KINDS:
            errs.append(f"intra_type must be one of {LAYER_KINDS}, got '{self.intra_type}'")
        if self.inter_type not in LAYER_KINDS:
            errs.append(f"inter_type must be one of {LAYER_KINDS}, got '{self.inter_type}'")
        if self.ffn_mult < 1:
            errs.append(f"ffn_mult must be >= 1, got {self.ffn_mult}")
        if self.encoder_kernel < 1:
            errs.append(f"encoder_kernel must be >= 1, got {self.encoder_kernel}")
        if self.encoder_stride < 1:
            errs.append(f"encoder_stride must be >= 1, got {self.encoder_stride}")
        if self.sample_rate < 1:
            errs.append(f"sample_rate must be >= 1, got {self.sample_rate}")
        return errs

    def validate(self) -> None:
        errs = self.problems()
        if errs:
            raise ConfigError(errs)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["intra_kernels"] = list(self.intra_kernels)
        if self.inter_kernels is not None:
            d["inter_kernels"] = list(self.inter_kernels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SeparatorConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError([f"unknown model config field '{k}'" for k in unknown])
        kwargs = dict(d)
        if "intra_kernels" in kwargs:
            kwargs["intra_kernels"] = tuple(kwargs["intra_kernels"])
        if kwargs.get("inter_kernels") is not None:
            kwargs["inter_kernels"] = tuple(kwargs["inter_kernels"])
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg


def sinusoidal_encoding(length: int, dim: int, dtype=torch.float32, device=None) -> Tensor:
    """Classic fixed sin/cos position table, shape [length, dim]."""
    pe = torch.zeros(length, dim, dtype=torch.float64)
    pos = torch.arange(length, dtype=torch.float64).unsqueeze(1)
    div = torch.exp(
        torch.arange(0, dim, 2, dtype=torch.float64) * (-math.log(10000.0) / dim)
    )
    pe[:, 0::2] = torch.sin(pos * div)
    pe[:, 1::2] = torch.cos(pos * div[: dim // 2])
    return pe.to(dtype=dtype, device=device)


def se_block(v: Tensor, w1: Tensor, w2: Tensor) -> Tensor:
    """Channel gate from time-pooled features: sigmoid(w2 relu(w1 mean_t(v))) * v.

    v: [..., C, L]; w1: [C/r, C]; w2: [C, C/r]. The gate is constant over
    time and strictly inside (0, 1) per channel.
    """
    pooled = global_avg_pool_time(v)  # [..., C]
    hidden = torch.relu(linear(pooled, w1))
    gate = torch.sigmoid(linear(hidden, w2))  # [..., C]
    return gate.unsqueeze(-1) * v


class SqueezeExcite(nn.Module):
    """Module wrapper owning the two SE projection matrices (no biases)."""

    def __init__(self, channels: int, reduction: int):
        super().__init__()
        if channels % reduction != 0:
            raise ConfigError(
                f"SqueezeExcite: reduction {reduction} must divide channels {channels}"
            )
        hidden = channels // reduction
        self.w1 = nn.Parameter(torch.empty(hidden, channels))
        self.w2 = nn.Parameter(torch.empty(channels, hidden))
        nn.init.kaiming_uniform_(self.w1, a=math.sqrt(5))
        nn.init.kaiming_uniform_(self.w2, a=math.sqrt(5))

    def forward(self, v: Tensor) -> Tensor:
        return se_block(v, self.w1, self.w2)


class LayerNormParams(nn.Module):
    """Affine layer norm over the trailing dim, as explicit parameters."""

    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.gamma = nn.Parameter(torch.ones(dim))
        self.beta = nn.Parameter(torch.zeros(dim))

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, self.eps)


class LinearParams(nn.Module):
    """Dense layer as explicit parameters (torch.nn.Linear-style init)."""

    def __init__(self, d_in: int, d_out: int, bias: bool = True):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(d_out, d_in))
        nn.init.kaiming_uniform_(self.weight, a=math.sqrt(5))
        if bias:
            bound = 1.0 / math.sqrt(d_in)
            self.bias = nn.Parameter(torch.empty(d_out).uniform_(-bound, bound))
        else:
            self.register_parameter("bias", None)

    def forward(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


class FeedForward(nn.Module):
    """linear(N -> mult*N) -> activation -> linear(-> N)."""

    def __init__(self, dim: int, mult: int, activation: str):
        super().__init__()
        self.inner = LinearParams(dim, mult * dim)
        self.outer = LinearParams(mult * dim, dim)
        if activation == "swish":
            self.act = swish
        elif activation == "relu":
            self.act = torch.relu
        else:
            raise ConfigError(f"FeedForward: unknown activation '{activation}'")

    def forward(self, x: Tensor) -> Tensor:
        return self.outer(self.act(self.inner(x)))


class SelfAttention(nn.Module):
    """Multi-head self-attention over [..., L, D]."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads != 0:
            raise ConfigError(f"SelfAttention: heads {heads} must divide dim {dim}")
        self.heads = heads
        self.q = LinearParams(dim, dim)
        # no key bias: softmax is invariant to per-row score shifts, so a key
        # bias is a dead parameter with an exactly-zero gradient
        self.k = LinearParams(dim, dim, bias=False)
        self.v = LinearParams(dim, dim)
        self.out = LinearParams(dim, dim)

    def forward(self, x: Tensor, return_weights: bool = False):
        return mhsa(
            x,
            self.q.weight,
            self.k.weight,
            self.v.weight,
            self.out.weight,
            self.q.bias,
            self.k.bias,
            self.v.bias,
            self.out.bias,
            self.heads,
            return_weights=return_weights,
        )


class ConformerConvModule(nn.Module):
    """norm -> pointwise to 2N -> GLU -> depthwise (same) -> norm -> swish -> pointwise."""

    def __init__(self, dim: int, kernel: int):
        super().__init__()
        if kernel % 2 == 0:
            raise ConfigError(f"ConformerConvModule: kernel must be odd, got {kernel}")
        self.kernel = kernel
        self.norm_in = LayerNormParams(dim)
        self.pw_in = LinearParams(dim, 2 * dim)
        self.dw_weight = nn.Parameter(torch.empty(dim, kernel))
        nn.init.kaiming_uniform_(self.dw_weight, a=math.sqrt(5))
        self.norm_mid = LayerNormParams(dim)
        self.pw_out = LinearParams(dim, dim)

    def forward(self, x: Tensor) -> Tensor:
        # x: [..., L, D]
        y = self.norm_in(x)
        y = glu(self.pw_in(y), dim=-1)
        lead = y.shape[:-2]
        length, dim = y.shape[-2], y.shape[-1]
        y = y.reshape(-1, length, dim).transpose(-2, -1)  # [B, D, L]
        y = depthwise_conv1d(y, self.dw_weight)
        y = y.transpose(-2, -1).reshape(*lead, length, dim)
        y = swish(self.norm_mid(y))
        return self.pw_out(y)


class SEConformerLayer(nn.Module):
    """Half-step FFN pair sandwiching attention, a conv module, and an SE gate.

    Post-norm residuals throughout:
        x1 = LN(x + 0.5 ffn_in(x))
        x2 = LN(x1 + attn(x1))
        x3 = LN(x2 + conv(x2))
        x4 = LN(x3 + se(x3))      (se branch contributes zero when disabled)
        y  = LN(x4 + 0.5 ffn_out(x4))
    """

    def __init__(
        self,
        dim: int,
        heads: int,
        conv_kernel: int,
        ffn_mult: int,
        se_reduction: int,
        use_se: bool = True,
    ):
        super().__init__()
        self.use_se = use_se
        self.ffn_in = FeedForward(dim, ffn_mult, "swish")
        self.norm_ffn_in = LayerNormParams(dim)
        self.attn = SelfAttention(dim, heads)
        self.norm_attn = LayerNormParams(dim)
        self.conv = ConformerConvModule(dim, conv_kernel)
        self.norm_conv = LayerNormParams(dim)
        self.se = SqueezeExcite(dim, se_reduction) if use_se else None
        self.norm_se = LayerNormParams(dim)
        self.ffn_out = FeedForward(dim, ffn_mult, "swish")
        self.norm_ffn_out = LayerNormParams(dim)

    def forward(self, x: Tensor) -> Tensor:
        x = self.norm_ffn_in(x + 0.5 * self.ffn_in(x))
        x = self.norm_attn(x + self.attn(x))
        x = self.norm_conv(x + self.conv(x))
        if self.se is not None:
            # SE acts on channels x frames, so flip [..., L, D] -> [..., D, L]
            branch = self.se(x.transpose(-2, -1)).transpose(-2, -1)
            x = self.norm_se(x + branch)
        else:
            x = self.norm_se(x)
        return self.norm_ffn_out(x + 0.5 * self.ffn_out(x))


class TransformerLayer(nn.Module):
    """Post-norm encoder layer: LN(x + attn(x)), then LN(. + ffn(.))."""

    def __init__(self, dim: int, heads: int, ffn_mult: int):
        super().__init__()
        self.attn = SelfAttention(dim, heads)
        self.norm_attn = LayerNormParams(dim)
        self.ffn = FeedForward(dim, ffn_mult, "relu")
        self.norm_ffn = LayerNormParams(dim)

    def forward(self, x: Tensor) -> Tensor:
        x = self.norm_attn(x + self.attn(x))
        return self.norm_ffn(x + self.ffn(x))


def _build_stack(
    kind: str, count: int, kernels: Sequence[int], cfg: SeparatorConfig
) -> nn.ModuleList:
    layers: list[nn.Module] = []
    for i in range(count):
        if kind == "se_conformer":
            layers.append(
                SEConformerLayer(
                    cfg.channels,
                    cfg.attention_heads,
                    kernels[i],
                    cfg.ffn_mult,
                    cfg.se_reduction,
                    use_se=cfg.use_se_block,
                )
            )
        else:
            layers.append(TransformerLayer(cfg.channels, cfg.attention_heads, cfg.ffn_mult))
    return nn.ModuleList(layers)


class DualPathBlock(nn.Module):
    """One intra/inter round over the chunk tensor.

    The intra pass runs each chunk's K-frame sequence through the intra
    stack (chunks are a batch axis); the inter pass runs each in-chunk
    position's S-long sequence through the inter stack. Sinusoidal
    positions are added before the first layer of each pass.
    """

    def __init__(self, cfg: SeparatorConfig):
        super().__init__()
        self.intra = _build_stack(
            cfg.intra_type, cfg.intra_layers, cfg.intra_kernels, cfg
        )
        self.inter = _build_stack(
            cfg.inter_type, cfg.inter_layers, cfg.resolved_inter_kernels(), cfg
        )

    def intra_pass(self, chunks: Tensor) -> Tensor:
        # [B, N, K, S] -> sequences [B*S, K, N]
        b, n, k, s = chunks.shape
        x = chunks.permute(0, 3, 2, 1).reshape(b * s, k, n)
        x = x + sinusoidal_encoding(k, n, dtype=x.dtype, device=x.device)
        for layer in self.intra:
            x = layer(x)
        return x.reshape(b, s, k, n).permute(0, 3, 2, 1)

    def inter_pass(self, chunks: Tensor) -> Tensor:
        # [B, N, K, S] -> sequences [B*K, S, N]
        b, n, k, s = chunks.shape
        x = chunks.permute(0, 2, 3, 1).reshape(b * k, s, n)
        x = x + sinusoidal_encoding(s, n, dtype=x.dtype, device=x.device)
        for layer in self.inter:
            x = layer(x)
        return x.reshape(b, k, s, n).permute(0, 3, 1, 2)

    def forward(self, chunks: Tensor) -> Tensor:
        if chunks.dim() != 4:
            raise ShapeError(
                f"DualPathBlock: expected [B, N, K, S], got {chunks.dim()} dims"
            )
        return self.inter_pass(self.intra_pass(chunks))


def mbfa(outputs: Sequence[Tensor], decay: float) -> Tensor:
    """Exponentially weighted moving average over block outputs.

    r_j = decay * y_j + (1 - decay) * r_{j-1} with r_0 = 0; returns r_P.
    Later blocks therefore carry geometrically larger weight.
    """
    if len(outputs) == 0:
        raise ConfigError("mbfa: need at least one block output")
    if not (0.0 < decay <= 1.0):
        raise ConfigError(f"mbfa: decay must be in (0, 1], got {decay}")
    acc = torch.zeros_like(outputs[0])
    for y in outputs:
        acc = decay * y + (1.0 - decay) * acc
    return acc


class Separator(nn.Module):
    """Full mixture -> per-speaker estimates pipeline."""

    def __init__(self, cfg: SeparatorConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        n, c = cfg.channels, cfg.num_speakers
        self.encoder = Encoder(n, cfg.encoder_kernel, cfg.encoder_stride)
        self.decoder = Decoder(n, cfg.encoder_kernel, cfg.encoder_stride)
        self.blocks = nn.ModuleList(DualPathBlock(cfg) for _ in range(cfg.num_blocks))
        if cfg.fusion == "concat":
            self.concat_proj = LinearParams(cfg.num_blocks * n, n)
        else:
            self.concat_proj = None
        # gated mask head: PReLU -> pointwise expand to C*N (chunk domain),
        # then after overlap-add a tanh/sigmoid gate pair and ReLU
        self.mask_prelu_slope = nn.Parameter(torch.full((1,), 0.25))
        self.mask_expand = LinearParams(n, c * n)
        self.mask_gate_a = LinearParams(n, n)
        self.mask_gate_b = LinearParams(n, n)

    # -- fusion -----------------------------------------------------------

    def fuse(self, outputs: Sequence[Tensor]) -> Tensor:
        """Merge the P block outputs according to cfg.fusion."""
        kind = self.cfg.fusion
        if kind == "mbfa":
            return mbfa(outputs, self.cfg.mbfa_decay)
        if kind == "sum":
            return torch.stack(tuple(outputs)).sum(dim=0)
        if kind == "concat":
            stacked = torch.cat(tuple(outputs), dim=-3)  # [B, P*N, K, S]
            moved = stacked.movedim(-3, -1)  # [B, K, S, P*N]
            return self.concat_proj(moved).movedim(-1, -3)
        raise ConfigError(f"fuse: unknown fusion strategy '{kind}'")

    # -- mask head --------------------------------------------------------

    def mask_head(self, fused: ChunkTensor) -> Tensor:
        """Fused chunk features -> nonnegative masks [B, C, N, T]."""
        n, c = self.cfg.channels, self.cfg.num_speakers
        x = prelu(fused.data, self.mask_prelu_slope)  # [B, N, K, S]
        x = self.mask_expand(x.movedim(-3, -1)).movedim(-1, -3)  # [B, C*N, K, S]
        feats = overlap_add(fused.with_data(x))  # [B, C*N, T]
        b, _, t = feats.shape
        feats = feats.reshape(b, c, n, t)
        moved = feats.movedim(-2, -1)  # [B, C, T, N]
        gate = torch.tanh(self.mask_gate_a(moved)) * torch.sigmoid(self.mask_gate_b(moved))
        return torch.relu(gate.movedim(-1, -2))

    # -- full pipeline ----------------------------------------------------

    def forward_detailed(self, mix: Tensor) -> dict:
        """Batched forward returning intermediates for inspection/tests."""
        if mix.dim() != 2:
            raise ShapeError(f"Separator: expected mix of shape [B, L], got {mix.dim()} dims")
        num_samples = mix.shape[-1]
        features = self.encoder(mix)  # [B, N, T]
        chunks = segment(features, self.cfg.chunk_size)
        block_outputs: list[Tensor] = []
        x = chunks.data
        for block in self.blocks:
            x = block(x)
            block_outputs.append(x)
        fused = chunks.with_data(self.fuse(block_outputs))
        masks = self.mask_head(fused)  # [B, C, N, T]
        masked = masks * features.unsqueeze(1)  # [B, C, N, T]
        b, c, n, t = masked.shape
        est = self.decoder(masked.reshape(b * c, n, t), out_len=num_samples)
        estimates = est.reshape(b, c, num_samples)
        return {
            "features": features,
            "chunks": chunks,
            "block_outputs": block_outputs,
            "fused": fused,
            "masks": masks,
            "estimates": estimates,
        }

    def forward(self, mix: Tensor) -> Tensor:
        # [B, L] -> [B, C, L]
        return self.forward_detailed(mix)["estimates"]

    def separate(self, w: Waveform) -> list[Waveform]:
        """Single-utterance convenience path used by the CLI."""
        est = self.forward(w.samples.unsqueeze(0)).squeeze(0)  # [C, L]
        return [
            Waveform(samples=est[i], sample_rate=w.sample_rate)
            for i in range(est.shape[0])
        ]

    def num_params(self) -> int:
        return sum(p.numel() for p in self.parameters())


def parameter_manifest(cfg: SeparatorConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Stable (path, shape) listing implied by a config; pure function of cfg."""
    model = Separator(cfg)
    return [(name, tuple(p.shape)) for name, p in model.named_parameters()]

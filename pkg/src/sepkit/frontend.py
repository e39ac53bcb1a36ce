"""Waveform <-> feature-map <-> chunk-tensor conversions.

The learned encoder/decoder pair wraps a strided valid conv and its
transposed counterpart; ``segment`` / ``overlap_add`` are an exactly
inverse pair thanks to coverage-count normalization (frames near the
edges are covered once, interior frames twice at 50% overlap).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, ShapeError
from .primitives import conv1d, transposed_conv1d

Tensor = torch.Tensor


@dataclass
class Waveform:
    """Mono sample sequence plus its sample rate."""

    samples: Tensor  # [T]
    sample_rate: int = 8000
    source_path: Optional[str] = None

    def __len__(self) -> int:
        return int(self.samples.shape[-1])

    @property
    def duration_s(self) -> float:
        return len(self) / self.sample_rate


@dataclass
class FeatureMap:
    """Encoder output: channels x frames, with the frame geometry attached."""

    data: Tensor  # [N, T] or [B, N, T]
    kernel_samples: int
    frame_stride_samples: int


@dataclass
class ChunkTensor:
    """Chunked features [..., K, S] plus the padding needed for exact inversion."""

    data: Tensor  # [..., K, S]
    pad_left: int
    pad_right: int
    original_len: int

    @property
    def chunk_size(self) -> int:
        return int(self.data.shape[-2])

    @property
    def num_chunks(self) -> int:
        return int(self.data.shape[-1])

    @property
    def hop(self) -> int:
        return self.chunk_size // 2

    def with_data(self, data: Tensor) -> "ChunkTensor":
        """Same chunk geometry wrapped around a new payload."""
        if data.shape[-2] != self.chunk_size:
            raise ShapeError(
                f"with_data: chunk dim {data.shape[-2]} != {self.chunk_size}"
            )
        return ChunkTensor(data, self.pad_left, self.pad_right, self.original_len)


def segment(data: Tensor, chunk_size: int) -> ChunkTensor:
    """Split [..., T] into half-overlapping chunks [..., K, S].

    Pads hop frames on the left and at least hop on the right so every
    original frame is interior to the chunk grid; chunk s covers frames
    [s*hop, s*hop + K) of the padded sequence.
    """
    if chunk_size < 2 or chunk_size % 2 != 0:
        raise ConfigError(f"segment: chunk size must be even and >= 2, got {chunk_size}")
    hop = chunk_size // 2
    t = data.shape[-1]
    pad_left = hop
    pad_right = hop + (hop - t % hop) % hop
    padded = F.pad(data, (pad_left, pad_right))
    # unfold yields [..., S, K]; chunk axis goes before the in-chunk axis
    chunks = padded.unfold(-1, chunk_size, hop).transpose(-2, -1).contiguous()
    return ChunkTensor(chunks, pad_left=pad_left, pad_right=pad_right, original_len=t)


def overlap_add(ct: ChunkTensor) -> Tensor:
    """Exact left inverse of :func:`segment` for any leading shape.

    Sums chunk contributions per frame, divides by the per-frame coverage
    count, and strips the padding.
    """
    data = ct.data
    if data.dim() < 2:
        raise ShapeError(f"overlap_add: chunk data must be [..., K, S], got {data.dim()} dims")
    k, s = data.shape[-2], data.shape[-1]
    hop = ct.hop
    padded_len = (s - 1) * hop + k
    expected = ct.pad_left + ct.original_len + ct.pad_right
    if padded_len != expected:
        raise ShapeError(
            f"overlap_add: chunk grid spans {padded_len} frames but padding metadata "
            f"implies {expected}"
        )
    lead = data.shape[:-2]
    m = math.prod(lead) if lead else 1
    cols = data.reshape(m * k, s).unsqueeze(0)  # [1, M*K, S]
    summed = F.fold(
        cols, output_size=(1, padded_len), kernel_size=(1, k), stride=(1, hop)
    )  # [1, M, 1, padded_len]
    ones = torch.ones(1, k, s, dtype=data.dtype, device=data.device)
    coverage = F.fold(
        ones, output_size=(1, padded_len), kernel_size=(1, k), stride=(1, hop)
    )  # [1, 1, 1, padded_len]
    merged = (summed / coverage).reshape(*lead, padded_len)
    return merged[..., ct.pad_left : ct.pad_left + ct.original_len]


class Encoder(nn.Module):
    """Waveform to nonnegative feature map: valid strided conv + ReLU."""

    def __init__(self, channels: int, kernel: int = 16, stride: int = 8):
        super().__init__()
        if kernel < 1 or stride < 1:
            raise ConfigError(
                f"Encoder: kernel and stride must be >= 1, got {kernel}/{stride}"
            )
        self.kernel = kernel
        self.stride = stride
        self.channels = channels
        self.weight = nn.Parameter(torch.empty(channels, 1, kernel))
        self.bias = nn.Parameter(torch.zeros(channels))
        nn.init.kaiming_uniform_(self.weight, a=math.sqrt(5))

    def num_frames(self, num_samples: int) -> int:
        return (num_samples - self.kernel) // self.stride + 1

    def forward(self, wav: Tensor) -> Tensor:
        # [L] -> [N, T] or [B, L] -> [B, N, T]
        if wav.shape[-1] < self.kernel:
            raise ShapeError(
                f"Encoder: input length {wav.shape[-1]} shorter than minimum {self.kernel}"
            )
        x = wav.unsqueeze(-2)
        return torch.relu(conv1d(x, self.weight, self.bias, self.stride))


class Decoder(nn.Module):
    """Masked feature map back to a waveform: transposed conv, trimmed to length."""

    def __init__(self, channels: int, kernel: int = 16, stride: int = 8):
        super().__init__()
        self.kernel = kernel
        self.stride = stride
        self.channels = channels
        self.weight = nn.Parameter(torch.empty(channels, 1, kernel))
        self.bias = nn.Parameter(torch.zeros(1))
        nn.init.kaiming_uniform_(self.weight, a=math.sqrt(5))

    def forward(self, feat: Tensor, out_len: Optional[int] = None) -> Tensor:
        # [N, T] -> [L] or [B, N, T] -> [B, L]
        y = transposed_conv1d(feat, self.weight, self.bias, self.stride).squeeze(-2)
        if out_len is not None:
            have = y.shape[-1]
            if have >= out_len:
                y = y[..., :out_len]
            else:
                y = F.pad(y, (0, out_len - have))
        return y


def encode(w: Waveform, encoder: Encoder) -> FeatureMap:
    """Single-utterance convenience wrapper around :class:`Encoder`."""
    return FeatureMap(
        data=encoder(w.samples),
        kernel_samples=encoder.kernel,
        frame_stride_samples=encoder.stride,
    )


def decode(f: FeatureMap, decoder: Decoder, out_len: Optional[int] = None) -> Waveform:
    """Single-utterance convenience wrapper around :class:`Decoder`."""
    return Waveform(samples=decoder(f.data, out_len=out_len))

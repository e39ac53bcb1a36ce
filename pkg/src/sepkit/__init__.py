"""sepkit: dual-path time-domain speech separation at desk scale.

SE-Conformer intra-chunk / Transformer inter-chunk blocks over a learned
encoder/decoder frontend, multi-block feature aggregation, and a combined
SI-SNR + speaker-similarity training objective, plus a synthetic corpus
generator and a train/evaluate/separate CLI.
"""

from .errors import (
    CheckpointError,
    ConfigError,
    DataError,
    NumericError,
    SepkitError,
    ShapeError,
)
from .frontend import ChunkTensor, FeatureMap, Waveform, overlap_add, segment
from .objectives import (
    LossBreakdown,
    MelStatEmbedder,
    PitResult,
    pit_si_snr,
    sdr,
    sdri,
    si_snr,
    si_snri,
    total_loss,
)
from .separator import Separator, SeparatorConfig, mbfa
from .primitives import GradReport, grad_check

__version__ = "0.1.0"

__all__ = [
    "CheckpointError",
    "ChunkTensor",
    "ConfigError",
    "DataError",
    "FeatureMap",
    "GradReport",
    "LossBreakdown",
    "MelStatEmbedder",
    "NumericError",
    "PitResult",
    "Separator",
    "SeparatorConfig",
    "SepkitError",
    "ShapeError",
    "Waveform",
    "grad_check",
    "mbfa",
    "overlap_add",
    "pit_si_snr",
    "sdr",
    "sdri",
    "segment",
    "si_snr",
    "si_snri",
    "total_loss",
    "__version__",
]

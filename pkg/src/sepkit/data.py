"""Synthetic corpus generation, mixing, wav file I/O, and dataset manifests.

Speakers are harmonic-complex voices drawn from two f0 families (a gender
analog for grouped evaluation); all generation is a pure function of
(config, seed) through the package's own xoshiro PRNG, so corpora are
bit-identical across runs and platforms.
"""

from __future__ import annotations

import json
import math
import struct
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import torch

from .errors import ConfigError, DataError
from .frontend import Waveform
from .rng import Xoshiro256

FAMILIES = ("low_f0", "high_f0")
#: f0 ranges in Hz; disjoint so the families are acoustically separable
FAMILY_F0_RANGES = {"low_f0": (100.0, 140.0), "high_f0": (190.0, 250.0)}
PEAK_NORM = 0.9


# ---------------------------------------------------------------------------
# synthetic speakers and utterances
# ---------------------------------------------------------------------------


@dataclass
class SyntheticSpeaker:
    speaker_id: str
    family: str  # low_f0 | high_f0
    f0_base: float
    f0_jitter: float
    envelope: list[float]  # per-harmonic relative amplitudes

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpeaker":
        return cls(**d)


def make_speaker_pool(
    speakers_per_family: int, seed: int, sample_rate: int = 8000
) -> list[SyntheticSpeaker]:
    """Deterministic speaker pool with both families fully populated."""
    rng = Xoshiro256(seed)
    pool: list[SyntheticSpeaker] = []
    nyquist = sample_rate / 2.0
    for family in FAMILIES:
        lo, hi = FAMILY_F0_RANGES[family]
        for i in range(speakers_per_family):
            f0 = rng.uniform(lo, hi)
            jitter = rng.uniform(1.0, 2.0)
            # spectral tilt differs per speaker; fundamental stays dominant
            tilt = rng.uniform(0.9, 1.6)
            odd_boost = rng.uniform(0.8, 1.2)
            count = min(10, int(0.9 * nyquist / hi))
            envelope = []
            for h in range(count):
                amp = (h + 1) ** (-tilt)
                if h % 2 == 1:
                    amp *= odd_boost
                envelope.append(amp)
            pool.append(
                SyntheticSpeaker(
                    speaker_id=f"{family}_{i:02d}",
                    family=family,
                    f0_base=f0,
                    f0_jitter=jitter,
                    envelope=envelope,
                )
            )
    return pool


def synth_utterance(
    spk: SyntheticSpeaker,
    duration_s: float,
    seed: int,
    sample_rate: int = 8000,
) -> Waveform:
    """Harmonic complex with a slowly wandering f0, peak-normalized to 0.9.

    Deterministic in (speaker, duration, seed). The f0 track is bounded to
    f0_base +- f0_jitter by construction (sum of two slow sinusoids).
    """
    if duration_s <= 0:
        raise ConfigError(f"synth_utterance: duration must be positive, got {duration_s}")
    rng = Xoshiro256(seed)
    n = int(round(duration_s * sample_rate))
    t = np.arange(n, dtype=np.float64) / sample_rate

    # bounded slow f0 wander: two sinusoids with random rates and phases
    rate1, rate2 = rng.uniform(0.4, 1.5), rng.uniform(1.5, 3.0)
    ph1, ph2 = rng.uniform(0, 2 * math.pi), rng.uniform(0, 2 * math.pi)
    wander = 0.5 * (np.sin(2 * math.pi * rate1 * t + ph1) + np.sin(2 * math.pi * rate2 * t + ph2))
    f0 = spk.f0_base + spk.f0_jitter * wander
    phase = 2.0 * math.pi * np.cumsum(f0) / sample_rate

    wave = np.zeros(n, dtype=np.float64)
    for h, amp in enumerate(spk.envelope):
        wave += amp * np.sin((h + 1) * phase + rng.uniform(0, 2 * math.pi))

    # gentle amplitude modulation so utterances are not fully stationary
    am_rate = rng.uniform(0.5, 2.0)
    am_phase = rng.uniform(0, 2 * math.pi)
    wave *= 0.925 + 0.075 * np.sin(2 * math.pi * am_rate * t + am_phase)

    peak = np.abs(wave).max()
    if peak > 0:
        wave *= PEAK_NORM / peak
    return Waveform(samples=torch.from_numpy(wave), sample_rate=sample_rate)


# ---------------------------------------------------------------------------
# mixing
# ---------------------------------------------------------------------------


@dataclass
class NoiseSpec:
    kind: str = "none"  # none | white | babble
    snr_db_range: tuple[float, float] = (5.0, 15.0)

    def validate(self) -> None:
        if self.kind not in ("none", "white", "babble"):
            raise ConfigError(f"noise kind must be none|white|babble, got '{self.kind}'")
        lo, hi = self.snr_db_range
        if lo > hi:
            raise ConfigError(f"noise snr_db_range must satisfy lo <= hi, got ({lo}, {hi})")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "snr_db_range": list(self.snr_db_range)}

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSpec":
        spec = cls(
            kind=d.get("kind", "none"),
            snr_db_range=tuple(d.get("snr_db_range", (5.0, 15.0))),
        )
        spec.validate()
        return spec


def _white_noise(rng: Xoshiro256, n: int) -> np.ndarray:
    return np.array(rng.normals(n), dtype=np.float64)


def _babble_noise(rng: Xoshiro256, n: int, sample_rate: int) -> np.ndarray:
    """Babble-like bed: several drifting harmonic voices summed."""
    total = np.zeros(n, dtype=np.float64)
    t = np.arange(n, dtype=np.float64) / sample_rate
    for _ in range(6):
        f0 = rng.uniform(80.0, 300.0)
        drift = rng.uniform(-10.0, 10.0)
        phase0 = rng.uniform(0, 2 * math.pi)
        track = f0 + drift * t
        phase = 2.0 * math.pi * np.cumsum(track) / sample_rate
        for h in range(4):
            total += (h + 1) ** -1.2 * np.sin((h + 1) * phase + phase0 + h)
    return total


def mix(
    sources: Sequence[Waveform],
    gains_db: Sequence[float],
    noise: NoiseSpec,
    seed: int,
) -> tuple[Waveform, list[Waveform], Optional[float]]:
    """Gain-scale and sum sources, optionally inject noise at a sampled SNR.

    Shorter sources are zero-padded to the longest. The mixture peak is
    renormalized to at most 0.9 and the same factor is applied to the
    returned targets, so mixture == sum(targets) holds exactly when
    noise.kind == "none". Returns (mixture, targets, noise_snr_db).
    """
    if len(sources) != len(gains_db):
        raise ConfigError(f"mix: {len(sources)} sources but {len(gains_db)} gains")
    noise.validate()
    sr = sources[0].sample_rate
    if any(s.sample_rate != sr for s in sources):
        raise DataError("mix: sources disagree on sample rate")
    n = max(len(s) for s in sources)
    rng = Xoshiro256(seed)

    scaled = []
    for s, g in zip(sources, gains_db):
        x = s.samples.detach().cpu().numpy().astype(np.float64)
        x = np.pad(x, (0, n - len(x)))
        scaled.append(x * (10.0 ** (g / 20.0)))
    mixture = np.sum(scaled, axis=0)

    snr_db: Optional[float] = None
    if noise.kind != "none":
        lo, hi = noise.snr_db_range
        snr_db = rng.uniform(lo, hi)
        raw = (
            _white_noise(rng, n)
            if noise.kind == "white"
            else _babble_noise(rng, n, sr)
        )
        sig_power = float(np.mean(mixture**2))
        raw_power = float(np.mean(raw**2))
        if sig_power > 0 and raw_power > 0:
            # exact scaling, so the realized SNR equals the sampled one
            raw = raw * math.sqrt(sig_power / (raw_power * 10.0 ** (snr_db / 10.0)))
        mixture = mixture + raw

    peak = float(np.abs(mixture).max())
    factor = 1.0 if peak <= PEAK_NORM else PEAK_NORM / peak
    mixture *= factor
    targets = [
        Waveform(samples=torch.from_numpy(x * factor), sample_rate=sr) for x in scaled
    ]
    return Waveform(samples=torch.from_numpy(mixture), sample_rate=sr), targets, snr_db


@dataclass
class MixSettings:
    """Knobs for one dynamically mixed example."""

    num_sources: int = 2
    duration_s: float = 0.8
    sample_rate: int = 8000
    gain_range_db: tuple[float, float] = (-2.5, 2.5)
    pairing: str = "cross"  # cross | within | any
    noise: NoiseSpec = field(default_factory=NoiseSpec)

    def validate(self) -> None:
        errs = []
        if self.num_sources < 1:
            errs.append(f"num_sources must be >= 1, got {self.num_sources}")
        if self.duration_s <= 0:
            errs.append(f"duration_s must be positive, got {self.duration_s}")
        if self.sample_rate < 1:
            errs.append(f"sample_rate must be >= 1, got {self.sample_rate}")
        if self.gain_range_db[0] > self.gain_range_db[1]:
            errs.append(f"gain_range_db must satisfy lo <= hi, got {self.gain_range_db}")
        if self.pairing not in ("cross", "within", "any"):
            errs.append(f"pairing must be cross|within|any, got '{self.pairing}'")
        elif self.pairing == "cross" and self.num_sources != 2:
            errs.append("cross pairing requires exactly 2 sources")
        try:
            self.noise.validate()
        except ConfigError as exc:
            errs.extend(exc.problems)
        if errs:
            raise ConfigError(errs)


def _pick_speakers(
    pool: Sequence[SyntheticSpeaker], settings: MixSettings, rng: Xoshiro256
) -> list[SyntheticSpeaker]:
    c = settings.num_sources
    if settings.pairing == "any":
        if len(pool) < c:
            raise DataError(f"speaker pool has {len(pool)} < {c} speakers")
        return [pool[i] for i in rng.sample_distinct(len(pool), c)]
    by_family: dict[str, list[SyntheticSpeaker]] = {}
    for s in pool:
        by_family.setdefault(s.family, []).append(s)
    if settings.pairing == "cross":
        fams = sorted(by_family)
        if len(fams) < 2:
            raise DataError("cross pairing needs speakers from both families")
        a = by_family[fams[0]][rng.randint(len(by_family[fams[0]]))]
        b = by_family[fams[1]][rng.randint(len(by_family[fams[1]]))]
        return [a, b]
    # within: both speakers from one (randomly chosen) family
    fams = sorted(f for f, members in by_family.items() if len(members) >= c)
    if not fams:
        raise DataError(f"no family has {c} distinct speakers for within pairing")
    members = by_family[fams[rng.randint(len(fams))]]
    return [members[i] for i in rng.sample_distinct(len(members), c)]


def dynamic_mix(
    pool: Sequence[SyntheticSpeaker],
    settings: MixSettings,
    rng: Xoshiro256,
) -> tuple[Waveform, list[Waveform], dict]:
    """Fresh random mixture: new speakers, new utterances, new gains.

    Fully determined by the rng state on entry; advances the rng.
    """
    settings.validate()
    speakers = _pick_speakers(pool, settings, rng)
    gains = [rng.uniform(*settings.gain_range_db) for _ in speakers]
    utt_seeds = [rng.next_u64() for _ in speakers]
    mix_seed = rng.next_u64()
    sources = [
        synth_utterance(s, settings.duration_s, seed, settings.sample_rate)
        for s, seed in zip(speakers, utt_seeds)
    ]
    mixture, targets, snr_db = mix(sources, gains, settings.noise, mix_seed)
    meta = {
        "speaker_ids": [s.speaker_id for s in speakers],
        "families": [s.family for s in speakers],
        "gains_db": gains,
        "snr_db": snr_db,
    }
    return mixture, targets, meta


# ---------------------------------------------------------------------------
# wav file I/O (RIFF PCM16 / IEEE float32, mono)
# ---------------------------------------------------------------------------

_WAVE_PCM = 1
_WAVE_FLOAT = 3


def wav_read(path: Union[str, Path]) -> Waveform:
    """Read a mono RIFF/WAVE file (PCM16 or IEEE float32) into [-1, 1]."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read wav file {path}: {exc}") from exc
    if len(raw) < 12 or raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise DataError(f"{path}: not a RIFF/WAVE file")
    pos = 12
    fmt = None
    while pos + 8 <= len(raw):
        chunk_id = raw[pos : pos + 4]
        (size,) = struct.unpack("<I", raw[pos + 4 : pos + 8])
        body_start = pos + 8
        if chunk_id == b"fmt ":
            if body_start + 16 > len(raw):
                raise DataError(f"{path}: truncated fmt chunk")
            fmt = struct.unpack("<HHIIHH", raw[body_start : body_start + 16])
        elif chunk_id == b"data":
            if fmt is None:
                raise DataError(f"{path}: data chunk before fmt chunk")
            audio_format, channels, sample_rate, _, _, bits = fmt
            if channels != 1:
                raise DataError(f"{path}: only mono supported, file has {channels} channels")
            if body_start + size > len(raw):
                raise DataError(f"{path}: unexpected EOF in data chunk")
            body = raw[body_start : body_start + size]
            if audio_format == _WAVE_PCM and bits == 16:
                ints = np.frombuffer(body, dtype="<i2").astype(np.float64)
                samples = ints / 32768.0
            elif audio_format == _WAVE_FLOAT and bits == 32:
                samples = np.frombuffer(body, dtype="<f4").astype(np.float64)
            else:
                raise DataError(
                    f"{path}: unsupported encoding (format {audio_format}, {bits}-bit); "
                    "only PCM16 and IEEE float32 are supported"
                )
            return Waveform(
                samples=torch.from_numpy(samples.copy()),
                sample_rate=sample_rate,
                source_path=str(path),
            )
        pos = body_start + size + (size % 2)  # chunks are word-aligned
    raise DataError(f"{path}: no data chunk found")


def wav_write(path: Union[str, Path], w: Waveform) -> None:
    """Write mono PCM16 little-endian; samples beyond [-1, 1] are clipped."""
    path = Path(path)
    x = w.samples.detach().cpu().numpy().astype(np.float64)
    peak = float(np.abs(x).max()) if x.size else 0.0
    if peak > 1.0:
        warnings.warn(f"wav_write {path}: clipping samples with |x| up to {peak:.3f}")
        x = np.clip(x, -1.0, 1.0)
    ints = np.round(x * 32767.0).astype("<i2")
    body = ints.tobytes()
    with open(path, "wb") as fh:
        fh.write(b"RIFF")
        fh.write(struct.pack("<I", 36 + len(body)))
        fh.write(b"WAVE")
        fh.write(b"fmt ")
        fh.write(struct.pack("<IHHIIHH", 16, _WAVE_PCM, 1, w.sample_rate,
                             w.sample_rate * 2, 2, 16))
        fh.write(b"data")
        fh.write(struct.pack("<I", len(body)))
        fh.write(body)


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------


@dataclass
class MixtureRecord:
    mixture_path: str
    source_paths: list[str]
    speaker_ids: list[str]
    families: list[str]
    snr_db: Optional[float]  # None for noiseless mixtures
    sample_rate: int
    num_samples: int

    def to_dict(self) -> dict:
        return asdict(self)


_RECORD_FIELDS = [f.name for f in fields(MixtureRecord)]


def manifest_write(records: Sequence[MixtureRecord], path: Union[str, Path]) -> None:
    """JSON-lines manifest, one record per line, UTF-8."""
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")


def manifest_read(
    path: Union[str, Path], require_files: bool = True
) -> list[MixtureRecord]:
    """Parse and validate a manifest; errors name the offending line and field.

    Relative paths are interpreted against the manifest's directory. With
    ``require_files`` every referenced file must exist.
    """
    path = Path(path)
    base = path.parent
    records: list[MixtureRecord] = []
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}:{lineno}: invalid JSON ({exc})") from exc
        for name in _RECORD_FIELDS:
            if name not in obj:
                raise DataError(f"{path}:{lineno}: missing field '{name}'")
        unknown = sorted(set(obj) - set(_RECORD_FIELDS))
        if unknown:
            raise DataError(f"{path}:{lineno}: unknown field '{unknown[0]}'")
        rec = MixtureRecord(**obj)
        if len(rec.source_paths) != len(rec.speaker_ids) or len(rec.source_paths) != len(
            rec.families
        ):
            raise DataError(
                f"{path}:{lineno}: source_paths/speaker_ids/families lengths disagree"
            )
        rec.mixture_path = str((base / rec.mixture_path))
        rec.source_paths = [str(base / p) for p in rec.source_paths]
        if require_files:
            for p in [rec.mixture_path, *rec.source_paths]:
                if not Path(p).exists():
                    raise DataError(f"{path}:{lineno}: referenced file missing: {p}")
        records.append(rec)
    return records


# ---------------------------------------------------------------------------
# corpus builder
# ---------------------------------------------------------------------------


@dataclass
class CorpusConfig:
    """Synthetic corpus layout; a pure function of (config, seed)."""

    seed: int = 0
    sample_rate: int = 8000
    duration_s: float = 0.8
    speakers_per_family: int = 10
    train_speakers_per_family: int = 6
    val_speakers_per_family: int = 2
    # remaining speakers go to test
    train_mixtures: int = 200
    val_mixtures: int = 20
    test_mixtures: int = 20
    num_sources: int = 2
    pairing: str = "cross"
    gain_range_db: tuple[float, float] = (-2.5, 2.5)
    noise: NoiseSpec = field(default_factory=NoiseSpec)

    def validate(self) -> None:
        errs = []
        reserved = self.train_speakers_per_family + self.val_speakers_per_family
        if self.speakers_per_family < 2:
            errs.append(f"speakers_per_family must be >= 2, got {self.speakers_per_family}")
        if reserved >= self.speakers_per_family:
            errs.append(
                "train+val speakers per family must leave at least one test speaker "
                f"({reserved} reserved of {self.speakers_per_family})"
            )
        if min(self.train_speakers_per_family, self.val_speakers_per_family) < 1:
            errs.append("each split needs at least one speaker per family")
        for name in ("train_mixtures", "val_mixtures", "test_mixtures"):
            if getattr(self, name) < 1:
                errs.append(f"{name} must be >= 1, got {getattr(self, name)}")
        try:
            self.mix_settings().validate()
        except ConfigError as exc:
            errs.extend(exc.problems)
        if errs:
            raise ConfigError(errs)

    def mix_settings(self) -> MixSettings:
        return MixSettings(
            num_sources=self.num_sources,
            duration_s=self.duration_s,
            sample_rate=self.sample_rate,
            gain_range_db=tuple(self.gain_range_db),
            pairing=self.pairing,
            noise=self.noise,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["gain_range_db"] = list(self.gain_range_db)
        d["noise"] = self.noise.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError([f"unknown corpus config field '{k}'" for k in unknown])
        kwargs = dict(d)
        if "noise" in kwargs:
            kwargs["noise"] = NoiseSpec.from_dict(kwargs["noise"])
        if "gain_range_db" in kwargs:
            kwargs["gain_range_db"] = tuple(kwargs["gain_range_db"])
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg


def split_speaker_pool(cfg: CorpusConfig) -> dict[str, list[SyntheticSpeaker]]:
    """Disjoint train/val/test speakers so evaluation is on unseen voices."""
    pool = make_speaker_pool(cfg.speakers_per_family, cfg.seed, cfg.sample_rate)
    splits: dict[str, list[SyntheticSpeaker]] = {"train": [], "val": [], "test": []}
    for family in FAMILIES:
        members = [s for s in pool if s.family == family]
        n_train = cfg.train_speakers_per_family
        n_val = cfg.val_speakers_per_family
        splits["train"].extend(members[:n_train])
        splits["val"].extend(members[n_train : n_train + n_val])
        splits["test"].extend(members[n_train + n_val :])
    return splits


def build_corpus(cfg: CorpusConfig, out_dir: Union[str, Path]) -> dict[str, Path]:
    """Generate wavs + JSON-lines manifests for train/val/test splits.

    Returns a mapping split -> manifest path. The speaker pool (with the
    split assignment) is saved as speakers.json for dynamic-mixing reuse.
    """
    cfg.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    splits = split_speaker_pool(cfg)
    (out / "speakers.json").write_text(
        json.dumps(
            {name: [s.to_dict() for s in members] for name, members in splits.items()},
            indent=2,
            sort_keys=True,
        )
    )
    settings = cfg.mix_settings()
    counts = {
        "train": cfg.train_mixtures,
        "val": cfg.val_mixtures,
        "test": cfg.test_mixtures,
    }
    manifests: dict[str, Path] = {}
    for split_index, (split, count) in enumerate(counts.items()):
        split_dir = out / split
        split_dir.mkdir(exist_ok=True)
        rng = Xoshiro256(cfg.seed).spawn(split_index + 1)
        records: list[MixtureRecord] = []
        for i in range(count):
            mixture, targets, meta = dynamic_mix(splits[split], settings, rng)
            mix_name = f"{split}/mix_{i:04d}.wav"
            wav_write(out / mix_name, mixture)
            src_names = []
            for c, target in enumerate(targets):
                src_name = f"{split}/src_{i:04d}_{c}.wav"
                wav_write(out / src_name, target)
                src_names.append(src_name)
            records.append(
                MixtureRecord(
                    mixture_path=mix_name,
                    source_paths=src_names,
                    speaker_ids=meta["speaker_ids"],
                    families=meta["families"],
                    snr_db=meta["snr_db"],
                    sample_rate=cfg.sample_rate,
                    num_samples=len(mixture),
                )
            )
        manifest_path = out / f"{split}.jsonl"
        manifest_write(records, manifest_path)
        manifests[split] = manifest_path
    return manifests


def family_separability(
    pool: Sequence[SyntheticSpeaker],
    embedder,
    utterances: int = 50,
    duration_s: float = 0.8,
    sample_rate: int = 8000,
    seed: int = 1234,
) -> dict[str, float]:
    """Mean same-family vs cross-family embedding cosine on fresh utterances.

    Used at corpus-build time as a sanity gate: same-family cosine must
    exceed cross-family cosine for the speaker loss to be meaningful.
    """
    rng = Xoshiro256(seed)
    embs = []
    fams = []
    for i in range(utterances):
        spk = pool[rng.randint(len(pool))]
        w = synth_utterance(spk, duration_s, rng.next_u64(), sample_rate)
        embs.append(embedder.embed(w))
        fams.append(spk.family)
    same, cross = [], []
    for i in range(len(embs)):
        for j in range(i + 1, len(embs)):
            cos = float((embs[i] * embs[j]).sum())
            (same if fams[i] == fams[j] else cross).append(cos)
    return {
        "same_family_cosine": sum(same) / max(len(same), 1),
        "cross_family_cosine": sum(cross) / max(len(cross), 1),
    }

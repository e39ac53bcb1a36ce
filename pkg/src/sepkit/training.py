"""Training loop, checkpointing glue, and manifest evaluation.

A run is a pure function of (config, seed): batch order, dynamic mixing,
and validation all draw from one serializable xoshiro stream, so metrics
logs reproduce bit-identically and training resumes exactly from a
checkpoint.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .data import (
    CorpusConfig,
    MixtureRecord,
    SyntheticSpeaker,
    dynamic_mix,
    manifest_read,
    split_speaker_pool,
    wav_read,
)
from .errors import CheckpointError, ConfigError, DataError, ShapeError
from .frontend import Waveform
from .objectives import MelStatEmbedder, pit_si_snr, sdr, si_snr, total_loss
from .optim import AdamState, adam_step, clip_grad_norm, lr_schedule
from .rng import Xoshiro256
from .separator import Separator, SeparatorConfig

Tensor = torch.Tensor


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    """Everything a training run needs; JSON-visible and fully validated."""

    model: SeparatorConfig = field(default_factory=SeparatorConfig)
    seed: int = 0
    lr: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 5.0
    batch_size: int = 4
    epochs: int = 4
    steps_per_epoch: int = 100
    alpha: float = 1.0
    warmup_epochs: int = 5
    data_mode: str = "manifest"  # manifest | dynamic
    corpus_dir: Optional[str] = None  # manifest mode
    corpus: Optional[CorpusConfig] = None  # dynamic mode
    val_mixtures: int = 20  # dynamic mode validation set size
    out_dir: str = "run"

    def problems(self) -> list[str]:
        errs = [f"model.{p}" for p in self.model.problems()]
        if self.lr <= 0:
            errs.append(f"lr must be positive, got {self.lr}")
        if not (0.0 <= self.adam_beta1 < 1.0) or not (0.0 <= self.adam_beta2 < 1.0):
            errs.append(
                f"adam betas must be in [0, 1), got {self.adam_beta1}/{self.adam_beta2}"
            )
        if self.adam_eps <= 0:
            errs.append(f"adam_eps must be positive, got {self.adam_eps}")
        if self.clip_norm < 0:
            errs.append(f"clip_norm must be >= 0 (0 disables), got {self.clip_norm}")
        if self.batch_size < 1:
            errs.append(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            errs.append(f"epochs must be >= 1, got {self.epochs}")
        if self.steps_per_epoch < 1:
            errs.append(f"steps_per_epoch must be >= 1, got {self.steps_per_epoch}")
        if self.alpha < 0:
            errs.append(f"alpha must be >= 0, got {self.alpha}")
        if self.warmup_epochs < 0:
            errs.append(f"warmup_epochs must be >= 0, got {self.warmup_epochs}")
        if self.data_mode not in ("manifest", "dynamic"):
            errs.append(f"data_mode must be manifest|dynamic, got '{self.data_mode}'")
        elif self.data_mode == "manifest":
            if not self.corpus_dir:
                errs.append("manifest mode requires corpus_dir")
        else:
            if self.corpus is None:
                errs.append("dynamic mode requires a corpus section")
            if self.val_mixtures < 1:
                errs.append(f"val_mixtures must be >= 1, got {self.val_mixtures}")
        return errs

    def validate(self) -> None:
        errs = self.problems()
        if errs:
            raise ConfigError(errs)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        d["corpus"] = self.corpus.to_dict() if self.corpus is not None else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        problems = [f"unknown train config field '{k}'" for k in sorted(set(d) - known)]
        kwargs = dict(d)
        for key in list(kwargs):
            if key not in known:
                kwargs.pop(key)
        try:
            if "model" in kwargs and kwargs["model"] is not None:
                kwargs["model"] = SeparatorConfig.from_dict(kwargs["model"])
        except ConfigError as exc:
            problems.extend(f"model.{p}" for p in exc.problems)
            kwargs.pop("model")
        try:
            if kwargs.get("corpus") is not None:
                kwargs["corpus"] = CorpusConfig.from_dict(kwargs["corpus"])
        except ConfigError as exc:
            problems.extend(f"corpus.{p}" for p in exc.problems)
            kwargs.pop("corpus")
        cfg = cls(**kwargs)
        problems.extend(p for p in cfg.problems() if not p.startswith("model."))
        if problems:
            raise ConfigError(problems)
        return cfg

    @classmethod
    def from_json(cls, path: Union[str, Path]) -> "TrainConfig":
        path = Path(path)
        try:
            obj = json.loads(path.read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError([f"cannot read config {path}: {exc}"]) from exc
        except json.JSONDecodeError as exc:
            raise ConfigError([f"{path}: invalid JSON: {exc}"]) from exc
        if not isinstance(obj, dict):
            raise ConfigError([f"{path}: top level must be a JSON object"])
        return cls.from_dict(obj)


# ---------------------------------------------------------------------------
# data sources
# ---------------------------------------------------------------------------


class _Item:
    """One training example held in memory as float32 tensors."""

    __slots__ = ("mix", "refs", "families", "speaker_ids")

    def __init__(self, mix: Tensor, refs: list[Tensor], families, speaker_ids):
        self.mix = mix
        self.refs = refs
        self.families = families
        self.speaker_ids = speaker_ids


def _load_manifest_items(manifest_path: Path) -> list[_Item]:
    records = manifest_read(manifest_path, require_files=True)
    items = []
    for rec in records:
        mix_w = wav_read(rec.mixture_path)
        refs = [wav_read(p).samples.float() for p in rec.source_paths]
        items.append(_Item(mix_w.samples.float(), refs, rec.families, rec.speaker_ids))
    return items


class _ManifestSource:
    """Fixed corpus sampled with replacement through the trainer's rng."""

    def __init__(self, corpus_dir: Path):
        train_manifest = corpus_dir / "train.jsonl"
        val_manifest = corpus_dir / "val.jsonl"
        for p in (train_manifest, val_manifest):
            if not p.exists():
                raise DataError(f"corpus dir {corpus_dir} is missing {p.name}")
        self.train_items = _load_manifest_items(train_manifest)
        self.val_items = _load_manifest_items(val_manifest)
        if not self.train_items or not self.val_items:
            raise DataError(f"corpus dir {corpus_dir} has an empty split")

    def batch(self, size: int, rng: Xoshiro256) -> list[_Item]:
        return [self.train_items[rng.randint(len(self.train_items))] for _ in range(size)]


class _DynamicSource:
    """On-the-fly dynamic mixing from the train speaker split."""

    def __init__(self, corpus: CorpusConfig, val_mixtures: int):
        splits = split_speaker_pool(corpus)
        self.pool = splits["train"]
        self.settings = corpus.mix_settings()
        # validation set is fixed up front from held-out speakers
        val_rng = Xoshiro256(corpus.seed).spawn(2)
        self.val_items = []
        for _ in range(val_mixtures):
            mixture, targets, meta = dynamic_mix(splits["val"], self.settings, val_rng)
            self.val_items.append(
                _Item(
                    mixture.samples.float(),
                    [t.samples.float() for t in targets],
                    meta["families"],
                    meta["speaker_ids"],
                )
            )

    def batch(self, size: int, rng: Xoshiro256) -> list[_Item]:
        out = []
        for _ in range(size):
            mixture, targets, meta = dynamic_mix(self.pool, self.settings, rng)
            out.append(
                _Item(
                    mixture.samples.float(),
                    [t.samples.float() for t in targets],
                    meta["families"],
                    meta["speaker_ids"],
                )
            )
        return out


def _pad_batch(items: Sequence[_Item]) -> tuple[Tensor, list[int]]:
    """Stack mixtures, zero-padding to the longest; losses use true lengths."""
    lengths = [int(it.mix.shape[-1]) for it in items]
    longest = max(lengths)
    mixes = torch.zeros(len(items), longest)
    for i, it in enumerate(items):
        mixes[i, : lengths[i]] = it.mix
    return mixes, lengths


# ---------------------------------------------------------------------------
# trainer
# ---------------------------------------------------------------------------


class Trainer:
    """Deterministic Adam training of the separator with PIT + speaker loss."""

    def __init__(self, cfg: TrainConfig):
        cfg.validate()
        self.cfg = cfg
        self.out_dir = Path(cfg.out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)

        torch.manual_seed(cfg.seed)
        self.model = Separator(cfg.model)
        self.params = dict(self.model.named_parameters())
        self.adam = AdamState.init_like(self.params)
        self.rng = Xoshiro256(cfg.seed)
        self.embedder = MelStatEmbedder()

        if cfg.data_mode == "manifest":
            self.source = _ManifestSource(Path(cfg.corpus_dir))
        else:
            self.source = _DynamicSource(cfg.corpus, cfg.val_mixtures)

        self.epoch = 0
        self.step = 0
        self.val_loss_history: list[float] = []
        self.best_val = math.inf
        self._metrics_path = self.out_dir / "metrics.jsonl"

    # -- persistence -------------------------------------------------------

    def _train_state(self) -> dict:
        return {
            "step": self.step,
            "epoch": self.epoch,
            "lr": self.current_lr(),
            "adam_step": self.adam.step,
            "val_loss_history": self.val_loss_history,
            "best_val": self.best_val,
            "rng_state": [str(w) for w in self.rng.get_state()],
        }

    def save(self, path: Union[str, Path]) -> None:
        tensors = dict(self.params)
        for name, t in self.adam.m.items():
            tensors[f"adam.m.{name}"] = t
        for name, t in self.adam.v.items():
            tensors[f"adam.v.{name}"] = t
        save_checkpoint(path, self.cfg.to_dict(), tensors, self._train_state())

    def restore(self, path: Union[str, Path]) -> None:
        ckpt = load_checkpoint(path)
        stored_model = ckpt.config.get("model")
        if stored_model != self.cfg.model.to_dict():
            raise ConfigError(
                ["checkpoint model config does not match the requested config"]
            )
        apply_tensors(self.model, ckpt.tensors)
        for name in self.adam.m:
            self.adam.m[name] = ckpt.tensors[f"adam.m.{name}"].clone()
            self.adam.v[name] = ckpt.tensors[f"adam.v.{name}"].clone()
        self.params = dict(self.model.named_parameters())
        state = ckpt.train_state
        self.step = int(state["step"])
        self.epoch = int(state["epoch"])
        self.adam.step = int(state["adam_step"])
        self.val_loss_history = [float(x) for x in state["val_loss_history"]]
        self.best_val = float(state["best_val"])
        self.rng.set_state([int(w) for w in state["rng_state"]])

    # -- steps -------------------------------------------------------------

    def current_lr(self) -> float:
        return self.cfg.lr * lr_schedule(
            len(self.val_loss_history), self.val_loss_history, self.cfg.warmup_epochs
        )

    def _batch_losses(self, items: Sequence[_Item]) -> dict:
        mixes, lengths = _pad_batch(items)
        est = self.model(mixes)  # [B, C, Lmax]
        totals, si_parts, spk_parts = [], [], []
        for i, item in enumerate(items):
            n = lengths[i]
            ests_i = [est[i, c, :n] for c in range(est.shape[1])]
            refs_i = [r[:n] for r in item.refs]
            lb = total_loss(
                refs_i,
                ests_i,
                self.embedder,
                alpha=self.cfg.alpha,
                sample_rate=self.cfg.model.sample_rate,
            )
            totals.append(lb.total)
            si_parts.append(lb.si_snr_loss.detach())
            spk_parts.append(lb.spk_loss.detach())
        return {
            "total": torch.stack(totals).mean(),
            "si_snr_loss": torch.stack(si_parts).mean().item(),
            "spk_loss": torch.stack(spk_parts).mean().item(),
        }

    def train_step(self) -> dict:
        items = self.source.batch(self.cfg.batch_size, self.rng)
        self.model.zero_grad(set_to_none=True)
        losses = self._batch_losses(items)
        losses["total"].backward()
        grads = {
            name: p.grad for name, p in self.params.items() if p.grad is not None
        }
        clip_grad_norm(grads, self.cfg.clip_norm)
        adam_step(
            self.params,
            grads,
            self.adam,
            lr=self.current_lr(),
            beta1=self.cfg.adam_beta1,
            beta2=self.cfg.adam_beta2,
            eps=self.cfg.adam_eps,
        )
        self.step += 1
        return {
            "loss": losses["total"].item(),
            "si_snr_loss": losses["si_snr_loss"],
            "spk_loss": losses["spk_loss"],
        }

    @torch.no_grad()
    def validate(self) -> dict:
        items = self.source.val_items
        totals, spks, improvements = [], [], []
        for item in items:
            est = self.model(item.mix.unsqueeze(0)).squeeze(0)
            ests = [est[c] for c in range(est.shape[0])]
            lb = total_loss(
                item.refs,
                ests,
                self.embedder,
                alpha=self.cfg.alpha,
                sample_rate=self.cfg.model.sample_rate,
            )
            totals.append(lb.total.item())
            spks.append(lb.spk_loss.item())
            baseline = sum(
                si_snr(item.mix, r).item() for r in item.refs
            ) / len(item.refs)
            improvements.append(lb.pit.mean_si_snr - baseline)
        n = len(items)
        return {
            "val_loss": sum(totals) / n,
            "val_spk_loss": sum(spks) / n,
            "val_si_snri": sum(improvements) / n,
        }

    # -- run ---------------------------------------------------------------

    def run(
        self,
        log_fn: Optional[Callable[[str], None]] = None,
        stop_at_si_snri: Optional[float] = None,
    ) -> dict:
        """Train for cfg.epochs epochs, appending one metrics line per epoch.

        ``stop_at_si_snri`` ends training early once the validation
        improvement reaches the requested dB (checked per epoch).
        """
        cfg = self.cfg
        effective = self.out_dir / "effective_config.json"
        effective.write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
        mode = "a" if self.epoch > 0 and self._metrics_path.exists() else "w"
        last_line = None
        with open(self._metrics_path, mode, encoding="utf-8") as metrics:
            while self.epoch < cfg.epochs:
                self.epoch += 1
                lr_now = self.current_lr()
                train_losses = []
                spk_losses = []
                for _ in range(cfg.steps_per_epoch):
                    out = self.train_step()
                    train_losses.append(out["loss"])
                    spk_losses.append(out["spk_loss"])
                val = self.validate()
                self.val_loss_history.append(val["val_loss"])
                line = {
                    "epoch": self.epoch,
                    "step": self.step,
                    "lr": lr_now,
                    "train_loss": sum(train_losses) / len(train_losses),
                    "train_spk_loss": sum(spk_losses) / len(spk_losses),
                    "val_loss": val["val_loss"],
                    "val_spk_loss": val["val_spk_loss"],
                    "val_si_snri": val["val_si_snri"],
                }
                metrics.write(json.dumps(line, sort_keys=True) + "\n")
                metrics.flush()
                if log_fn:
                    log_fn(
                        f"epoch {self.epoch}: step {self.step} lr {lr_now:.2e} "
                        f"train {line['train_loss']:.3f} val {line['val_loss']:.3f} "
                        f"val_si_snri {line['val_si_snri']:.2f} dB"
                    )
                self.save(self.out_dir / "ckpt_last.isct")
                if val["val_loss"] < self.best_val:
                    self.best_val = val["val_loss"]
                    self.save(self.out_dir / "ckpt_best.isct")
                last_line = line
                if stop_at_si_snri is not None and val["val_si_snri"] >= stop_at_si_snri:
                    break
        return last_line or {}


def apply_tensors(model: Separator, tensors: dict[str, Tensor]) -> None:
    """Copy checkpoint tensors into a model; shape errors name the tensor path."""
    params = dict(model.named_parameters())
    for name, p in params.items():
        if name not in tensors:
            raise CheckpointError(f"checkpoint is missing tensor '{name}'")
        t = tensors[name]
        if tuple(t.shape) != tuple(p.shape):
            raise ShapeError(
                f"tensor '{name}' has shape {tuple(t.shape)}, model expects "
                f"{tuple(p.shape)}"
            )
        with torch.no_grad():
            p.copy_(t.to(p.dtype))


def load_model(path: Union[str, Path]) -> tuple[Separator, dict]:
    """Build the model a checkpoint describes and load its weights."""
    ckpt = load_checkpoint(path)
    model_cfg = ckpt.config.get("model")
    if model_cfg is None:
        raise CheckpointError(f"{path}: checkpoint has no model config")
    cfg = SeparatorConfig.from_dict(model_cfg)
    model = Separator(cfg)
    apply_tensors(model, ckpt.tensors)
    model.eval()
    return model, ckpt.config


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

_FAMILY_INITIALS = {"low_f0": "L", "high_f0": "H"}


def _group_label(families: Sequence[str]) -> str:
    initials = sorted(_FAMILY_INITIALS.get(f, f[:1].upper()) for f in families)
    return "".join(initials)


@dataclass
class EvalReport:
    utterances: list[dict]
    groups: dict[str, dict]
    overall: dict
    missing: list[str]

    def to_dict(self) -> dict:
        return asdict(self)


SeparateFn = Callable[[Waveform], list[Waveform]]


def evaluate_records(
    separate_fn: SeparateFn, records: Sequence[MixtureRecord]
) -> EvalReport:
    """Per-utterance SI-SNRi / SDRi with PIT alignment plus grouped means.

    Utterances whose files are missing are listed and skipped; the rest
    are still evaluated.
    """
    utterances: list[dict] = []
    missing: list[str] = []
    for rec in records:
        paths = [rec.mixture_path, *rec.source_paths]
        absent = [p for p in paths if not Path(p).exists()]
        if absent:
            missing.extend(absent)
            continue
        mix_w = wav_read(rec.mixture_path)
        refs = [wav_read(p) for p in rec.source_paths]
        with torch.no_grad():
            ests = separate_fn(mix_w)
        pit = pit_si_snr(ests, refs)
        baseline_si = sum(si_snr(mix_w, r).item() for r in refs) / len(refs)
        # SDR under the PIT assignment vs the mixture baseline
        sdr_pairs = [
            sdr(ests[i], refs[j]).item() for i, j in enumerate(pit.permutation)
        ]
        baseline_sdr = sum(sdr(mix_w, r).item() for r in refs) / len(refs)
        utterances.append(
            {
                "mixture": rec.mixture_path,
                "group": _group_label(rec.families),
                "si_snri": pit.mean_si_snr - baseline_si,
                "sdri": sum(sdr_pairs) / len(sdr_pairs) - baseline_sdr,
            }
        )
    groups: dict[str, dict] = {}
    for u in utterances:
        g = groups.setdefault(u["group"], {"count": 0, "si_snri": 0.0, "sdri": 0.0})
        g["count"] += 1
        g["si_snri"] += u["si_snri"]
        g["sdri"] += u["sdri"]
    for g in groups.values():
        g["si_snri"] /= g["count"]
        g["sdri"] /= g["count"]
    n = len(utterances)
    overall = {
        "count": n,
        "si_snri": sum(u["si_snri"] for u in utterances) / n if n else float("nan"),
        "sdri": sum(u["sdri"] for u in utterances) / n if n else float("nan"),
    }
    return EvalReport(
        utterances=utterances,
        groups=dict(sorted(groups.items())),
        overall=overall,
        missing=missing,
    )


def evaluate_manifest(model: Separator, manifest_path: Union[str, Path]) -> EvalReport:
    records = manifest_read(manifest_path, require_files=False)
    return evaluate_records(model.separate, records)


def render_report(report: EvalReport) -> str:
    """Human-readable per-group table."""
    lines = [f"{'group':<8}{'count':>6}{'SI-SNRi':>10}{'SDRi':>10}"]
    for label, g in report.groups.items():
        lines.append(
            f"{label:<8}{g['count']:>6}{g['si_snri']:>10.2f}{g['sdri']:>10.2f}"
        )
    o = report.overall
    lines.append(f"{'AVG':<8}{o['count']:>6}{o['si_snri']:>10.2f}{o['sdri']:>10.2f}")
    if report.missing:
        lines.append(f"missing files: {len(report.missing)}")
        lines.extend(f"  {p}" for p in report.missing)
    return "\n".join(lines)

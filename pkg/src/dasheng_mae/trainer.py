"""Manifests, crop batching, the epoch loop and checkpoint persistence.

Every random choice in a run is drawn from a stream keyed by
``(seed, purpose, step)``, so a run resumed from a checkpoint replays exactly
the batches and masks an uninterrupted run would have used.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .audio import SAMPLE_RATE, Waveform, logmel, read_audio, resample
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .errors import DomainError, FormatError, NumericalError
from .model import MaskedAutoencoder, ModelConfig, preset
from .numerics import Rng, Tensor, no_grad
from .optim import AdamW, ScheduleConfig, lr_at, recipe
from .tokens import chunk_frames, sample_mask

log = logging.getLogger(__name__)

STREAM_BATCH = 1
STREAM_MASK = 2
STREAM_VAL = 3
MAX_DECODE_RETRIES = 10
FORMAT_NAME = "dasheng-mae"


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------


@dataclass
class ManifestEntry:
    path: str
    label: str | None = None
    duration: float | None = None
    line: int = 0
    exists: bool = True

    @property
    def id(self) -> str:
        return os.path.splitext(os.path.basename(self.path))[0]


@dataclass
class Manifest:
    entries: list = field(default_factory=list)
    rejected: list = field(default_factory=list)  # (line number, reason)
    source: str | None = None

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)


def load_manifest(path) -> Manifest:
    """Parse a JSON-lines manifest of ``{"path", "label"?, "duration"?}`` objects.

    Relative paths resolve against the manifest's directory. Malformed lines
    are rejected with their line number; more than half malformed aborts.
    """
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise OSError(f"cannot read manifest {path}: {exc}") from exc
    base = os.path.dirname(os.path.abspath(path))
    m = Manifest(source=str(path))
    n_lines = 0
    for lineno, raw in enumerate(lines, start=1):
        if not raw.strip():
            continue
        n_lines += 1
        try:
            obj = json.loads(raw)
        except json.JSONDecodeError as exc:
            m.rejected.append((lineno, f"invalid JSON: {exc.msg}"))
            continue
        if not isinstance(obj, dict) or not isinstance(obj.get("path"), str):
            m.rejected.append((lineno, 'missing "path"'))
            continue
        p = obj["path"] if os.path.isabs(obj["path"]) else os.path.join(base, obj["path"])
        label = obj.get("label")
        duration = obj.get("duration")
        entry = ManifestEntry(p, None if label is None else str(label), duration, lineno, os.path.exists(p))
        if not entry.exists:
            log.warning("%s:%d: %s does not exist", path, lineno, p)
        m.entries.append(entry)
    for lineno, reason in m.rejected:
        log.warning("%s:%d: rejected (%s)", path, lineno, reason)
    if n_lines == 0:
        log.warning("manifest %s is empty", path)
    elif len(m.rejected) * 2 > n_lines:
        raise FormatError(f"manifest {path}: {len(m.rejected)} of {n_lines} lines malformed")
    return m


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    preset: str = "tiny"
    model: dict | None = None
    batch_size: int = 32
    batches_per_epoch: int = 100
    epochs: int = 10
    seed: int = 0
    crop_seconds: float = 10.0
    peak_lr: float | None = None  # None: the preset's recipe
    weight_decay: float | None = None
    warmup_epochs: int = 3
    dtype: str = "float32"

    def __post_init__(self):
        lr, wd = recipe(self.preset if self.model is None else None)
        if self.peak_lr is None:
            self.peak_lr = lr
        if self.weight_decay is None:
            self.weight_decay = wd
        for name in ("batch_size", "batches_per_epoch", "crop_seconds", "peak_lr"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.epochs < 0 or self.warmup_epochs < 0 or self.weight_decay < 0:
            raise ValueError("epochs, warmup_epochs and weight_decay must be non-negative")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @property
    def crop_samples(self) -> int:
        return int(round(self.crop_seconds * SAMPLE_RATE))

    @property
    def total_steps(self) -> int:
        return self.epochs * self.batches_per_epoch

    def model_config(self) -> ModelConfig:
        return ModelConfig.from_dict(self.model) if self.model is not None else preset(self.preset)

    def schedule(self) -> ScheduleConfig | None:
        """Warm-up/cosine schedule; ``None`` when the run has fewer than two steps."""
        total = self.total_steps
        if total < 2:
            return None
        warm = min(max(self.warmup_epochs * self.batches_per_epoch, 1), total - 1)
        return ScheduleConfig(warm, total, self.peak_lr)

    def lr(self, step: int) -> float:
        sched = self.schedule()
        return self.peak_lr if sched is None else lr_at(step, sched)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.model_config()  # validate eagerly
        return cfg

    @classmethod
    def from_json(cls, path) -> TrainConfig:
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


class ClipCache:
    """Decoded, 16 kHz waveforms keyed by path."""

    def __init__(self):
        self._clips = {}

    def get(self, path: str) -> Waveform:
        w = self._clips.get(path)
        if w is None:
            w = resample(read_audio(path))
            if len(w) == 0:
                raise FormatError(f"{path}: no samples")
            self._clips[path] = w
        return w


def crop(samples: np.ndarray, length: int, start: int) -> np.ndarray:
    """``length`` samples starting at ``start``, tiling the clip when it is too short."""
    n = len(samples)
    if n >= length:
        return samples[start : start + length]
    reps = -(-(start + length) // n)
    return np.tile(samples, reps)[start : start + length]


def sample_batch(manifest: Manifest, rng: Rng, cfg: TrainConfig, cache: ClipCache | None = None) -> list:
    """Draw ``cfg.batch_size`` crops with replacement: uniform clip, then uniform crop offset.

    Clips that fail to decode are skipped (logged) and another clip is drawn
    from the same example's stream, up to a bounded number of retries.
    """
    if len(manifest) == 0:
        raise DomainError("cannot sample from an empty manifest")
    cache = cache or ClipCache()
    length = cfg.crop_samples
    batch = []
    for i in range(cfg.batch_size):
        r = rng.split(i)
        for attempt in range(MAX_DECODE_RETRIES):
            entry = manifest.entries[int(r.integers(len(manifest)))]
            try:
                clip = cache.get(entry.path).samples
            except (OSError, FormatError, DomainError) as exc:
                log.warning("skipping %s: %s", entry.path, exc)
                continue
            hi = len(clip) - length if len(clip) >= length else len(clip) - 1
            start = int(r.integers(hi + 1))
            batch.append(Waveform(crop(clip, length, start), SAMPLE_RATE))
            break
        else:
            raise FormatError(f"no decodable clip after {MAX_DECODE_RETRIES} attempts for example {i}")
    return batch


def batch_features(waves: list) -> np.ndarray:
    """(B, T, 64) float32 log-Mel features for equal-length crops."""
    return np.stack([logmel(w).values for w in waves])


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def make_checkpoint(model: MaskedAutoencoder, opt: AdamW, cfg: TrainConfig, step: int, epoch: int) -> Checkpoint:
    sched = cfg.schedule()
    meta = {
        "format": FORMAT_NAME,
        "config": cfg.to_dict(),
        "model": model.cfg.to_dict(),
        "step": step,
        "epoch": epoch,
        "seed": cfg.seed,
        "schedule": {
            "warmup_steps": sched.warmup_steps if sched else 0,
            "total_steps": cfg.total_steps,
            "peak_lr": cfg.peak_lr,
            "final_fraction": sched.final_fraction if sched else None,
            "position": step,
        },
    }
    tensors = {name: t.data for name, t in model.params.items()}
    tensors.update(opt.state_tensors())
    return Checkpoint(meta, tensors)


def model_from_checkpoint(ckpt: Checkpoint) -> MaskedAutoencoder:
    cfg = ModelConfig.from_dict(ckpt.metadata["model"])
    params = {
        name: Tensor(arr, requires_grad=True) for name, arr in ckpt.tensors.items() if not name.startswith("optim.")
    }
    return MaskedAutoencoder(cfg, params)


def load_model(path) -> MaskedAutoencoder:
    return model_from_checkpoint(load_checkpoint(path))


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------


def validation_features(manifest: Manifest, cfg: TrainConfig, cache: ClipCache) -> tuple[np.ndarray, list]:
    """Leading crop (tiled if short) of every decodable validation clip."""
    feats, used = [], []
    for i, entry in enumerate(manifest.entries):
        try:
            clip = cache.get(entry.path).samples
        except (OSError, FormatError, DomainError) as exc:
            log.warning("validation: skipping %s: %s", entry.path, exc)
            continue
        feats.append(logmel(Waveform(crop(clip, cfg.crop_samples, 0), SAMPLE_RATE)).values)
        used.append(i)
    return (np.stack(feats) if feats else np.zeros((0, 0, 0), np.float32)), used


def validate(model: MaskedAutoencoder, feats: np.ndarray, used: list, cfg: TrainConfig) -> float | None:
    """Mean masked normalised MSE with masks fixed per validation clip."""
    if len(used) == 0:
        return None
    chunks, _ = chunk_frames(feats)
    root = Rng(cfg.seed, (STREAM_VAL,))
    plans = [sample_mask(chunks.shape[1], root.split(i)) for i in used]
    total = 0.0
    with no_grad():
        for lo in range(0, len(plans), cfg.batch_size):
            hi = min(lo + cfg.batch_size, len(plans))
            loss = model.masked_loss(chunks[lo:hi], plans[lo:hi])
            total += float(loss.data) * (hi - lo)
    return total / len(plans)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainReport:
    epochs: list = field(default_factory=list)  # one dict per logged epoch
    step_losses: list = field(default_factory=list)
    checkpoint: str | None = None


def _write_jsonl(path, rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def _read_jsonl(path) -> list:
    if not os.path.exists(path):
        return []
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def checkpoint_path(out_dir, epoch: int) -> str:
    return os.path.join(out_dir, f"epoch_{epoch:03d}.dshg")


def train(
    cfg: TrainConfig,
    train_manifest: Manifest,
    val_manifest: Manifest | None,
    out_dir,
    resume: str | None = None,
    stop_after_epoch: int | None = None,
) -> TrainReport:
    """Run ``cfg.epochs x cfg.batches_per_epoch`` optimizer steps.

    Writes ``epoch_NNN.dshg`` after every epoch (``epoch_000`` holds the
    initialisation), ``train_log.jsonl`` with one record per epoch and
    ``steps.jsonl`` with one record per step. ``resume`` continues from a
    checkpoint written by an earlier run with the same configuration;
    ``stop_after_epoch`` ends the run early (for interruption tests).
    """
    os.makedirs(out_dir, exist_ok=True)
    if len(train_manifest) == 0:
        raise DomainError("training manifest is empty")
    dtype = np.dtype(cfg.dtype)
    cache = ClipCache()
    opt = AdamW(weight_decay=cfg.weight_decay)
    log_path = os.path.join(out_dir, "train_log.jsonl")
    steps_path = os.path.join(out_dir, "steps.jsonl")

    if resume:
        ckpt = load_checkpoint(resume)
        if ckpt.metadata.get("config") != cfg.to_dict():
            raise ValueError("resume checkpoint was written with a different training config")
        model = model_from_checkpoint(ckpt)
        opt.load_state_tensors(ckpt.tensors, ckpt.metadata["step"])
        start_epoch = ckpt.metadata["epoch"]
        epoch_rows = [r for r in _read_jsonl(log_path) if r["epoch"] <= start_epoch]
        step_rows = [r for r in _read_jsonl(steps_path) if r["step"] < ckpt.metadata["step"]]
    else:
        model = MaskedAutoencoder(cfg.model_config(), seed=cfg.seed, dtype=dtype)
        start_epoch = 0
        epoch_rows, step_rows = [], []

    val_feats, val_used = (
        validation_features(val_manifest, cfg, cache) if val_manifest is not None else (None, [])
    )
    report = TrainReport()

    if not resume:
        path = checkpoint_path(out_dir, 0)
        save_checkpoint(path, make_checkpoint(model, opt, cfg, 0, 0))
        report.checkpoint = path
        epoch_rows.append(
            {
                "epoch": 0,
                "step": 0,
                "train_loss_mean": None,
                "val_mse": validate(model, val_feats, val_used, cfg),
                "lr": cfg.lr(0),
            }
        )
        _write_jsonl(log_path, epoch_rows)
        _write_jsonl(steps_path, step_rows)

    root = Rng(cfg.seed)
    step = start_epoch * cfg.batches_per_epoch
    last_epoch = cfg.epochs if stop_after_epoch is None else min(cfg.epochs, stop_after_epoch)
    for epoch in range(start_epoch + 1, last_epoch + 1):
        losses = []
        for _ in range(cfg.batches_per_epoch):
            waves = sample_batch(train_manifest, root.split(STREAM_BATCH, step), cfg, cache)
            feats = batch_features(waves).astype(dtype, copy=False)
            loss, _ = model.forward_train(feats, root.split(STREAM_MASK, step))
            value = float(loss.data)
            if not math.isfinite(value):
                raise NumericalError(
                    f"non-finite loss at step {step}; last good checkpoint is {checkpoint_path(out_dir, epoch - 1)}"
                )
            model.zero_grad()
            loss.backward()
            lr = cfg.lr(step)
            opt.step(model.params, lr)
            losses.append(value)
            step_rows.append({"step": step, "epoch": epoch, "loss": value, "lr": lr})
            step += 1
        row = {
            "epoch": epoch,
            "step": step,
            "train_loss_mean": float(np.mean(losses)),
            "val_mse": validate(model, val_feats, val_used, cfg),
            "lr": cfg.lr(step),
        }
        epoch_rows.append(row)
        path = checkpoint_path(out_dir, epoch)
        save_checkpoint(path, make_checkpoint(model, opt, cfg, step, epoch))
        report.checkpoint = path
        _write_jsonl(log_path, epoch_rows)
        _write_jsonl(steps_path, step_rows)
        log.info("epoch %d step %d train %.5f val %s", epoch, step, row["train_loss_mean"], row["val_mse"])

    report.epochs = epoch_rows
    report.step_losses = [r["loss"] for r in step_rows]
    if report.checkpoint is None:
        report.checkpoint = resume
    return report


def fit_batch(
    model: MaskedAutoencoder,
    feats: np.ndarray,
    steps: int,
    peak_lr: float,
    seed: int = 0,
    warmup_steps: int | None = None,
    weight_decay: float = 0.01,
) -> list:
    """Repeatedly optimise on one fixed feature batch with fresh masks each step; returns the loss per step."""
    opt = AdamW(weight_decay=weight_decay)
    sched = None
    if steps >= 2:
        warm = warmup_steps if warmup_steps is not None else max(1, steps // 10)
        sched = ScheduleConfig(min(max(warm, 1), steps - 1), steps, peak_lr)
    root = Rng(seed, (STREAM_MASK,))
    losses = []
    for step in range(steps):
        loss, _ = model.forward_train(feats, root.split(step))
        value = float(loss.data)
        if not math.isfinite(value):
            raise NumericalError(f"non-finite loss at step {step}")
        model.zero_grad()
        loss.backward()
        opt.step(model.params, peak_lr if sched is None else lr_at(step, sched))
        losses.append(value)
    return losses

"""Frozen-encoder embeddings at 25 Hz and mean-pooled clip vectors.

Long inputs are cut into consecutive 10 s segments that are encoded
independently and concatenated; the trailing partial segment is encoded at
its natural length. A trailing piece too short to form one chunk is dropped
unless it is the whole input.

Archive format: per clip, one JSON header line
``{"id", "n_frames", "dim", "pooled"}`` terminated by ``\\n``, then the
float32 little-endian payload of ``1 x dim`` values when pooled, otherwise
``n_frames x dim``.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from .audio import SAMPLE_RATE, Waveform, expected_frames, logmel, read_audio, resample
from .checkpoint import Checkpoint
from .errors import DomainError, FormatError
from .model import MaskedAutoencoder
from .numerics import no_grad
from .tokens import CHUNK_FRAMES, chunk_frames

log = logging.getLogger(__name__)

SEGMENT_SECONDS = 10
SEGMENT_SAMPLES = SEGMENT_SECONDS * SAMPLE_RATE
TOKEN_RATE = 25.0
TOKEN_PERIOD = 1.0 / TOKEN_RATE


@dataclass
class EmbeddingSequence:
    tokens: np.ndarray  # (N, D) float32
    timestamps: np.ndarray  # (N,) seconds
    frame_rate_hz: float = TOKEN_RATE

    def __len__(self) -> int:
        return self.tokens.shape[0]

    @property
    def dim(self) -> int:
        return self.tokens.shape[1]


@dataclass
class ClipEmbedding:
    vector: np.ndarray
    duration: float


def _as_model(model) -> MaskedAutoencoder:
    if isinstance(model, MaskedAutoencoder):
        return model
    if isinstance(model, Checkpoint):
        from .trainer import model_from_checkpoint

        return model_from_checkpoint(model)
    raise TypeError(f"expected MaskedAutoencoder or Checkpoint, got {type(model).__name__}")


def segments(n_samples: int) -> list:
    """(start, stop) sample ranges of the 10 s segments an input is cut into."""
    bounds = [(s, min(s + SEGMENT_SAMPLES, n_samples)) for s in range(0, n_samples, SEGMENT_SAMPLES)]
    if len(bounds) > 1 and expected_frames(bounds[-1][1] - bounds[-1][0]) < CHUNK_FRAMES:
        bounds.pop()
    return bounds


def embed(w: Waveform, model) -> EmbeddingSequence:
    """Last-layer encoder outputs for every chunk; no masking is applied."""
    model = _as_model(model)
    if w.sample_rate != SAMPLE_RATE:
        w = resample(w)
    if expected_frames(len(w)) < CHUNK_FRAMES:
        raise DomainError(
            f"input of {len(w)} samples gives {expected_frames(len(w))} frames; at least {CHUNK_FRAMES} are needed"
        )
    rows, stamps = [], []
    with no_grad():
        for start, stop in segments(len(w)):
            mel = logmel(Waveform(w.samples[start:stop], SAMPLE_RATE)).values
            chunks, _ = chunk_frames(mel)
            out = model.embed_chunks(chunks.astype(model.dtype, copy=False)).data
            rows.append(np.asarray(out, dtype=np.float32))
            stamps.append(start / SAMPLE_RATE + np.arange(out.shape[0]) * TOKEN_PERIOD)
    return EmbeddingSequence(np.concatenate(rows), np.concatenate(stamps))


def pool(seq) -> ClipEmbedding:
    tokens = seq.tokens if isinstance(seq, EmbeddingSequence) else np.asarray(seq)
    if tokens.ndim != 2 or tokens.shape[0] == 0:
        raise DomainError("cannot pool an empty embedding sequence")
    duration = len(tokens) * TOKEN_PERIOD
    if isinstance(seq, EmbeddingSequence) and len(seq.timestamps):
        duration = float(seq.timestamps[-1]) + TOKEN_PERIOD
    return ClipEmbedding(tokens.mean(axis=0, dtype=np.float64).astype(np.float32), duration)


# ---------------------------------------------------------------------------
# archive
# ---------------------------------------------------------------------------


@dataclass
class ArchiveRecord:
    id: str
    n_frames: int
    dim: int
    pooled: bool
    values: np.ndarray


def write_record(fh, rec_id: str, values: np.ndarray, n_frames: int, pooled: bool) -> None:
    values = np.ascontiguousarray(values, dtype="<f4")
    header = {"id": rec_id, "n_frames": int(n_frames), "dim": int(values.shape[-1]), "pooled": bool(pooled)}
    fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
    fh.write(values.tobytes())


def read_archive(path) -> list:
    with open(path, "rb") as fh:
        data = fh.read()
    records, pos = [], 0
    while pos < len(data):
        nl = data.find(b"\n", pos)
        if nl < 0:
            raise FormatError(f"{path}: unterminated header at offset {pos}")
        try:
            h = json.loads(data[pos:nl].decode("utf-8"))
            rows = 1 if h["pooled"] else int(h["n_frames"])
            dim = int(h["dim"])
        except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{path}: bad record header at offset {pos}: {exc}") from None
        start, nbytes = nl + 1, rows * dim * 4
        if start + nbytes > len(data):
            raise FormatError(
                f"{path}: record {h['id']!r} truncated at offset {start}: "
                f"expected length >= {start + nbytes} bytes, actual {len(data)}"
            )
        values = np.frombuffer(data, dtype="<f4", count=rows * dim, offset=start).reshape(rows, dim)
        records.append(ArchiveRecord(str(h["id"]), int(h["n_frames"]), dim, bool(h["pooled"]), values.astype(np.float32)))
        pos = start + nbytes
    return records


@dataclass
class EmbedSummary:
    written: list = field(default_factory=list)
    skipped: list = field(default_factory=list)  # (id, reason)


def embed_batch(manifest, model, out_path, pooled: bool = False) -> EmbedSummary:
    """Embed every manifest entry in order; clips that fail are logged and skipped."""
    model = _as_model(model)
    summary = EmbedSummary()
    tmp = f"{out_path}.tmp"
    with open(tmp, "wb") as fh:
        for entry in manifest:
            try:
                seq = embed(read_audio(entry.path), model)
            except (OSError, FormatError, DomainError) as exc:
                log.warning("skipping %s: %s", entry.path, exc)
                summary.skipped.append((entry.id, str(exc)))
                continue
            values = pool(seq).vector[None] if pooled else seq.tokens
            write_record(fh, entry.id, values, len(seq), pooled)
            summary.written.append(entry.id)
    os.replace(tmp, out_path)
    return summary

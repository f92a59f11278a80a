"""Synthetic audio for smoke tests and desk-scale experiments.

Four clip families: ``tone`` (stationary harmonic tones), ``sweep``
(exponential sine sweeps), ``square`` (square waves) and ``noise`` (white
noise). Every clip is a deterministic function of (kind, seed, index).
"""

from __future__ import annotations

import json
import os

import numpy as np

from .audio import SAMPLE_RATE, Waveform, write_wav
from .numerics import Rng

KINDS = ("tone", "sweep", "square", "noise")


def make_clip(kind: str, rng: Rng, seconds: float, sr: int = SAMPLE_RATE) -> Waveform:
    n = int(round(seconds * sr))
    t = np.arange(n) / sr
    amp = rng.uniform(0.3, 0.6)
    if kind == "tone":
        f0 = rng.uniform(150.0, 1200.0)
        weights = 1.0 / np.arange(1, 5) ** rng.uniform(0.5, 2.0)
        x = sum(w * np.sin(2 * np.pi * f0 * (h + 1) * t) for h, w in enumerate(weights) if f0 * (h + 1) < sr / 2)
        x = x / np.abs(x).max()
    elif kind == "sweep":
        f0, f1 = rng.uniform(100.0, 600.0), rng.uniform(1500.0, 6000.0)
        if rng.uniform() < 0.5:
            f0, f1 = f1, f0
        k = np.log(f1 / f0) / max(seconds, 1e-9)
        x = np.sin(2 * np.pi * f0 * (np.exp(k * t) - 1.0) / k)
    elif kind == "square":
        f0 = rng.uniform(80.0, 800.0)
        x = np.sign(np.sin(2 * np.pi * f0 * t + rng.uniform(0, 2 * np.pi)))
    elif kind == "noise":
        x = np.clip(rng.normal(0.0, 0.35, size=n), -1.0, 1.0)
    else:
        raise ValueError(f"unknown clip kind {kind!r}; choose from {KINDS}")
    return Waveform(amp * x, sr)


def write_corpus(
    out_dir,
    kinds=("sweep", "square", "noise"),
    per_kind: int = 10,
    seconds: float = 10.0,
    seed: int = 0,
) -> str:
    """Write WAV clips plus ``manifest.jsonl`` and ``labels.jsonl``; returns the manifest path.

    Clip ids are ``{kind}_{index:04d}``; entries are interleaved across kinds.
    """
    os.makedirs(out_dir, exist_ok=True)
    root = Rng(seed, (0x5E7,))
    entries = []
    for i in range(per_kind):
        for k, kind in enumerate(kinds):
            clip = make_clip(kind, root.split(KINDS.index(kind), i), seconds)
            cid = f"{kind}_{i:04d}"
            path = os.path.join(out_dir, f"{cid}.wav")
            write_wav(path, clip)
            entries.append({"id": cid, "path": os.path.abspath(path), "label": kind, "duration": clip.duration})
    manifest = os.path.join(out_dir, "manifest.jsonl")
    with open(manifest, "w") as fh:
        for e in entries:
            fh.write(json.dumps({"path": e["path"], "label": e["label"], "duration": e["duration"]}) + "\n")
    with open(os.path.join(out_dir, "labels.jsonl"), "w") as fh:
        for e in entries:
            fh.write(json.dumps({"id": e["id"], "label": e["label"]}) + "\n")
    return manifest


def main(argv=None) -> int:
    import argparse

    ap = argparse.ArgumentParser(prog="python -m dasheng_mae.synth", description="write a synthetic WAV corpus")
    ap.add_argument("out_dir")
    ap.add_argument("--kinds", default="sweep,square,noise")
    ap.add_argument("--per-kind", type=int, default=10)
    ap.add_argument("--seconds", type=float, default=10.0)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    path = write_corpus(args.out_dir, tuple(args.kinds.split(",")), args.per_kind, args.seconds, args.seed)
    print(path)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())

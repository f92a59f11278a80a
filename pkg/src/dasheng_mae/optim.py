"""AdamW with linear warm-up and cosine decay to a fraction of the peak rate."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8
FINAL_FRACTION = 0.1
PEAK_LR = 3e-4
WEIGHT_DECAY = 0.01

# (peak learning rate, weight decay) per model preset; the largest model trains gentler and without decay
RECIPES = {"1.2b": (2e-4, 0.0)}


def recipe(preset: str | None) -> tuple[float, float]:
    return RECIPES.get((preset or "").lower(), (PEAK_LR, WEIGHT_DECAY))


@dataclass
class ScheduleConfig:
    warmup_steps: int
    total_steps: int
    peak_lr: float = 3e-4
    final_fraction: float = FINAL_FRACTION

    def __post_init__(self):
        if not 0 < self.warmup_steps < self.total_steps:
            raise ValueError(f"need 0 < warmup_steps < total_steps, got {self.warmup_steps}, {self.total_steps}")
        if self.peak_lr <= 0:
            raise ValueError("peak_lr must be positive")


def lr_at(step: int, cfg: ScheduleConfig) -> float:
    """Learning rate for optimizer step ``step`` (0-based).

    Linear ramp ``peak * (step + 1) / warmup`` during warm-up, then cosine from
    peak to ``final_fraction * peak`` at ``total_steps``. Steps past the end
    are clamped to the final value.
    """
    if step < 0:
        raise ValueError(f"negative step {step}")
    step = min(step, cfg.total_steps)
    peak = cfg.peak_lr
    if step < cfg.warmup_steps:
        return peak * (step + 1) / cfg.warmup_steps
    floor = cfg.final_fraction * peak
    progress = (step - cfg.warmup_steps) / (cfg.total_steps - cfg.warmup_steps)
    # written relative to the peak so that progress 0 returns exactly ``peak``
    return peak - (peak - floor) * 0.5 * (1.0 - math.cos(math.pi * progress))


def decays(name: str, shape: tuple) -> bool:
    """Weight decay applies to weight matrices only.

    Biases, LayerNorm scales/shifts, positional tables and the mask token are
    exempt.
    """
    return len(shape) == 2 and name.endswith("weight")


@dataclass
class AdamW:
    weight_decay: float = 0.01
    beta1: float = BETA1
    beta2: float = BETA2
    eps: float = EPS
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: dict, lr: float, grads: dict | None = None) -> None:
        """One bias-corrected update of every tensor in ``params``.

        Gradients default to each tensor's ``.grad``; a missing gradient counts
        as zero. If any gradient is non-finite nothing is modified.
        """
        if lr < 0:
            raise ValueError(f"negative learning rate {lr}")
        if grads is None:
            grads = {name: t.grad for name, t in params.items()}
        for name in sorted(params):
            g = grads.get(name)
            if g is not None and not np.all(np.isfinite(g)):
                raise NumericalError(f"non-finite gradient for {name}; step {self.step_count + 1} skipped")

        t = self.step_count + 1
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for name in sorted(params):
            p = params[name].data
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(p)
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay and decays(name, p.shape):
                p -= (lr * self.weight_decay) * p
            p -= (lr * update).astype(p.dtype, copy=False)
        self.step_count = t

    def state_tensors(self) -> dict:
        out = {}
        for name in sorted(self.m):
            out[f"optim.m.{name}"] = self.m[name]
            out[f"optim.v.{name}"] = self.v[name]
        return out

    def load_state_tensors(self, tensors: dict, step_count: int) -> None:
        self.m, self.v = {}, {}
        for key, arr in tensors.items():
            if key.startswith("optim.m."):
                self.m[key[len("optim.m.") :]] = np.array(arr)
            elif key.startswith("optim.v."):
                self.v[key[len("optim.v.") :]] = np.array(arr)
        self.step_count = step_count

"""Chunk Mel frames into tokens, add positions, and plan grouped masks."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .audio import MelSpectrogram
from .errors import ContractError, DomainError, SequenceTooLongError
from .numerics import Rng, Tensor, add, gather_rows, getitem, linear

CHUNK_FRAMES = 4
MASK_RATIO = 0.75
MIN_RUN = 2
RUN_LENGTHS = (2, 3, 4)
N_MAX = 250


@dataclass
class ChunkSequence:
    values: np.ndarray  # (N, CHUNK_FRAMES * F)
    dropped_frames: int

    @property
    def n_chunks(self) -> int:
        return self.values.shape[0]

    @property
    def chunk_dim(self) -> int:
        return self.values.shape[1]


@dataclass
class MaskPlan:
    mask: np.ndarray  # bool (N,), True = masked and discarded
    ratio_target: float = MASK_RATIO
    min_group: int = MIN_RUN
    kept_index: np.ndarray = field(init=False)
    masked_index: np.ndarray = field(init=False)

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        self.kept_index = np.flatnonzero(~self.mask)
        self.masked_index = np.flatnonzero(self.mask)

    def __len__(self) -> int:
        return len(self.mask)

    @property
    def n_masked(self) -> int:
        return len(self.masked_index)

    @property
    def n_kept(self) -> int:
        return len(self.kept_index)


def chunk_frames(values: np.ndarray) -> tuple[np.ndarray, int]:
    """Reshape (..., T, F) frames into (..., T // 4, 4 * F) chunks, dropping the remainder."""
    t, f = values.shape[-2:]
    if t < CHUNK_FRAMES:
        raise DomainError(f"need at least {CHUNK_FRAMES} frames to form a chunk, got {t}")
    n = t // CHUNK_FRAMES
    kept = values[..., : n * CHUNK_FRAMES, :]
    return kept.reshape(values.shape[:-2] + (n, CHUNK_FRAMES * f)), t - n * CHUNK_FRAMES


def chunkify(mel: MelSpectrogram) -> ChunkSequence:
    chunks, dropped = chunk_frames(mel.values)
    return ChunkSequence(chunks, dropped)


def unchunkify(chunks: np.ndarray, n_bins: int) -> np.ndarray:
    """Inverse of :func:`chunk_frames` on the frames that were kept."""
    return chunks.reshape(chunks.shape[:-2] + (-1, n_bins))


def project_and_position(chunks, weight: Tensor, bias: Tensor, pos: Tensor) -> Tensor:
    """``chunks @ weight + bias`` followed by adding positional rows ``pos[:N]``.

    ``chunks`` is a :class:`ChunkSequence`, an array or a tensor of shape
    (N, C) or (B, N, C).
    """
    if isinstance(chunks, ChunkSequence):
        chunks = chunks.values
    if not isinstance(chunks, Tensor):
        chunks = Tensor(np.asarray(chunks), dtype=weight.dtype)
    n = chunks.shape[-2]
    if n > pos.shape[0]:
        raise SequenceTooLongError(
            f"{n} tokens exceed the positional table of {pos.shape[0]}; split the input into segments first"
        )
    return add(linear(chunks, weight, bias), getitem(pos, slice(0, n)))


def n_masked_for(n: int) -> int:
    """Masked-token count: 75% of ``n`` rounded half up."""
    return int(np.floor(MASK_RATIO * n + 0.5))


def sample_mask(n: int, rng: Rng) -> MaskPlan:
    """Grouped random mask with exactly ``n_masked_for(n)`` masked tokens.

    Runs of length 2-4 are placed uniformly over fully-unmasked windows until
    the target is reached; the final run is clipped to the remaining count.
    Runs may touch and merge. If the remaining count is one, or no window of
    the drawn length is free, the run shrinks; a lone position is only ever
    placed next to an existing masked run, so every maximal run has length
    at least two.
    """
    target = n_masked_for(n)
    if n < CHUNK_FRAMES or target < MIN_RUN or n - target < 0:
        raise DomainError(f"cannot build a grouped 75% mask over {n} tokens")
    mask = np.zeros(n, dtype=bool)
    count = 0
    while count < target:
        remaining = target - count
        length = min(int(rng.choice(RUN_LENGTHS)), remaining)
        start = None
        while length >= MIN_RUN:
            free = np.concatenate(([0], np.cumsum(~mask)))
            starts = np.flatnonzero(free[length:] - free[:-length] == length)
            if len(starts):
                start = int(starts[rng.integers(len(starts))])
                break
            length -= 1
        if start is None:
            left = np.zeros(n, dtype=bool)
            left[1:] = mask[:-1]
            right = np.zeros(n, dtype=bool)
            right[:-1] = mask[1:]
            cands = np.flatnonzero(~mask & (left | right))
            start, length = int(cands[rng.integers(len(cands))]), 1
        mask[start : start + length] = True
        count += length
    return MaskPlan(mask)


def sample_masks(n: int, batch: int, rng: Rng) -> list[MaskPlan]:
    """One plan per batch element, each from its own split stream."""
    return [sample_mask(n, rng.split(i)) for i in range(batch)]


def run_lengths(mask: np.ndarray) -> list[int]:
    """Lengths of the maximal runs of True in ``mask``."""
    m = np.concatenate(([False], np.asarray(mask, dtype=bool), [False])).astype(np.int8)
    d = np.diff(m)
    return list(np.flatnonzero(d == -1) - np.flatnonzero(d == 1))


def gather_unmasked(tokens: Tensor, plan) -> tuple[Tensor, np.ndarray]:
    """Keep the unmasked tokens in time order.

    ``tokens`` is (N, D) with a single :class:`MaskPlan`, or (B, N, D) with a
    sequence of B plans that all keep the same number of tokens. Returns the
    kept tokens and the index map of their original positions.
    """
    plans = [plan] if isinstance(plan, MaskPlan) else list(plan)
    n = tokens.shape[-2]
    for p in plans:
        if len(p) != n:
            raise ContractError(f"mask plan covers {len(p)} tokens, sequence has {n}")
    if tokens.ndim == 2:
        if len(plans) != 1:
            raise ContractError("a 2-D token sequence takes exactly one mask plan")
        index = plans[0].kept_index
    else:
        if len(plans) != tokens.shape[0]:
            raise ContractError(f"{len(plans)} mask plans for a batch of {tokens.shape[0]}")
        if len({p.n_kept for p in plans}) > 1:
            raise ContractError("mask plans in a batch must keep the same number of tokens")
        index = np.stack([p.kept_index for p in plans])
    return gather_rows(tokens, index), index

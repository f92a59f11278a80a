"""Asymmetric masked-autoencoder over 4-frame Mel chunks.

The encoder is a stack of pre-norm transformer blocks (LayerNorm, multi-head
self-attention, residual; LayerNorm, GeLU MLP, residual) followed by a final
LayerNorm, and only ever sees unmasked tokens. The decoder projects encoder
outputs to its own width, scatters them back to their time positions, fills
masked positions with a learnable mask token, adds its own positional table,
runs its blocks and maps each position to a 256-value chunk.

Parameters live in a flat ``name -> Tensor`` dict so that the optimizer,
checkpoints and gradient checks can all walk them the same way.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from .audio import N_MELS, MelSpectrogram
from .errors import ContractError, DomainError
from .numerics import (
    Rng,
    Tensor,
    add,
    gather_rows,
    gelu,
    get_default_dtype,
    getitem,
    layernorm,
    linear,
    matmul,
    mean_all,
    reshape,
    scale,
    scatter_rows,
    softmax,
    square,
    sub,
    transpose,
    trunc_normal,
)
from .tokens import CHUNK_FRAMES, N_MAX, MaskPlan, chunk_frames, gather_unmasked, project_and_position, sample_masks

LN_EPS = 1e-6
TARGET_EPS = 1e-6
INIT_STD = 0.02


@dataclass
class DecoderConfig:
    depth: int = 8
    embed_dim: int = 512
    mlp_dim: int = 2048
    num_heads: int = 16


@dataclass
class ModelConfig:
    depth: int = 12
    embed_dim: int = 768
    mlp_dim: int = 3072
    num_heads: int = 12
    chunk_size: int = CHUNK_FRAMES
    mel_bins: int = N_MELS
    n_max: int = N_MAX
    decoder: DecoderConfig = field(default_factory=DecoderConfig)

    def __post_init__(self):
        if isinstance(self.decoder, dict):
            self.decoder = DecoderConfig(**self.decoder)
        for what, dim, heads in (
            ("encoder", self.embed_dim, self.num_heads),
            ("decoder", self.decoder.embed_dim, self.decoder.num_heads),
        ):
            if heads < 1 or dim % heads:
                raise ValueError(f"{what} embed dim {dim} is not divisible by {heads} heads")
        if self.depth < 0 or self.decoder.depth < 0:
            raise ValueError("depth must be non-negative")

    @property
    def chunk_dim(self) -> int:
        return self.chunk_size * self.mel_bins

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        d = dict(d)
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        dec = d.pop("decoder", {})
        if isinstance(dec, dict):
            unknown = set(dec) - {f.name for f in dataclasses.fields(DecoderConfig)}
            if unknown:
                raise ValueError(f"unknown decoder config keys: {sorted(unknown)}")
            dec = DecoderConfig(**dec)
        return cls(decoder=dec, **d)


# (depth, embed, mlp, heads)
ENCODER_PRESETS = {
    "base": (12, 768, 3072, 12),
    "0.6b": (32, 1024, 4096, 16),
    "1.2b": (40, 1536, 6144, 24),
    "tiny": (2, 64, 128, 2),
}
DECODER_PRESETS = {
    "dec-25m": (8, 512, 2048, 16),
    "dec-56m": (8, 768, 3072, 24),
    "tiny": (1, 64, 128, 2),
}
PAIRED_DECODER = {"base": "dec-25m", "0.6b": "dec-25m", "1.2b": "dec-56m", "tiny": "tiny"}


def preset(name: str) -> ModelConfig:
    name = name.lower()
    if name not in ENCODER_PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(ENCODER_PRESETS)}")
    depth, dim, mlp, heads = ENCODER_PRESETS[name]
    ddepth, ddim, dmlp, dheads = DECODER_PRESETS[PAIRED_DECODER[name]]
    return ModelConfig(depth, dim, mlp, heads, decoder=DecoderConfig(ddepth, ddim, dmlp, dheads))


# ---------------------------------------------------------------------------
# parameter layout
# ---------------------------------------------------------------------------


def _block_shapes(prefix: str, dim: int, mlp: int) -> list:
    return [
        (f"{prefix}.norm1.gamma", (dim,), "ones"),
        (f"{prefix}.norm1.beta", (dim,), "zeros"),
        (f"{prefix}.attn.qkv.weight", (dim, 3 * dim), "normal"),
        (f"{prefix}.attn.qkv.bias", (3 * dim,), "zeros"),
        (f"{prefix}.attn.proj.weight", (dim, dim), "normal"),
        (f"{prefix}.attn.proj.bias", (dim,), "zeros"),
        (f"{prefix}.norm2.gamma", (dim,), "ones"),
        (f"{prefix}.norm2.beta", (dim,), "zeros"),
        (f"{prefix}.mlp.fc1.weight", (dim, mlp), "normal"),
        (f"{prefix}.mlp.fc1.bias", (mlp,), "zeros"),
        (f"{prefix}.mlp.fc2.weight", (mlp, dim), "normal"),
        (f"{prefix}.mlp.fc2.bias", (dim,), "zeros"),
    ]


def parameter_shapes(cfg: ModelConfig) -> list:
    """Ordered ``(name, shape, init)`` triples for every learnable tensor."""
    d, dd = cfg.embed_dim, cfg.decoder.embed_dim
    shapes = [
        ("patch_embed.weight", (cfg.chunk_dim, d), "normal"),
        ("patch_embed.bias", (d,), "zeros"),
        ("pos_embed", (cfg.n_max, d), "normal"),
    ]
    for i in range(cfg.depth):
        shapes += _block_shapes(f"encoder.blocks.{i}", d, cfg.mlp_dim)
    shapes += [
        ("encoder.norm.gamma", (d,), "ones"),
        ("encoder.norm.beta", (d,), "zeros"),
        ("decoder.embed.weight", (d, dd), "normal"),
        ("decoder.embed.bias", (dd,), "zeros"),
        ("decoder.mask_token", (dd,), "normal"),
        ("decoder.pos_embed", (cfg.n_max, dd), "normal"),
    ]
    for i in range(cfg.decoder.depth):
        shapes += _block_shapes(f"decoder.blocks.{i}", dd, cfg.decoder.mlp_dim)
    shapes += [
        ("decoder.head.weight", (dd, cfg.chunk_dim), "normal"),
        ("decoder.head.bias", (cfg.chunk_dim,), "zeros"),
    ]
    return shapes


def count_parameters(cfg: ModelConfig, part: str = "all") -> int:
    """Number of scalars in the encoder, decoder or whole model (no allocation)."""
    total = 0
    for name, shape, _ in parameter_shapes(cfg):
        is_dec = name.startswith("decoder.")
        if part == "all" or (part == "decoder") == is_dec:
            total += math.prod(shape)
    return total


def init_parameters(cfg: ModelConfig, seed: int = 0, dtype=None) -> dict:
    dtype = np.dtype(dtype or get_default_dtype())
    rng = Rng(seed, (0x1A17,))
    params = {}
    for i, (name, shape, kind) in enumerate(parameter_shapes(cfg)):
        if kind == "normal":
            data = trunc_normal(rng.split(i), shape, INIT_STD, dtype)
        elif kind == "ones":
            data = np.ones(shape, dtype=dtype)
        else:
            data = np.zeros(shape, dtype=dtype)
        params[name] = Tensor(data, requires_grad=True)
    return params


# ---------------------------------------------------------------------------
# blocks
# ---------------------------------------------------------------------------


def attention(x: Tensor, p: dict, prefix: str, heads: int, probe: list | None = None) -> Tensor:
    b, n, d = x.shape
    dh = d // heads
    qkv = linear(x, p[f"{prefix}.qkv.weight"], p[f"{prefix}.qkv.bias"])
    qkv = transpose(reshape(qkv, (b, n, 3, heads, dh)), (2, 0, 3, 1, 4))
    q, k, v = getitem(qkv, 0), getitem(qkv, 1), getitem(qkv, 2)
    scores = scale(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    weights = softmax(scores)
    if probe is not None:
        probe.append(weights.data)
    out = reshape(transpose(matmul(weights, v), (0, 2, 1, 3)), (b, n, d))
    return linear(out, p[f"{prefix}.proj.weight"], p[f"{prefix}.proj.bias"])


def block(x: Tensor, p: dict, prefix: str, heads: int, probe: list | None = None) -> Tensor:
    h = layernorm(x, p[f"{prefix}.norm1.gamma"], p[f"{prefix}.norm1.beta"], LN_EPS)
    x = add(x, attention(h, p, f"{prefix}.attn", heads, probe))
    h = layernorm(x, p[f"{prefix}.norm2.gamma"], p[f"{prefix}.norm2.beta"], LN_EPS)
    h = gelu(linear(h, p[f"{prefix}.mlp.fc1.weight"], p[f"{prefix}.mlp.fc1.bias"]))
    return add(x, linear(h, p[f"{prefix}.mlp.fc2.weight"], p[f"{prefix}.mlp.fc2.bias"]))


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------


@dataclass
class EncoderOutput:
    embeddings: Tensor  # (B, n_kept, D) or (n_kept, D)
    index_map: np.ndarray | None = None
    attention: list = field(default_factory=list)

    @property
    def n_tokens(self) -> int:
        return self.embeddings.shape[-2]


@dataclass
class Reconstruction:
    chunks: Tensor  # (B, N, chunk_dim) or (N, chunk_dim)


def _as_plans(plan) -> list:
    return [plan] if isinstance(plan, MaskPlan) else list(plan)


def normalize_chunks(values: np.ndarray) -> np.ndarray:
    """Standardise each chunk over its own values (population variance, eps 1e-6)."""
    mean = values.mean(axis=-1, keepdims=True)
    var = values.var(axis=-1, keepdims=True)
    return (values - mean) / np.sqrt(var + TARGET_EPS)


class MaskedAutoencoder:
    def __init__(self, cfg: ModelConfig, params: dict | None = None, seed: int = 0, dtype=None):
        self.cfg = cfg
        self.params = params if params is not None else init_parameters(cfg, seed, dtype)
        expected = {name: shape for name, shape, _ in parameter_shapes(cfg)}
        if set(self.params) != set(expected):
            missing, extra = set(expected) - set(self.params), set(self.params) - set(expected)
            raise ContractError(f"parameter set mismatch; missing={sorted(missing)} extra={sorted(extra)}")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ContractError(f"{name}: expected shape {shape}, got {self.params[name].shape}")

    @property
    def dtype(self) -> np.dtype:
        return self.params["pos_embed"].dtype

    def num_parameters(self) -> int:
        return sum(t.size for t in self.params.values())

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    # -- pieces ----------------------------------------------------------

    def tokenize(self, chunks) -> Tensor:
        p = self.params
        if not isinstance(chunks, Tensor):
            chunks = Tensor(np.asarray(chunks), dtype=self.dtype)
        return project_and_position(chunks, p["patch_embed.weight"], p["patch_embed.bias"], p["pos_embed"])

    def encode(self, x: Tensor, index_map=None, capture_attention: bool = False) -> EncoderOutput:
        if x.shape[-2] < 1:
            raise DomainError("encoder needs at least one token")
        squeeze = x.ndim == 2
        h = reshape(x, (1,) + x.shape) if squeeze else x
        probe = [] if capture_attention else None
        for i in range(self.cfg.depth):
            h = block(h, self.params, f"encoder.blocks.{i}", self.cfg.num_heads, probe)
        h = layernorm(h, self.params["encoder.norm.gamma"], self.params["encoder.norm.beta"], LN_EPS)
        if squeeze:
            h = reshape(h, h.shape[1:])
        return EncoderOutput(h, index_map, probe or [])

    def decode(self, enc: EncoderOutput, plan) -> Reconstruction:
        p, dcfg = self.params, self.cfg.decoder
        plans = _as_plans(plan)
        e = enc.embeddings
        squeeze = e.ndim == 2
        if squeeze:
            e = reshape(e, (1,) + e.shape)
        if len(plans) != e.shape[0]:
            raise ContractError(f"{len(plans)} mask plans for {e.shape[0]} encoded sequences")
        n = len(plans[0])
        for pl in plans:
            if len(pl) != n or pl.n_kept != e.shape[1]:
                raise ContractError(
                    f"encoder produced {e.shape[1]} tokens but the plan keeps {pl.n_kept} of {len(pl)}"
                )
        index = np.stack([pl.kept_index for pl in plans])
        h = linear(e, p["decoder.embed.weight"], p["decoder.embed.bias"])
        h = scatter_rows(h, index, p["decoder.mask_token"], n)
        h = add(h, getitem(p["decoder.pos_embed"], slice(0, n)))
        for i in range(dcfg.depth):
            h = block(h, p, f"decoder.blocks.{i}", dcfg.num_heads)
        out = linear(h, p["decoder.head.weight"], p["decoder.head.bias"])
        if squeeze:
            out = reshape(out, out.shape[1:])
        return Reconstruction(out)

    def embed_chunks(self, chunks: np.ndarray) -> Tensor:
        """Unmasked inference: every chunk enters the encoder."""
        return self.encode(self.tokenize(chunks)).embeddings

    # -- training objective --------------------------------------------

    def masked_loss(self, chunks: np.ndarray, plans) -> Tensor:
        """Normalised MSE for (B, N, C) chunks under one mask plan per batch element."""
        tokens = self.tokenize(chunks)
        kept, index = gather_unmasked(tokens, plans)
        pred = self.decode(self.encode(kept, index), plans)
        return normalized_mse(pred, chunks, plans)

    def forward_train(self, mel, rng: Rng) -> tuple[Tensor, dict]:
        """Masked-reconstruction loss for one mel (T, F) or a batch (B, T, F)."""
        values = mel.values if isinstance(mel, MelSpectrogram) else np.asarray(mel)
        single = values.ndim == 2
        if single:
            values = values[None]
        chunks, dropped = chunk_frames(values)
        n = chunks.shape[1]
        if n < 4:
            raise DomainError(f"need at least 4 chunks for masked training, got {n}")
        plans = sample_masks(n, chunks.shape[0], rng)
        loss = self.masked_loss(chunks, plans)
        diagnostics = {
            "n_tokens": n,
            "n_masked": plans[0].n_masked,
            "n_kept": plans[0].n_kept,
            "dropped_frames": dropped,
            "batch": chunks.shape[0],
            "loss": float(loss.data),
        }
        return loss, diagnostics


def normalized_mse(pred, target, plan) -> Tensor:
    """Mean squared error between predictions and per-chunk standardised targets on masked chunks.

    ``pred`` is a :class:`Reconstruction` or tensor of shape (N, C) or (B, N, C);
    ``target`` holds the raw chunks in the same layout. Unmasked chunks are
    never read from ``target``.
    """
    pred = pred.chunks if isinstance(pred, Reconstruction) else pred
    if isinstance(target, Tensor):
        target = target.data
    target = np.asarray(getattr(target, "values", target))
    plans = _as_plans(plan)
    if pred.shape != target.shape:
        raise ContractError(f"prediction shape {pred.shape} differs from target shape {target.shape}")
    if pred.ndim == 2:
        pred = reshape(pred, (1,) + pred.shape)
        target = target[None]
    if len(plans) != pred.shape[0]:
        raise ContractError(f"{len(plans)} mask plans for a batch of {pred.shape[0]}")
    counts = {pl.n_masked for pl in plans}
    if counts == {0}:
        raise DomainError("normalized MSE needs at least one masked chunk")
    if len(counts) > 1:
        raise ContractError("mask plans in a batch must mask the same number of chunks")
    index = np.stack([pl.masked_index for pl in plans])
    picked = np.take_along_axis(target, index[:, :, None], axis=1).astype(np.float64)
    goal = Tensor(normalize_chunks(picked), dtype=pred.dtype)
    return mean_all(square(sub(gather_rows(pred, index), goal)))

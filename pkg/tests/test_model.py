import math

import numpy as np
import pytest

import reference_mae as ref
from dasheng_mae.errors import ContractError, DomainError
from dasheng_mae.model import (
    DecoderConfig,
    EncoderOutput,
    MaskedAutoencoder,
    ModelConfig,
    count_parameters,
    normalize_chunks,
    normalized_mse,
    preset,
)
from dasheng_mae.numerics import Rng, Tensor, default_dtype
from dasheng_mae.tokens import MaskPlan, chunk_frames, sample_mask

TINY16 = ModelConfig(2, 16, 32, 2, decoder=DecoderConfig(1, 16, 32, 2))


def _model64(cfg=TINY16, seed=0, perturb=True):
    with default_dtype(np.float64):
        m = MaskedAutoencoder(cfg, seed=seed)
    if perturb:
        # move LayerNorm/bias params off their trivial init so every path is exercised
        rng = np.random.default_rng(seed + 100)
        for name, t in m.params.items():
            t.data += rng.normal(scale=0.05, size=t.shape)
    return m


def _np_params(m):
    return {k: v.data for k, v in m.params.items()}


def _mel(t=40, seed=0, batch=None):
    shape = (t, 64) if batch is None else (batch, t, 64)
    return np.random.default_rng(seed).normal(size=shape)


class TestConfig:
    def test_presets(self):
        assert (preset("base").depth, preset("base").embed_dim, preset("base").mlp_dim, preset("base").num_heads) == (12, 768, 3072, 12)
        assert preset("0.6b").embed_dim == 1024 and preset("0.6b").depth == 32
        assert preset("1.2b").embed_dim == 1536 and preset("1.2b").decoder.embed_dim == 768
        assert preset("base").decoder == DecoderConfig(8, 512, 2048, 16)
        assert preset("1.2b").decoder == DecoderConfig(8, 768, 3072, 24)

    def test_heads_divide(self):
        with pytest.raises(ValueError):
            ModelConfig(1, 10, 20, 3)

    def test_parameter_counts_match_names(self):
        base = count_parameters(preset("base"), "encoder")
        dec25 = count_parameters(preset("base"), "decoder")
        assert abs(base / 86e6 - 1) < 0.05, base
        assert abs(dec25 / 25e6 - 1) < 0.05, dec25

    def test_dict_roundtrip_and_unknown_keys(self):
        cfg = preset("tiny")
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg
        with pytest.raises(ValueError):
            ModelConfig.from_dict({**cfg.to_dict(), "dept": 3})


class TestEncode:
    def test_depth_zero_is_layernorm(self):
        cfg = ModelConfig(0, 16, 32, 2, decoder=DecoderConfig(0, 16, 32, 2))
        m = _model64(cfg)
        x = np.random.default_rng(1).normal(size=(5, 16))
        out = m.encode(Tensor(x)).embeddings.data
        np.testing.assert_allclose(out, ref._ln(x, m.params["encoder.norm.gamma"].data, m.params["encoder.norm.beta"].data), atol=1e-12)

    def test_single_token(self):
        m = _model64()
        out = m.encode(Tensor(np.ones((1, 16))), capture_attention=True)
        assert out.embeddings.shape == (1, 16)
        assert len(out.attention) == 2
        for w in out.attention:
            np.testing.assert_array_equal(w, np.ones_like(w))

    def test_matches_reference(self):
        m = _model64()
        chunks, _ = chunk_frames(_mel(60))
        kept = np.arange(len(chunks))
        out = m.encode(m.tokenize(chunks)).embeddings.data
        np.testing.assert_allclose(out, ref.encode(_np_params(m), TINY16, chunks, kept), atol=1e-5)

    def test_float32_matches_reference(self):
        m32 = MaskedAutoencoder(TINY16, seed=3)
        chunks, _ = chunk_frames(_mel(60).astype(np.float32))
        p64 = {k: v.data.astype(np.float64) for k, v in m32.params.items()}
        out = m32.encode(m32.tokenize(chunks)).embeddings.data
        np.testing.assert_allclose(out, ref.encode(p64, TINY16, chunks.astype(np.float64), np.arange(15)), atol=1e-4)


class TestDecode:
    def test_all_kept(self):
        m = _model64()
        plan = MaskPlan(np.zeros(10, bool))
        enc = m.encode(Tensor(np.random.default_rng(2).normal(size=(10, 16))))
        assert m.decode(enc, plan).chunks.shape == (10, 256)

    def test_scatter_at_depth_zero(self):
        cfg = ModelConfig(0, 16, 32, 2, decoder=DecoderConfig(0, 16, 32, 2))
        m = _model64(cfg)
        mask = np.ones(10, bool)
        mask[[3, 7]] = False
        e = np.zeros((2, 16))
        e[0, 0] = e[1, 1] = 1.0  # orthogonal probes
        pred = m.decode(EncoderOutput(Tensor(e)), MaskPlan(mask)).chunks.data
        p = _np_params(m)
        head = lambda v: v @ p["decoder.head.weight"] + p["decoder.head.bias"]
        for row, pos in enumerate([3, 7]):
            proj = e[row] @ p["decoder.embed.weight"] + p["decoder.embed.bias"]
            np.testing.assert_allclose(pred[pos], head(proj + p["decoder.pos_embed"][pos]), atol=1e-12)
        for pos in np.flatnonzero(mask):
            np.testing.assert_allclose(pred[pos], head(p["decoder.mask_token"] + p["decoder.pos_embed"][pos]), atol=1e-12)

    def test_roundtrip_matches_reference(self):
        m = _model64()
        chunks, _ = chunk_frames(_mel(60))
        plan = sample_mask(len(chunks), Rng(4))
        kept_tokens = m.tokenize(chunks).data[plan.kept_index]
        pred = m.decode(m.encode(Tensor(kept_tokens)), plan).chunks.data
        p = _np_params(m)
        e = ref.encode(p, TINY16, chunks, plan.kept_index)
        np.testing.assert_allclose(pred, ref.decode(p, TINY16, e, plan.kept_index, len(chunks)), atol=1e-5)

    def test_count_mismatch(self):
        m = _model64()
        with pytest.raises(ContractError):
            m.decode(m.encode(Tensor(np.zeros((3, 16)))), sample_mask(10, Rng(0)))


class TestNormalizedMSE:
    def test_identity(self):
        t = np.random.default_rng(5).normal(size=(8, 256))
        plan = sample_mask(8, Rng(0))
        pred = Tensor(normalize_chunks(t))
        assert float(normalized_mse(pred, t, plan).data) <= 1e-12

    def test_unit_variance(self):
        t = np.random.default_rng(6).normal(size=(8, 256))
        plan = sample_mask(8, Rng(1))
        loss = float(normalized_mse(Tensor(np.zeros((8, 256))), t, plan).data)
        # mean(t_hat^2) = var/(var+eps) per chunk
        expect = np.mean([t[j].var() / (t[j].var() + 1e-6) for j in plan.masked_index])
        assert abs(loss - 1.0) < 1e-6 and abs(loss - expect) < 1e-12

    def test_hand_value(self):
        t = np.zeros((4, 256))
        t[1] = np.arange(1, 257)
        mask = np.array([False, True, False, False])
        # var of 1..256 = (256^2 - 1) / 12; loss = sum(t_hat^2) / 256 = var / (var + eps)
        var = (256**2 - 1) / 12
        loss = float(normalized_mse(Tensor(np.zeros((4, 256))), t, MaskPlan(mask)).data)
        assert abs(loss - var / (var + 1e-6)) < 1e-12

    def test_no_masked(self):
        with pytest.raises(DomainError):
            normalized_mse(Tensor(np.zeros((4, 256))), np.zeros((4, 256)), MaskPlan(np.zeros(4, bool)))

    def test_locality(self):
        m = _model64()
        chunks, _ = chunk_frames(_mel(60))
        plan = sample_mask(len(chunks), Rng(7))
        pred = m.decode(m.encode(Tensor(m.tokenize(chunks).data[plan.kept_index])), plan)
        base = normalized_mse(pred, chunks, plan).data.tobytes()
        for j in plan.kept_index:
            other = chunks.copy()
            other[j] += np.random.default_rng(j).normal(size=256) * 10
            assert normalized_mse(pred, other, plan).data.tobytes() == base


class TestForwardTrain:
    def test_deterministic(self):
        m = MaskedAutoencoder(preset("tiny"), seed=0)
        mel = _mel(1001, batch=2).astype(np.float32)
        a, _ = m.forward_train(mel, Rng(9))
        b, _ = m.forward_train(mel, Rng(9))
        assert a.data.tobytes() == b.data.tobytes()

    def test_finite_positive(self):
        m = MaskedAutoencoder(preset("tiny"), seed=1)
        loss, diag = m.forward_train(_mel(1001).astype(np.float32), Rng(0))
        assert np.isfinite(loss.item()) and loss.item() > 0
        assert diag["n_tokens"] == 250 and diag["n_masked"] == 188 and diag["n_kept"] == 62

    def test_matches_reference(self):
        m = _model64()
        mel = _mel(48)
        loss, _ = m.forward_train(mel, Rng(11))
        chunks, _ = chunk_frames(mel)
        plan = sample_mask(len(chunks), Rng(11).split(0))
        assert abs(loss.item() - ref.loss(_np_params(m), TINY16, chunks, plan.mask)) < 1e-10

    def test_depth_zero_locality(self):
        cfg = ModelConfig(0, 16, 32, 2, decoder=DecoderConfig(0, 16, 32, 2))
        m = _model64(cfg)
        chunks, _ = chunk_frames(_mel(40))
        plan = sample_mask(10, Rng(3))
        tokens = m.tokenize(chunks).data
        base = m.decode(m.encode(Tensor(tokens[plan.kept_index])), plan).chunks.data
        i = plan.kept_index[0]
        bumped = chunks.copy()
        bumped[i] += 1.0
        tokens2 = m.tokenize(bumped).data
        out = m.decode(m.encode(Tensor(tokens2[plan.kept_index])), plan).chunks.data
        changed = np.flatnonzero(np.any(out != base, axis=1))
        assert list(changed) == [i]


def test_gradients_match_finite_differences(fd, relerr):
    """Every parameter of a small model, checked on a short clip (float64)."""
    m = _model64(perturb=True)
    mel = _mel(24, seed=1)
    rng = Rng(2)
    loss, _ = m.forward_train(mel, rng)
    loss.backward()
    names = [n for n in m.params if not n.endswith("pos_embed")]
    arrays = [m.params[n].data for n in names]
    numeric = fd(lambda: m.forward_train(mel, rng)[0].item(), arrays)
    for name, g in zip(names, numeric):
        assert relerr(m.params[name].grad, g) < 1e-4, name

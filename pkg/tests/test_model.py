from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import make_tiny
from lambo import tensor as T
from lambo.errors import ConfigError, ShapeMismatch, UnknownPrompt
from lambo.mec import Decision, GenConfig, Prompt, generate_instance
from lambo.model import (AedConfig, DecoderState, attention, decode_batch, decode_sequence,
                         decode_step, decision_capacity_audit, decoder_param_count, embed_inputs,
                         encode, encoder_param_count, init_params, param_count)

LAT, EN = Prompt.MIN_LATENCY, Prompt.MIN_ENERGY
CFG = AedConfig(n_servers=2, d_model=16, n_heads=2, enc_layers=2, dec_layers=1, d_ffn=32)


@pytest.fixture(scope="module")
def params():
    return init_params(CFG, 0)


def inst(seed=0, n=4, m=2):
    return generate_instance(GenConfig(n_ues=n, n_servers=m), seed)


def permuted(instance, perm):
    return instance.with_updates(ue_pos=instance.ue_pos[perm], data_bits=instance.data_bits[perm],
                                 cycles=instance.cycles[perm], f_local=instance.f_local[perm],
                                 gains=instance.gains[perm])


class TestConfig:
    @pytest.mark.parametrize("kwargs", [{"enc_layers": 0}, {"dec_layers": 0},
                                        {"enc_layers": 1, "dec_layers": 2}, {"n_heads": 5},
                                        {"f_min_frac": 0.0}, {"f_min_frac": 1.0},
                                        {"prompt_vocab": 3}])
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            AedConfig(**kwargs)

    def test_defaults(self):
        cfg = AedConfig()
        assert (cfg.d_model, cfg.n_heads, cfg.enc_layers, cfg.dec_layers, cfg.d_ffn) == \
            (64, 4, 4, 1, 256)

    def test_full_scale_expressible(self):
        cfg = AedConfig(enc_layers=60, dec_layers=6)
        assert encoder_param_count(cfg) > decoder_param_count(cfg)

    def test_counts_match_parameters(self, params):
        enc = param_count(params, ("enc.",))
        dec = param_count(params, ("dec.", "head."))
        assert enc == encoder_param_count(CFG) and dec == decoder_param_count(CFG)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 4), st.integers(1, 8), st.sampled_from([8, 16, 32]),
           st.sampled_from([16, 64, 128]), st.integers(1, 5))
    def test_encoder_at_least_decoder(self, dec, extra, d, f, m):
        kwargs = dict(n_servers=m, d_model=d, n_heads=2, enc_layers=dec + extra,
                      dec_layers=dec, d_ffn=f)
        try:
            cfg = AedConfig(**kwargs)
        except ConfigError:
            return  # rejected at construction, which is the other half of the contract
        assert encoder_param_count(cfg) >= decoder_param_count(cfg)

    def test_asymmetry_rejected(self):
        with pytest.raises(ConfigError, match="encoder"):
            AedConfig(d_model=16, n_heads=2, enc_layers=2, dec_layers=1, d_ffn=16)


class TestEmbedding:
    def test_prompt_rows(self, params):
        emb = embed_inputs([inst(), inst()], [LAT, EN], CFG, params)
        table = params["embed.prompt"].data
        assert np.array_equal(emb.prompt_token.data[0], table[0])
        assert np.array_equal(emb.prompt_token.data[1], table[1])

    def test_unknown_prompt(self, params):
        with pytest.raises(UnknownPrompt):
            embed_inputs([inst()], ["min_cost"], CFG, params)

    def test_zero_projection_gives_bias(self):
        p = init_params(CFG, 1)
        p["embed.ue.W"].data[:] = 0.0
        p["embed.ue.b"].data[:] = np.arange(16.0)
        emb = embed_inputs([inst()], [LAT], CFG, p)
        assert np.all(emb.ue_tokens.data == np.arange(16.0))

    def test_identical_ues_identical_tokens(self, params):
        x = make_tiny(3).with_updates(server_pos=np.array([[12.0, 10.0], [30.0, 30.0]]),
                                      capacity=np.array([1.5e10, 1.5e10]),
                                      gains=np.full((3, 2), 1e-7))
        tok = embed_inputs([x], [LAT], CFG, params).ue_tokens.data[0]
        assert np.array_equal(tok[0], tok[1]) and np.array_equal(tok[1], tok[2])

    def test_wrong_server_count(self, params):
        with pytest.raises(ShapeMismatch):
            embed_inputs([inst(m=3)], [LAT], CFG, params)


class TestEncoder:
    @pytest.mark.parametrize("seed", range(3))
    def test_permutation_equivariance(self, params, seed):
        x = inst(seed, n=6)
        perm = np.random.default_rng(seed).permutation(6)
        a = encode(embed_inputs([x], [EN], CFG, params), params, CFG).data[0]
        b = encode(embed_inputs([permuted(x, perm)], [EN], CFG, params), params, CFG).data[0]
        assert np.max(np.abs(a[perm] - b[:6])) < 1e-9
        assert np.max(np.abs(a[6] - b[6])) < 1e-9

    def test_shape(self, params):
        assert encode(embed_inputs([inst(n=5)], [LAT], CFG, params), params, CFG).shape == \
            (1, 6, 16)

    def test_attention_rows_sum_to_one_n1(self, params):
        emb = embed_inputs([inst(n=1)], [LAT], CFG, params)
        x = T.concat([emb.ue_tokens, T.reshape(emb.prompt_token, (1, 1, 16))], axis=1)
        _, w = attention(x, x, params, "enc.0.attn", CFG.n_heads, return_weights=True)
        assert w.shape[-2:] == (2, 2)
        assert np.allclose(w.data.sum(axis=-1), 1.0, atol=1e-12)


class TestDecodeStep:
    def test_zero_heads(self):
        p = init_params(CFG, 2)
        for k in ("head.cls.W", "head.cls.b", "head.rho.W", "head.rho.b"):
            p[k].data[:] = 0.0
        out = decode_sequence(inst(), LAT, p, CFG)
        assert np.allclose(out.probs, 1 / 3, atol=1e-15)
        assert np.all(out.rho_mean == 0.5)
        assert np.allclose(out.per_ue_entropy, math.log(3), atol=1e-12)

    def test_pure(self, params):
        x = inst()
        emb = embed_inputs([x], [LAT], CFG, params)
        ctx = encode(emb, params, CFG)
        mec = emb.mec_token(x.capacity[None])
        a = decode_step(ctx, 1, mec, emb.prompt_token, params, CFG, DecoderState(CFG))
        b = decode_step(ctx, 1, mec, emb.prompt_token, params, CFG, DecoderState(CFG))
        assert np.array_equal(a[0].data, b[0].data) and np.array_equal(a[1].data, b[1].data)

    def test_index_out_of_range(self, params):
        x = inst()
        emb = embed_inputs([x], [LAT], CFG, params)
        ctx = encode(emb, params, CFG)
        with pytest.raises(ShapeMismatch):
            decode_step(ctx, 4, emb.mec_token(x.capacity[None]), emb.prompt_token, params, CFG)


class TestDecodeSequence:
    def test_uniform_entropy_m4(self):
        cfg = AedConfig(n_servers=4, d_model=16, n_heads=2, enc_layers=2, d_ffn=32)
        p = init_params(cfg, 0)
        p["head.cls.W"].data[:] = 0.0
        p["head.cls.b"].data[:] = 0.0
        out = decode_sequence(inst(n=3, m=4), EN, p, cfg)
        assert out.per_ue_entropy[0] == pytest.approx(1.60944, abs=1e-5)

    def test_one_hot_entropy(self):
        p = init_params(CFG, 0)
        p["head.cls.W"].data[:] = 0.0
        p["head.cls.b"].data[:] = [800.0, 0.0, 0.0]
        out = decode_sequence(inst(), LAT, p, CFG)
        assert np.all(out.per_ue_entropy == 0.0)
        assert out.decision.assoc.tolist() == [0, 0, 0, 0]

    def test_masking(self, params):
        x = inst(n=3).with_updates(capacity=np.array([1e10, 1e10]))
        out = decode_batch([x], [LAT], params, CFG, mode="forced",
                           forced=([[1, 1, 1]], [[0.99, 0.99, 0.5]]))
        # remaining after two picks: 1e10 * 0.01 * 0.01 = 1e6 < f_min_frac * F = 1e8
        assert out.masked[0, 2, 1] and not out.masked[0, 1, 1]
        assert out.probs[0, 2, 1] == 0.0
        assert out.probs[0, 2].sum() == pytest.approx(1.0, abs=1e-9)
        assert out.entropy.data[0, 2] <= math.log(2) + 1e-12
        # the masked forced choice is executed as local
        assert out.assoc[0].tolist() == [1, 1, 0]

    def test_greedy_deterministic(self, params):
        a = decode_sequence(inst(3), EN, params, CFG)
        b = decode_sequence(inst(3), EN, params, CFG)
        assert a.decision == b.decision
        assert a.probs.tobytes() == b.probs.tobytes()

    def test_sample_seeded(self, params):
        a = decode_sequence(inst(3), EN, params, CFG, mode="sample", seed=4)
        b = decode_sequence(inst(3), EN, params, CFG, mode="sample", seed=4)
        assert a.decision == b.decision and a.log_prob == b.log_prob

    def test_batch_matches_single(self, params):
        xs = [inst(s) for s in range(3)]
        batch = decode_batch(xs, [LAT, EN, LAT], params, CFG, mode="greedy")
        for b, (x, p) in enumerate(zip(xs, [LAT, EN, LAT])):
            single = decode_sequence(x, p, params, CFG)
            assert np.allclose(batch.probs[b], single.probs, atol=1e-12)
            assert batch.decision(b).assoc.tolist() == single.decision.assoc.tolist()

    def test_bad_mode(self, params):
        with pytest.raises(ValueError):
            decode_batch([inst()], [LAT], params, CFG, mode="beam")

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 10 ** 6), st.floats(0.1, 30.0), st.integers(1, 7),
           st.sampled_from(["greedy", "sample"]))
    def test_capacity_by_construction(self, seed, scale, n, mode):
        p = init_params(CFG, seed % 1000)
        for k in ("head.cls.W", "head.rho.W", "head.rho.b"):
            p[k].data *= scale
        x = generate_instance(GenConfig(n_ues=n, n_servers=2, capacities=(2e9, 8e9)), seed)
        out = decode_sequence(x, Prompt(seed % 2), p, CFG, mode=mode, seed=seed)
        assert decision_capacity_audit(x, out)
        rows = out.probs.sum(axis=1)
        assert np.allclose(rows, 1.0, atol=1e-9)
        assert np.all((out.rho_mean >= 0) & (out.rho_mean <= 1))
        offl = out.decision.assoc > 0
        frac = out.decision.alloc[offl] / x.capacity[out.decision.assoc[offl] - 1]
        assert np.all(frac <= 0.99 + 1e-12)
        assert np.all(out.per_ue_entropy >= 0)
        assert np.all(out.per_ue_entropy <= math.log(3) + 1e-12)


class TestAudit:
    def test_over_allocation(self, tiny):
        assert not decision_capacity_audit(tiny, Decision([1, 0], [3e10, 0.0]))

    def test_all_local(self, tiny):
        assert decision_capacity_audit(tiny, Decision.all_local(2))

    def test_exact_capacity(self, tiny):
        assert decision_capacity_audit(tiny, Decision([1, 1], [7.5e9, 7.5e9]))


def test_log_prob_grad_check():
    cfg = AedConfig(n_servers=2, d_model=8, n_heads=2, enc_layers=2, dec_layers=1, d_ffn=16)
    params = init_params(cfg, 5)
    xs = [inst(s, n=3) for s in range(2)]
    prompts = [LAT, EN]
    sample = decode_batch(xs, prompts, params, cfg, mode="sample",
                          rng=np.random.default_rng(0))
    forced = (sample.assoc, np.where(sample.assoc > 0, sample.rho, 0.5))

    def f():
        out = decode_batch(xs, prompts, params, cfg, mode="forced", forced=forced)
        return T.sum_(T.add(out.log_prob, T.scale(T.sum_(out.entropy, axis=1), 0.1)))

    assert T.grad_check(f, params, probe_count=60, seed=1) < 1e-5

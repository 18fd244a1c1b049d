from __future__ import annotations

import numpy as np
import pytest

from conftest import make_tiny
from lambo import tensor as T
from lambo.errors import ConfigError, NonFinite, OracleTooLarge
from lambo.mec import Decision, GenConfig, Prompt, evaluate, generate_instance, generate_instances
from lambo.model import AedConfig, critic_value, decode_batch, init_critic_params, init_params
from lambo.solvers import solve_exact, solve_random
from lambo.train import (AclConfig, actor_loss, critic_loss, evaluate_policy, pretrain, reward)

LAT, EN = Prompt.MIN_LATENCY, Prompt.MIN_ENERGY
CFG = AedConfig(n_servers=2, d_model=16, n_heads=2, enc_layers=2, dec_layers=1, d_ffn=32)
GEN = GenConfig(n_ues=4, n_servers=2)


def quick(**kw):
    base = dict(epochs=3, instances_per_epoch=16, batch_size=8, patience=0, seed=42)
    return AclConfig(**{**base, **kw})


class TestReward:
    def test_all_local_latency(self, one_ue):
        assert reward(one_ue, Decision.all_local(1), LAT) == pytest.approx(-1.0)

    def test_infeasible(self, one_ue):
        assert reward(one_ue, Decision([1], [5e8]), LAT) == pytest.approx(-6.867, abs=5e-4)

    def test_sign(self, one_ue):
        d = Decision([1], [1e10])
        assert reward(one_ue, d, EN) == -evaluate(one_ue, d, EN).penalized


class TestConfig:
    @pytest.mark.parametrize("kw", [{"epochs": 0}, {"lr": 0.0}, {"entropy_beta": -0.1},
                                    {"reward_transform": "sqrt"}])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            AclConfig(**kw)

    def test_group_needs_rollouts(self):
        with pytest.raises(ConfigError):
            AclConfig(baseline="group", rollouts=1)

    def test_dict_round_trip(self):
        acl = AclConfig(lr=3e-4, critic_lr=1e-3)
        assert AclConfig.from_dict(acl.to_dict()) == acl


class TestCritic:
    def test_zero_init(self):
        critic = init_critic_params(CFG, 0)
        v = critic_value([generate_instance(GEN, 1)], [LAT], critic, CFG)
        assert v.data.tolist() == [0.0]

    def test_pure(self):
        critic = init_critic_params(CFG, 0)
        critic["value.W"].data[:] = 0.3
        x = generate_instance(GEN, 2)
        a = critic_value([x, x], [EN, EN], critic, CFG).data
        assert a[0] == a[1] and np.isfinite(a).all()

    def test_fits_fixed_reward(self):
        critic = init_critic_params(CFG, 3)
        x = generate_instance(GEN, 4)
        target = np.array([-0.8])
        state = T.OptimState(lr=1e-3)
        for step in range(500):
            with T.Tape() as tape:
                loss = critic_loss(critic_value([x], [LAT], critic, CFG), target)
            if loss.item() < 1e-4:
                break
            T.optim_step(critic, tape.backward(loss, critic), state)
        assert loss.item() < 1e-4


def test_group_baseline_leave_one_out():
    from lambo.train import _advantage

    acl = AclConfig(rollouts=3, baseline="group", normalize_advantage=False, advantage_clip=None)
    R = np.array([-1.0, -2.0, -3.0, -5.0, -5.0, -5.0])
    A = _advantage(R, np.zeros(6), acl)
    assert A == pytest.approx([1.5, 0.0, -1.5, 0.0, 0.0, 0.0])


def test_rollouts_run():
    _, _, log = pretrain(GEN, CFG, quick(epochs=2, rollouts=4, baseline="group"))
    assert len(log) == 2


@pytest.mark.parametrize("sign", [1.0, -1.0])
def test_actor_gradient_direction(sign):
    params = init_params(CFG, 7)
    xs = [generate_instance(GEN, 9)]
    out = decode_batch(xs, [LAT], params, CFG, mode="sample", rng=np.random.default_rng(1))
    forced = (out.assoc, np.where(out.assoc > 0, out.rho, 0.5))

    def log_prob():
        return decode_batch(xs, [LAT], params, CFG, mode="forced", forced=forced).log_prob

    before = log_prob().data[0]
    with T.Tape() as tape:
        loss = actor_loss(decode_batch(xs, [LAT], params, CFG, mode="forced", forced=forced),
                          np.array([sign]), 0.0)
    T.optim_step(params, tape.backward(loss, params), T.OptimState(lr=1e-4))
    after = log_prob().data[0]
    assert np.sign(after - before) == sign


class TestPretrain:
    def test_deterministic(self):
        a = pretrain(GEN, CFG, quick())
        b = pretrain(GEN, CFG, quick())
        assert a[2] == b[2] and len(a[2]) == 3
        assert all(a[0][k].data.tobytes() == b[0][k].data.tobytes() for k in a[0])

    def test_log_columns(self):
        _, _, log = pretrain(GEN, CFG, quick(epochs=2))
        assert [r["epoch"] for r in log.rows] == [1, 2]
        assert all(np.isfinite([r[k] for k in log.COLUMNS if k != "val_score"]).all()
                   for r in log.rows)
        assert np.isnan(log.column("val_score")).all()

    def test_validation_selects_best(self):
        _, _, log = pretrain(GEN, CFG, quick(epochs=5, eval_every=2, val_instances=6))
        scores = log.column("val_score")
        assert np.isnan(scores[[0, 2]]).all() and np.isfinite(scores[[1, 3, 4]]).all()
        assert (scores[np.isfinite(scores)] > 0).all()
        again = pretrain(GEN, CFG, quick(epochs=5, eval_every=2, val_instances=6))
        assert again[2] == log

    def test_inputs_untouched(self):
        pool = generate_instances(GEN, 8, 0)
        snapshot = [x.with_updates() for x in pool]
        pretrain(lambda s: pool[s % 8], CFG, quick(epochs=2))
        assert all(a.equals(b) for a, b in zip(pool, snapshot))

    def test_early_stop(self):
        _, _, log = pretrain(GEN, CFG, quick(epochs=20, patience=3, min_delta=1e9))
        assert log.stopped_early and len(log) == 4

    def test_nonfinite_aborts_with_last_good(self, monkeypatch):
        import lambo.train as tr

        calls = {"n": 0}
        real = tr.batch_rewards

        def poisoned(*args, **kw):
            calls["n"] += 1
            r = real(*args, **kw)
            return r * np.nan if calls["n"] > 2 else r

        monkeypatch.setattr(tr, "batch_rewards", poisoned)
        with pytest.raises(NonFinite) as info:
            pretrain(GEN, CFG, quick(epochs=5))
        assert len(info.value.log) == 1
        assert all(np.isfinite(v.data).all() for v in info.value.params.values())

    def test_entropy_bonus_keeps_entropy_higher(self):
        ent = {}
        for beta in (0.0, 0.01):
            ent[beta] = np.mean([
                pretrain(GEN, CFG, quick(epochs=50, entropy_beta=beta, seed=s, lr=1e-3))[2]
                .column("mean_entropy")[-1] for s in range(3)])
        assert ent[0.0] < ent[0.01]

    def test_short_run_beats_random(self):
        params, _, _ = pretrain(GEN, CFG, quick(epochs=10, instances_per_epoch=200, batch_size=16,
                                                lr=1e-3))
        held = generate_instances(GEN, 100, 10_000)
        ours, _ = evaluate_policy(params, held, LAT, cfg=CFG, with_gap=False)
        rand = np.mean([evaluate(x, solve_random(x, i), LAT).penalized
                        for i, x in enumerate(held)])
        assert ours < rand


class TestEvaluatePolicy:
    def test_oracle_replay_gap_zero(self):
        held = generate_instances(GEN, 5, 3)
        oracle = {id(x): solve_exact(x, EN)[0] for x in held}
        _, gap = evaluate_policy(lambda x, p: oracle[id(x)], held, EN)
        assert gap == pytest.approx(0.0, abs=1e-12)

    def test_random_on_tiny(self, tiny):
        for seed in range(50):
            j, gap = evaluate_policy(lambda x, p: solve_random(x, seed), [tiny], LAT)
            assert j >= 1 / 3 - 5e-6 and gap >= -1e-9

    def test_oracle_too_large(self):
        big = generate_instances(GenConfig(n_ues=12, n_servers=4), 1, 0)
        with pytest.raises(OracleTooLarge):
            evaluate_policy(lambda x, p: Decision.all_local(12), big, LAT, budget=1000)

    def test_no_gap(self):
        big = generate_instances(GenConfig(n_ues=12, n_servers=4), 1, 0)
        j, gap = evaluate_policy(lambda x, p: Decision.all_local(12), big, LAT, with_gap=False)
        assert gap is None and j > 0

    def test_param_policy_sample_mode(self):
        held = generate_instances(GEN, 3, 1)
        j, gap = evaluate_policy(init_params(CFG, 0), held, EN, mode="sample", cfg=CFG)
        assert j > 0 and gap >= -1e-9

    def test_tiny_energy_local_value(self):
        j, _ = evaluate_policy(lambda x, p: Decision.all_local(2), [make_tiny(2)], EN,
                               with_gap=False)
        assert j == pytest.approx(2.0)

"""Actor-critic pre-training across both prompts, and policy evaluation."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from . import tensor as T
from .errors import ConfigError, NonFinite
from .mec import Decision, GenConfig, MecInstance, Prompt, evaluate, generate_instance
from .model import (AedConfig, copy_params, critic_value, decode_batch, init_critic_params,
                    init_params)
from .solvers import DEFAULT_ENUM_BUDGET, solve_exact

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AclConfig:
    epochs: int = 300
    instances_per_epoch: int = 256
    batch_size: int = 16
    lr: float = 1e-4
    critic_lr: float | None = None
    penalty_lambda: float = 10.0
    entropy_beta: float = 0.01
    seed: int = 42
    eval_every: int = 10
    patience: int = 10
    min_delta: float = 1e-4
    grad_clip: float | None = 1.0
    normalize_advantage: bool = True
    advantage_clip: float | None = 5.0
    reward_transform: str = "identity"
    rollouts: int = 1
    baseline: str = "critic"
    val_instances: int = 0

    def __post_init__(self):
        for name in ("epochs", "instances_per_epoch", "batch_size", "eval_every", "rollouts"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if not self.lr > 0 or not self.penalty_lambda > 0:
            raise ConfigError("lr and penalty_lambda must be positive")
        if self.critic_lr is not None and not self.critic_lr > 0:
            raise ConfigError("critic_lr must be positive")
        if self.entropy_beta < 0:
            raise ConfigError("entropy_beta must be >= 0")
        if self.reward_transform not in REWARD_TRANSFORMS:
            raise ConfigError(f"reward_transform must be one of {sorted(REWARD_TRANSFORMS)}")
        if self.baseline not in BASELINES:
            raise ConfigError(f"baseline must be one of {BASELINES}")
        if self.baseline == "group" and self.rollouts < 2:
            raise ConfigError("the group baseline needs rollouts >= 2")
        if self.patience < 0 or self.val_instances < 0:
            raise ConfigError("patience and val_instances must be >= 0")

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> "AclConfig":
        return cls(**d)


@dataclass
class TrainLog:
    """One row per completed epoch."""

    rows: list[dict] = field(default_factory=list)
    stopped_early: bool = False

    COLUMNS = ("epoch", "mean_reward", "penalized_min_latency", "penalized_min_energy",
               "actor_loss", "critic_loss", "mean_entropy", "val_score")

    def append(self, row: dict):
        self.rows.append({k: row.get(k, float("nan")) for k in self.COLUMNS})

    def column(self, name):
        return np.array([r[name] for r in self.rows], dtype=float)

    def __len__(self):
        return len(self.rows)

    def __eq__(self, other):
        # compare through repr so that nan entries (epochs without validation) match
        return isinstance(other, TrainLog) and repr(self.rows) == repr(other.rows)


def reward(instance: MecInstance, decision: Decision, prompt) -> float:
    """Higher is better: the negated penalized objective."""
    return -evaluate(instance, decision, prompt).penalized


def batch_rewards(instances, prompts, assoc, alloc, penalty_lambda=None) -> np.ndarray:
    out = np.empty(len(instances))
    for b, (inst, prompt) in enumerate(zip(instances, prompts)):
        args = list(inst.kernel_args())
        if penalty_lambda is not None:
            args[-1] = penalty_lambda
        out[b] = -_kernels.active.evaluate_batch(assoc[b:b + 1], alloc[b:b + 1], *args,
                                                 int(prompt))[3][0]
    return out


REWARD_TRANSFORMS = {
    "identity": lambda r: r,
    # monotone per instance, so the per-instance optimum is unchanged
    "log": lambda r: -np.log(np.maximum(-r, 1e-12)),
}


BASELINES = ("critic", "group")

# Laptop-scale settings for the N=4, M=2 experiments. Eight rollouts per
# instance with the leave-one-out baseline, validation-based model selection.
DESK_ACL = dict(epochs=400, instances_per_epoch=64, batch_size=16, rollouts=8, baseline="group",
                lr=3e-4, critic_lr=1e-3, entropy_beta=0.01, eval_every=10, val_instances=100,
                patience=0)


def desk_acl_config(seed: int = 42, **overrides) -> AclConfig:
    return AclConfig(**{**DESK_ACL, "seed": seed, **overrides})


def _clip(grads: dict, max_norm: float | None):
    if max_norm is None:
        return grads
    norm = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if norm > max_norm:
        grads = {k: g * (max_norm / norm) for k, g in grads.items()}
    return grads


def _advantage(R, V, acl: AclConfig) -> np.ndarray:
    """R and V are (B * K,) with the K rollouts of one instance adjacent."""
    if acl.baseline == "group":
        # leave-one-out mean over the other rollouts of the same instance
        g = R.reshape(-1, acl.rollouts)
        base = ((g.sum(axis=1, keepdims=True) - g) / (acl.rollouts - 1)).ravel()
    else:
        base = V
    A = R - base
    if acl.normalize_advantage and A.size > 1:
        A = (A - A.mean()) / (A.std() + 1e-8)
    if acl.advantage_clip is not None:
        A = np.clip(A, -acl.advantage_clip, acl.advantage_clip)
    return A


def _instance_source(generator):
    if isinstance(generator, GenConfig):
        return lambda seed: generate_instance(generator, seed)
    return generator


def actor_loss(out, advantage: np.ndarray, entropy_beta: float) -> T.Tensor:
    """mean_b(-A_b * log_prob_b - beta * sum_i H_bi)."""
    pg = T.mul(out.log_prob, T.constant(-advantage))
    if entropy_beta:
        pg = T.sub(pg, T.scale(T.sum_(out.entropy, axis=1), entropy_beta))
    return T.mean(pg)


def critic_loss(values: T.Tensor, rewards: np.ndarray) -> T.Tensor:
    return T.mean(T.square(T.sub(values, T.constant(rewards))))


def pretrain(instance_generator, aed_config: AedConfig, acl_config: AclConfig,
             params=None, critic=None, progress=None):
    """Advantage actor-critic training with uniform prompt sampling.

    ``instance_generator`` is a :class:`GenConfig` or a ``seed -> MecInstance``
    callable. Returns ``(actor_params, critic_params, TrainLog)``. Stops after
    ``epochs`` or when the best epoch-mean reward has not improved by
    ``min_delta`` for ``patience`` epochs (``patience=0`` disables this).

    With ``rollouts = K > 1`` every instance is decoded K times under the same
    prompt. The critic is fitted to the mean signal of the K rollouts; the
    actor's baseline is the critic value or, with ``baseline="group"``, the
    mean of the other K - 1 rollouts.

    With ``val_instances > 0`` a validation set is drawn from the generator on
    its own seed stream. Every ``eval_every`` epochs (and after the last one)
    the greedy policy is scored on it as the mean ratio of its penalized
    objective to the all-local one, averaged over both prompts. The returned
    networks are those of the best-scoring evaluation.
    """
    cfg, acl = aed_config, acl_config
    make = _instance_source(instance_generator)
    root = np.random.SeedSequence(acl.seed)
    init_seq, run_seq, val_seq = root.spawn(3)
    a_seed, c_seed = (int(s) for s in init_seq.generate_state(2))
    params = params if params is not None else init_params(cfg, a_seed)
    critic = critic if critic is not None else init_critic_params(cfg, c_seed)
    actor_state = T.OptimState(lr=acl.lr)
    critic_state = T.OptimState(lr=acl.critic_lr or acl.lr)
    rng = np.random.default_rng(run_seq)
    train_log = TrainLog()
    best, best_epoch = -np.inf, 0
    good = (copy_params(params), copy_params(critic))
    validate = _validator(make, cfg, val_seq, acl.val_instances) if acl.val_instances else None
    best_val, chosen = np.inf, None

    for epoch in range(1, acl.epochs + 1):
        seeds = rng.integers(0, 2 ** 31 - 1, size=acl.instances_per_epoch)
        rewards_all, prompts_all, ent_all = [], [], []
        a_losses, c_losses = [], []
        try:
            for start in range(0, acl.instances_per_epoch, acl.batch_size):
                distinct = [make(int(s)) for s in seeds[start:start + acl.batch_size]]
                drawn = [Prompt(int(k)) for k in rng.integers(0, 2, size=len(distinct))]
                K = acl.rollouts
                instances = [x for x in distinct for _ in range(K)]
                prompts = [p for p in drawn for _ in range(K)]
                with T.Tape() as tape:
                    out = decode_batch(instances, prompts, params, cfg, mode="sample", rng=rng)
                    R = batch_rewards(instances, prompts, out.assoc, out.alloc,
                                      acl.penalty_lambda)
                    signal = REWARD_TRANSFORMS[acl.reward_transform](R)
                    with T.Tape() as ctape:
                        V = critic_value(distinct, drawn, critic, cfg)
                        closs = critic_loss(V, signal.reshape(-1, K).mean(axis=1))
                    V_rep = np.repeat(V.data, K)
                    aloss = actor_loss(out, _advantage(signal, V_rep, acl), acl.entropy_beta)
                grads = _clip(tape.backward(aloss, params), acl.grad_clip)
                T.optim_step(params, grads, actor_state)
                cgrads = _clip(ctape.backward(closs, critic), acl.grad_clip)
                T.optim_step(critic, cgrads, critic_state)
                rewards_all.append(R)
                prompts_all.extend(int(p) for p in prompts)
                ent_all.append(out.entropy.data.sum(axis=1))
                a_losses.append(aloss.item())
                c_losses.append(closs.item())
        except NonFinite as exc:
            params, critic = good
            exc.params, exc.critic, exc.log = params, critic, train_log
            log.error("non-finite value in epoch %d; keeping last good parameters", epoch)
            raise

        R = np.concatenate(rewards_all)
        pr = np.asarray(prompts_all)
        row = {
            "epoch": epoch,
            "mean_reward": float(R.mean()),
            "penalized_min_latency": float(-R[pr == 0].mean()) if np.any(pr == 0) else float("nan"),
            "penalized_min_energy": float(-R[pr == 1].mean()) if np.any(pr == 1) else float("nan"),
            "actor_loss": float(np.mean(a_losses)),
            "critic_loss": float(np.mean(c_losses)),
            "mean_entropy": float(np.concatenate(ent_all).mean()),
        }
        last = epoch == acl.epochs
        if validate is not None and (epoch % acl.eval_every == 0 or last):
            row["val_score"] = validate(params)
            if row["val_score"] < best_val:
                best_val, chosen = row["val_score"], (copy_params(params), copy_params(critic))
        train_log.append(row)
        good = (copy_params(params), copy_params(critic))
        if progress is not None:
            progress(row)
        elif epoch % acl.eval_every == 0:
            log.info("epoch %d reward %.4f entropy %.3f", epoch, row["mean_reward"],
                     row["mean_entropy"])
        if row["mean_reward"] > best + acl.min_delta:
            best, best_epoch = row["mean_reward"], epoch
        elif acl.patience and epoch - best_epoch >= acl.patience:
            train_log.stopped_early = True
            if validate is not None and "val_score" not in row:
                score = validate(params)
                if score < best_val:
                    chosen = (copy_params(params), copy_params(critic))
            break
    if chosen is not None:
        params, critic = chosen
    return params, critic, train_log


def _validator(make, cfg, seq, count):
    seeds = seq.generate_state(count)
    instances = [make(int(s)) for s in seeds]
    local = {p: np.array([evaluate(x, Decision.all_local(x.n_ues), p).penalized
                          for x in instances]) for p in Prompt}

    def score(params) -> float:
        ratios = []
        for p in Prompt:
            dec = greedy_decisions(params, cfg, instances, p)
            pen = np.array([evaluate(x, d, p).penalized for x, d in zip(instances, dec)])
            ratios.append(np.mean(pen / local[p]))
        return float(np.mean(ratios))
    return score


def greedy_decisions(params, cfg: AedConfig, instances, prompt, batch_size: int = 64):
    prompt = Prompt.parse(prompt)
    decisions = []
    for start in range(0, len(instances), batch_size):
        chunk = instances[start:start + batch_size]
        out = decode_batch(chunk, [prompt] * len(chunk), params, cfg, mode="greedy")
        decisions.extend(out.decision(b) for b in range(len(chunk)))
    return decisions


def evaluate_policy(policy, instance_set, prompt, mode: str = "greedy", cfg: AedConfig = None,
                    with_gap: bool = True, budget: int = DEFAULT_ENUM_BUDGET):
    """Mean penalized objective and mean relative gap to the exact oracle.

    ``policy`` is either actor parameters (with ``cfg``) or a callable
    ``(instance, prompt) -> Decision``. The gap is ``None`` when
    ``with_gap`` is false; otherwise the oracle must fit in ``budget``.
    """
    prompt = Prompt.parse(prompt)
    if callable(policy):
        decisions = [policy(inst, prompt) for inst in instance_set]
    elif mode == "greedy":
        decisions = greedy_decisions(policy, cfg, instance_set, prompt)
    else:
        rng = np.random.default_rng(0)
        decisions = []
        for inst in instance_set:
            out = decode_batch([inst], [prompt], policy, cfg, mode=mode, rng=rng)
            decisions.append(out.decision(0))
    values = np.array([evaluate(i, d, prompt).penalized for i, d in zip(instance_set, decisions)])
    gap = None
    if with_gap:
        opt = np.array([solve_exact(i, prompt, budget)[1] for i in instance_set])
        gap = float(np.mean((values - opt) / opt))
    return float(values.mean()), gap


class Timer:
    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.ms = (time.perf_counter() - self.start) * 1e3
        return False

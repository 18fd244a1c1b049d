"""Online fine-tuning of the decoder from expert labels.

Instances arrive from a drifting environment. The policy's mean per-UE
entropy scores each one; the most uncertain are sent to an expert (the exact
oracle when enumeration fits the budget, DE otherwise) and the resulting
labels train the decoder and output heads by supervised learning, next to a
label-free policy-gradient term on recently seen instances. An update is kept
only if it does not worsen the greedy objective on those instances. Input
embeddings and the encoder are never touched.
"""
from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeMismatch
from .mec import Decision, MecInstance, Prompt, evaluate, step_dynamics
from .model import (RHO_MAX, RHO_MIN, AedConfig, copy_params, decode_batch, decoder_names,
                    uncertainty_pass)
from .solvers import DEFAULT_ENUM_BUDGET, DeConfig, enumeration_size, solve_de, solve_exact
from .train import actor_loss, batch_rewards


class QueryMode(str, enum.Enum):
    TOPK = "topk"
    THRESHOLD = "threshold"


@dataclass(frozen=True)
class QueryPolicy:
    """Which instances are sent to the expert.

    ``TOPK`` picks the ``k`` highest-scoring instances of each ``window``
    consecutive arrivals; ``THRESHOLD`` picks every instance scoring at least
    ``threshold`` nats. Both stop after ``budget`` selections.
    """

    mode: QueryMode = QueryMode.TOPK
    budget: int = 50
    window: int = 4
    threshold: float = 1.0
    k: int = 1

    def __post_init__(self):
        object.__setattr__(self, "mode", QueryMode(self.mode))
        if self.budget < 0 or self.threshold < 0:
            raise ConfigError("budget and threshold must be non-negative")
        if self.window < 1 or self.k < 1:
            raise ConfigError("window and k must be positive")


@dataclass(frozen=True)
class FinetuneConfig:
    lr: float = 3e-4
    w_ce: float = 1.0
    w_mse: float = 1.0
    steps: int = 20
    batch_size: int = 16
    replay_capacity: int = 256
    dt_s: float = 1.0
    seed: int = 0
    w_rl: float = 1.0
    rl_rollouts: int = 8
    gate: bool = True
    gate_recent: int = 32

    def __post_init__(self):
        if not self.lr > 0 or not self.dt_s > 0:
            raise ConfigError("lr and dt_s must be positive")
        if self.rl_rollouts < 2:
            raise ConfigError("rl_rollouts must be at least 2")
        if self.w_ce < 0 or self.w_mse < 0 or self.w_rl < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.gate_recent < 0:
            raise ConfigError("gate_recent must be non-negative")
        if self.steps < 0 or self.batch_size < 1 or self.replay_capacity < 1:
            raise ConfigError("steps must be >= 0, batch_size and replay_capacity >= 1")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class ExpertLabel:
    assoc: np.ndarray
    alloc_abs: np.ndarray
    objective: float
    penalized: float
    expert: str
    infeasible: bool = False

    @property
    def decision(self) -> Decision:
        return Decision(self.assoc, self.alloc_abs)


@dataclass(frozen=True)
class Targets:
    """Per-UE supervised targets in the decoder's parameterisation.

    ``rho`` is clamped to the decoder's range; ``rho_exact`` is the unclamped
    fraction of remaining capacity, which replays the label exactly.
    """

    cls: np.ndarray
    rho: np.ndarray
    rho_exact: np.ndarray
    offloaded: np.ndarray


@dataclass
class LabeledExample:
    instance: MecInstance
    prompt: Prompt
    targets: Targets


# -- scoring and selection -----------------------------------------------------------


def instance_uncertainty(decode_output) -> float | np.ndarray:
    """Mean per-UE entropy of the association head, in nats.

    Accepts a single-instance decode result, a batch result (returns one
    score per instance) or a raw entropy array.
    """
    ent = getattr(decode_output, "per_ue_entropy", decode_output)
    ent = np.asarray(ent, dtype=float)
    if ent.ndim == 1:
        return float(ent.mean())
    return ent.mean(axis=-1)


def select_queries(scores, policy: QueryPolicy) -> list[int]:
    """Indices (in arrival order) of the instances to label."""
    scores = np.asarray(scores, dtype=float)
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    if policy.budget == 0:
        return []
    if policy.mode is QueryMode.THRESHOLD:
        picked = np.nonzero(scores >= policy.threshold)[0].tolist()
        return picked[:policy.budget]
    picked: list[int] = []
    for start in range(0, scores.size, policy.window):
        block = scores[start:start + policy.window]
        # stable sort on the negated score keeps earlier arrivals first on ties
        order = np.argsort(-block, kind="stable")[:policy.k]
        picked.extend(sorted(int(start + j) for j in order))
        if len(picked) >= policy.budget:
            return picked[:policy.budget]
    return picked


# -- experts ---------------------------------------------------------------------------


def expert_solve(instance: MecInstance, prompt, expert_kind: str = "auto",
                 budget: int = DEFAULT_ENUM_BUDGET, de_config: DeConfig | None = None
                 ) -> ExpertLabel:
    """Label an instance with the exact oracle or DE.

    ``"auto"`` uses the oracle when (M+1)^N fits ``budget`` and DE otherwise.
    A label that still violates a deadline carries ``infeasible=True``; it is
    the least-penalised decision the expert found.
    """
    prompt = Prompt.parse(prompt)
    if expert_kind not in ("auto", "exact", "de"):
        raise ConfigError(f"unknown expert {expert_kind!r}")
    if expert_kind == "auto":
        expert_kind = "exact" if enumeration_size(instance) <= budget else "de"
    if expert_kind == "exact":
        decision, _ = solve_exact(instance, prompt, budget)
    else:
        decision = solve_de(instance, prompt, de_config)
    ev = evaluate(instance, decision, prompt)
    infeasible = ev.latency_violation > 0 or ev.capacity_violation > 0
    return ExpertLabel(decision.assoc.copy(), decision.alloc.copy(), ev.objective, ev.penalized,
                       expert_kind, infeasible)


def label_to_targets(instance: MecInstance, label) -> Targets:
    """Express absolute allocations as sequential fractions of remaining capacity."""
    assoc = np.asarray(label.assoc, dtype=np.int64)
    alloc = np.asarray(getattr(label, "alloc_abs", getattr(label, "alloc", None)), dtype=float)
    if assoc.shape != (instance.n_ues,) or alloc.shape != assoc.shape:
        raise ShapeMismatch("label does not match the instance")
    remaining = instance.capacity.astype(float).copy()
    rho = np.zeros(assoc.size)
    for i, a in enumerate(assoc):
        if a > 0:
            rho[i] = alloc[i] / remaining[a - 1]
            remaining[a - 1] -= alloc[i]
    offloaded = assoc > 0
    clamped = np.where(offloaded, np.clip(rho, RHO_MIN, RHO_MAX), 0.0)
    return Targets(assoc.copy(), clamped, rho, offloaded)


def replay_targets(instance: MecInstance, targets: Targets, exact: bool = True) -> np.ndarray:
    """Absolute allocations obtained by applying the target fractions in order."""
    rho = targets.rho_exact if exact else targets.rho
    remaining = instance.capacity.astype(float).copy()
    alloc = np.zeros(targets.cls.size)
    for i, a in enumerate(targets.cls):
        if a > 0:
            alloc[i] = rho[i] * remaining[a - 1]
            remaining[a - 1] -= alloc[i]
    return alloc


# -- supervised decoder update -----------------------------------------------------------


def supervised_loss(params, cfg: AedConfig, examples, w_ce: float, w_mse: float) -> T.Tensor:
    """w_ce * mean cross-entropy + w_mse * mean squared rho error over offloaded UEs.

    All examples must have the same number of UEs. A target server that is
    masked at its step is left out of the cross-entropy.
    """
    instances = [e.instance for e in examples]
    prompts = [e.prompt for e in examples]
    cls = np.stack([e.targets.cls for e in examples])
    rho = np.stack([e.targets.rho for e in examples])
    out = decode_batch(instances, prompts, params, cfg, mode="forced", forced=(cls, rho))
    B, N = cls.shape
    rows = np.arange(B)
    ce_terms, mse_terms = [], []
    n_ce = n_mse = 0
    for i in range(N):
        live = ~out.masked[rows, i, cls[:, i]]
        n_ce += int(live.sum())
        ce_terms.append(T.sum_(T.mul(out.log_probs_cls[i], T.constant(live.astype(float)))))
        off = (cls[:, i] > 0) & live
        n_mse += int(off.sum())
        if off.any():
            diff = T.sub(T.sigmoid(out.rho_logits[i]), T.constant(rho[:, i]))
            mse_terms.append(T.sum_(T.mul(T.square(diff), T.constant(off.astype(float)))))
    loss = T.scale(_total(ce_terms), -w_ce / max(n_ce, 1))
    if mse_terms:
        loss = T.add(loss, T.scale(_total(mse_terms), w_mse / n_mse))
    return loss


def _total(terms):
    acc = terms[0]
    for t in terms[1:]:
        acc = T.add(acc, t)
    return acc


def _by_size(examples):
    groups: dict[int, list] = {}
    for e in examples:
        groups.setdefault(e.instance.n_ues, []).append(e)
    return list(groups.values())


def policy_gradient_loss(params, cfg: AedConfig, instances, prompts, rollouts: int,
                         rng) -> T.Tensor:
    """REINFORCE over ``rollouts`` sampled decodes per instance.

    The baseline of each sample is the mean reward of the other samples of
    the same instance; advantages are standardised and clipped at 5.
    """
    K = rollouts
    xs = [x for x in instances for _ in range(K)]
    ps = [p for p in prompts for _ in range(K)]
    out = decode_batch(xs, ps, params, cfg, mode="sample", rng=rng)
    R = batch_rewards(xs, ps, out.assoc, out.alloc).reshape(-1, K)
    A = (R - (R.sum(axis=1, keepdims=True) - R) / (K - 1)).ravel()
    A = A / (A.std() + 1e-8)
    return actor_loss(out, np.clip(A, -5.0, 5.0), 0.0)


def _minibatch(group, size, rng):
    if len(group) <= size:
        return group
    return [group[j] for j in np.sort(rng.choice(len(group), size, replace=False))]


def finetune_decoder(params, labeled_set, cfg: AedConfig, config: FinetuneConfig,
                     opt_state: T.OptimState | None = None, rng=None, anchors=()):
    """Train decoder and head parameters on labeled examples.

    Returns ``(new_params, losses)``; ``params`` is not modified. Each step
    uses a minibatch of at most ``batch_size`` examples drawn from one
    instance size. Pass ``opt_state`` to continue an optimiser across calls.
    With ``w_rl`` > 0 and ``anchors`` (pairs of instance and prompt, no labels
    needed), every step also adds ``w_rl`` times
    :func:`policy_gradient_loss` on a minibatch of anchors.
    """
    labeled_set = list(labeled_set)
    if not labeled_set:
        raise ValueError("labeled set is empty")
    new = copy_params(params)
    if config.w_ce == 0 and config.w_mse == 0:
        return new, []
    trainable = {k: new[k] for k in decoder_names(new)}
    state = opt_state if opt_state is not None else T.OptimState(lr=config.lr)
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    groups = _by_size(labeled_set)
    anchor_groups: dict[int, list] = {}
    if config.w_rl > 0:
        for inst, prompt in anchors:
            anchor_groups.setdefault(inst.n_ues, []).append((inst, prompt))
    anchor_groups = list(anchor_groups.values())
    losses = []
    for step in range(config.steps):
        batch = _minibatch(groups[step % len(groups)], config.batch_size, rng)
        with T.Tape() as tape:
            loss = supervised_loss(new, cfg, batch, config.w_ce, config.w_mse)
            if anchor_groups:
                pairs = _minibatch(anchor_groups[step % len(anchor_groups)], config.batch_size,
                                   rng)
                extra = policy_gradient_loss(new, cfg, [x for x, _ in pairs],
                                             [p for _, p in pairs], config.rl_rollouts, rng)
                loss = T.add(loss, T.scale(extra, config.w_rl))
        grads = tape.backward(loss, trainable)
        T.optim_step(trainable, grads, state)
        losses.append(loss.item())
    return new, losses


def labeled_loss(params, labeled_set, cfg: AedConfig, config: FinetuneConfig) -> float:
    """Supervised loss over the whole labeled set (size-weighted mean over groups)."""
    total, count = 0.0, 0
    for group in _by_size(labeled_set):
        total += supervised_loss(params, cfg, group, config.w_ce, config.w_mse).item() * len(group)
        count += len(group)
    return total / count


# -- drifting-environment session ---------------------------------------------------------


@dataclass
class SessionMetrics:
    """Per-step objectives of the adapting model, the frozen model and the expert."""

    rows: list[dict] = field(default_factory=list)

    COLUMNS = ("step", "adapting", "frozen", "expert", "adapting_gap", "frozen_gap",
               "uncertainty", "queried")

    def column(self, name):
        return np.array([r[name] for r in self.rows], dtype=float)

    def mean_gap(self, which: str = "adapting") -> float:
        return float(self.column(f"{which}_gap").mean())

    @property
    def queries(self) -> int:
        return int(self.column("queried").sum())


def _greedy(params, cfg, instance, prompt):
    return decode_batch([instance], [prompt], params, cfg, mode="greedy").decision(0)


def greedy_objective(params, cfg: AedConfig, instances, prompt) -> float:
    """Mean penalized objective of greedy decisions over ``instances``."""
    prompt = Prompt.parse(prompt)
    total, count = 0.0, 0
    groups: dict[int, list] = {}
    for x in instances:
        groups.setdefault(x.n_ues, []).append(x)
    for group in groups.values():
        out = decode_batch(group, [prompt] * len(group), params, cfg, mode="greedy")
        total += sum(evaluate(x, out.decision(i), prompt).penalized for i, x in enumerate(group))
        count += len(group)
    return total / count


def query_score(params, cfg: AedConfig, instance: MecInstance, prompt) -> float:
    """Mean per-UE entropy from the permutation-equivariant scoring pass."""
    return instance_uncertainty(uncertainty_pass([instance], [prompt], params, cfg)[1][0])


def drift_session(initial_instance: MecInstance, params, cfg: AedConfig,
                  query_policy: QueryPolicy, config: FinetuneConfig, steps: int,
                  prompt=Prompt.MIN_LATENCY, expert_kind: str = "auto",
                  budget: int = DEFAULT_ENUM_BUDGET,
                  on_update=None) -> tuple[SessionMetrics, dict]:
    """Track a moving population of UEs while fine-tuning from expert labels.

    Every step advances the mobility model, decodes greedily with both the
    adapting and the frozen model, scores the adapting model's uncertainty
    and labels the instance with the expert, whose objective is the reference
    for both gaps. At the end of each query window the selected instances
    enter a FIFO replay set and the decoder is trained on it, with the
    replayed and the last ``gate_recent`` instances as policy-gradient
    anchors. With ``gate`` set the candidate replaces the adapting model only
    if its mean greedy objective over those instances is no worse.
    ``on_update``, if given, is then called as ``on_update(step, adapting_params)``.
    Returns the metrics and the final parameters.
    """
    if steps < 1:
        raise ConfigError("steps must be >= 1")
    prompt = Prompt.parse(prompt)
    frozen = params
    adapting = copy_params(params)
    seq = np.random.SeedSequence(config.seed)
    dyn_seeds = seq.generate_state(steps)
    rng = np.random.default_rng(seq.spawn(1)[0])
    opt_state = T.OptimState(lr=config.lr)
    replay: deque = deque(maxlen=config.replay_capacity)
    recent: deque = deque(maxlen=config.gate_recent)
    metrics = SessionMetrics()
    used = 0
    window: list[tuple[int, float, MecInstance, ExpertLabel]] = []
    instance = initial_instance
    threshold_mode = query_policy.mode is QueryMode.THRESHOLD

    for t in range(steps):
        instance = step_dynamics(instance, config.dt_s, int(dyn_seeds[t]))
        dec_a = _greedy(adapting, cfg, instance, prompt)
        dec_f = _greedy(frozen, cfg, instance, prompt)
        score = query_score(adapting, cfg, instance, prompt)
        label = expert_solve(instance, prompt, expert_kind, budget)
        v_a = evaluate(instance, dec_a, prompt).penalized
        v_f = evaluate(instance, dec_f, prompt).penalized
        ref = label.penalized
        metrics.rows.append({
            "step": t, "adapting": v_a, "frozen": v_f, "expert": ref,
            "adapting_gap": (v_a - ref) / ref, "frozen_gap": (v_f - ref) / ref,
            "uncertainty": score, "queried": 0,
        })
        window.append((t, score, instance, label))
        recent.append(instance)
        full = threshold_mode or len(window) == query_policy.window or t == steps - 1
        if not full:
            continue
        remaining_budget = query_policy.budget - used
        picked = []
        if remaining_budget > 0:
            sub = QueryPolicy(query_policy.mode, remaining_budget, len(window),
                              query_policy.threshold, query_policy.k)
            picked = select_queries([w[1] for w in window], sub)
        for j in picked:
            step_idx, _, inst, lab = window[j]
            replay.append(LabeledExample(inst, prompt, label_to_targets(inst, lab)))
            metrics.rows[step_idx]["queried"] = 1
        used += len(picked)
        window.clear()
        if picked and config.steps:
            anchors = [(e.instance, prompt) for e in replay] + [(x, prompt) for x in recent]
            candidate, _ = finetune_decoder(adapting, replay, cfg, config, opt_state, rng,
                                            anchors=anchors)
            # The objective needs no labels, so the gate also covers recent unqueried arrivals.
            check = [e.instance for e in replay] + list(recent)
            if (not config.gate or greedy_objective(candidate, cfg, check, prompt)
                    <= greedy_objective(adapting, cfg, check, prompt)):
                adapting = candidate
            if on_update is not None:
                on_update(t, adapting)
    return metrics, adapting

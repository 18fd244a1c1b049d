"""Prompt-conditioned asymmetric encoder-decoder policy.

The encoder is a post-norm transformer stack over N UE tokens plus one prompt
token. The decoder visits UEs in index order; each step builds a query from the
UE's encoder output, an embedding of the servers' remaining capacity and the
prompt embedding, runs ``dec_layers`` blocks of causal self-attention,
encoder-decoder attention and feed-forward, and emits a categorical
association head (local + M servers) and a sigmoid allocation head.

Servers whose remaining capacity is below ``f_min_frac`` of their total are
masked, and the allocation is a fraction of the chosen server's remaining
capacity, so decoded decisions never exceed capacity.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeMismatch
from .mec import Decision, MecInstance, Prompt
from .tensor import Tensor

RHO_SIGMA = 0.1
RHO_MIN, RHO_MAX = 0.01, 0.99
_Z_MIN, _Z_MAX = math.log(RHO_MIN / (1 - RHO_MIN)), math.log(RHO_MAX / (1 - RHO_MAX))
LN_EPS = 1e-5


def default_norm_constants(n_servers: int, area_m: float = 50.0,
                           mean_data_bits: float = 2e6, mean_cycles: float = 1e9,
                           f_local: float = 1e9) -> dict:
    """Affine (offset, scale) pairs for the UE feature vector.

    Features: log10 gain to each server, data bits, cycles, local CPU rate,
    x / area, y / area.
    """
    offset = [-8.0] * n_servers + [mean_data_bits, mean_cycles, f_local, 0.5, 0.5]
    scale = [1.0] * n_servers + [0.3 * mean_data_bits, 0.3 * mean_cycles, f_local, 0.29, 0.29]
    return {"gain_transform": "log10", "area_m": area_m, "offset": offset, "scale": scale}


@dataclass(frozen=True)
class AedConfig:
    n_servers: int = 4
    d_model: int = 64
    n_heads: int = 4
    enc_layers: int = 4
    dec_layers: int = 1
    d_ffn: int = 256
    prompt_vocab: int = 2
    f_min_frac: float = 0.01
    norm_constants: dict | None = None

    def __post_init__(self):
        if self.norm_constants is None:
            object.__setattr__(self, "norm_constants", default_norm_constants(self.n_servers))
        if self.n_servers < 1:
            raise ConfigError("n_servers must be >= 1")
        if self.d_model <= 0 or self.n_heads <= 0 or self.d_model % self.n_heads:
            raise ConfigError("d_model must be a positive multiple of n_heads")
        if not self.enc_layers >= self.dec_layers >= 1:
            raise ConfigError("need enc_layers >= dec_layers >= 1")
        if self.d_ffn <= 0:
            raise ConfigError("d_ffn must be positive")
        if self.prompt_vocab != len(Prompt):
            raise ConfigError(f"prompt_vocab must be {len(Prompt)}")
        if not 0 < self.f_min_frac < 1:
            raise ConfigError("f_min_frac must lie in (0, 1)")
        nc = self.norm_constants
        if len(nc["offset"]) != self.n_features or len(nc["scale"]) != self.n_features:
            raise ConfigError("norm_constants do not match the feature count")
        if any(s <= 0 for s in nc["scale"]):
            raise ConfigError("normalisation scales must be positive")
        enc, dec = encoder_param_count(self), decoder_param_count(self)
        if enc < dec:
            raise ConfigError(f"encoder stack ({enc} params) smaller than decoder ({dec})")

    @property
    def n_features(self) -> int:
        return self.n_servers + 5

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> "AedConfig":
        return cls(**d)


def _attn_count(d):
    return 4 * d * d + 4 * d


def _ffn_count(d, f):
    return 2 * d * f + d + f


def encoder_param_count(cfg: AedConfig) -> int:
    d = cfg.d_model
    return cfg.enc_layers * (_attn_count(d) + _ffn_count(d, cfg.d_ffn) + 4 * d)


def decoder_param_count(cfg: AedConfig) -> int:
    d, m = cfg.d_model, cfg.n_servers
    per_layer = 2 * _attn_count(d) + _ffn_count(d, cfg.d_ffn) + 6 * d
    return 3 * d * d + d + cfg.dec_layers * per_layer + (d + 1) * (m + 1) + d + 1


# -- parameters -------------------------------------------------------------------

EMBED_PREFIX = "embed."
ENCODER_PREFIX = "enc."
DECODER_PREFIXES = ("dec.", "head.")


def is_frozen_name(name: str) -> bool:
    """Input-embedding and encoder parameters are frozen during fine-tuning."""
    return name.startswith(EMBED_PREFIX) or name.startswith(ENCODER_PREFIX)


def decoder_names(params: dict) -> list[str]:
    return [k for k in params if k.startswith(DECODER_PREFIXES)]


def _xavier(rng, fan_in, fan_out):
    lim = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out))


def _init_attn(p, rng, prefix, d):
    for k in ("q", "k", "v", "o"):
        p[f"{prefix}.W{k}"] = _xavier(rng, d, d)
        p[f"{prefix}.b{k}"] = np.zeros(d)


def _init_ffn(p, rng, prefix, d, f):
    p[f"{prefix}.W1"] = _xavier(rng, d, f)
    p[f"{prefix}.b1"] = np.zeros(f)
    p[f"{prefix}.W2"] = _xavier(rng, f, d)
    p[f"{prefix}.b2"] = np.zeros(d)


def _init_ln(p, prefix, d):
    p[f"{prefix}.g"] = np.ones(d)
    p[f"{prefix}.b"] = np.zeros(d)


def _init_embedding_encoder(p, rng, cfg: AedConfig, prefix: str = ""):
    d = cfg.d_model
    p[f"{prefix}embed.ue.W"] = _xavier(rng, cfg.n_features, d)
    p[f"{prefix}embed.ue.b"] = np.zeros(d)
    p[f"{prefix}embed.prompt"] = rng.normal(0.0, 1.0, size=(cfg.prompt_vocab, d))
    p[f"{prefix}embed.mec.W"] = _xavier(rng, cfg.n_servers, d)
    p[f"{prefix}embed.mec.b"] = np.zeros(d)
    for layer in range(cfg.enc_layers):
        base = f"{prefix}enc.{layer}"
        _init_attn(p, rng, f"{base}.attn", d)
        _init_ln(p, f"{base}.ln1", d)
        _init_ffn(p, rng, f"{base}.ffn", d, cfg.d_ffn)
        _init_ln(p, f"{base}.ln2", d)


def init_params(cfg: AedConfig, seed: int) -> dict[str, Tensor]:
    """Seeded actor parameters (embedding, encoder, decoder, heads)."""
    rng = np.random.default_rng(seed)
    d = cfg.d_model
    p: dict[str, np.ndarray] = {}
    _init_embedding_encoder(p, rng, cfg)
    p["dec.in.W"] = _xavier(rng, 3 * d, d)
    p["dec.in.b"] = np.zeros(d)
    for layer in range(cfg.dec_layers):
        base = f"dec.{layer}"
        _init_attn(p, rng, f"{base}.self", d)
        _init_ln(p, f"{base}.ln1", d)
        _init_attn(p, rng, f"{base}.cross", d)
        _init_ln(p, f"{base}.ln2", d)
        _init_ffn(p, rng, f"{base}.ffn", d, cfg.d_ffn)
        _init_ln(p, f"{base}.ln3", d)
    p["head.cls.W"] = _xavier(rng, d, cfg.n_servers + 1)
    p["head.cls.b"] = np.zeros(cfg.n_servers + 1)
    p["head.rho.W"] = _xavier(rng, d, 1)
    p["head.rho.b"] = np.zeros(1)
    return {k: T.parameter(v) for k, v in p.items()}


def init_critic_params(cfg: AedConfig, seed: int) -> dict[str, Tensor]:
    """Critic: its own embedding + encoder, mean pooling, zero-initialised scalar head."""
    rng = np.random.default_rng(seed)
    p: dict[str, np.ndarray] = {}
    _init_embedding_encoder(p, rng, cfg)
    p["value.W"] = np.zeros((cfg.d_model, 1))
    p["value.b"] = np.zeros(1)
    return {k: T.parameter(v) for k, v in p.items()}


def copy_params(params: dict[str, Tensor]) -> dict[str, Tensor]:
    return {k: T.parameter(v.data.copy()) for k, v in params.items()}


def param_count(params: dict[str, Tensor], prefixes=None) -> int:
    return sum(v.data.size for k, v in params.items()
               if prefixes is None or k.startswith(tuple(prefixes)))


# -- building blocks ------------------------------------------------------------------


def _linear(x, params, prefix):
    return T.add(T.matmul(x, params[f"{prefix}.W"]), params[f"{prefix}.b"])


def _layer_norm(x, params, prefix):
    return T.add(T.mul(T.layer_norm(x, axis=-1, eps=LN_EPS), params[f"{prefix}.g"]),
                 params[f"{prefix}.b"])


def _split_heads(x, n_heads):
    B, L, d = x.shape
    return T.transpose(T.reshape(x, (B, L, n_heads, d // n_heads)), (0, 2, 1, 3))


def attention(xq, xkv, params, prefix, n_heads, return_weights: bool = False):
    """Multi-head scaled dot-product attention, no mask, no positional terms."""
    B, Lq, d = xq.shape
    q = _split_heads(T.add(T.matmul(xq, params[f"{prefix}.Wq"]), params[f"{prefix}.bq"]), n_heads)
    k = _split_heads(T.add(T.matmul(xkv, params[f"{prefix}.Wk"]), params[f"{prefix}.bk"]), n_heads)
    v = _split_heads(T.add(T.matmul(xkv, params[f"{prefix}.Wv"]), params[f"{prefix}.bv"]), n_heads)
    scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(d // n_heads))
    w = T.softmax(scores, axis=-1)
    ctx = T.reshape(T.transpose(T.matmul(w, v), (0, 2, 1, 3)), (B, Lq, d))
    out = T.add(T.matmul(ctx, params[f"{prefix}.Wo"]), params[f"{prefix}.bo"])
    return (out, w) if return_weights else out


def _ffn(x, params, prefix):
    h = T.relu(T.add(T.matmul(x, params[f"{prefix}.W1"]), params[f"{prefix}.b1"]))
    return T.add(T.matmul(h, params[f"{prefix}.W2"]), params[f"{prefix}.b2"])


# -- embedding and encoder ---------------------------------------------------------------


def ue_features(instance: MecInstance, cfg: AedConfig) -> np.ndarray:
    """Normalised (N, M + 5) feature matrix."""
    if instance.n_servers != cfg.n_servers:
        raise ShapeMismatch(f"model built for {cfg.n_servers} servers, "
                            f"instance has {instance.n_servers}")
    nc = cfg.norm_constants
    raw = np.column_stack([
        np.log10(instance.gains),
        instance.data_bits,
        instance.cycles,
        instance.f_local,
        instance.ue_pos / instance.area_m,
    ])
    return (raw - np.asarray(nc["offset"])) / np.asarray(nc["scale"])


@dataclass
class EmbeddingSet:
    ue_tokens: Tensor  # (B, N, d)
    prompt_token: Tensor  # (B, d)
    capacity: np.ndarray  # (B, M)
    params: dict = field(repr=False, default=None)
    prefix: str = ""

    def mec_token(self, remaining: np.ndarray) -> Tensor:
        """Embedding of the servers' remaining capacity fractions, (B, d)."""
        frac = T.constant(np.asarray(remaining, dtype=float) / self.capacity)
        return _linear(frac, self.params, f"{self.prefix}embed.mec")


def _prompt_ids(prompts, batch):
    ids = [Prompt.parse(p).token_id for p in prompts]
    if len(ids) != batch:
        raise ShapeMismatch("one prompt per instance required")
    return np.asarray(ids, dtype=np.int64)


def embed_inputs(instances, prompts, cfg: AedConfig, params, prefix: str = "") -> EmbeddingSet:
    """Project normalised UE features, the prompt id and server state to d_model."""
    if isinstance(instances, MecInstance):
        instances = [instances]
        prompts = [prompts]
    feats = np.stack([ue_features(inst, cfg) for inst in instances])
    ids = _prompt_ids(prompts, len(instances))
    ue = _linear(T.constant(feats), params, f"{prefix}embed.ue")
    pr = T.embedding(params[f"{prefix}embed.prompt"], ids)
    cap = np.stack([inst.capacity for inst in instances])
    return EmbeddingSet(ue, pr, cap, params, prefix)


def encode(emb: EmbeddingSet, params, cfg: AedConfig, prefix: str = "") -> Tensor:
    """Encoder output of shape (B, N + 1, d); row N is the prompt position."""
    B, N, d = emb.ue_tokens.shape
    x = T.concat([emb.ue_tokens, T.reshape(emb.prompt_token, (B, 1, d))], axis=1)
    for layer in range(cfg.enc_layers):
        base = f"{prefix}enc.{layer}"
        x = _layer_norm(T.add(x, attention(x, x, params, f"{base}.attn", cfg.n_heads)),
                        params, f"{base}.ln1")
        x = _layer_norm(T.add(x, _ffn(x, params, f"{base}.ffn")), params, f"{base}.ln2")
    return x


# -- decoder ---------------------------------------------------------------------------


class DecoderState:
    """Per-layer caches of the decoder's self-attention inputs for one batch."""

    def __init__(self, cfg: AedConfig):
        self.cache: list[list[Tensor]] = [[] for _ in range(cfg.dec_layers)]


def decode_step(context: Tensor, ue_index: int, mec_token: Tensor, prompt_token: Tensor,
                params, cfg: AedConfig, state: DecoderState | None = None):
    """Logits over (local, servers) and the allocation logit for one UE.

    Returns ``(logits (B, M+1), rho_logit (B,))``; ``sigmoid(rho_logit)`` is the
    mean fraction of remaining capacity. ``state`` carries earlier steps for
    the causal self-attention and is updated in place.
    """
    B, L, d = context.shape
    if not 0 <= ue_index < L - 1:
        raise ShapeMismatch(f"ue_index {ue_index} out of range")
    state = state or DecoderState(cfg)
    cur = T.getitem(context, (slice(None), ue_index, slice(None)))
    q = _linear(T.concat([cur, mec_token, prompt_token], axis=-1), params, "dec.in")
    h = T.reshape(q, (B, 1, d))
    for layer in range(cfg.dec_layers):
        base = f"dec.{layer}"
        cache = state.cache[layer]
        cache.append(h)
        keys = cache[0] if len(cache) == 1 else T.concat(cache, axis=1)
        h = _layer_norm(T.add(h, attention(h, keys, params, f"{base}.self", cfg.n_heads)),
                        params, f"{base}.ln1")
        h = _layer_norm(T.add(h, attention(h, context, params, f"{base}.cross", cfg.n_heads)),
                        params, f"{base}.ln2")
        h = _layer_norm(T.add(h, _ffn(h, params, f"{base}.ffn")), params, f"{base}.ln3")
    h = T.reshape(h, (B, d))
    logits = _linear(h, params, "head.cls")
    rho_logit = T.reshape(_linear(h, params, "head.rho"), (B,))
    return logits, rho_logit


def uncertainty_pass(instances, prompts, params, cfg: AedConfig):
    """Association distributions of every UE against the initial server state.

    All UEs are scored in parallel, each attending only to itself in the
    decoder self-attention, so the result is equivariant under UE
    permutations. Row 0 coincides with the first step of sequential decoding.
    Returns ``(probs (B, N, M+1), entropy (B, N))``.
    """
    if isinstance(instances, MecInstance):
        instances, prompts = [instances], [prompts]
    emb = embed_inputs(instances, prompts, cfg, params)
    context = encode(emb, params, cfg)
    B, L, d = context.shape
    N = L - 1
    cur = T.getitem(context, (slice(None), slice(0, N), slice(None)))
    ones = T.constant(np.ones((B, N, 1)))
    mec = T.mul(ones, T.reshape(emb.mec_token(emb.capacity), (B, 1, d)))
    pr = T.mul(ones, T.reshape(emb.prompt_token, (B, 1, d)))
    h = _linear(T.concat([cur, mec, pr], axis=-1), params, "dec.in")
    for layer in range(cfg.dec_layers):
        base = f"dec.{layer}"
        solo = T.reshape(h, (B * N, 1, d))
        own = T.reshape(attention(solo, solo, params, f"{base}.self", cfg.n_heads), (B, N, d))
        h = _layer_norm(T.add(h, own), params, f"{base}.ln1")
        h = _layer_norm(T.add(h, attention(h, context, params, f"{base}.cross", cfg.n_heads)),
                        params, f"{base}.ln2")
        h = _layer_norm(T.add(h, _ffn(h, params, f"{base}.ffn")), params, f"{base}.ln3")
    logp = T.log_softmax(_linear(h, params, "head.cls"), axis=-1).data
    probs = np.exp(logp)
    entropy = -(probs * logp).sum(axis=-1)
    return probs, entropy


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=float)))


def _logit(p):
    p = np.asarray(p, dtype=float)
    return np.log(p) - np.log1p(-p)


@dataclass
class BatchDecode:
    """Result of decoding a batch of instances.

    Numeric fields are numpy arrays; ``log_prob`` and ``entropy`` are tape
    tensors of shape (B,) and (B, N) usable in a loss.
    """

    probs: np.ndarray  # (B, N, M+1)
    rho_mean: np.ndarray  # (B, N)
    assoc: np.ndarray  # (B, N)
    alloc: np.ndarray  # (B, N)
    rho: np.ndarray  # (B, N) fraction actually applied (0 for local)
    masked: np.ndarray  # (B, N, M+1) bool
    log_prob: Tensor
    entropy: Tensor
    log_probs_cls: list = field(default_factory=list, repr=False)
    rho_logits: list = field(default_factory=list, repr=False)

    @property
    def per_ue_entropy(self) -> np.ndarray:
        return self.entropy.data

    def decision(self, b: int) -> Decision:
        return Decision(self.assoc[b], self.alloc[b])


@dataclass
class DecodeOutput:
    probs: np.ndarray
    rho_mean: np.ndarray
    decision: Decision
    log_prob: float
    per_ue_entropy: np.ndarray


def decode_batch(instances, prompts, params, cfg: AedConfig, mode: str = "greedy",
                 rng: np.random.Generator | None = None, forced=None) -> BatchDecode:
    """Sequentially decode every UE of every instance in the batch.

    ``mode`` is ``"greedy"`` (argmax, rho = clamped head mean), ``"sample"``
    (categorical draw, logit-normal rho with sigma 0.1) or ``"forced"`` with
    ``forced=(assoc, rho)`` arrays replayed exactly (used for re-scoring
    trajectories and supervised targets). A forced choice of a masked server
    is executed as local.
    """
    if mode not in ("greedy", "sample", "forced"):
        raise ValueError(f"unknown decode mode {mode!r}")
    if mode == "sample" and rng is None:
        raise ValueError("sample mode needs an rng")
    if mode == "forced":
        if forced is None:
            raise ValueError("forced mode needs (assoc, rho)")
        f_assoc = np.atleast_2d(np.asarray(forced[0], dtype=np.int64))
        f_rho = np.atleast_2d(np.asarray(forced[1], dtype=float))
    if isinstance(instances, MecInstance):
        instances = [instances]
        prompts = [prompts]
    B = len(instances)
    N = instances[0].n_ues
    M = cfg.n_servers
    if any(inst.n_ues != N for inst in instances):
        raise ShapeMismatch("all instances in a batch need the same number of UEs")
    emb = embed_inputs(instances, prompts, cfg, params)
    context = encode(emb, params, cfg)
    capacity = emb.capacity
    remaining = capacity.copy()
    floor = cfg.f_min_frac * capacity
    state = DecoderState(cfg)
    rows = np.arange(B)

    probs = np.zeros((B, N, M + 1))
    rho_mean = np.zeros((B, N))
    assoc = np.zeros((B, N), dtype=np.int64)
    alloc = np.zeros((B, N))
    rho_used = np.zeros((B, N))
    masked_all = np.zeros((B, N, M + 1), dtype=bool)
    z_used = np.zeros((B, N))
    lp_terms, ent_terms, lp_cls_list, rho_logit_list = [], [], [], []
    for i in range(N):
        mec_tok = emb.mec_token(remaining)
        logits, rho_logit = decode_step(context, i, mec_tok, emb.prompt_token, params, cfg, state)
        masked = np.zeros((B, M + 1), dtype=bool)
        masked[:, 1:] = remaining < floor
        masked_all[:, i] = masked
        z = T.add(logits, T.constant(np.where(masked, T.MASK_VALUE, 0.0)))
        logp = T.log_softmax(z, axis=-1)
        p = np.exp(logp.data)
        p[masked] = 0.0
        probs[:, i] = p
        ent = T.scale(T.sum_(T.mul(T.constant(p > 0), T.mul(T.exp(logp), logp)), axis=-1), -1.0)
        ent_terms.append(T.reshape(ent, (B, 1)))
        u = rho_logit.data
        rho_mean[:, i] = _sigmoid(u)

        if mode == "greedy":
            choice = np.argmax(p, axis=1)
            zr = np.clip(u, _Z_MIN, _Z_MAX)
        elif mode == "sample":
            cdf = np.cumsum(p, axis=1)
            draw = rng.random(B) * cdf[:, -1]
            choice = np.minimum((cdf <= draw[:, None]).sum(axis=1), M)
            # never land on a zero-probability column through round-off
            bad = p[rows, choice] == 0.0
            if np.any(bad):
                choice[bad] = np.argmax(p[bad], axis=1)
            # the action is the unclamped normal draw; clamping happens when it is applied
            zr = u + RHO_SIGMA * rng.standard_normal(B)
        else:
            choice = f_assoc[:, i].copy()
            choice[masked[rows, choice]] = 0
            zr = np.clip(_logit(np.clip(f_rho[:, i], RHO_MIN, RHO_MAX)), _Z_MIN, _Z_MAX)

        onehot = np.zeros((B, M + 1))
        onehot[rows, choice] = 1.0
        lp_cls = T.sum_(T.mul(logp, T.constant(onehot)), axis=-1)
        lp_cls_list.append(lp_cls)
        rho_logit_list.append(rho_logit)
        off = choice > 0
        step_lp = lp_cls
        if mode != "greedy":
            # log-density of the pre-squash normal; Jacobian term is parameter-free
            diff = T.sub(T.constant(zr), rho_logit)
            lp_rho = T.scale(T.mul(T.square(diff), T.constant(off.astype(float))),
                             -0.5 / RHO_SIGMA ** 2)
            step_lp = T.add(step_lp, lp_rho)
        lp_terms.append(step_lp)

        rho = np.clip(_sigmoid(zr), RHO_MIN, RHO_MAX)
        col = np.where(off, choice - 1, 0)
        f = np.where(off, rho * remaining[rows, col], 0.0)
        assoc[:, i] = choice
        alloc[:, i] = f
        rho_used[:, i] = np.where(off, rho, 0.0)
        z_used[:, i] = np.where(off, zr, 0.0)
        remaining[rows, col] = remaining[rows, col] - f

    log_prob = lp_terms[0]
    for term in lp_terms[1:]:
        log_prob = T.add(log_prob, term)
    if mode != "greedy":
        # constant part of the logit-normal density, so log_prob is a true log-density
        n_off = (assoc > 0).sum(axis=1)
        const = n_off * (-math.log(RHO_SIGMA * math.sqrt(2 * math.pi)))
        # log |d sigmoid / dz| = -softplus(z) - softplus(-z)
        jac = np.logaddexp(0.0, z_used) + np.logaddexp(0.0, -z_used)
        const = const + np.where(assoc > 0, jac, 0.0).sum(axis=1)
        log_prob = T.add(log_prob, T.constant(const))
    entropy = T.concat(ent_terms, axis=1) if N > 1 else ent_terms[0]
    return BatchDecode(probs, rho_mean, assoc, alloc, rho_used, masked_all, log_prob, entropy,
                       lp_cls_list, rho_logit_list)


def decode_sequence(instance: MecInstance, prompt, params, cfg: AedConfig,
                    mode: str = "greedy", seed: int | None = None) -> DecodeOutput:
    rng = np.random.default_rng(seed) if mode == "sample" else None
    out = decode_batch([instance], [prompt], params, cfg, mode=mode, rng=rng)
    return DecodeOutput(out.probs[0], out.rho_mean[0], out.decision(0),
                        float(out.log_prob.data[0]), out.entropy.data[0].copy())


def decision_capacity_audit(instance: MecInstance, decode_output) -> bool:
    """True iff no server is allocated more than its capacity (1e-12 relative slack)."""
    decision = getattr(decode_output, "decision", decode_output)
    assoc, alloc = np.asarray(decision.assoc), np.asarray(decision.alloc)
    for m in range(instance.n_servers):
        load = alloc[assoc == m + 1].sum()
        if load > instance.capacity[m] * (1.0 + 1e-12):
            return False
    return True


def critic_value(instances, prompts, critic_params, cfg: AedConfig) -> Tensor:
    """Scalar value estimate per instance, shape (B,)."""
    emb = embed_inputs(instances, prompts, cfg, critic_params)
    ctx = encode(emb, critic_params, cfg)
    pooled = T.mean(ctx, axis=1)
    return T.reshape(_linear(pooled, critic_params, "value"), (pooled.shape[0],))

"""Baseline solvers and the exhaustive oracle.

All solvers return :class:`~lambo.mec.Decision` objects whose server loads
respect capacity. Random and DE share the sequential fraction-of-remaining
repair used by the learned decoder.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import ConfigError, Infeasible, OracleTooLarge
from .mec import Decision, MecInstance, Prompt, evaluate, uplink_rate

DEFAULT_ENUM_BUDGET = 2 ** 20
F_MIN_FRAC = 0.01
_ENUM_CHUNK = 1 << 15


@dataclass(frozen=True)
class DeConfig:
    population: int = 50
    generations: int = 200
    diff_weight: float = 0.5
    crossover: float = 0.9
    seed: int = 0
    frac_low: float = 1e-3

    def __post_init__(self):
        if self.population < 4:
            raise ConfigError("DE population must be >= 4")
        if not 0 < self.diff_weight <= 2:
            raise ConfigError("diff_weight must lie in (0, 2]")
        if not 0 <= self.crossover <= 1:
            raise ConfigError("crossover must lie in [0, 1]")
        if self.generations < 0:
            raise ConfigError("generations must be >= 0")


@dataclass(frozen=True)
class OracleBudget:
    max_enumerations: int = DEFAULT_ENUM_BUDGET

    def __post_init__(self):
        if self.max_enumerations <= 0:
            raise ConfigError("max_enumerations must be positive")


def solve_local(instance: MecInstance) -> Decision:
    return Decision.all_local(instance.n_ues)


def repair_fractions(instance: MecInstance, assoc, fracs, f_min_frac: float = F_MIN_FRAC):
    """Turn per-UE (server choice, fraction of remaining) into absolute allocations.

    UEs are processed in index order; a UE whose server has less than
    ``f_min_frac`` of its capacity left is sent back to local execution.
    """
    assoc = np.ascontiguousarray(np.atleast_2d(assoc), dtype=np.int64)
    fracs = np.ascontiguousarray(np.atleast_2d(fracs), dtype=float)
    return _kernels.active.repair(assoc, fracs, instance.capacity, f_min_frac)


def solve_random(instance: MecInstance, seed: int) -> Decision:
    rng = np.random.default_rng(seed)
    n, m = instance.n_ues, instance.n_servers
    assoc = rng.integers(0, m + 1, size=n)
    fracs = 1.0 - rng.uniform(size=n)  # (0, 1]
    a, f = repair_fractions(instance, assoc, fracs)
    return Decision(a[0], f[0])


def inner_alloc_latency(cycles, capacity: float) -> np.ndarray:
    """Split ``capacity`` to minimise sum(C_j / f_j): f_j proportional to sqrt(C_j)."""
    c = np.asarray(cycles, dtype=float)
    if c.size == 0:
        raise ValueError("need at least one task")
    root = np.sqrt(c)
    return capacity * root / root.sum()


def inner_alloc_energy(cycles, capacity: float, t_tx, t_max: float) -> np.ndarray:
    """Smallest allocations that finish every task exactly at ``t_max``.

    Raises :class:`Infeasible` if some transmission alone exceeds the deadline
    or the minimal allocations do not fit in ``capacity``.
    """
    c = np.asarray(cycles, dtype=float)
    t_tx = np.asarray(t_tx, dtype=float)
    slack = t_max - t_tx
    if np.any(slack <= 0):
        raise Infeasible("transmission time alone exceeds the deadline")
    f = c / slack
    if f.sum() > capacity:
        raise Infeasible(f"minimal allocations {f.sum():.6g} exceed capacity {capacity:.6g}")
    return f


def optimal_alloc(instance: MecInstance, assoc, prompt) -> np.ndarray:
    """Allocation minimising the penalized objective for a fixed association.

    Per server this is the closed-form rule for the prompt (square-root split
    for latency, deadline-tight minimum for energy) whenever the deadline is
    not binding, and otherwise the penalty-aware convex optimum found by
    bisection on the capacity multiplier.
    """
    prompt = Prompt.parse(prompt)
    assoc = np.asarray(assoc, dtype=np.int64)
    ph = instance.phys
    rates = uplink_rate(instance.gains, ph)
    alloc = np.zeros(instance.n_ues)
    for m in range(instance.n_servers):
        idx = np.nonzero(assoc == m + 1)[0]
        if idx.size == 0:
            continue
        t_tx = instance.data_bits[idx] / rates[idx, m]
        alloc[idx] = _kernels.active.alloc_server(
            np.ascontiguousarray(instance.cycles[idx]), np.ascontiguousarray(t_tx),
            float(instance.capacity[m]), instance.n_ues, ph.t_max_s, ph.penalty_lambda,
            int(prompt))
    return alloc


def enumeration_size(instance: MecInstance) -> int:
    return (instance.n_servers + 1) ** instance.n_ues


def solve_exact(instance: MecInstance, prompt, budget: int | OracleBudget = DEFAULT_ENUM_BUDGET,
                backend: str | None = None):
    """Exhaustive search over all (M+1)^N associations.

    Returns ``(decision, penalized_objective)``. Ties (within 1e-12 relative)
    go to the lexicographically smallest association vector.
    """
    prompt = Prompt.parse(prompt)
    if isinstance(budget, OracleBudget):
        budget = budget.max_enumerations
    total = enumeration_size(instance)
    if total > budget:
        raise OracleTooLarge(
            f"(M+1)^N = {total} associations exceeds the enumeration budget {budget}")
    kern = _kernels.backend(backend)
    n, m = instance.n_ues, instance.n_servers
    args = instance.kernel_args()
    pens = np.empty(total)
    for start in range(0, total, _ENUM_CHUNK):
        count = min(_ENUM_CHUNK, total - start)
        pens[start:start + count] = kern.enumerate_penalized(start, count, n, m, *args,
                                                             int(prompt))
    best = pens.min()
    code = int(np.nonzero(pens <= best + 1e-12 * abs(best))[0][0])
    assoc = np.zeros(n, dtype=np.int64)
    for i in range(n - 1, -1, -1):
        assoc[i] = code % (m + 1)
        code //= m + 1
    decision = Decision(assoc, optimal_alloc(instance, assoc, prompt))
    return decision, evaluate(instance, decision, prompt).penalized


def solve_de(instance: MecInstance, prompt, config: DeConfig | None = None,
             backend: str | None = None) -> Decision:
    """DE/rand/1/bin over a 2N genome: floored association genes and fraction genes."""
    config = config or DeConfig()
    prompt = Prompt.parse(prompt)
    kern = _kernels.backend(backend)
    rng = np.random.default_rng(config.seed)
    n, m = instance.n_ues, instance.n_servers
    P = config.population
    low = np.concatenate([np.zeros(n), np.full(n, config.frac_low)])
    high = np.concatenate([np.full(n, m + 1 - 1e-9), np.ones(n)])
    pop = low + rng.uniform(size=(P, 2 * n)) * (high - low)
    args = instance.kernel_args()

    def fitness(genomes):
        return kern.de_fitness(np.ascontiguousarray(genomes), m, *args, int(prompt), F_MIN_FRAC)

    fit, _, _ = fitness(pop)
    dim = 2 * n
    for _ in range(config.generations):
        # three distinct partners per target, all different from the target
        r = np.empty((P, 3), dtype=np.int64)
        for p in range(P):
            choices = rng.choice(P - 1, size=3, replace=False)
            r[p] = choices + (choices >= p)
        mutant = pop[r[:, 0]] + config.diff_weight * (pop[r[:, 1]] - pop[r[:, 2]])
        # bounce back between the parent and the violated bound
        below = mutant < low
        above = mutant > high
        u = rng.uniform(size=(P, dim))
        mutant = np.where(below, low + u * (pop - low), mutant)
        mutant = np.where(above, high - u * (high - pop), mutant)
        cross = rng.uniform(size=(P, dim)) < config.crossover
        cross[np.arange(P), rng.integers(0, dim, size=P)] = True
        trial = np.where(cross, mutant, pop)
        trial_fit, _, _ = fitness(trial)
        better = trial_fit <= fit
        pop = np.where(better[:, None], trial, pop)
        fit = np.where(better, trial_fit, fit)
    best = int(np.argmin(fit))
    _, assoc, alloc = fitness(pop[best:best + 1])
    return Decision(assoc[0], alloc[0])


SOLVERS = ("local", "random", "de", "exact")


def solve(name: str, instance: MecInstance, prompt, seed: int = 0,
          budget: int = DEFAULT_ENUM_BUDGET, de_config: DeConfig | None = None) -> Decision:
    """Dispatch by solver name (``local``, ``random``, ``de``, ``exact``)."""
    if name == "local":
        return solve_local(instance)
    if name == "random":
        return solve_random(instance, seed)
    if name == "de":
        cfg = de_config or DeConfig(seed=seed)
        return solve_de(instance, prompt, cfg)
    if name == "exact":
        return solve_exact(instance, prompt, budget)[0]
    raise ValueError(f"unknown solver {name!r}")

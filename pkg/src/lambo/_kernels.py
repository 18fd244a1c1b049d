"""Hot numeric loops: batch evaluation, sequential capacity repair, per-server
resource allocation and the exhaustive association search.

Every kernel exists twice. The ``_nb_*`` versions are plain loops compiled with
``numba.njit``; the ``_np_*`` versions are vectorised numpy. The public names
(``evaluate_batch``, ``repair``, ``alloc_server``, ``enumerate_penalized``,
``de_fitness``) dispatch to numba unless ``LAMBO_DISABLE_NUMBA`` is set to a
truthy value or numba cannot be imported.

Array conventions: ``assoc`` is int64 with 0 = local and m >= 1 = server m;
``prompt_id`` 0 = minimum latency, 1 = minimum energy.
"""
from __future__ import annotations

import math
import os

import numpy as np

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    numba = None
    HAVE_NUMBA = False


def _flag(name: str) -> bool:
    return os.environ.get(name, "").strip().lower() in ("1", "true", "yes", "on")


USE_NUMBA = HAVE_NUMBA and not _flag("LAMBO_DISABLE_NUMBA")

# relative excess below this counts as no violation (float round-off)
VIOLATION_TOL = 1e-12
BISECT_ITERS = 120
_LOG_MU_LO = -700.0
_LOG_MU_HI = 700.0


def _njit(func):
    if HAVE_NUMBA:
        return numba.njit(cache=True)(func)
    return func


# ---------------------------------------------------------------------------
# numba kernels
# ---------------------------------------------------------------------------


@_njit
def _nb_evaluate_batch(assoc, alloc, data_bits, cycles, f_local, rates, capacity,
                       t_max, p_tx, p_loc, lam, prompt_id):
    P, N = assoc.shape
    M = capacity.shape[0]
    objective = np.empty(P)
    lat_viol = np.empty(P)
    cap_viol = np.empty(P)
    penalized = np.empty(P)
    lat = np.empty((P, N))
    energy = np.empty((P, N))
    load = np.empty(M)
    for p in range(P):
        for m in range(M):
            load[m] = 0.0
        t_sum = 0.0
        e_sum = 0.0
        lv = 0.0
        for i in range(N):
            m = assoc[p, i]
            if m == 0:
                t_exec = cycles[i] / f_local[i]
                t = t_exec
                e = p_loc * t_exec
            else:
                t_tx = data_bits[i] / rates[i, m - 1]
                t = t_tx + cycles[i] / alloc[p, i]
                e = p_tx * t_tx
                load[m - 1] += alloc[p, i]
            lat[p, i] = t
            energy[p, i] = e
            t_sum += t
            e_sum += e
            excess = (t - t_max) / t_max
            if excess > VIOLATION_TOL:
                lv += excess
        cv = 0.0
        for m in range(M):
            excess = (load[m] - capacity[m]) / capacity[m]
            if excess > VIOLATION_TOL:
                cv += excess
        obj = t_sum / N if prompt_id == 0 else e_sum
        objective[p] = obj
        lat_viol[p] = lv
        cap_viol[p] = cv
        penalized[p] = obj + lam * (lv + cv)
    return objective, lat_viol, cap_viol, penalized, lat, energy


@_njit
def _nb_repair(assoc, fracs, capacity, f_min_frac):
    P, N = assoc.shape
    M = capacity.shape[0]
    out_assoc = assoc.copy()
    alloc = np.zeros((P, N))
    remaining = np.empty(M)
    for p in range(P):
        for m in range(M):
            remaining[m] = capacity[m]
        for i in range(N):
            m = assoc[p, i]
            if m == 0:
                continue
            if remaining[m - 1] < f_min_frac * capacity[m - 1]:
                out_assoc[p, i] = 0
                continue
            f = fracs[p, i] * remaining[m - 1]
            alloc[p, i] = f
            remaining[m - 1] -= f
    return out_assoc, alloc


@_njit
def _nb_f_of_mu(c, thr, a_lo, a_hi, mu):
    x_hi = math.sqrt(a_hi * c / mu)
    if x_hi < thr:
        return x_hi
    x_lo = math.sqrt(a_lo * c / mu)
    if x_lo > thr:
        return x_lo
    return thr


@_njit
def _nb_alloc_server(c, t_tx, F, n_total, t_max, lam, prompt_id):
    """Penalty-aware optimal split of capacity ``F`` among the tasks on one server."""
    k = c.shape[0]
    out = np.empty(k)
    thr = np.empty(k)
    all_finite = True
    for j in range(k):
        slack = t_max - t_tx[j]
        if slack > 0.0:
            thr[j] = c[j] / slack
        else:
            thr[j] = np.inf
            all_finite = False
    if prompt_id == 0:
        a_lo = 1.0 / n_total
        a_hi = a_lo + lam / t_max
        s = 0.0
        for j in range(k):
            s += math.sqrt(c[j])
        ok = True
        for j in range(k):
            out[j] = F * math.sqrt(c[j]) / s
            if out[j] < thr[j]:
                ok = False
        if ok:
            return out
    else:
        a_lo = 0.0
        a_hi = lam / t_max
        if all_finite:
            s = 0.0
            for j in range(k):
                s += thr[j]
            if s <= F:
                for j in range(k):
                    out[j] = thr[j]
                return out
    lo = _LOG_MU_LO
    hi = _LOG_MU_HI
    for _ in range(BISECT_ITERS):
        mid = 0.5 * (lo + hi)
        mu = math.exp(mid)
        s = 0.0
        for j in range(k):
            s += _nb_f_of_mu(c[j], thr[j], a_lo, a_hi, mu)
        if s > F:
            lo = mid
        else:
            hi = mid
    mu = math.exp(hi)
    for j in range(k):
        out[j] = _nb_f_of_mu(c[j], thr[j], a_lo, a_hi, mu)
    return out


@_njit
def _nb_alloc_for_assoc(assoc, data_bits, cycles, rates, capacity, t_max, lam, prompt_id):
    N = assoc.shape[0]
    M = capacity.shape[0]
    alloc = np.zeros(N)
    idx = np.empty(N, dtype=np.int64)
    for m in range(M):
        k = 0
        for i in range(N):
            if assoc[i] == m + 1:
                idx[k] = i
                k += 1
        if k == 0:
            continue
        c = np.empty(k)
        ttx = np.empty(k)
        for j in range(k):
            i = idx[j]
            c[j] = cycles[i]
            ttx[j] = data_bits[i] / rates[i, m]
        f = _nb_alloc_server(c, ttx, capacity[m], N, t_max, lam, prompt_id)
        for j in range(k):
            alloc[idx[j]] = f[j]
    return alloc


@_njit
def _nb_enumerate_penalized(start, count, n_ues, n_servers, data_bits, cycles,
                            f_local, rates, capacity, t_max, p_tx, p_loc, lam, prompt_id):
    base = n_servers + 1
    pens = np.empty(count)
    assoc = np.zeros((1, n_ues), dtype=np.int64)
    alloc = np.zeros((1, n_ues))
    for k in range(count):
        code = start + k
        for i in range(n_ues - 1, -1, -1):
            assoc[0, i] = code % base
            code //= base
        a = _nb_alloc_for_assoc(assoc[0], data_bits, cycles, rates, capacity,
                                t_max, lam, prompt_id)
        for i in range(n_ues):
            alloc[0, i] = a[i]
        res = _nb_evaluate_batch(assoc, alloc, data_bits, cycles, f_local, rates,
                                 capacity, t_max, p_tx, p_loc, lam, prompt_id)
        pens[k] = res[3][0]
    return pens


@_njit
def _nb_de_fitness(genomes, n_servers, data_bits, cycles, f_local, rates, capacity,
                   t_max, p_tx, p_loc, lam, prompt_id, f_min_frac):
    P = genomes.shape[0]
    N = data_bits.shape[0]
    assoc = np.empty((P, N), dtype=np.int64)
    fracs = np.empty((P, N))
    for p in range(P):
        for i in range(N):
            a = int(math.floor(genomes[p, i]))
            if a > n_servers:
                a = n_servers
            if a < 0:
                a = 0
            assoc[p, i] = a
            fracs[p, i] = genomes[p, N + i]
    assoc, alloc = _nb_repair(assoc, fracs, capacity, f_min_frac)
    res = _nb_evaluate_batch(assoc, alloc, data_bits, cycles, f_local, rates, capacity,
                             t_max, p_tx, p_loc, lam, prompt_id)
    return res[3], assoc, alloc


# ---------------------------------------------------------------------------
# numpy kernels
# ---------------------------------------------------------------------------


def _np_evaluate_batch(assoc, alloc, data_bits, cycles, f_local, rates, capacity,
                       t_max, p_tx, p_loc, lam, prompt_id):
    P, N = assoc.shape
    M = capacity.shape[0]
    off = assoc > 0
    t_loc = cycles / f_local
    col = np.where(off, assoc - 1, 0)
    r = rates[np.arange(N)[None, :], col]
    t_tx = data_bits / r
    safe_alloc = np.where(off, alloc, 1.0)
    lat = np.where(off, t_tx + cycles / safe_alloc, t_loc)
    energy = np.where(off, p_tx * t_tx, p_loc * t_loc)
    excess = (lat - t_max) / t_max
    lat_viol = np.where(excess > VIOLATION_TOL, excess, 0.0).sum(axis=1)
    load = np.zeros((P, M))
    for m in range(M):
        load[:, m] = np.where(assoc == m + 1, alloc, 0.0).sum(axis=1)
    cexcess = (load - capacity) / capacity
    cap_viol = np.where(cexcess > VIOLATION_TOL, cexcess, 0.0).sum(axis=1)
    objective = lat.mean(axis=1) if prompt_id == 0 else energy.sum(axis=1)
    penalized = objective + lam * (lat_viol + cap_viol)
    return objective, lat_viol, cap_viol, penalized, lat, energy


def _np_repair(assoc, fracs, capacity, f_min_frac):
    P, N = assoc.shape
    out_assoc = assoc.copy()
    alloc = np.zeros((P, N))
    remaining = np.tile(np.asarray(capacity, dtype=float), (P, 1))
    rows = np.arange(P)
    floor = f_min_frac * capacity
    for i in range(N):
        m = assoc[:, i]
        off = m > 0
        col = np.where(off, m - 1, 0)
        rem = remaining[rows, col]
        masked = off & (rem < floor[col])
        out_assoc[masked, i] = 0
        take = off & ~masked
        f = np.where(take, fracs[:, i] * rem, 0.0)
        alloc[:, i] = f
        remaining[rows, col] = rem - f
    return out_assoc, alloc


def _np_f_of_mu(c, thr, a_lo, a_hi, mu):
    x_hi = np.sqrt(a_hi * c / mu)
    x_lo = np.sqrt(a_lo * c / mu)
    return np.where(x_hi < thr, x_hi, np.where(x_lo > thr, x_lo, thr))


def _np_alloc_rows(mask, c, t_tx, F, n_total, t_max, lam, prompt_id):
    """Row-wise version of the per-server split; ``mask`` (R, N) marks tasks on the server."""
    R = mask.shape[0]
    slack = t_max - t_tx
    with np.errstate(divide="ignore"):
        thr = np.where(slack > 0.0, c / np.where(slack > 0.0, slack, 1.0), np.inf)
    thr = np.broadcast_to(thr, mask.shape)
    cc = np.broadcast_to(c, mask.shape)
    out = np.zeros(mask.shape)
    if prompt_id == 0:
        a_lo = 1.0 / n_total
        a_hi = a_lo + lam / t_max
        sq = np.where(mask, np.sqrt(cc), 0.0)
        s = sq.sum(axis=1, keepdims=True)
        f = F * sq / np.where(s > 0, s, 1.0)
        done = ~np.any(mask & (f < thr), axis=1)
    else:
        a_lo = 0.0
        a_hi = lam / t_max
        f = np.where(mask, thr, 0.0)
        finite = ~np.any(mask & np.isinf(thr), axis=1)
        with np.errstate(invalid="ignore"):
            total = np.where(mask, thr, 0.0).sum(axis=1)
        done = finite & (total <= F)
    out[done] = f[done]
    todo = np.nonzero(~done)[0]
    if todo.size:
        m = mask[todo]
        ct = cc[todo]
        tt = thr[todo]
        lo = np.full(todo.size, _LOG_MU_LO)
        hi = np.full(todo.size, _LOG_MU_HI)
        for _ in range(BISECT_ITERS):
            mid = 0.5 * (lo + hi)
            fm = np.where(m, _np_f_of_mu(ct, tt, a_lo, a_hi, np.exp(mid)[:, None]), 0.0)
            over = fm.sum(axis=1) > F
            lo = np.where(over, mid, lo)
            hi = np.where(over, hi, mid)
        out[todo] = np.where(m, _np_f_of_mu(ct, tt, a_lo, a_hi, np.exp(hi)[:, None]), 0.0)
    return out


def _np_alloc_server(c, t_tx, F, n_total, t_max, lam, prompt_id):
    c = np.asarray(c, dtype=float)
    mask = np.ones((1, c.shape[0]), dtype=bool)
    return _np_alloc_rows(mask, c, np.asarray(t_tx, dtype=float), F, n_total,
                          t_max, lam, prompt_id)[0]


def _np_codes_to_assoc(start, count, n_ues, base):
    codes = np.arange(start, start + count, dtype=np.int64)
    powers = base ** np.arange(n_ues - 1, -1, -1, dtype=np.int64)
    return (codes[:, None] // powers[None, :]) % base


def _np_enumerate_penalized(start, count, n_ues, n_servers, data_bits, cycles,
                            f_local, rates, capacity, t_max, p_tx, p_loc, lam, prompt_id):
    assoc = _np_codes_to_assoc(start, count, n_ues, n_servers + 1)
    alloc = np.zeros(assoc.shape)
    for m in range(n_servers):
        mask = assoc == m + 1
        t_tx = data_bits / rates[:, m]
        alloc += _np_alloc_rows(mask, cycles, t_tx, capacity[m], n_ues, t_max, lam, prompt_id)
    res = _np_evaluate_batch(assoc, alloc, data_bits, cycles, f_local, rates, capacity,
                             t_max, p_tx, p_loc, lam, prompt_id)
    return res[3]


def _np_de_fitness(genomes, n_servers, data_bits, cycles, f_local, rates, capacity,
                   t_max, p_tx, p_loc, lam, prompt_id, f_min_frac):
    N = data_bits.shape[0]
    assoc = np.clip(np.floor(genomes[:, :N]), 0, n_servers).astype(np.int64)
    assoc, alloc = _np_repair(assoc, genomes[:, N:], capacity, f_min_frac)
    res = _np_evaluate_batch(assoc, alloc, data_bits, cycles, f_local, rates, capacity,
                             t_max, p_tx, p_loc, lam, prompt_id)
    return res[3], assoc, alloc


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------


class _Backend:
    def __init__(self, name, evaluate_batch, repair, alloc_server, enumerate_penalized,
                 de_fitness):
        self.name = name
        self.evaluate_batch = evaluate_batch
        self.repair = repair
        self.alloc_server = alloc_server
        self.enumerate_penalized = enumerate_penalized
        self.de_fitness = de_fitness

    def __repr__(self):
        return f"<kernel backend {self.name}>"


NUMPY = _Backend("numpy", _np_evaluate_batch, _np_repair, _np_alloc_server,
                 _np_enumerate_penalized, _np_de_fitness)
NUMBA = _Backend("numba", _nb_evaluate_batch, _nb_repair, _nb_alloc_server,
                 _nb_enumerate_penalized, _nb_de_fitness) if HAVE_NUMBA else None

active = NUMBA if USE_NUMBA else NUMPY


def backend(name: str | None = None) -> _Backend:
    """Return a backend by name, or the active one."""
    if name is None:
        return active
    if name == "numpy":
        return NUMPY
    if name == "numba":
        if NUMBA is None:
            raise RuntimeError("numba is not installed")
        return NUMBA
    raise ValueError(f"unknown backend {name!r}")

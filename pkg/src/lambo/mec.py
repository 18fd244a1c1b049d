"""Multi-access edge computing system model.

Instances are immutable snapshots of N user devices (UEs) and M edge servers.
``evaluate`` is the ground truth every solver and the learned policy are
scored against.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np

from . import _kernels
from .errors import ConfigError, ShapeMismatch, UnknownPrompt

DEFAULT_CAPACITIES = (1.5e10, 1.5e10, 3e10, 5e10)


class Prompt(enum.IntEnum):
    """Task instruction conditioning the policy. The value is the token id."""

    MIN_LATENCY = 0
    MIN_ENERGY = 1

    @property
    def token_id(self) -> int:
        return int(self)

    @property
    def kind(self) -> str:
        return "MinLatency" if self is Prompt.MIN_LATENCY else "MinEnergy"

    @property
    def cli_name(self) -> str:
        return self.name.lower()

    @classmethod
    def parse(cls, value) -> "Prompt":
        if isinstance(value, Prompt):
            return value
        if isinstance(value, (int, np.integer)) and not isinstance(value, bool):
            if int(value) in (0, 1):
                return cls(int(value))
            raise UnknownPrompt(f"prompt token {value} not in vocabulary")
        key = str(value).strip().lower().replace("-", "_")
        aliases = {
            "min_latency": cls.MIN_LATENCY,
            "minlatency": cls.MIN_LATENCY,
            "latency": cls.MIN_LATENCY,
            "min_energy": cls.MIN_ENERGY,
            "minenergy": cls.MIN_ENERGY,
            "energy": cls.MIN_ENERGY,
        }
        try:
            return aliases[key]
        except KeyError:
            raise UnknownPrompt(f"unknown prompt {value!r}") from None


@dataclass(frozen=True)
class PhysParams:
    bandwidth_hz: float = 1e6
    noise_power_w: float = 1e-10
    tx_power_w: float = 1.0
    local_power_w: float = 1.0
    ref_gain: float = 1e-4
    pathloss_exp: float = 3.0
    t_max_s: float = 1.5
    penalty_lambda: float = 10.0

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if not (np.isfinite(value) and value > 0):
                raise ConfigError(f"{name} must be finite and positive, got {value}")
        if self.pathloss_exp < 2:
            raise ConfigError("pathloss_exp must be >= 2")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class Ue:
    position: tuple[float, float]
    data_bits: float
    cycles: float
    f_local: float


@dataclass(frozen=True)
class EdgeServer:
    position: tuple[float, float]
    capacity: float


def _frozen(a, dtype=float) -> np.ndarray:
    out = np.array(a, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class MecInstance:
    """Snapshot of the system, stored column-wise.

    ``fading`` is an optional (N, M) multiplicative small-scale factor already
    folded into ``gains``; ``waypoints``/``speeds`` carry mobility state between
    calls to :func:`step_dynamics`.
    """

    ue_pos: np.ndarray
    data_bits: np.ndarray
    cycles: np.ndarray
    f_local: np.ndarray
    server_pos: np.ndarray
    capacity: np.ndarray
    gains: np.ndarray
    phys: PhysParams = field(default_factory=PhysParams)
    area_m: float = 50.0
    fading: np.ndarray | None = None
    waypoints: np.ndarray | None = None
    speeds: np.ndarray | None = None
    seed: int | None = None

    def __post_init__(self):
        for name in ("ue_pos", "data_bits", "cycles", "f_local", "server_pos", "capacity",
                     "gains", "fading", "waypoints", "speeds"):
            value = getattr(self, name)
            if value is not None:
                object.__setattr__(self, name, _frozen(value))
        n, m = self.n_ues, self.n_servers
        if n < 1 or m < 1:
            raise ShapeMismatch("need at least one UE and one server")
        if self.ue_pos.shape != (n, 2) or self.server_pos.shape != (m, 2):
            raise ShapeMismatch("positions must be (count, 2)")
        for name in ("cycles", "f_local"):
            if getattr(self, name).shape != (n,):
                raise ShapeMismatch(f"{name} must have length {n}")
        if self.gains.shape != (n, m):
            raise ShapeMismatch(f"gains shape {self.gains.shape} != {(n, m)}")
        if self.fading is not None and self.fading.shape != (n, m):
            raise ShapeMismatch("fading shape mismatch")
        for name in ("data_bits", "cycles", "f_local", "capacity", "gains"):
            arr = getattr(self, name)
            if not np.all(np.isfinite(arr)) or np.any(arr <= 0):
                raise ConfigError(f"{name} must be finite and positive")

    @property
    def n_ues(self) -> int:
        return int(self.data_bits.shape[0])

    @property
    def n_servers(self) -> int:
        return int(self.capacity.shape[0])

    @property
    def ues(self) -> list[Ue]:
        return [Ue((float(p[0]), float(p[1])), float(d), float(c), float(f))
                for p, d, c, f in zip(self.ue_pos, self.data_bits, self.cycles, self.f_local)]

    @property
    def servers(self) -> list[EdgeServer]:
        return [EdgeServer((float(p[0]), float(p[1])), float(c))
                for p, c in zip(self.server_pos, self.capacity)]

    @property
    def rates(self) -> np.ndarray:
        return uplink_rate(self.gains, self.phys)

    def kernel_args(self):
        """Arrays in the positional order the evaluation kernels expect."""
        ph = self.phys
        return (self.data_bits, self.cycles, self.f_local, np.ascontiguousarray(self.rates),
                self.capacity, ph.t_max_s, ph.tx_power_w, ph.local_power_w, ph.penalty_lambda)

    def with_updates(self, **changes) -> "MecInstance":
        return replace(self, **changes)

    def equals(self, other: "MecInstance") -> bool:
        """Exact (bitwise) equality of every array and scalar."""
        if not isinstance(other, MecInstance):
            return False
        for name in ("ue_pos", "data_bits", "cycles", "f_local", "server_pos", "capacity",
                     "gains", "fading", "waypoints", "speeds"):
            a, b = getattr(self, name), getattr(other, name)
            if (a is None) != (b is None):
                return False
            if a is not None and (a.shape != b.shape or a.tobytes() != b.tobytes()):
                return False
        return self.phys == other.phys and self.area_m == other.area_m


@dataclass(frozen=True, eq=False)
class Decision:
    """Association (0 = local, m = server m) and absolute allocated cycles/s."""

    assoc: np.ndarray
    alloc: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "assoc", _frozen(self.assoc, np.int64))
        object.__setattr__(self, "alloc", _frozen(self.alloc, float))
        if self.assoc.ndim != 1 or self.assoc.shape != self.alloc.shape:
            raise ShapeMismatch("assoc and alloc must be equal-length vectors")
        if np.any(self.assoc < 0):
            raise ShapeMismatch("assoc entries must be >= 0")
        local = self.assoc == 0
        if np.any(self.alloc[local] != 0.0):
            raise ValueError("local UEs must have zero allocation")
        if np.any(~(self.alloc[~local] > 0.0)):
            raise ValueError("offloaded UEs need a positive allocation")

    @classmethod
    def all_local(cls, n: int) -> "Decision":
        return cls(np.zeros(n, dtype=np.int64), np.zeros(n))

    def __eq__(self, other):
        if not isinstance(other, Decision):
            return NotImplemented
        return (np.array_equal(self.assoc, other.assoc)
                and self.alloc.tobytes() == other.alloc.tobytes())

    __hash__ = None


@dataclass(frozen=True)
class Evaluation:
    objective: float
    per_ue_latency: np.ndarray
    per_ue_energy: np.ndarray
    latency_violation: float
    capacity_violation: float
    penalized: float


def channel_gain(ue_pos, server_pos, phys: PhysParams) -> np.ndarray:
    """Large-scale gain ``g0 * max(d, 1)^-alpha``; broadcasts over positions."""
    d = np.linalg.norm(np.asarray(ue_pos, float) - np.asarray(server_pos, float), axis=-1)
    return phys.ref_gain * np.maximum(d, 1.0) ** (-phys.pathloss_exp)


def gain_matrix(ue_pos, server_pos, phys: PhysParams, fading=None) -> np.ndarray:
    g = channel_gain(np.asarray(ue_pos)[:, None, :], np.asarray(server_pos)[None, :, :], phys)
    if fading is not None:
        g = g * fading
    return g


def uplink_rate(gain, phys: PhysParams):
    """Shannon rate in bits/s over an orthogonal channel."""
    snr = phys.tx_power_w * np.asarray(gain, dtype=float) / phys.noise_power_w
    return phys.bandwidth_hz * np.log2(1.0 + snr)


def evaluate(instance: MecInstance, decision: Decision, prompt) -> Evaluation:
    prompt = Prompt.parse(prompt)
    n = instance.n_ues
    if decision.assoc.shape != (n,):
        raise ShapeMismatch(f"decision covers {decision.assoc.shape[0]} UEs, instance has {n}")
    if decision.assoc.max(initial=0) > instance.n_servers:
        raise ShapeMismatch("association refers to a non-existent server")
    obj, lv, cv, pen, lat, en = _kernels.active.evaluate_batch(
        decision.assoc[None, :], decision.alloc[None, :], *instance.kernel_args(),
        int(prompt))
    return Evaluation(float(obj[0]), lat[0].copy(), en[0].copy(), float(lv[0]), float(cv[0]),
                      float(pen[0]))


def penalized_batch(instance: MecInstance, assoc, alloc, prompt) -> np.ndarray:
    """Penalized objective for a stack of (P, N) decisions."""
    assoc = np.ascontiguousarray(assoc, dtype=np.int64)
    alloc = np.ascontiguousarray(alloc, dtype=float)
    return _kernels.active.evaluate_batch(assoc, alloc, *instance.kernel_args(),
                                          int(Prompt.parse(prompt)))[3]


@dataclass(frozen=True)
class GenConfig:
    """Instance generator settings. Task sizes are log-normal with the given means."""

    n_ues: int = 50
    n_servers: int = 4
    area_m: float = 50.0
    capacities: tuple[float, ...] = DEFAULT_CAPACITIES
    mean_data_bits: float = 2e6
    mean_cycles: float = 1e9
    sigma_data: float = 0.3
    sigma_cycles: float = 0.3
    f_local: float = 1e9
    rayleigh: bool = False
    phys: PhysParams = field(default_factory=PhysParams)

    def __post_init__(self):
        if self.n_ues < 1 or self.n_servers < 1:
            raise ConfigError("n_ues and n_servers must be >= 1")
        for name in ("area_m", "mean_data_bits", "mean_cycles", "f_local"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.sigma_data < 0 or self.sigma_cycles < 0:
            raise ConfigError("log-normal sigmas must be non-negative")
        if not self.capacities or any(not c > 0 for c in self.capacities):
            raise ConfigError("capacities must be positive")

    def server_capacities(self) -> np.ndarray:
        """Capacities for ``n_servers`` servers, cycling through the configured list."""
        caps = np.asarray(self.capacities, dtype=float)
        return caps[np.arange(self.n_servers) % caps.size]

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["capacities"] = list(self.capacities)
        d["phys"] = self.phys.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        d = dict(d)
        if "phys" in d and isinstance(d["phys"], dict):
            d["phys"] = PhysParams(**d["phys"])
        if "capacities" in d:
            d["capacities"] = tuple(float(c) for c in d["capacities"])
        return cls(**d)


def _lognormal(rng, mean, sigma, size):
    mu = np.log(mean) - 0.5 * sigma ** 2
    return rng.lognormal(mu, sigma, size)


def generate_instance(config: GenConfig, seed: int) -> MecInstance:
    rng = np.random.default_rng(seed)
    n, m, a = config.n_ues, config.n_servers, config.area_m
    server_pos = rng.uniform(0.0, a, size=(m, 2))
    ue_pos = rng.uniform(0.0, a, size=(n, 2))
    data_bits = _lognormal(rng, config.mean_data_bits, config.sigma_data, n)
    cycles = _lognormal(rng, config.mean_cycles, config.sigma_cycles, n)
    fading = rng.exponential(1.0, size=(n, m)) if config.rayleigh else None
    return MecInstance(
        ue_pos=ue_pos,
        data_bits=data_bits,
        cycles=cycles,
        f_local=np.full(n, config.f_local),
        server_pos=server_pos,
        capacity=config.server_capacities(),
        gains=gain_matrix(ue_pos, server_pos, config.phys, fading),
        phys=config.phys,
        area_m=a,
        fading=fading,
        seed=seed,
    )


def generate_instances(config: GenConfig, count: int, seed: int) -> list[MecInstance]:
    """``count`` instances with per-instance seeds spawned from ``seed``."""
    seeds = np.random.SeedSequence(seed).generate_state(count, dtype=np.uint32)
    return [generate_instance(config, int(s)) for s in seeds]


MAX_SPEED = 1.2


def step_dynamics(instance: MecInstance, dt_s: float, seed: int) -> MecInstance:
    """Advance UEs along random-waypoint trajectories for ``dt_s`` seconds.

    Each UE heads to its waypoint at a speed drawn from U(0, 1.2] m/s and picks a
    new waypoint and speed on arrival. Gains are recomputed; when the instance
    carries a fading matrix it is redrawn.
    """
    if not dt_s > 0:
        raise ConfigError("dt_s must be positive")
    rng = np.random.default_rng(seed)
    n, a = instance.n_ues, instance.area_m
    pos = instance.ue_pos.copy()
    if instance.waypoints is None:
        waypoints = rng.uniform(0.0, a, size=(n, 2))
        speeds = MAX_SPEED * (1.0 - rng.uniform(size=n))
    else:
        waypoints = instance.waypoints.copy()
        speeds = instance.speeds.copy()
    delta = waypoints - pos
    dist = np.linalg.norm(delta, axis=1)
    travel = speeds * dt_s
    arrived = travel >= dist
    with np.errstate(invalid="ignore", divide="ignore"):
        unit = np.where(dist[:, None] > 0, delta / dist[:, None], 0.0)
    pos = np.where(arrived[:, None], waypoints, pos + unit * travel[:, None])
    # reflect at the boundary; waypoints lie inside so this only guards round-off
    pos = np.abs(pos)
    pos = np.where(pos > a, 2 * a - pos, pos)
    fresh_wp = rng.uniform(0.0, a, size=(n, 2))
    fresh_speed = MAX_SPEED * (1.0 - rng.uniform(size=n))
    waypoints = np.where(arrived[:, None], fresh_wp, waypoints)
    speeds = np.where(arrived, fresh_speed, speeds)
    fading = None
    if instance.fading is not None:
        fading = rng.exponential(1.0, size=instance.fading.shape)
    gains = gain_matrix(pos, instance.server_pos, instance.phys, fading)
    return replace(instance, ue_pos=pos, gains=gains, fading=fading, waypoints=waypoints,
                   speeds=speeds)

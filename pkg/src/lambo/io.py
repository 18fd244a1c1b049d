"""File formats: binary checkpoints, JSONL instances, CSV result rows, experiments.

Checkpoint layout (all integers little-endian)::

    b"LMB1" | u32 header length | UTF-8 JSON header | raw f64 tensor data

The header lists every tensor with its name, shape and byte offset into the
data section. Headers are written with sorted keys and compact separators,
so loading a checkpoint and saving it again reproduces the file exactly.
"""
from __future__ import annotations

import csv
import io as _stdio
import json
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import (BadMagic, CheckpointError, ConfigError, OffsetOverlap, TruncatedFile,
                     VersionUnsupported)
from .mec import (GenConfig, MecInstance, PhysParams, Prompt, evaluate, gain_matrix,
                  generate_instances)
from .model import AedConfig
from .solvers import DEFAULT_ENUM_BUDGET, DeConfig, enumeration_size, solve, solve_exact

MAGIC = b"LMB1"
FORMAT_VERSION = 1
CRITIC_PREFIX = "critic/"
_LEN = struct.Struct("<I")


# -- checkpoints -------------------------------------------------------------------


@dataclass
class Checkpoint:
    params: dict[str, T.Tensor]
    aed_config: AedConfig
    critic: dict[str, T.Tensor] | None = None
    acl_config: dict | None = None
    extra: dict = field(default_factory=dict)


def _header_bytes(header: dict) -> bytes:
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    tensors = list(ckpt.params.items())
    if ckpt.critic:
        tensors += [(CRITIC_PREFIX + k, v) for k, v in ckpt.critic.items()]
    entries, chunks, offset = [], [], 0
    for name, t in tensors:
        data = np.ascontiguousarray(getattr(t, "data", t), dtype="<f8")
        entries.append({"name": name, "shape": list(data.shape), "byte_offset": offset})
        chunks.append(data.tobytes())
        offset += data.nbytes
    acl = ckpt.acl_config
    if acl is not None and hasattr(acl, "to_dict"):
        acl = acl.to_dict()
    header = {
        "format_version": FORMAT_VERSION,
        "dtype": "f64",
        "aed_config": ckpt.aed_config.to_dict(),
        "acl_config": acl,
        "norm_constants": ckpt.aed_config.norm_constants,
        "extra": ckpt.extra,
        "tensors": entries,
    }
    head = _header_bytes(header)
    return MAGIC + _LEN.pack(len(head)) + head + b"".join(chunks)


def save_checkpoint(params, meta: dict, path, critic=None) -> Path:
    """Write ``params`` (and optionally the critic) with ``meta``.

    ``meta`` needs ``aed_config`` (an :class:`AedConfig` or its dict) and may
    carry ``acl_config`` and a JSON-serialisable ``extra`` mapping.
    """
    aed = meta["aed_config"]
    if isinstance(aed, dict):
        aed = AedConfig.from_dict(aed)
    ckpt = Checkpoint(params, aed, critic, meta.get("acl_config"), dict(meta.get("extra", {})))
    return write_checkpoint(ckpt, path)


def write_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.write_bytes(checkpoint_bytes(ckpt))
    return path


def parse_checkpoint(blob: bytes) -> Checkpoint:
    if len(blob) < 4:
        raise TruncatedFile("file shorter than the magic number")
    if blob[:4] != MAGIC:
        raise BadMagic(f"expected {MAGIC!r}, found {blob[:4]!r}")
    if len(blob) < 8:
        raise TruncatedFile("missing header length")
    (hlen,) = _LEN.unpack_from(blob, 4)
    if len(blob) < 8 + hlen:
        raise TruncatedFile("header runs past end of file")
    try:
        header = json.loads(blob[8:8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable header: {exc}") from None
    if header.get("format_version") != FORMAT_VERSION:
        raise VersionUnsupported(f"format_version {header.get('format_version')!r}")
    if header.get("dtype") != "f64":
        raise VersionUnsupported(f"dtype {header.get('dtype')!r}")
    data = memoryview(blob)[8 + hlen:]
    params, critic = {}, {}
    end = 0
    for entry in header["tensors"]:
        shape = tuple(int(s) for s in entry["shape"])
        off = int(entry["byte_offset"])
        size = 8 * math.prod(shape)
        if off < end:
            raise OffsetOverlap(f"tensor {entry['name']} starts at {off}, before {end}")
        if off + size > len(data):
            raise TruncatedFile(f"tensor {entry['name']} extends past end of file")
        arr = np.frombuffer(data[off:off + size], dtype="<f8").astype(np.float64).reshape(shape)
        end = off + size
        name = entry["name"]
        if name.startswith(CRITIC_PREFIX):
            critic[name[len(CRITIC_PREFIX):]] = T.parameter(arr)
        else:
            params[name] = T.parameter(arr)
    if end != len(data):
        raise CheckpointError(f"{len(data) - end} unexpected trailing bytes")
    aed = AedConfig.from_dict(header["aed_config"])
    return Checkpoint(params, aed, critic or None, header.get("acl_config"),
                      header.get("extra", {}))


def load_checkpoint(path) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes())


# -- instances -------------------------------------------------------------------------


def instance_to_record(instance: MecInstance, include_gains: bool = True) -> dict:
    rec = {
        "seed": instance.seed,
        "area_m": instance.area_m,
        "phys": instance.phys.to_dict(),
        "ues": [{"pos": [float(p[0]), float(p[1])], "data_bits": float(d), "cycles": float(c),
                 "f_local": float(f)}
                for p, d, c, f in zip(instance.ue_pos, instance.data_bits, instance.cycles,
                                      instance.f_local)],
        "servers": [{"pos": [float(p[0]), float(p[1])], "capacity": float(c)}
                    for p, c in zip(instance.server_pos, instance.capacity)],
    }
    if include_gains:
        rec["gains"] = instance.gains.tolist()
    for name in ("fading", "waypoints", "speeds"):
        value = getattr(instance, name)
        if value is not None:
            rec[name] = value.tolist()
    return rec


def record_to_instance(rec: dict) -> MecInstance:
    phys = PhysParams(**rec.get("phys", {}))
    ue_pos = np.array([u["pos"] for u in rec["ues"]], dtype=float)
    server_pos = np.array([s["pos"] for s in rec["servers"]], dtype=float)
    fading = np.array(rec["fading"], dtype=float) if "fading" in rec else None
    gains = rec.get("gains")
    gains = (np.array(gains, dtype=float) if gains is not None
             else gain_matrix(ue_pos, server_pos, phys, fading))
    opt = {k: np.array(rec[k], dtype=float) for k in ("waypoints", "speeds") if k in rec}
    return MecInstance(
        ue_pos=ue_pos,
        data_bits=[u["data_bits"] for u in rec["ues"]],
        cycles=[u["cycles"] for u in rec["ues"]],
        f_local=[u["f_local"] for u in rec["ues"]],
        server_pos=server_pos,
        capacity=[s["capacity"] for s in rec["servers"]],
        gains=gains, phys=phys, area_m=float(rec.get("area_m", 50.0)), fading=fading,
        seed=rec.get("seed"), **opt)


def dump_instance(instance: MecInstance) -> str:
    return json.dumps(instance_to_record(instance), separators=(",", ":"))


def write_instances(instances, path) -> Path:
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for inst in instances:
            fh.write(dump_instance(inst) + "\n")
    return path


def read_instances(path) -> list[MecInstance]:
    out = []
    with Path(path).open(encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            if line.strip():
                try:
                    out.append(record_to_instance(json.loads(line)))
                except (KeyError, TypeError, json.JSONDecodeError) as exc:
                    raise ConfigError(f"{path}:{line_no}: bad instance record ({exc})") from None
    return out


# -- result rows -----------------------------------------------------------------------

RESULT_COLUMNS = ("run_id", "solver", "prompt", "n_ues", "objective", "penalized",
                  "gap_to_oracle", "wall_ms", "seed")


@dataclass(frozen=True)
class ResultRow:
    run_id: str
    solver: str
    prompt: str
    n_ues: int
    objective: float
    penalized: float
    gap_to_oracle: float | None
    wall_ms: float | None
    seed: int

    def cells(self) -> list[str]:
        return [self.run_id, self.solver, self.prompt, str(self.n_ues), _num(self.objective),
                _num(self.penalized), _num(self.gap_to_oracle), _num(self.wall_ms),
                str(self.seed)]


def _num(x) -> str:
    # repr of a Python float is locale-independent and round-trips exactly
    return "" if x is None else repr(float(x))


def rows_to_csv(rows) -> str:
    buf = _stdio.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(RESULT_COLUMNS)
    for row in rows:
        writer.writerow(row.cells())
    return buf.getvalue()


def write_rows(rows, path) -> Path:
    path = Path(path)
    path.write_text(rows_to_csv(rows), encoding="utf-8", newline="")
    return path


def read_rows(path) -> list[ResultRow]:
    def opt(s):
        return float(s) if s != "" else None

    with Path(path).open(encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        return [ResultRow(r["run_id"], r["solver"], r["prompt"], int(r["n_ues"]),
                          float(r["objective"]), float(r["penalized"]), opt(r["gap_to_oracle"]),
                          opt(r["wall_ms"]), int(r["seed"])) for r in reader]


def write_table(rows: list[dict], columns, path) -> Path:
    """Plain CSV for logs and session metrics (same float formatting as result rows)."""
    buf = _stdio.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for r in rows:
        writer.writerow([_num(r[c]) if isinstance(r[c], float) else str(r[c]) for c in columns])
    path = Path(path)
    path.write_text(buf.getvalue(), encoding="utf-8", newline="")
    return path


# -- comparisons and experiments ------------------------------------------------------------


def instance_seed(base_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([base_seed, index]).generate_state(1)[0])


def lambo_policy(params, cfg: AedConfig):
    from .model import decode_batch

    def policy(instance, prompt):
        return decode_batch([instance], [prompt], params, cfg, mode="greedy").decision(0)
    return policy


def compare(instances, solvers, prompts, seed: int = 0, run_id: str = "compare",
            models: dict | None = None, de_config: DeConfig | None = None,
            budget: int = DEFAULT_ENUM_BUDGET, with_gap: bool = True,
            timing: bool = False) -> list[ResultRow]:
    """Run every solver on every instance for every prompt.

    ``models`` maps a solver name to a ``(instance, prompt) -> Decision``
    policy (learned models). Rows are ordered by prompt, instance, then the
    order of ``solvers``. ``wall_ms`` is only filled when ``timing`` is set,
    which keeps the output a deterministic function of the inputs otherwise.
    """
    models = models or {}
    rows = []
    for prompt in (Prompt.parse(p) for p in prompts):
        for idx, inst in enumerate(instances):
            s = instance_seed(seed, idx)
            oracle = None
            if with_gap and enumeration_size(inst) <= budget:
                oracle = solve_exact(inst, prompt, budget)[1]
            for name in solvers:
                t0 = time.perf_counter()
                if name in models:
                    decision = models[name](inst, prompt)
                else:
                    if name == "lambo":
                        raise ConfigError("solver 'lambo' needs a checkpoint")
                    de = DeConfig(**{**(de_config or DeConfig()).__dict__, "seed": s})
                    decision = solve(name, inst, prompt, seed=s, budget=budget, de_config=de)
                wall = (time.perf_counter() - t0) * 1e3 if timing else None
                ev = evaluate(inst, decision, prompt)
                gap = None if oracle is None else (ev.penalized - oracle) / oracle
                rows.append(ResultRow(run_id, name, prompt.cli_name, inst.n_ues, ev.objective,
                                      ev.penalized, gap, wall, s))
    return rows


def summarize(rows) -> dict:
    """Per (solver, prompt) means with 95% normal-approximation intervals."""
    groups: dict[tuple[str, str], list[ResultRow]] = {}
    for r in rows:
        groups.setdefault((r.solver, r.prompt), []).append(r)
    out: dict = {}
    for (solver, prompt), rs in groups.items():
        vals = np.array([r.penalized for r in rs])
        obj = np.array([r.objective for r in rs])
        half = 1.96 * vals.std(ddof=1) / math.sqrt(vals.size) if vals.size > 1 else 0.0
        gaps = [r.gap_to_oracle for r in rs if r.gap_to_oracle is not None]
        out.setdefault(solver, {})[prompt] = {
            "n": int(vals.size),
            "mean_objective": float(obj.mean()),
            "mean_penalized": float(vals.mean()),
            "ci95_low": float(vals.mean() - half),
            "ci95_high": float(vals.mean() + half),
            "mean_gap": float(np.mean(gaps)) if len(gaps) == len(rs) else None,
        }
    return out


def _resolve(base: Path, p) -> Path:
    p = Path(p)
    return p if p.is_absolute() else base / p


def _experiment_models(spec: dict, base: Path, gen: GenConfig) -> dict:
    from .train import AclConfig, pretrain

    models = {}
    for m in spec.get("models", []):
        name = m["name"]
        if "checkpoint" in m:
            ckpt = load_checkpoint(_resolve(base, m["checkpoint"]))
            params, cfg = ckpt.params, ckpt.aed_config
        else:
            cfg = AedConfig.from_dict({"n_servers": gen.n_servers, **m.get("aed_config", {})})
            acl = AclConfig.from_dict(m.get("acl_config", {}))
            params, _, _ = pretrain(gen, cfg, acl)
        models[name] = lambo_policy(params, cfg)
    return models


def run_experiment(spec_file) -> dict:
    """Run an experiment described by a JSON file; returns the output paths.

    Keys: ``run_id``, ``seed``, ``instances`` (``{"file": ...}`` or generator
    fields ``n_ues``, ``n_servers``, ``count``), ``prompts``, ``solvers``,
    ``models`` (each ``{"name", "checkpoint"}`` or ``{"name", "aed_config",
    "acl_config"}`` to train inline), ``budget``, ``de``, ``timing``,
    ``out_csv`` and ``out_summary``. Relative paths resolve against the spec
    file's directory.
    """
    spec_path = Path(spec_file)
    base = spec_path.parent
    spec = json.loads(spec_path.read_text(encoding="utf-8"))
    run_id = str(spec.get("run_id", spec_path.stem))
    seed = int(spec.get("seed", 0))
    src = spec.get("instances", {})
    if "file" in src:
        instances = read_instances(_resolve(base, src["file"]))
        gen = GenConfig(n_ues=instances[0].n_ues, n_servers=instances[0].n_servers)
    else:
        gen = GenConfig.from_dict({k: v for k, v in src.items() if k not in ("count", "seed")})
        instances = generate_instances(gen, int(src.get("count", 10)), int(src.get("seed", seed)))
    prompts = spec.get("prompts", ["min_latency", "min_energy"])
    models = _experiment_models(spec, base, gen)
    solvers = list(spec.get("solvers", ["local", "random", "de", "exact"])) + list(models)
    de = DeConfig(**spec["de"]) if "de" in spec else None
    rows = compare(instances, solvers, prompts, seed=seed, run_id=run_id, models=models,
                   de_config=de, budget=int(spec.get("budget", DEFAULT_ENUM_BUDGET)),
                   timing=bool(spec.get("timing", False)))
    csv_path = write_rows(rows, _resolve(base, spec.get("out_csv", f"{run_id}.csv")))
    summary = {"run_id": run_id, "rows": len(rows), "solvers": summarize(rows)}
    sum_path = _resolve(base, spec.get("out_summary", f"{run_id}_summary.json"))
    sum_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return {"csv": csv_path, "summary": sum_path, "rows": rows, "summary_data": summary}

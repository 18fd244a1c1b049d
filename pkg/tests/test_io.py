from __future__ import annotations

import json
import struct

import numpy as np
import pytest

from conftest import make_tiny
from lambo import io as lio
from lambo.errors import BadMagic, OffsetOverlap, TruncatedFile, VersionUnsupported
from lambo.mec import GenConfig, generate_instance, generate_instances, step_dynamics
from lambo.model import AedConfig, init_critic_params, init_params
from lambo.train import AclConfig

CFG = AedConfig(n_servers=2, d_model=16, n_heads=2, enc_layers=2, dec_layers=1, d_ffn=32)


@pytest.fixture
def ckpt_path(tmp_path):
    path = tmp_path / "model.lmb"
    lio.save_checkpoint(init_params(CFG, 0), {"aed_config": CFG, "acl_config": AclConfig()},
                        path, critic=init_critic_params(CFG, 1))
    return path


def _header(blob):
    (n,) = struct.unpack_from("<I", blob, 4)
    return n, json.loads(blob[8:8 + n])


def _rebuild(header, data):
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return b"LMB1" + struct.pack("<I", len(head)) + head + data


class TestCheckpoint:
    def test_layout(self, ckpt_path):
        blob = ckpt_path.read_bytes()
        assert blob[:4] == b"LMB1"
        n, header = _header(blob)
        assert header["format_version"] == 1 and header["dtype"] == "f64"
        offsets = [t["byte_offset"] for t in header["tensors"]]
        sizes = [8 * int(np.prod(t["shape"])) for t in header["tensors"]]
        assert offsets == sorted(offsets)
        assert all(a + s == b for a, s, b in zip(offsets, sizes, offsets[1:]))
        assert len(blob) == 8 + n + sum(sizes)
        assert header["norm_constants"] == CFG.norm_constants

    def test_round_trip_bytes(self, ckpt_path, tmp_path):
        again = tmp_path / "again.lmb"
        lio.write_checkpoint(lio.load_checkpoint(ckpt_path), again)
        assert again.read_bytes() == ckpt_path.read_bytes()

    def test_round_trip_values(self, ckpt_path):
        params = init_params(CFG, 0)
        ck = lio.load_checkpoint(ckpt_path)
        assert ck.aed_config == CFG
        assert list(ck.params) == list(params)
        for k, v in params.items():
            assert ck.params[k].data.tobytes() == v.data.tobytes()
        assert set(ck.critic) == set(init_critic_params(CFG, 1))
        assert ck.acl_config == AclConfig().to_dict()

    def test_bad_magic(self, ckpt_path):
        blob = bytearray(ckpt_path.read_bytes())
        blob[:4] = b"XMB1"
        ckpt_path.write_bytes(bytes(blob))
        with pytest.raises(BadMagic):
            lio.load_checkpoint(ckpt_path)

    def test_tensor_past_eof(self, ckpt_path):
        blob = ckpt_path.read_bytes()
        n, header = _header(blob)
        header["tensors"][-1]["byte_offset"] += 8
        data = blob[8 + n:]
        with pytest.raises(TruncatedFile):
            lio.parse_checkpoint(_rebuild(header, data))

    def test_cut_file(self, ckpt_path):
        blob = ckpt_path.read_bytes()
        for cut in (2, 6, 20, len(blob) - 1):
            with pytest.raises((TruncatedFile, BadMagic)):
                lio.parse_checkpoint(blob[:cut])

    def test_overlap(self, ckpt_path):
        blob = ckpt_path.read_bytes()
        n, header = _header(blob)
        header["tensors"][1]["byte_offset"] = 0
        with pytest.raises(OffsetOverlap):
            lio.parse_checkpoint(_rebuild(header, blob[8 + n:]))

    def test_version(self, ckpt_path):
        blob = ckpt_path.read_bytes()
        n, header = _header(blob)
        header["format_version"] = 99
        with pytest.raises(VersionUnsupported):
            lio.parse_checkpoint(_rebuild(header, blob[8 + n:]))


class TestInstances:
    def test_round_trip(self, tmp_path):
        inst = generate_instances(GenConfig(n_ues=5, n_servers=2, rayleigh=True), 3, 9)
        moved = [step_dynamics(i, 1.0, 0) for i in inst]
        path = lio.write_instances(inst + moved, tmp_path / "i.jsonl")
        back = lio.read_instances(path)
        assert all(a.equals(b) for a, b in zip(inst + moved, back))
        # parse -> serialize -> parse
        lines = path.read_text().splitlines()
        assert [lio.dump_instance(b) for b in back] == lines

    def test_gains_optional(self):
        inst = generate_instance(GenConfig(n_ues=4, n_servers=2), 1)
        rec = lio.instance_to_record(inst, include_gains=False)
        assert "gains" not in rec
        assert np.array_equal(lio.record_to_instance(rec).gains, inst.gains)

    def test_tiny_record(self):
        rec = lio.instance_to_record(make_tiny(2))
        assert rec["servers"] == [{"pos": [12.0, 10.0], "capacity": 1.5e10}]
        assert lio.record_to_instance(json.loads(json.dumps(rec))).equals(make_tiny(2))


class TestResults:
    def test_csv_header_always(self):
        assert lio.rows_to_csv([]) == ",".join(lio.RESULT_COLUMNS) + "\n"

    def test_csv_round_trip(self, tmp_path):
        rows = [lio.ResultRow("r", "local", "min_latency", 2, 1.0, 1.0, None, None, 7),
                lio.ResultRow("r", "de", "min_energy", 2, 0.4000000000000001, 0.4, 0.0, 1.5, 8)]
        path = lio.write_rows(rows, tmp_path / "r.csv")
        assert lio.read_rows(path) == rows
        assert "0.4000000000000001" in path.read_text()

    def test_compare_local(self):
        rows = lio.compare([make_tiny(2)], ["local"], ["min_latency", "min_energy"])
        assert [r.objective for r in rows] == [1.0, 2.0]
        assert rows[0].gap_to_oracle > 0

    def test_compare_deterministic(self):
        inst = generate_instances(GenConfig(n_ues=3, n_servers=2), 4, 0)
        a = lio.rows_to_csv(lio.compare(inst, ["random", "de", "exact"], ["min_energy"], seed=3))
        b = lio.rows_to_csv(lio.compare(inst, ["random", "de", "exact"], ["min_energy"], seed=3))
        assert a == b
        assert ",exact,min_energy,3," in a and ",0.0," in a

    def test_summary(self):
        rows = lio.compare([make_tiny(2)] * 3, ["local"], ["min_energy"])
        s = lio.summarize(rows)["local"]["min_energy"]
        assert s["mean_penalized"] == 2.0 and s["ci95_low"] == s["ci95_high"] == 2.0
        assert s["n"] == 3


class TestExperiment:
    def _spec(self, tmp_path, **extra):
        lio.write_instances([make_tiny(2), make_tiny(2)], tmp_path / "tiny.jsonl")
        spec = {"run_id": "t", "seed": 1, "instances": {"file": "tiny.jsonl"},
                "solvers": ["local", "random"], **extra}
        path = tmp_path / "spec.json"
        path.write_text(json.dumps(spec))
        return path

    def test_cardinality_and_summary(self, tmp_path):
        res = lio.run_experiment(self._spec(tmp_path))
        assert len(res["rows"]) == 2 * 2 * 2
        summary = json.loads(res["summary"].read_text())
        assert summary["solvers"]["local"]["min_energy"]["mean_penalized"] == 2.0
        assert summary["rows"] == 8

    def test_rerun_identical(self, tmp_path):
        spec = self._spec(tmp_path)
        first = lio.run_experiment(spec)["csv"].read_bytes()
        assert lio.run_experiment(spec)["csv"].read_bytes() == first

    def test_checkpoint_model(self, tmp_path):
        cfg = AedConfig(n_servers=1, d_model=16, n_heads=2, enc_layers=2, d_ffn=32)
        ck = lio.save_checkpoint(init_params(cfg, 0), {"aed_config": cfg}, tmp_path / "m1.lmb")
        res = lio.run_experiment(self._spec(tmp_path, models=[
            {"name": "lambo_s", "checkpoint": ck.name}]))
        assert {r.solver for r in res["rows"]} == {"local", "random", "lambo_s"}

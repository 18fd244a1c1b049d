from __future__ import annotations

import csv
import json
import subprocess
import sys

import pytest

from conftest import make_tiny
from lambo import io as lio
from lambo.cli import main
from lambo.model import AedConfig, init_params


def run(*argv):
    return main([str(a) for a in argv])


def test_gen_deterministic(tmp_path):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    for out in (a, b):
        assert run("gen", "--n-ues", 4, "--n-servers", 2, "--count", 100, "--seed", 42,
                   "--out", out) == 0
    assert len(a.read_text().splitlines()) == 100
    assert a.read_bytes() == b.read_bytes()
    inst = lio.read_instances(a)
    assert inst[0].n_ues == 4 and inst[0].n_servers == 2


def test_compare_local_tiny(tmp_path):
    path = lio.write_instances([make_tiny(2), make_tiny(3)], tmp_path / "tiny.jsonl")
    out = tmp_path / "r.csv"
    assert run("compare", "--instances", path, "--solver", "local", "--prompt", "min_latency",
               "--out", out) == 0
    rows = list(csv.DictReader(out.open()))
    assert [float(r["objective"]) for r in rows] == [1.0, 1.0]
    assert rows[0]["wall_ms"] == ""


def test_compare_rerun_identical(tmp_path):
    inst = tmp_path / "i.jsonl"
    run("gen", "--n-ues", 3, "--n-servers", 2, "--count", 3, "--seed", 1, "--out", inst)
    outs = [tmp_path / "x.csv", tmp_path / "y.csv"]
    for o in outs:
        assert run("compare", "--instances", inst, "--seed", 5, "--out", o) == 0
    assert outs[0].read_bytes() == outs[1].read_bytes()
    assert len(outs[0].read_text().splitlines()) == 1 + 3 * 4 * 2


def test_oracle_too_large(capsys):
    assert run("oracle", "--n-ues", 12, "--n-servers", 4, "--budget", 1000) == 2
    assert "OracleTooLarge" in capsys.readouterr().err


def test_oracle_small(tmp_path):
    out = tmp_path / "o.csv"
    assert run("oracle", "--n-ues", 3, "--n-servers", 2, "--prompt", "min_energy",
               "--out", out) == 0
    assert len(out.read_text().splitlines()) == 2


@pytest.mark.parametrize("argv", [["frobnicate"], ["gen", "--prompt", "min_cost"],
                                  ["gen", "--count", "many"], []])
def test_usage_errors(argv, capsys):
    assert main(argv) == 1
    err = capsys.readouterr().err
    assert err.strip() and len(err.strip().splitlines()) == 1


def test_lambo_needs_checkpoint(tmp_path, capsys):
    path = lio.write_instances([make_tiny(2)], tmp_path / "t.jsonl")
    assert run("compare", "--instances", path, "--solver", "lambo") == 1


def test_eval_and_finetune(tmp_path):
    cfg = AedConfig(n_servers=2, d_model=16, n_heads=2, enc_layers=2, d_ffn=32)
    ck = lio.save_checkpoint(init_params(cfg, 0), {"aed_config": cfg}, tmp_path / "m.lmb")
    out = tmp_path / "eval.json"
    assert run("eval", "--checkpoint", ck, "--n-ues", 3, "--n-servers", 2, "--count", 2,
               "--out", out) == 0
    summary = json.loads(out.read_text())
    assert set(summary["lambo"]) == {"min_latency", "min_energy"}
    metrics = tmp_path / "session.csv"
    saved = tmp_path / "tuned.lmb"
    assert run("finetune", "--checkpoint", ck, "--n-ues", 3, "--n-servers", 2, "--steps", 4,
               "--budget", 2, "--out", metrics, "--save", saved) == 0
    assert len(metrics.read_text().splitlines()) == 5
    assert lio.load_checkpoint(saved).aed_config == cfg


def test_pretrain_cli(tmp_path):
    conf = tmp_path / "c.json"
    conf.write_text(json.dumps({"aed": {"d_model": 16, "n_heads": 2, "enc_layers": 2,
                                        "d_ffn": 32},
                                "acl": {"instances_per_epoch": 8, "batch_size": 4}}))
    out, log = tmp_path / "p.lmb", tmp_path / "log.csv"
    assert run("pretrain", "--config", conf, "--n-ues", 3, "--n-servers", 2, "--epochs", 2,
               "--seed", 3, "--out", out, "--log", log) == 0
    ck = lio.load_checkpoint(out)
    assert ck.critic is not None and ck.acl_config["seed"] == 3
    assert len(log.read_text().splitlines()) == 3


def test_experiment_cli(tmp_path):
    lio.write_instances([make_tiny(2)], tmp_path / "t.jsonl")
    spec = tmp_path / "s.json"
    spec.write_text(json.dumps({"instances": {"file": "t.jsonl"}, "solvers": ["local"]}))
    assert run("experiment", spec) == 0
    assert (tmp_path / "s.csv").exists() and (tmp_path / "s_summary.json").exists()


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "lambo", "gen", "--n-ues", "2",
                          "--n-servers", "1"], capture_output=True, text=True)
    assert res.returncode == 0
    assert json.loads(res.stdout)["servers"][0]["capacity"] == 1.5e10

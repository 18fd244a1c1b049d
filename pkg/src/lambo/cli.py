"""Command-line interface.

Exit codes: 0 on success, 1 on usage errors (bad flags or arguments), 2 on
runtime errors such as an oracle enumeration that exceeds ``--budget``.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import io as lio
from .errors import LamboError
from .mec import GenConfig, Prompt, generate_instance, generate_instances
from .model import AedConfig
from .solvers import DEFAULT_ENUM_BUDGET, enumeration_size, solve_exact

EXIT_USAGE = 1
EXIT_RUNTIME = 2
ALL_SOLVERS = ("local", "random", "de", "exact", "lambo")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _read_config(path) -> dict:
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None


def _gen_config(args, cfg: dict) -> GenConfig:
    gen = dict(cfg.get("gen", {}))
    if args.n_ues is not None:
        gen["n_ues"] = args.n_ues
    if args.n_servers is not None:
        gen["n_servers"] = args.n_servers
    return GenConfig.from_dict(gen)


def _prompts(args) -> list[Prompt]:
    names = args.prompt or ["min_latency", "min_energy"]
    return [Prompt.parse(p) for p in names]


def _emit(text: str, out):
    if out:
        Path(out).write_text(text, encoding="utf-8", newline="")
    else:
        sys.stdout.write(text)


def _load_instances(args, cfg) -> list:
    if getattr(args, "instances", None):
        return lio.read_instances(args.instances)
    gen = _gen_config(args, cfg)
    return generate_instances(gen, args.count, args.seed)


# -- commands ----------------------------------------------------------------------------


def cmd_gen(args):
    cfg = _read_config(args.config)
    instances = generate_instances(_gen_config(args, cfg), args.count, args.seed)
    _emit("".join(lio.dump_instance(i) + "\n" for i in instances), args.out)


def cmd_pretrain(args):
    from .train import AclConfig, pretrain

    cfg = _read_config(args.config)
    gen = _gen_config(args, cfg)
    aed = AedConfig.from_dict({"n_servers": gen.n_servers, **cfg.get("aed", {})})
    acl_dict = {**cfg.get("acl", {}), "seed": args.seed}
    if args.epochs is not None:
        acl_dict["epochs"] = args.epochs
    acl = AclConfig.from_dict(acl_dict)
    if not args.out:
        raise UsageError("pretrain: --out is required")

    def progress(row):
        logging.getLogger("lambo").info("epoch %d reward %.4f", row["epoch"], row["mean_reward"])

    params, critic, log = pretrain(gen, aed, acl, progress=progress)
    lio.save_checkpoint(params, {"aed_config": aed, "acl_config": acl,
                                 "extra": {"gen": gen.to_dict()}}, args.out, critic=critic)
    if args.log:
        lio.write_table(log.rows, log.COLUMNS, args.log)


def _model_policy(args):
    if not args.checkpoint:
        raise UsageError("--checkpoint is required for the lambo solver")
    ckpt = lio.load_checkpoint(args.checkpoint)
    return lio.lambo_policy(ckpt.params, ckpt.aed_config)


def cmd_eval(args):
    cfg = _read_config(args.config)
    instances = _load_instances(args, cfg)
    rows = lio.compare(instances, ["lambo"], _prompts(args), seed=args.seed, run_id="eval",
                       models={"lambo": _model_policy(args)}, budget=args.budget)
    summary = lio.summarize(rows)
    _emit(json.dumps(summary, indent=2, sort_keys=True) + "\n", args.out)


def cmd_oracle(args):
    cfg = _read_config(args.config)
    instances = _load_instances(args, cfg)
    rows = []
    for inst in instances:
        if enumeration_size(inst) > args.budget:
            # surface the error before doing any work
            solve_exact(inst, Prompt.MIN_LATENCY, args.budget)
    rows = lio.compare(instances, ["exact"], _prompts(args), seed=args.seed, run_id="oracle",
                       budget=args.budget)
    _emit(lio.rows_to_csv(rows), args.out)


def cmd_compare(args):
    cfg = _read_config(args.config)
    instances = _load_instances(args, cfg)
    solvers = args.solver or ["local", "random", "de", "exact"]
    models = {"lambo": _model_policy(args)} if "lambo" in solvers else {}
    with_gap = all(enumeration_size(i) <= args.budget for i in instances)
    rows = lio.compare(instances, solvers, _prompts(args), seed=args.seed, run_id="compare",
                       models=models, budget=args.budget, with_gap=with_gap,
                       timing=args.timing)
    _emit(lio.rows_to_csv(rows), args.out)


def cmd_finetune(args):
    from .finetune import FinetuneConfig, QueryPolicy, drift_session

    cfg = _read_config(args.config)
    if not args.checkpoint:
        raise UsageError("finetune: --checkpoint is required")
    ckpt = lio.load_checkpoint(args.checkpoint)
    gen = _gen_config(args, cfg)
    instance = generate_instance(gen, args.seed)
    policy = QueryPolicy(**{"budget": args.budget if args.budget is not None else 50,
                            **cfg.get("query", {})})
    ft = FinetuneConfig(**{**cfg.get("finetune", {}), "seed": args.seed})
    prompt = _prompts(args)[0]
    metrics, params = drift_session(instance, ckpt.params, ckpt.aed_config, policy, ft,
                                    args.steps, prompt)
    text_rows = metrics.rows
    if args.out:
        lio.write_table(text_rows, metrics.COLUMNS, args.out)
    else:
        sys.stdout.write(json.dumps({"adapting_gap": metrics.mean_gap("adapting"),
                                     "frozen_gap": metrics.mean_gap("frozen"),
                                     "queries": metrics.queries}) + "\n")
    if args.save:
        lio.save_checkpoint(params, {"aed_config": ckpt.aed_config,
                                     "acl_config": ckpt.acl_config,
                                     "extra": {**ckpt.extra, "finetune": ft.to_dict()}},
                            args.save)


def cmd_experiment(args):
    result = lio.run_experiment(args.spec)
    sys.stdout.write(f"{result['csv']}\n{result['summary']}\n")


# -- parser ------------------------------------------------------------------------------


def _common(p, instances=False, budget_default=DEFAULT_ENUM_BUDGET):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="JSON file with gen/aed/acl/query/finetune sections")
    p.add_argument("--n-ues", type=int, dest="n_ues")
    p.add_argument("--n-servers", type=int, dest="n_servers")
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--prompt", action="append", choices=["min_latency", "min_energy"])
    p.add_argument("--out")
    p.add_argument("--checkpoint")
    p.add_argument("--budget", type=int, default=budget_default)
    if instances:
        p.add_argument("--instances", help="JSONL instance file (otherwise generated)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lambo", description="Prompt-conditioned offloading policies for MEC")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)

    p = sub.add_parser("gen", help="write seeded instances as JSONL")
    _common(p)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("pretrain", help="actor-critic pre-training")
    _common(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--log", help="CSV file for per-epoch training rows")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("eval", help="greedy evaluation of a checkpoint")
    _common(p, instances=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("finetune", help="drifting-environment session with expert queries")
    _common(p, budget_default=None)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--save", help="write the fine-tuned checkpoint here")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("oracle", help="exact enumeration")
    _common(p, instances=True)
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("compare", help="run solvers on an instance set")
    _common(p, instances=True)
    p.add_argument("--solver", action="append", choices=ALL_SOLVERS)
    p.add_argument("--timing", action="store_true", help="fill the wall_ms column")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("experiment", help="run a JSON experiment spec")
    p.add_argument("spec")
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(message)s")
        args.func(args)
    except UsageError as exc:
        print(str(exc).splitlines()[0], file=sys.stderr)
        return EXIT_USAGE
    except (LamboError, OSError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

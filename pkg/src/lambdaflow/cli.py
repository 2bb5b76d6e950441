"""Command-line entry point (``lambdaflow``)."""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from . import pipeline as pl
from . import simworld as sw
from .nn import CAUSAL, LAMBDA, ConfigError, MaskSpec, TokenLayout, build_mask, mask_to_ascii
from .runtime import ScheduleError, read_trace_csv, validate_schedule, write_trace_csv
from .storage import ConfigParseError, StorageError, load_config, read_dataset
from .training import CHOICE, FLOW, POSTTRAIN_ASYNC, POSTTRAIN_SYNC, TrainingFault

EXIT_OK, EXIT_USAGE, EXIT_FAULT = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="lambdaflow", description="Prefix-conditioned flow policies with asynchronous execution.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate expert demonstrations")
    g.add_argument("--task", choices=sw.TASKS, required=True)
    g.add_argument("--episodes", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--demo-noise", type=float, default=0.1)
    g.add_argument("--out", required=True)

    for name, stage in (("pretrain1", CHOICE), ("pretrain2", FLOW), ("posttrain", POSTTRAIN_ASYNC)):
        t = sub.add_parser(name, help=f"training stage '{stage}'")
        t.add_argument("--config")
        t.add_argument("--data", required=True)
        t.add_argument("--out", required=True)
        t.add_argument("--init", help="checkpoint from the previous stage")
        t.add_argument("--log", help="training log CSV")
        t.add_argument("--seed", type=int)
        if name == "posttrain":
            t.add_argument("--sync", action="store_true", help="synchronous recipe (prefix length 0)")
        t.set_defaults(stage=stage)

    r = sub.add_parser("rollout", help="closed-loop evaluation episodes")
    r.add_argument("--mode", choices=(pl.SYNC, pl.ASYNC), required=True)
    r.add_argument("--ckpt", required=True)
    r.add_argument("--config")
    r.add_argument("--episodes", type=int, default=50)
    r.add_argument("--task", choices=sw.TASKS)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--no-prefix", action="store_true", help="async without prefix conditioning")
    r.add_argument("--trace-out", required=True)

    e = sub.add_parser("eval", help="metrics from rollout traces")
    e.add_argument("--traces", nargs="+", required=True)
    e.add_argument("--task", choices=sw.TASKS, required=True)
    e.add_argument("--report-out", required=True)

    d = sub.add_parser("dump-mask", help="print an attention mask as an ASCII grid")
    d.add_argument("--T", type=int, required=True)
    d.add_argument("--prefix", type=int, default=0)
    d.add_argument("--window", type=int, default=6)
    d.add_argument("--kind", choices=(CAUSAL, LAMBDA), default=LAMBDA)
    return p


def _gen_data(a) -> int:
    if a.episodes < 1:
        raise UsageError("--episodes must be >= 1")
    task = dataclasses.replace(sw.default_task(a.task), demo_noise=a.demo_noise)
    ds = sw.generate_dataset(task, a.episodes, a.seed, a.out)
    print(f"wrote {len(ds)} episodes ({ds.total_steps} steps) to {a.out}")
    return EXIT_OK


def _train(a) -> int:
    cfg = load_config(a.config)
    if a.seed is not None:
        cfg.train.seed = a.seed
    ds = read_dataset(a.data)
    if a.init:
        cond, expert = pl.load_models(a.init, cfg, need_expert=a.stage != FLOW)
    elif a.stage == CHOICE:
        cond, expert = pl.make_models(cfg)
    else:
        raise UsageError(f"{a.command} needs --init with the previous stage's checkpoint")
    stage = POSTTRAIN_SYNC if getattr(a, "sync", False) else a.stage
    log = pl.run_stage(stage, ds, cfg, cond, expert)
    pl.save_models(a.out, cond, None if stage == CHOICE else expert)
    if a.log:
        log.write_csv(a.log)
    print(f"{stage}: {len(log.losses)} steps, final loss {log.losses[-1]:.6g}; wrote {a.out}")
    return EXIT_OK


def _rollout(a) -> int:
    cfg = load_config(a.config)
    sched = pl.schedule(cfg)
    validate_schedule(sched, asynchronous=a.mode == pl.ASYNC)
    task = pl.task_spec(cfg, a.task)
    cond, expert = pl.load_models(a.ckpt, cfg)
    policy = pl.model_policy(cond, expert, task, a.episodes, a.seed, cfg.train.post_mask)
    res = pl.rollout(policy, task, a.episodes, a.seed, sched, a.mode, use_prefix=not a.no_prefix,
                     max_ticks=cfg.runtime.episode_ticks)
    write_trace_csv(a.trace_out, res.trace, pl.jump_markers(res.world))
    print(f"{a.mode}: success {res.success_rate:.3f} over {a.episodes} episodes; wrote {a.trace_out}")
    return EXIT_OK


def _eval(a) -> int:
    records = []
    for path in a.traces:
        for ep in read_trace_csv(path):
            records.append(sw.EpisodeRecord(ep["actions"], ep["success"], ep["ticks"], ep["chunk_ids"],
                                            ep["jump_tick"]))
    report = sw.evaluate(records, sw.default_task(a.task))
    out = Path(a.report_out)
    data = report.as_dict()
    if out.suffix == ".csv":
        out.write_text(",".join(data) + "\n" + ",".join(repr(v) for v in data.values()) + "\n")
    else:
        out.write_text(json.dumps(data, indent=2, default=float) + "\n")
    print(json.dumps(data, default=float))
    return EXIT_OK


def _dump_mask(a) -> int:
    if a.prefix > a.T or a.T < 1:
        raise UsageError("need 1 <= T and 0 <= prefix <= T")
    m = build_mask(TokenLayout(a.prefix, a.T - a.prefix), MaskSpec(a.kind, a.window))
    print(mask_to_ascii(m))
    return EXIT_OK


_COMMANDS = {"gen-data": _gen_data, "pretrain1": _train, "pretrain2": _train, "posttrain": _train,
             "rollout": _rollout, "eval": _eval, "dump-mask": _dump_mask}


def cli_main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage().rstrip())
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (ScheduleError, ConfigError, ConfigParseError, StorageError, TrainingFault, KeyError,
            FileNotFoundError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAULT


def main() -> None:
    sys.exit(cli_main())


if __name__ == "__main__":
    main()


__all__ = ["cli_main", "main"]

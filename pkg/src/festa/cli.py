"""Command line interface: run / report / cost / serve / client.

Exit codes: 0 success, 2 config error, 3 runtime failure. Log verbosity
comes from the FESTA_LOG environment variable (debug/info/warning).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from . import costmodel
from .config import ConfigError, build_config, expand_preset
from .costmodel import CostModelInput, closed_form_cost

log = logging.getLogger("festa")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def _setup_logging():
    level = os.environ.get("FESTA_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def _add_common_config_args(p: argparse.ArgumentParser):
    p.add_argument("--config", help="INI config file")
    p.add_argument("--set", action="append", default=[], metavar="SEC.KEY=VAL",
                   help="override a config value (repeatable)")


def _flag_overrides(args) -> list[str]:
    out = list(args.set)
    if getattr(args, "strategy", None):
        out.append(f"run.strategy={args.strategy}")
    if getattr(args, "tasks", None):
        out.append(f"run.tasks={args.tasks}")
    if getattr(args, "rounds", None) is not None:
        out.append(f"run.rounds={args.rounds}")
    if getattr(args, "k_avg", None) is not None:
        out.append(f"run.avg_period={args.k_avg}")
    if getattr(args, "no_avg", False):
        out.append("run.avg_period=0")
    if getattr(args, "seeds", None):
        out.append(f"run.seeds={args.seeds}")
    if getattr(args, "transport", None):
        out.append(f"run.transport={args.transport}")
    if getattr(args, "out", None):
        out.append(f"run.outdir={args.out}")
    if getattr(args, "clients", None) is not None:
        # applies to the first (or only) task
        kind = None
        for item in out:
            if item.startswith("run.tasks="):
                kind = item.split("=", 1)[1].split(",")[0].strip()
        if kind is None:
            strategy = getattr(args, "strategy", None) or "festa-stl"
            kind = "classification"
        out.append(f"task.{kind}.clients={args.clients}")
        if args.clients != 6:
            out.append(f"task.{kind}.partition="
                       f"{'noniid' if args.clients == 1 else 'iid'}")
    return out


def cmd_run(args) -> int:
    from . import experiment

    configs = expand_preset(args.preset, args.config, _flag_overrides(args))
    for cfg in configs:
        label = cfg.label or cfg.strategy
        log.info("running %s (%d seeds, %d rounds)", label, len(cfg.seeds),
                 cfg.rounds)
        records = experiment.run_config(cfg)
        for r in records:
            metrics = "  ".join(
                f"{task}.{k}={v:.4f}" for task, m in sorted(r.metrics.items())
                for k, v in sorted(m.items()))
            print(f"{label} seed={r.seed} {metrics} ({r.wall_time:.1f}s)")
    outdir = configs[0].outdir
    print(f"records: {os.path.join(outdir, 'records.jsonl')}")
    return EXIT_OK


def cmd_report(args) -> int:
    from . import experiment

    path = args.results
    if os.path.isdir(path):
        path = os.path.join(path, "records.jsonl")
    if not os.path.exists(path):
        print(f"error: no records at {path}", file=sys.stderr)
        return EXIT_CONFIG
    records = experiment.read_records(path)
    if not records:
        print("error: no records found (empty or corrupt file)", file=sys.stderr)
        return EXIT_CONFIG
    rows = experiment.summarize(records)
    print(f"{'strategy':<12} {'label':<20} {'seeds':>5}  metric: mean ± std")
    for row in rows:
        first = True
        for key, (mean, std) in row["metrics"].items():
            head = (f"{row['strategy']:<12} {row['label']:<20} {row['seeds']:>5}"
                    if first else " " * 39)
            print(f"{head}  {key}: {mean:.4f} ± {std:.4f}")
            first = False
    if args.csv:
        import csv as _csv

        with open(args.csv, "w", newline="") as f:
            w = _csv.writer(f)
            w.writerow(["config_hash", "label", "strategy", "seeds", "metric",
                        "mean", "std"])
            for row in rows:
                for key, (mean, std) in row["metrics"].items():
                    w.writerow([row["config_hash"], row["label"], row["strategy"],
                                row["seeds"], key, f"{mean:.6f}", f"{std:.6f}"])
        print(f"csv: {args.csv}")
    _print_cost_section(records)
    return EXIT_OK


def _print_cost_section(records) -> None:
    seen = set()
    lines = []
    for r in records:
        for task, model in r.cost.get("model", {}).items():
            key = (r.strategy, task)
            if key in seen:
                continue
            seen.add(key)
            lines.append(f"  {r.strategy:<12} {task:<15} "
                         f"total={model['total']:.0f} elements "
                         f"(feature+gradient {model['feature_gradient']:.0f}, "
                         f"parameter {model['parameter']:.0f})")
    if lines:
        print("closed-form cost per client per averaging period:")
        print("\n".join(lines))


def cmd_cost(args) -> int:
    if args.fullscale:
        print(f"{'task':<15} {'strategy':<10} {'total':>10} {'feat+grad':>10} "
              f"{'params':>10}   (millions of elements per client "
              f"per {costmodel.FULL_SCALE_INPUTS['classification'].avg_period} rounds)")
        for task, inp in costmodel.FULL_SCALE_INPUTS.items():
            for strategy in ("fl", "sl", "festa"):
                b = closed_form_cost(strategy, inp)
                print(f"{task:<15} {strategy:<10} {b.total:>10.3f} "
                      f"{b.feature_gradient:>10.3f} {b.parameter:>10.3f}")
        return EXIT_OK
    required = ("ph", "pb", "pt", "feat", "grad")
    missing = [name for name in required if getattr(args, name) is None]
    if missing:
        print(f"error: missing --{' --'.join(missing)} (or use --fullscale)",
              file=sys.stderr)
        return EXIT_CONFIG
    inp = CostModelInput(args.ph, args.pb, args.pt, args.feat, args.grad, args.k)
    b = closed_form_cost(args.strategy, inp)
    print(f"strategy={args.strategy} k={args.k}")
    print(f"feature+gradient: {b.feature_gradient:.6f}")
    print(f"parameter:        {b.parameter:.6f}")
    print(f"total:            {b.total:.6f}")
    return EXIT_OK


def cmd_serve(args) -> int:
    from . import experiment

    cfg = build_config(args.config, _flag_overrides(args))
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    record = experiment.serve_forever(cfg, seed, args.host, args.port,
                                      outdir=cfg.outdir)
    for task, m in sorted(record.metrics.items()):
        for k, v in sorted(m.items()):
            print(f"{task}.{k}={v:.4f}")
    return EXIT_OK


def cmd_client(args) -> int:
    from . import experiment

    cfg = build_config(args.config, _flag_overrides(args))
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    host, _, port = args.connect.partition(":")
    if not port.isdigit():
        print(f"error: --connect expects host:port, got {args.connect!r}",
              file=sys.stderr)
        return EXIT_CONFIG
    experiment.client_forever(cfg, seed, args.client_id, host, int(port))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="festa",
        description="Desk-scale federated split multi-task training engine")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute an experiment (all seeds)")
    _add_common_config_args(p_run)
    p_run.add_argument("--preset", default="desk",
                       choices=["desk", "fullscale", "avg-period-ablation",
                                "bodycap-ablation", "scheme-ablation"])
    p_run.add_argument("--strategy")
    p_run.add_argument("--tasks", help="comma-separated task kinds")
    p_run.add_argument("--clients", type=int, help="client count for the first task")
    p_run.add_argument("--rounds", type=int)
    p_run.add_argument("--k-avg", type=int, dest="k_avg",
                       help="averaging period in rounds")
    p_run.add_argument("--no-avg", action="store_true",
                       help="disable federated averaging")
    p_run.add_argument("--seeds", help="comma-separated seed list")
    p_run.add_argument("--transport", choices=["inproc", "tcp"])
    p_run.add_argument("--out", help="output directory")
    p_run.set_defaults(func=cmd_run)

    p_rep = sub.add_parser("report", help="aggregate records into tables")
    p_rep.add_argument("results", help="records.jsonl or its directory")
    p_rep.add_argument("--csv", help="also write the summary as CSV")
    p_rep.set_defaults(func=cmd_report)

    p_cost = sub.add_parser("cost", help="closed-form communication cost")
    p_cost.add_argument("--fullscale", action="store_true",
                        help="print the full-scale inventory table")
    p_cost.add_argument("--strategy", default="festa")
    p_cost.add_argument("--ph", type=float, help="head parameters")
    p_cost.add_argument("--pb", type=float, help="body parameters")
    p_cost.add_argument("--pt", type=float, help="tail parameters")
    p_cost.add_argument("--feat", type=float, help="feature elements/round one-way")
    p_cost.add_argument("--grad", type=float, help="gradient elements/round one-way")
    p_cost.add_argument("-k", type=int, default=100, help="averaging period")
    p_cost.set_defaults(func=cmd_cost)

    p_srv = sub.add_parser("serve", help="run the server side over TCP")
    _add_common_config_args(p_srv)
    p_srv.add_argument("--host", default="127.0.0.1")
    p_srv.add_argument("--port", type=int, default=0)
    p_srv.add_argument("--seed", type=int)
    p_srv.set_defaults(func=cmd_serve)

    p_cli = sub.add_parser("client", help="run one client over TCP")
    _add_common_config_args(p_cli)
    p_cli.add_argument("--client-id", type=int, required=True)
    p_cli.add_argument("--connect", required=True, metavar="HOST:PORT")
    p_cli.add_argument("--seed", type=int)
    p_cli.set_defaults(func=cmd_client)
    return parser


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except KeyboardInterrupt:
        return EXIT_RUNTIME
    except Exception as e:
        log.exception("run failed")
        print(f"runtime failure: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

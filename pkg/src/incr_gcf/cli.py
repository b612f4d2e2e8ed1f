"""``incr-gcf`` command line.

Exit codes: 0 success, 1 I/O, 2 validation or configuration, 3 empty result.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import LAMBDA1_GRID, ExperimentConfig, TrainConfig, load_config
from .data import chronological_split, filter_dataset, interval_stats, parse_interactions, time_window
from .errors import EmptyResultError, IncrGCFError, ValidationError
from .evaluation import recall_at_k
from .graph import build_graph
from .model import forward, load_snapshot, save_snapshot
from .report import FORMATS, bundle, render, unbundle, write_outputs
from .storage import (
    INGEST_MANIFEST,
    load_dataset,
    load_split,
    model_path,
    read_json,
    save_dataset,
    save_split,
    write_json,
)
from .trainer import TrainedInterval, eval_split, run_grid, train_base, train_incremental

logger = logging.getLogger("incr_gcf")

REPORT_FILE = "report.json"

_DEFAULTS_HELP = ", ".join(f"{k}={v}" for k, v in TrainConfig().as_dict().items())


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else ExperimentConfig()
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "k", None) is not None:
        overrides["k"] = args.k
    if getattr(args, "lambda1", None) is not None:
        overrides["lambda1"] = args.lambda1
        cfg.lambda1_grid = [args.lambda1]
    if overrides:
        cfg.train = cfg.train.replace(**overrides)
    if getattr(args, "workdir", None):
        cfg.workdir = args.workdir
    return cfg


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def cmd_ingest(args) -> int:
    cfg = _config(args)
    source = args.input or cfg.dataset
    if not source:
        raise ValidationError("no input file given (positional argument or `dataset` in the config)")
    min_count = cfg.min_count if args.min_count is None else args.min_count
    parsed = parse_interactions(source)
    rows = time_window(parsed.interactions, args.start, args.end)
    if not rows:
        raise EmptyResultError("no interactions inside the requested time window")
    ds = filter_dataset(rows, min_count)
    manifest = save_dataset(ds, cfg.workdir, parsed, source, min_count, window=(args.start, args.end))
    _emit(manifest)
    return 0


def cmd_split(args) -> int:
    cfg = _config(args)
    bf = cfg.base_fraction if args.base_fraction is None else args.base_fraction
    n_inc = cfg.n_incremental if args.n_incremental is None else args.n_incremental
    ds = load_dataset(cfg.workdir)
    ingest = read_json(Path(cfg.workdir) / INGEST_MANIFEST)
    split = chronological_split(ds, bf, n_inc)
    manifest = save_split(split, cfg.workdir, bf, ingest.get("manifest_hash", ""))
    print(json.dumps({"sizes": manifest["sizes"], "manifest_hash": manifest["manifest_hash"]}))
    if args.stats:
        print(interval_stats(split).render())
    return 0


def cmd_stats(args) -> int:
    cfg = _config(args)
    split, _ = load_split(cfg.workdir)
    report = interval_stats(split)
    if args.format == "json":
        _emit(report.as_dicts())
    elif args.format == "csv":
        rows = report.as_dicts()
        print(",".join(rows[0]))
        for r in rows:
            print(",".join("" if v is None else str(v) for v in r.values()))
    else:
        print(report.render())
    return 0


def _dump_per_user(path, final, eval_set, k) -> None:
    _, per_user = recall_at_k(final, eval_set, k, per_user=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("user_idx,recall\n")
        for u, r in zip(eval_set.users.tolist(), per_user.tolist()):
            fh.write(f"{u},{r!r}\n")


def _finish_interval(cfg, split, out: TrainedInterval, test, args) -> int:
    tc = cfg.train
    path = model_path(cfg.workdir, out.t)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_snapshot(out.model, path)
    final = forward(out.model, out.graph)
    test_recall = recall_at_k(final, test, tc.k)
    if args.per_user_csv:
        _dump_per_user(args.per_user_csv, final, test, tc.k)
    _emit(
        {
            "interval": out.t,
            "lambda1": tc.lambda1 if out.t > 0 else 0.0,
            "k": tc.k,
            "val_recall": out.best_recall,
            "test_recall": test_recall,
            "best_epoch": out.best_epoch,
            "epochs_run": out.epochs_run,
            "seconds_to_best": out.seconds_to_best,
            "losses": out.losses,
            "snapshot": str(path),
        }
    )
    return 0


def _require_next(split, t):
    if t + 1 >= len(split):
        raise ValidationError(f"interval {t} has no following interval to evaluate on")


def cmd_train_base(args) -> int:
    cfg = _config(args)
    split, _ = load_split(cfg.workdir)
    _require_next(split, 0)
    val, test = eval_split(split, 0, cfg.train.seed)
    out = train_base(
        cfg.train,
        split.intervals[0],
        val,
        split.n_users_cumulative[0],
        split.n_items_cumulative[0],
        fingerprint=split.fingerprint(),
    )
    return _finish_interval(cfg, split, out, test, args)


def cmd_train_incr(args) -> int:
    cfg = _config(args)
    split, _ = load_split(cfg.workdir)
    t = args.interval
    if t < 1 or t >= len(split):
        raise ValidationError(f"--interval must be in 1..{len(split) - 1}")
    _require_next(split, t)
    prev_model = load_snapshot(model_path(cfg.workdir, t - 1), split.fingerprint(), cfg.train.seed)
    nu, ni = split.n_users_cumulative[t - 1], split.n_items_cumulative[t - 1]
    prev_graph = build_graph(split.scope(t - 1, cfg.train.cumulative_graph), nu, ni)
    prev = TrainedInterval(t - 1, prev_model, prev_graph, float("nan"), 0, 0, 0.0, 0.0)
    val, test = eval_split(split, t, cfg.train.seed)
    out = train_incremental(cfg.train, prev, split, t, val)
    return _finish_interval(cfg, split, out, test, args)


def cmd_experiment(args) -> int:
    cfg = _config(args)
    split, manifest = load_split(cfg.workdir)
    workdir = Path(cfg.workdir)
    reports = run_grid(cfg.train, split, cfg.lambda1_grid, workdir / "experiment", manifest["manifest_hash"])
    # workdir is left out so reruns elsewhere produce the same document
    echo = {k: v for k, v in cfg.as_dict().items() if k != "workdir"}
    for rep in reports:
        rep.config = {**echo, **rep.config}
    doc = bundle(reports, manifest["manifest_hash"])
    out_path = Path(args.output) if args.output else workdir / REPORT_FILE
    out_path.parent.mkdir(parents=True, exist_ok=True)
    write_json(out_path, doc)
    if args.per_user_csv:
        _dump_experiment_per_user(cfg, split, reports, workdir / "experiment", Path(args.per_user_csv))
    if not args.no_figures:
        write_outputs(reports, out_path.parent / (out_path.stem + "_files"))
    sys.stdout.write(render(reports, args.format, doc))
    return 0


def _dump_experiment_per_user(cfg, split, reports, exp_dir, out_dir) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    fp = split.fingerprint()
    for rep in reports:
        for row in rep.rows:
            t = row.t
            model = load_snapshot(exp_dir / f"lambda1_{rep.lambda1:g}" / f"mod_t{t}.snap", fp)
            graph = build_graph(
                split.scope(t, cfg.train.cumulative_graph),
                split.n_users_cumulative[t],
                split.n_items_cumulative[t],
            )
            _, test = eval_split(split, t, cfg.train.seed)
            _dump_per_user(out_dir / f"lambda1_{rep.lambda1:g}_t{t}.csv", forward(model, graph), test, cfg.train.k)


def cmd_report(args) -> int:
    doc = read_json(args.report)
    reports = unbundle(doc)
    if args.out:
        write_outputs(reports, args.out)
    sys.stdout.write(render(reports, args.format, doc))
    return 0


def cmd_synth(args) -> int:
    from .synthetic import drift_interactions, write_interactions

    periods = tuple(int(x) for x in args.per_period.split(","))
    rows = drift_interactions(
        args.users, args.items, args.groups, periods, args.drift, args.noise, args.seed if args.seed is not None else 0
    )
    write_interactions(rows, args.output)
    print(json.dumps({"output": args.output, "n_interactions": len(rows)}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML config file; flags override its values")
    common.add_argument("--workdir", help="working directory (default: config `workdir`, else ./work)")
    common.add_argument("--seed", type=int, help="random seed")
    common.add_argument("--k", type=int, help="cutoff for Recall@k")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(
        prog="incr-gcf",
        description="Incremental graph collaborative filtering with score distillation.",
        epilog=f"training defaults: {_DEFAULTS_HELP}; ablation grid: {list(LAMBDA1_GRID)}",
    )
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("ingest", parents=[common], help="parse, filter and index an interaction log")
    s.add_argument("input", nargs="?", help="interaction file (user, item, timestamp per line)")
    s.add_argument("--min-count", type=int, help="k-core threshold for users and items (default 10)")
    s.add_argument("--start", type=int, help="drop interactions before this timestamp (applied before filtering)")
    s.add_argument("--end", type=int, help="drop interactions at or after this timestamp")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("split", parents=[common], help="chronological base/incremental split")
    s.add_argument("--base-fraction", type=float, help="share of interactions in the base interval (default 0.6)")
    s.add_argument("--n-incremental", type=int, help="number of incremental intervals (default 4)")
    s.add_argument("--stats", action="store_true", help="print per-interval statistics")
    s.set_defaults(func=cmd_split)

    s = sub.add_parser("stats", parents=[common], help="per-interval statistics of the persisted split")
    s.add_argument("--format", choices=FORMATS, default="table")
    s.set_defaults(func=cmd_stats)

    for name, func, help_ in (
        ("train-base", cmd_train_base, "train the interval-0 model"),
        ("train-incr", cmd_train_incr, "train interval t from the saved interval t-1 model"),
    ):
        s = sub.add_parser(name, parents=[common], help=help_)
        s.add_argument("--lambda1", type=float, help="distillation weight (0 = fine-tune)")
        s.add_argument("--per-user-csv", help="write per-user test recall to this CSV")
        if name == "train-incr":
            s.add_argument("--interval", "-t", type=int, required=True, help="interval index t >= 1")
        s.set_defaults(func=func)

    s = sub.add_parser("experiment", parents=[common], help="full protocol over the lambda1 grid")
    s.add_argument("--lambda1", type=float, help="run a single lambda1 (plus fine-tune)")
    s.add_argument("--format", choices=FORMATS, default="table", help="stdout rendering")
    s.add_argument("--output", help="report JSON path (default: WORKDIR/report.json)")
    s.add_argument("--no-figures", action="store_true", help="skip table/csv/figure files")
    s.add_argument("--per-user-csv", metavar="DIR", help="write per-user test recall CSVs into DIR")
    s.set_defaults(func=cmd_experiment)

    s = sub.add_parser("synth", help="write a synthetic log with planted, drifting block preferences")
    s.add_argument("output", help="destination file")
    s.add_argument("--users", type=int, default=200)
    s.add_argument("--items", type=int, default=100)
    s.add_argument("--groups", type=int, default=5)
    s.add_argument("--per-period", default="24,16", help="interactions per user in each period, comma separated")
    s.add_argument("--drift", type=float, default=1.0, help="fraction of users whose preferred block shifts")
    s.add_argument("--noise", type=float, default=0.1)
    s.add_argument("--seed", type=int)
    s.add_argument("-v", "--verbose", action="store_true")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("report", help="render a saved report")
    s.add_argument("report", help="report JSON written by `experiment`")
    s.add_argument("--format", choices=FORMATS, default="table")
    s.add_argument("--out", help="also write report.txt, report.csv and figures into this directory")
    s.add_argument("-v", "--verbose", action="store_true")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except IncrGCFError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

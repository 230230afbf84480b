"""Command-line front door.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure,
3 conformance discrepancy (oracle-check).
"""

import argparse
import json
import os
import sys

from .config import ConfigError, parse_config


def _parser():
    p = argparse.ArgumentParser(prog="certprune", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in (("train", "train the dense network for each seed"),
                        ("prune-loop", "full pipeline: train, prune iteratively, verify, report"),
                        ("verify", "verify a checkpoint on the test subset"),
                        ("report", "aggregate a run directory into tables, plots and tickets"),
                        ("oracle-check", "cross-check the verifier against input bisection")):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", help="JSON run configuration")
        s.add_argument("--out", help="output root (run directory for report)")
        s.add_argument("--seed", type=int, action="append", help="override the seed list (repeatable)")
        s.add_argument("--preset", choices=("desk", "paper"))
        if name == "verify":
            s.add_argument("--checkpoint", required=True, help="checkpoint JSON to verify")
        if name == "report":
            s.add_argument("--delta", type=float, default=0.0, help="ticket tolerance")
        if name == "oracle-check":
            s.add_argument("--nets", type=int)
            s.add_argument("--queries", type=int)
    return p


def _log(msg):
    print(msg, file=sys.stderr, flush=True)


def _load(args, required=True):
    if not args.config:
        if required:
            raise ConfigError("--config is required")
        return None
    return parse_config(args.config, preset=args.preset, seeds=args.seed)


def cmd_train(args):
    from .experiment import build_arch, load_data, run_dir_for, write_csv
    from .checkpoint import save_checkpoint
    from .network import build_network
    from .training import train, METRIC_COLUMNS

    cfg = _load(args)
    split = load_data(cfg)
    variant = cfg.pruning.variants[0]
    base = os.path.join(run_dir_for(cfg, args.out), "train")
    for seed in cfg.seeds:
        out = os.path.join(base, f"seed{seed}")
        os.makedirs(out, exist_ok=True)
        net = build_network(build_arch(cfg, split), seed=seed, prune_linear=cfg.pruning.prune_linear)
        hist = train(net, split.train, cfg.train_config(variant, seed))
        write_csv(os.path.join(out, "metrics.csv"), METRIC_COLUMNS, [vars(m) for m in hist])
        save_checkpoint(net, {"seed": seed, "epoch": len(hist), "config_digest": cfg.digest()},
                        os.path.join(out, "dense.json"))
        _log(f"seed {seed}: std_acc {hist[-1].std_acc:.3f} -> {out}")
    print(base)
    return 0


def cmd_prune_loop(args):
    from .experiment import run_experiment

    cfg = _load(args)
    print(run_experiment(cfg, args.out, log=_log))
    return 0


def cmd_verify(args):
    from .checkpoint import load_checkpoint
    from .experiment import VERDICT_COLUMNS, load_data, measure, write_csv

    cfg = _load(args)
    ck = load_checkpoint(args.checkpoint)
    split = load_data(cfg)
    metrics, verdicts, t = measure(ck.net, split.test, cfg, cfg.seeds[0])
    out = args.out or os.path.dirname(os.path.abspath(args.checkpoint))
    os.makedirs(out, exist_ok=True)
    stem = os.path.splitext(os.path.basename(args.checkpoint))[0]
    write_csv(os.path.join(out, f"{stem}.verdicts.csv"), VERDICT_COLUMNS,
              [dict(round=ck.meta.get("prune_round", 0), **v) for v in verdicts])
    metrics["mean_verify_time"] = t
    print(json.dumps(metrics, sort_keys=True))
    return 0


def cmd_report(args):
    from .experiment import report, run_dir_for

    run_dir = args.out
    if run_dir is None:
        cfg = _load(args)
        run_dir = run_dir_for(cfg)
    elif args.config:
        cfg = _load(args)
        if not os.path.exists(os.path.join(run_dir, "manifest.json")):
            run_dir = run_dir_for(cfg, run_dir)
    res = report(run_dir, args.delta)
    for row in res["summary"]:
        _log(f"{row['variant']:>12} {row['row']:>5} round {row['round']:>2} remain {row['remain_ratio']:.4f} "
             f"std {row['std']:.3f} ver {row['ver']:.3f}")
    print(res["dir"])
    return 0


def cmd_oracle_check(args):
    from .experiment import oracle_check, run_dir_for

    cfg = _load(args)
    rep = oracle_check(cfg, log=_log, n_nets=args.nets, n_queries=args.queries)
    out = os.path.join(run_dir_for(cfg, args.out), "oracle")
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "report.json"), "w") as fh:
        json.dump(rep, fh, sort_keys=True, indent=1)
    print(json.dumps({"queries": rep["queries"], "matrix": rep["matrix"],
                      "discrepancies": len(rep["discrepancies"])}, sort_keys=True))
    return 3 if rep["discrepancies"] else 0


COMMANDS = {"train": cmd_train, "prune-loop": cmd_prune_loop, "verify": cmd_verify,
            "report": cmd_report, "oracle-check": cmd_oracle_check}


def main(argv=None):
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        _log(f"config error: {exc}")
        return 1
    except Exception as exc:  # runtime failure, reported with its stage when known
        stage = getattr(exc, "stage", None)
        _log(f"error{f' in {stage}' if stage else ''}: {exc}")
        return 2


if __name__ == "__main__":
    sys.exit(main())

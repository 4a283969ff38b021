"""Command line entry point: ``celu train``, ``celu experiment``, ``celu probe``."""
from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from .diagnostics import DiagnosticsConfig, collect_snapshots, theoretical_delta, variance_probe
from .errors import CeluError
from .experiment import load_data, make_config, parse_experiment, parse_xi, run_experiment, write_metrics_csv
from .protocol import run_training


def add_training_flags(p: argparse.ArgumentParser, data_default="synth:20000,12,8"):
    p.add_argument("--algo", choices=["vanilla", "fedbcd", "celu"], default="celu")
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--local-steps", type=int, help="R, updates per cached batch incl. the exchange one")
    p.add_argument("--workset", type=int, help="W, workset table capacity")
    p.add_argument("--xi", type=parse_xi, default=argparse.SUPPRESS, help="threshold angle in degrees, or 'none'")
    p.add_argument("--lr", type=float, default=0.2)
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--max-rounds", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dz", type=int, default=16)
    p.add_argument("--eval-every", type=int, default=100)
    p.add_argument("--bandwidth", type=float, default=300e6, help="bits per second")
    p.add_argument("--latency", type=float, default=0.0, help="seconds per transmission")
    p.add_argument("--transport", choices=["inproc", "socket"], default="inproc")
    p.add_argument("--address", default="127.0.0.1:0", help="host:port for the socket transport")
    p.add_argument("--real-sleep", action="store_true", help="sleep for simulated delays (demos)")
    p.add_argument("--compute-time", type=float, default=0.0, help="simulated seconds charged per update")
    p.add_argument("--mode", choices=["deterministic", "concurrent"], default="deterministic")
    p.add_argument("--data", default=data_default, help="synth:n,dA,dB or csv:PATH:LABEL:A_COLS:B_COLS")


def settings_from_args(args) -> dict:
    settings = {
        "algorithm": args.algo,
        "batch_size": args.batch_size,
        "lr": args.lr,
        "epochs": args.epochs,
        "max_rounds": args.max_rounds,
        "seed": args.seed,
        "dz": args.dz,
        "eval_every": args.eval_every,
        "mode": args.mode,
        "compute_time_s": args.compute_time,
        "bandwidth": args.bandwidth,
        "latency": args.latency,
        "transport": args.transport,
        "address": args.address,
        "real_sleep": args.real_sleep,
    }
    if args.local_steps is not None:
        settings["local_steps"] = args.local_steps
    if args.workset is not None:
        settings["workset"] = args.workset
    if hasattr(args, "xi"):
        settings["xi"] = args.xi
    return settings


def cmd_train(args) -> int:
    config = make_config(settings_from_args(args))
    if args.diagnostics:
        config = replace(config, diagnostics=True)
    train, valid = load_data(args.data)
    records = run_training(config, train, valid)
    out = Path(args.out)
    write_metrics_csv(out / "metrics.csv", records)
    last = records[-1]
    print(f"{config.algorithm}: {last.round} rounds, {last.local_steps} local steps, "
          f"train_loss={last.train_loss:.5f} auc={last.eval_auc:.4f} "
          f"simulated_time={last.simulated_time_s:.3f}s -> {out / 'metrics.csv'}")
    return 0


def cmd_experiment(args) -> int:
    spec = parse_experiment(Path(args.config).read_text())
    out = Path(args.out) if args.out else spec.out or Path("results")
    run_experiment(spec, out, progress=None if args.quiet else print)
    print(f"summary -> {out / 'summary.csv'}")
    return 0


def cmd_probe_variance(args) -> int:
    config = make_config(settings_from_args(args))
    train, _ = load_data(args.data)
    history = collect_snapshots(config, train, args.rounds)[-config.workset:]
    rep = variance_probe(train, history, config.batch_size, config.workset, args.trials,
                         xi=config.xi if config.algorithm == "celu" else None, seed=args.seed)
    print(f"term_sampling  E|g - grad f|^2     = {rep.term_sampling:.6g}")
    print(f"term_staleness E|g~ - g|^2         = {rep.term_staleness:.6g}")
    print(f"lhs            E|g~ - grad f|^2    = {rep.lhs:.6g}")
    print(f"bound          2*sampling+2*stale  = {rep.bound:.6g}")
    print(f"per-trial inequality holds in {int(rep.trial_holds.sum())}/{rep.trial_holds.size} trials")
    return 0 if rep.trial_holds.all() else 1


def cmd_probe_delta(args) -> int:
    diag = DiagnosticsConfig(args.L, args.sigma, args.d, args.delta)
    print(f"{theoretical_delta(diag, args.batch_size, args.workset, args.rho):.6g}")
    return 0


def cmd_probe_rho(args) -> int:
    config = replace(make_config(settings_from_args(args)), diagnostics=True)
    train, valid = load_data(args.data)
    records = run_training(config, train, valid)
    print("round,rho_estimate,weights_zeroed_fraction")
    for rec in records:
        rho = "" if rec.rho_estimate is None else f"{rec.rho_estimate:.6f}"
        print(f"{rec.round},{rho},{rec.weights_zeroed_fraction:.6f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="celu", description="Two-party vertical FL with cached local updates.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run one training job and write metrics.csv")
    add_training_flags(p)
    p.add_argument("--diagnostics", action="store_true", help="record the per-step gradient cosine")
    p.add_argument("--out", default="run")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("experiment", help="run a key=value experiment file")
    p.add_argument("config")
    p.add_argument("--out")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_experiment)

    probe = sub.add_parser("probe", help="diagnostic probes").add_subparsers(dest="probe", required=True)
    p = probe.add_parser("variance", help="split the estimator error into sampling and staleness terms")
    add_training_flags(p, data_default="synth:200,12,8")
    p.set_defaults(batch_size=16, workset=4)
    p.add_argument("--rounds", type=int, default=20, help="training rounds before probing")
    p.add_argument("--trials", type=int, default=200)
    p.set_defaults(func=cmd_probe_variance)

    p = probe.add_parser("delta", help="evaluate the convergence factor")
    p.add_argument("--L", type=float, required=True)
    p.add_argument("--sigma", type=float, required=True)
    p.add_argument("--d", type=float, required=True)
    p.add_argument("--delta", type=float, required=True)
    p.add_argument("--batch-size", type=int, required=True)
    p.add_argument("--workset", type=int, required=True)
    p.add_argument("--rho", type=float, required=True)
    p.set_defaults(func=cmd_probe_delta)

    p = probe.add_parser("rho", help="train with the cosine shadow and print its estimates")
    add_training_flags(p)
    p.set_defaults(func=cmd_probe_rho)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CeluError, OSError) as exc:
        print(f"celu: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

"""Experiment orchestration: grids of training cells, rounds-to-target tables.

A config file is plain ``key = value`` lines.  Keys mirror the ``train``
flags (dashes or underscores).  Every ``cell = ...`` line holds
space-separated ``key=value`` overrides; a comma-separated value expands
into a grid.  Example::

    data = synth:20000,12,8
    lr = 0.2
    seeds = 0,1,2
    max_rounds = 10000
    eval_every = 100
    target = vanilla@10000
    cell = algo=vanilla
    cell = algo=celu local_steps=5 workset=5,1 xi=90

``target`` is ``loss:X``, ``auc:X`` or ``vanilla@N``; the last fixes, per
seed, a train-loss threshold equal to vanilla's loss at round N.
"""
from __future__ import annotations

import csv
import itertools
import math
import statistics
from dataclasses import dataclass, field, replace
from pathlib import Path

from .dataio import AlignedDataset, load_csv, synthetic_splits
from .errors import ConfigError
from .metrics import MetricsRecord
from .protocol import TrainConfig, run_training
from .transport import ChannelConfig

SUMMARY_HEADER = [
    "cell", "algorithm", "local_steps", "workset", "xi", "seeds", "reached",
    "rounds_mean", "rounds_std", "rounds_median", "reduction_pct", "rounds_per_seed",
]

ALGO_DEFAULTS = {
    "vanilla": {"local_steps": 1, "workset": 1, "xi": None},
    "fedbcd": {"local_steps": 5, "workset": 1, "xi": None},
    "celu": {"local_steps": 5, "workset": 5, "xi": 60.0},
}


def parse_xi(text):
    if text is None or str(text).lower() in ("none", "off", "-"):
        return None
    return float(text)


def _int(v):
    return int(v)


def _opt_int(v):
    return None if str(v).lower() in ("none", "") else int(v)


# config keys accepted by cells and the file header
FIELD_PARSERS = {
    "algorithm": str,
    "batch_size": _int,
    "local_steps": _int,
    "workset": _int,
    "xi": parse_xi,
    "lr": float,
    "epochs": _int,
    "seed": _int,
    "dz": _int,
    "eval_every": _int,
    "mode": str,
    "max_rounds": _opt_int,
    "diagnostics": lambda v: str(v).lower() in ("1", "true", "yes", "on"),
    "compute_time_s": float,
}
CHANNEL_PARSERS = {"bandwidth": float, "latency": float, "transport": str, "address": str}
ALIASES = {"algo": "algorithm", "r": "local_steps", "w": "workset", "compute_time": "compute_time_s"}
TRANSPORTS = {"inproc": "in_process", "in_process": "in_process", "socket": "socket"}


def canonical_key(key: str) -> str:
    key = key.strip().replace("-", "_").lower()
    return ALIASES.get(key, key)


def make_config(settings: dict) -> TrainConfig:
    """Build a TrainConfig, filling algorithm-dependent defaults."""
    algo = settings.get("algorithm", "celu")
    if algo not in ALGO_DEFAULTS:
        raise ConfigError(f"unknown algorithm {algo!r}")
    values = {**ALGO_DEFAULTS[algo], **{k: v for k, v in settings.items() if k in FIELD_PARSERS}}
    values["algorithm"] = algo
    host, _, port = settings.get("address", "127.0.0.1:0").rpartition(":")
    channel = ChannelConfig(
        host=host or "127.0.0.1",
        port=int(port or 0),
        bandwidth_bps=settings.get("bandwidth", 300e6),
        latency_s=settings.get("latency", 0.0),
        mode=TRANSPORTS.get(settings.get("transport", "inproc"), settings.get("transport")),
        real_sleep=bool(settings.get("real_sleep", False)),
    )
    return TrainConfig(channel=channel, **values).validate()


def parse_value(key: str, raw: str):
    if key in FIELD_PARSERS:
        return FIELD_PARSERS[key](raw)
    if key in CHANNEL_PARSERS:
        return CHANNEL_PARSERS[key](raw)
    raise ConfigError(f"unknown setting {key!r}")


def load_data(spec: str, seed: int = 0) -> tuple[AlignedDataset, AlignedDataset | None]:
    """``synth:n,dA,dB`` or ``csv:PATH:LABEL:a1,a2:b1,b2``; returns (train, valid or None)."""
    kind, _, rest = spec.partition(":")
    if kind == "synth":
        try:
            n, d_a, d_b = (int(v) for v in rest.split(","))
        except ValueError:
            raise ConfigError(f"bad synthetic spec {spec!r}, expected synth:n,dA,dB") from None
        return synthetic_splits(n, d_a, d_b, seed=seed)
    if kind == "csv":
        parts = rest.split(":")
        if len(parts) != 4:
            raise ConfigError("csv data needs csv:PATH:LABEL:A_COLS:B_COLS")
        path, label, a_cols, b_cols = parts
        return load_csv(path, label, a_cols.split(","), b_cols.split(",")), None
    raise ConfigError(f"unknown data source {spec!r}")


@dataclass
class Target:
    kind: str  # "loss" | "auc" | "vanilla"
    value: float = math.nan
    round: int = 0

    @classmethod
    def parse(cls, text: str) -> "Target":
        kind, sep, rest = text.partition(":")
        if kind in ("loss", "auc") and sep:
            return cls(kind, float(rest))
        kind, sep, rest = text.partition("@")
        if kind == "vanilla" and sep:
            return cls("vanilla", round=int(rest))
        raise ConfigError(f"bad target {text!r}; use loss:X, auc:X or vanilla@N")


def reached(rec: MetricsRecord, metric: str, threshold: float) -> bool:
    if metric == "auc":
        return rec.eval_auc >= threshold
    return rec.train_loss <= threshold


def rounds_to_target(records, metric: str, threshold: float) -> int | None:
    """First evaluated round meeting the target; None when never reached."""
    for rec in records:
        if reached(rec, metric, threshold):
            return rec.round
    return None


@dataclass
class ExperimentSpec:
    base: dict
    cells: list[dict]
    seeds: list[int]
    data: str
    target: Target
    out: Path | None = None
    data_seed: int = 0
    labels: list[str] = field(default_factory=list)


def expand_cell(line: str) -> list[tuple[str, dict]]:
    grids = []
    for token in line.split():
        key, sep, raw = token.partition("=")
        if not sep:
            raise ConfigError(f"cell token {token!r} is not key=value")
        key = canonical_key(key)
        grids.append([(key, raw_v) for raw_v in raw.split(",")])
    out = []
    for combo in itertools.product(*grids):
        label = " ".join(f"{k}={v}" for k, v in combo)
        out.append((label, {k: parse_value(k, v) for k, v in combo}))
    return out


def parse_experiment(text: str) -> ExperimentSpec:
    base, cells, labels = {}, [], []
    seeds, data, target, out, data_seed = [0], "synth:20000,12,8", Target("vanilla", round=10000), None, 0
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, raw = canonical_key(key), raw.strip()
        try:
            if key == "cell":
                for label, overrides in expand_cell(raw):
                    labels.append(label)
                    cells.append(overrides)
            elif key == "seeds":
                seeds = [int(s) for s in raw.split(",")]
            elif key == "data":
                data = raw
            elif key == "data_seed":
                data_seed = int(raw)
            elif key == "target":
                target = Target.parse(raw)
            elif key == "out":
                out = Path(raw)
            else:
                base[key] = parse_value(key, raw)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: {exc}") from None
    if not cells:
        raise ConfigError("experiment defines no cells")
    return ExperimentSpec(base, cells, seeds, data, target, out, data_seed, labels)


def write_metrics_csv(path: Path, records) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MetricsRecord.header())
        for rec in records:
            w.writerow(["" if v is None else repr(v) if isinstance(v, float) else v for v in rec.row()])


def median_rounds(rounds: list[int | None]) -> float:
    """Median over seeds with DNF counted as infinitely many rounds."""
    return statistics.median(math.inf if r is None else float(r) for r in rounds)


def summarize(rounds: list[int | None]) -> dict:
    """Mean and population stddev over the seeds that reached the target."""
    hit = [r for r in rounds if r is not None]
    row = {"reached": len(hit), "rounds_mean": "DNF", "rounds_std": "", "rounds_median": "DNF"}
    if hit:
        row["rounds_mean"] = statistics.fmean(hit)
        row["rounds_std"] = statistics.pstdev(hit)
    med = median_rounds(rounds)
    if math.isfinite(med):
        row["rounds_median"] = med
    return row


def _slug(label: str) -> str:
    return "".join(c if c.isalnum() or c in ".-" else "_" for c in label.replace("=", "-"))


@dataclass
class CellResult:
    label: str
    config: TrainConfig
    rounds: list  # per seed, None for DNF
    records: list  # per seed


def run_experiment(spec: ExperimentSpec, out: Path | None = None, progress=None) -> list[CellResult]:
    """Run every cell at every seed; write per-run and summary CSVs if ``out``."""
    out = out or spec.out
    # the data set is fixed; seeds vary model initialisation and batch order
    train, valid = load_data(spec.data, seed=spec.data_seed)
    thresholds: dict[int, tuple[str, float]] = {}
    baseline_rounds: list = []
    if spec.target.kind == "vanilla":
        for seed in spec.seeds:
            cfg = replace(make_config({**spec.base, "algorithm": "vanilla"}), seed=seed,
                          max_rounds=spec.target.round)
            recs = run_training(cfg, train, valid)
            if out is not None:
                write_metrics_csv(Path(out) / "runs" / f"target-vanilla_seed{seed}.csv", recs)
            at = [r for r in recs if r.round == spec.target.round]
            if not at:
                raise ConfigError(f"vanilla run has no record at round {spec.target.round}; "
                                  "check eval_every and the data size")
            thresholds[seed] = ("loss", at[0].train_loss)
            baseline_rounds.append(rounds_to_target(recs, "loss", at[0].train_loss))
            if progress:
                progress(f"target seed={seed}: train_loss <= {at[0].train_loss:.6f}")
    else:
        thresholds = {s: (spec.target.kind, spec.target.value) for s in spec.seeds}

    results = []
    for label, overrides in zip(spec.labels, spec.cells):
        cfg_cell = make_config({**spec.base, **overrides})
        rounds, all_recs = [], []
        for seed in spec.seeds:
            metric, thr = thresholds[seed]
            cfg = replace(cfg_cell, seed=seed)
            recs = run_training(cfg, train, valid, stop_when=lambda r, m=metric, t=thr: reached(r, m, t))
            rounds.append(rounds_to_target(recs, metric, thr))
            all_recs.append(recs)
            if out is not None:
                write_metrics_csv(Path(out) / "runs" / f"{_slug(label)}_seed{seed}.csv", recs)
            if progress:
                progress(f"{label} seed={seed}: rounds={rounds[-1] if rounds[-1] is not None else 'DNF'}")
        results.append(CellResult(label, cfg_cell, rounds, all_recs))

    if out is not None:
        reference = None
        if baseline_rounds and all(r is not None for r in baseline_rounds):
            reference = statistics.fmean(baseline_rounds)
        write_summary(Path(out) / "summary.csv", results, reference)
    return results


def write_summary(path: Path, results: list[CellResult], reference: float | None) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_HEADER)
        for res in results:
            s = summarize(res.rounds)
            cfg = res.config
            reduction = ""
            if reference and isinstance(s["rounds_mean"], float) and s["reached"] == len(res.rounds):
                reduction = f"{100 * (1 - s['rounds_mean'] / reference):.2f}"
            w.writerow([
                res.label, cfg.algorithm, cfg.local_steps, cfg.workset,
                "none" if cfg.xi is None else cfg.xi, len(res.rounds), s["reached"],
                _fmt(s["rounds_mean"]), _fmt(s["rounds_std"]), _fmt(s["rounds_median"]), reduction,
                ";".join("DNF" if r is None else str(r) for r in res.rounds),
            ])


def _fmt(v):
    return f"{v:.2f}" if isinstance(v, float) else v

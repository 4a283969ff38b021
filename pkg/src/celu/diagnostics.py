"""Measurement tools for the convergence quantities of cached local updates.

These are observers: nothing here mutates a model, an optimizer state or a
workset, so switching them on leaves a training trajectory bit-identical.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dataio import AlignedDataset
from .errors import ConfigError, NumericError
from .metrics import empirical_rho
from .model import flatten_grads, forward
from .protocol import (
    Session,
    TrainConfig,
    bottom_gradients,
    party_a_local_gradients,
    party_b_gradients,
    party_b_local_gradients,
)
from .transport import wire_round

MIN_TRIALS = 30


@dataclass(frozen=True)
class DiagnosticsConfig:
    """User-supplied constants for the convergence-factor calculator.

    ``d`` is the parameter dimension; any positive real is accepted so the
    logarithmic term can be switched off (2d = delta) when isolating terms.
    """

    L_lipschitz: float
    sigma: float
    d: float
    delta: float

    def __post_init__(self):
        if not (self.L_lipschitz > 0 and self.sigma > 0 and self.d > 0):
            raise ConfigError("L, sigma and d must be positive")
        if not 0.0 < self.delta < 1.0:
            raise ConfigError(f"delta must lie in (0, 1), got {self.delta}")


def theoretical_delta(diag: DiagnosticsConfig, batch_size: int, workset: int, rho: float) -> float:
    """L^2 ln(2d/delta) / B * (1 + 1/W) + sigma^2 (2 - rho)."""
    if not 0.0 < rho <= 1.0:
        raise ConfigError(f"rho must lie in (0, 1], got {rho}")
    if batch_size < 1 or workset < 1:
        raise ConfigError("batch size and workset capacity must be >= 1")
    sampling = diag.L_lipschitz ** 2 * math.log(2 * diag.d / diag.delta) / batch_size * (1 + 1 / workset)
    return sampling + diag.sigma ** 2 * (2 - rho)


# ---------------------------------------------------------------------------
# per-step cosine between estimated and true gradients


class RhoShadow:
    """Observer computing cos(estimated, true) gradient before each local step.

    The true gradient needs the other party's current state, so it is formed
    outside both parties from the session's dataset.  Values pass through the
    same float32 rounding the wire would apply, but no frame is sent and no
    byte or clock charge is made.
    """

    def __call__(self, session: Session, party: str, entry):
        a, b = session.party_a, session.party_b
        data = session.dataset
        idx = entry.indices
        x_a, x_b, y = data.x_a[idx], data.x_b[idx], data.y[idx]
        z_now, _ = forward(a.bottom, x_a)
        z_seen = wire_round(z_now)
        if party == "A":
            est, _ = party_a_local_gradients(a.bottom, x_a, entry.z_stale, entry.dz_stale, a.xi)
            res = party_b_gradients(b.top, b.bottom, z_seen, x_b, y)
            true, _ = bottom_gradients(a.bottom, x_a, wire_round(res.dz_a))
        else:
            r_est = party_b_local_gradients(b.top, b.bottom, entry.z_stale, entry.dz_stale, x_b, y, b.xi)
            r_true = party_b_gradients(b.top, b.bottom, z_seen, x_b, y)
            est = r_est.top_grads + r_est.bottom_grads
            true = r_true.top_grads + r_true.bottom_grads
        session.note_cosine(empirical_rho(flatten_grads(est), flatten_grads(true)))


# ---------------------------------------------------------------------------
# variance decomposition probe


Snapshot = tuple  # (bottom_a, bottom_b, top)


def full_gradient(snapshot: Snapshot, data: AlignedDataset, idx) -> np.ndarray:
    """Exact mini-batch gradient of every parameter, flattened A | B | top."""
    bottom_a, bottom_b, top = snapshot
    x_a = data.x_a[idx]
    z_a, _ = forward(bottom_a, x_a)
    res = party_b_gradients(top, bottom_b, z_a, data.x_b[idx], data.y[idx])
    g_a, _ = bottom_gradients(bottom_a, x_a, res.dz_a)
    return flatten_grads(g_a + res.bottom_grads + res.top_grads)


def estimated_gradient(current: Snapshot, stale: Snapshot, data: AlignedDataset, idx, xi) -> np.ndarray:
    """Local-update gradient at ``current`` from statistics cached at ``stale``."""
    x_a, x_b, y = data.x_a[idx], data.x_b[idx], data.y[idx]
    z_s, _ = forward(stale[0], x_a)
    dz_s = party_b_gradients(stale[2], stale[1], z_s, x_b, y).dz_a
    g_a, _ = party_a_local_gradients(current[0], x_a, z_s, dz_s, xi)
    res = party_b_local_gradients(current[2], current[1], z_s, dz_s, x_b, y, xi)
    return flatten_grads(g_a + res.bottom_grads + res.top_grads)


@dataclass
class VarianceReport:
    term_sampling: float  # E||g - grad f||^2
    term_staleness: float  # E||g_tilde - g||^2
    lhs: float  # E||g_tilde - grad f||^2
    trial_holds: np.ndarray  # per-trial ||g~-f||^2 <= 2||g-f||^2 + 2||g~-g||^2

    @property
    def bound(self) -> float:
        return 2 * self.term_sampling + 2 * self.term_staleness


def _within(lhs, bound):
    return lhs <= bound + 1e-12 * max(lhs, 1.0)


def variance_probe(dataset: AlignedDataset, snapshots, batch_size: int, workset: int, trials: int,
                   xi: float | None = None, seed: int = 0) -> VarianceReport:
    """Monte-Carlo estimate of the two-term split of the estimator's error.

    ``snapshots`` lists (bottom_a, bottom_b, top) states from consecutive
    rounds, oldest first; the last one is the current model.  Each trial
    fills a workset with W batches inserted over the last W rounds, draws
    one of them, and compares the gradient estimated from its cached
    statistics with the true mini-batch and full-batch gradients.
    """
    if trials < MIN_TRIALS:
        raise ConfigError(f"need at least {MIN_TRIALS} trials, got {trials}")
    if not 1 <= batch_size <= dataset.n:
        raise ConfigError(f"batch size {batch_size} does not fit {dataset.n} rows")
    if workset < 1:
        raise ConfigError("workset capacity must be >= 1")
    snapshots = list(snapshots)
    if not snapshots:
        raise ConfigError("need at least one model snapshot")
    current = snapshots[-1]
    rng = np.random.default_rng(seed)
    full = full_gradient(current, dataset, np.arange(dataset.n))
    samp, stal, lhs, holds = [], [], [], []
    for _ in range(trials):
        ages = np.arange(workset)
        batches = [np.sort(rng.choice(dataset.n, batch_size, replace=False)) for _ in ages]
        pick = int(rng.integers(workset))
        idx, age = batches[pick], int(ages[pick])
        stale = snapshots[max(len(snapshots) - 1 - age, 0)]
        g = full_gradient(current, dataset, idx)
        g_t = estimated_gradient(current, stale, dataset, idx, xi) if stale is not current else g
        s1 = float(np.sum((g - full) ** 2))
        s2 = float(np.sum((g_t - g) ** 2))
        s0 = float(np.sum((g_t - full) ** 2))
        samp.append(s1)
        stal.append(s2)
        lhs.append(s0)
        holds.append(_within(s0, 2 * s1 + 2 * s2))
    report = VarianceReport(float(np.mean(samp)), float(np.mean(stal)), float(np.mean(lhs)), np.array(holds))
    if not _within(report.lhs, report.bound):
        raise NumericError(f"decomposition bound violated: {report.lhs} > {report.bound}")
    return report


def collect_snapshots(config: TrainConfig, dataset: AlignedDataset, rounds: int) -> list[Snapshot]:
    """Model states after each of the first ``rounds`` rounds of a training run."""
    history: list[Snapshot] = []

    def grab(session):
        history.append((session.party_a.bottom.copy(), session.party_b.bottom.copy(),
                        session.party_b.top.copy()))

    cfg = TrainConfig(**{**config.__dict__, "max_rounds": rounds, "mode": "deterministic",
                         "eval_every": max(rounds, 1)})
    Session(cfg, dataset, on_round=grab).run()
    return history

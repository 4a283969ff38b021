"""Synthetic data, CSV ingestion, vertical splits and aligned batch plans."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, ParseError


@dataclass(frozen=True)
class AlignedDataset:
    """Row k of ``x_a`` and ``x_b`` describe the same instance."""

    x_a: np.ndarray
    x_b: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        if not (self.x_a.shape[0] == self.x_b.shape[0] == self.y.shape[0]):
            raise DataError(
                f"misaligned parties: {self.x_a.shape[0]}, {self.x_b.shape[0]} rows, {self.y.shape[0]} labels"
            )

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def d_a(self) -> int:
        return self.x_a.shape[1]

    @property
    def d_b(self) -> int:
        return self.x_b.shape[1]

    def take(self, idx) -> AlignedDataset:
        idx = np.asarray(idx)
        return AlignedDataset(self.x_a[idx], self.x_b[idx], self.y[idx])


def generate_synthetic(n: int, d_a: int, d_b: int, seed: int = 0) -> AlignedDataset:
    """Gaussian features with a nonlinear label rule spanning both parties.

    y = 1 iff <v, x> + 0.5 sin(<u, x>) + noise > 0, where x = [x_a; x_b],
    v and u are drawn once from the seed and noise has sd 0.1.
    """
    if n < 1 or d_a < 1 or d_b < 1:
        raise ConfigError(f"need n, d_a, d_b >= 1, got {n}, {d_a}, {d_b}")
    rng = np.random.default_rng(seed)
    d = d_a + d_b
    v = rng.standard_normal(d) / np.sqrt(d)
    u = 2.0 * rng.standard_normal(d) / np.sqrt(d)
    x = rng.standard_normal((n, d))
    noise = 0.1 * rng.standard_normal(n)
    score = x @ v + 0.5 * np.sin(x @ u) + noise
    y = (score > 0).astype(np.float64)
    return AlignedDataset(np.ascontiguousarray(x[:, :d_a]), np.ascontiguousarray(x[:, d_a:]), y)


def synthetic_splits(n: int, d_a: int, d_b: int, seed: int = 0, valid_fraction: float = 0.2):
    """Training set of exactly ``n`` rows plus a held-out set from the same rule."""
    n_valid = max(2, int(round(n * valid_fraction)))
    full = generate_synthetic(n + n_valid, d_a, d_b, seed)
    return full.take(np.arange(n)), full.take(np.arange(n, n + n_valid))


def load_csv(path, label_col: str, party_a_cols, party_b_cols) -> AlignedDataset:
    """Read a headered, comma-separated numeric file (no quoting)."""
    party_a_cols = list(party_a_cols)
    party_b_cols = list(party_b_cols)
    wanted = party_a_cols + party_b_cols + [label_col]
    if len(set(wanted)) != len(wanted):
        raise ConfigError("label and party column sets must be disjoint")
    with open(Path(path), newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        pos = {}
        for name in wanted:
            if name not in header:
                raise ParseError(f"{path}: missing column {name!r}")
            pos[name] = header.index(name)
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"{path}: row {lineno} has {len(row)} cells, expected {len(header)}")
            values = []
            for name in wanted:
                cell = row[pos[name]].strip()
                try:
                    values.append(float(cell))
                except ValueError:
                    raise ParseError(f"{path}: non-numeric cell {cell!r} at row {lineno}, column {name!r}") from None
            rows.append(values)
    data = np.array(rows, dtype=np.float64).reshape(len(rows), len(wanted))
    y = data[:, -1]
    if not np.all((y == 0.0) | (y == 1.0)):
        bad = int(np.flatnonzero((y != 0.0) & (y != 1.0))[0]) + 2
        raise DataError(f"{path}: label at row {bad} is not 0/1")
    na = len(party_a_cols)
    return AlignedDataset(
        np.ascontiguousarray(data[:, :na]),
        np.ascontiguousarray(data[:, na:-1]),
        np.ascontiguousarray(y),
    )


@dataclass
class BatchPlan:
    """Shared-seed mini-batch schedule; equal plans give identical batches.

    Each epoch draws a fresh permutation seeded by (seed, epoch); the trailing
    ``n % batch_size`` instances of an epoch are dropped.
    """

    seed: int
    batch_size: int
    n: int
    epochs: int = 1
    drop_last: bool = field(default=True, init=False)
    _perms: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch size must be >= 1")
        if self.batch_size > self.n:
            raise ConfigError(f"batch size {self.batch_size} exceeds dataset size {self.n}")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")

    @property
    def steps_per_epoch(self) -> int:
        return self.n // self.batch_size

    @property
    def total_steps(self) -> int:
        return self.steps_per_epoch * self.epochs

    def permutation(self, epoch: int) -> np.ndarray:
        perm = self._perms.get(epoch)
        if perm is None:
            perm = np.random.default_rng([self.seed, epoch]).permutation(self.n)
            # one cached epoch is enough for sequential consumption
            self._perms = {epoch: perm}
        return perm


def batch_indices(plan: BatchPlan, step: int) -> np.ndarray:
    if not 0 <= step < plan.total_steps:
        raise IndexError(f"step {step} outside [0, {plan.total_steps})")
    epoch, s = divmod(step, plan.steps_per_epoch)
    perm = plan.permutation(epoch)
    return perm[s * plan.batch_size:(s + 1) * plan.batch_size]

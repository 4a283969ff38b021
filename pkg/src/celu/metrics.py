"""Evaluation metrics and the per-evaluation record."""
from __future__ import annotations

from dataclasses import astuple, dataclass, fields

import numpy as np
from scipy.stats import rankdata

from .errors import MetricError
from .model import forward, logistic_loss
from .numerics import flat_cosine


@dataclass
class MetricsRecord:
    round: int
    local_steps: int
    bytes_sent: int
    simulated_time_s: float
    train_loss: float
    eval_auc: float
    rho_estimate: float | None
    weights_zeroed_fraction: float

    @classmethod
    def header(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def row(self) -> list:
        return list(astuple(self))


def auc(labels, scores) -> float:
    """Rank-based ROC AUC; tied scores count one half."""
    labels = np.asarray(labels, dtype=np.float64).reshape(-1)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if labels.shape != scores.shape:
        raise MetricError(f"{labels.size} labels for {scores.size} scores")
    pos = labels == 1.0
    n_pos = int(pos.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC needs at least one positive and one negative label")
    ranks = rankdata(scores)  # average ranks for ties
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def empirical_rho(g_tilde, g) -> float | None:
    """Cosine between an estimated and a true gradient (None on zero norm)."""
    return flat_cosine(g_tilde, g)


def split_model_logits(bottom_a, bottom_b, top, x_a, x_b) -> np.ndarray:
    z_a, _ = forward(bottom_a, x_a)
    z_b, _ = forward(bottom_b, x_b)
    logits, _ = forward(top, np.hstack([z_a, z_b]))
    return logits[:, 0]


def evaluate(bottom_a, bottom_b, top, train, valid=None) -> tuple[float, float]:
    """Mean training loss and validation AUC (training AUC if no valid set)."""
    logits = split_model_logits(bottom_a, bottom_b, top, train.x_a, train.x_b)
    loss, _ = logistic_loss(train.y, logits)
    if valid is None:
        return float(loss.mean()), auc(train.y, logits)
    v_logits = split_model_logits(bottom_a, bottom_b, top, valid.x_a, valid.x_b)
    return float(loss.mean()), auc(valid.y, v_logits)

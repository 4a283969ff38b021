import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from celu.errors import MetricError
from celu.metrics import MetricsRecord, auc, empirical_rho

from oracles import brute_force_auc


def test_auc_examples():
    assert auc([1, 1, 0, 0], [0.9, 0.8, 0.2, 0.1]) == 1.0
    assert auc([1, 0, 1, 0], [0.9, 0.8, 0.7, 0.6]) == 0.75
    assert auc([1, 0, 1, 0], [0.3] * 4) == 0.5


def test_auc_single_class():
    with pytest.raises(MetricError):
        auc([1, 1], [0.1, 0.2])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 1), st.integers(-3, 3)), min_size=2, max_size=40))
def test_auc_matches_pairwise_count(pairs):
    labels = [l for l, _ in pairs]
    if len(set(labels)) < 2:
        return
    scores = [float(s) for _, s in pairs]  # small integer range forces ties
    assert auc(labels, scores) == pytest.approx(brute_force_auc(labels, scores), abs=1e-12)


def test_empirical_rho_examples():
    g = np.array([0.3, -1.0, 2.0])
    assert empirical_rho(g, g) == pytest.approx(1.0)
    assert empirical_rho(-g, g) == pytest.approx(-1.0)
    assert empirical_rho([1.0, 0.0], [1.0, 1.0]) == pytest.approx(0.7071, abs=1e-4)
    assert empirical_rho([0.0, 0.0], [1.0, 1.0]) is None


def test_metrics_header_contract():
    assert ",".join(MetricsRecord.header()) == (
        "round,local_steps,bytes_sent,simulated_time_s,train_loss,eval_auc,rho_estimate,weights_zeroed_fraction"
    )

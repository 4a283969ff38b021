import math

import numpy as np
import pytest

from celu.dataio import generate_synthetic
from celu.diagnostics import (
    DiagnosticsConfig,
    collect_snapshots,
    full_gradient,
    theoretical_delta,
    variance_probe,
)
from celu.errors import ConfigError
from celu.protocol import TrainConfig

SMALL = generate_synthetic(200, 5, 3, seed=1)
PROBE_CFG = TrainConfig(algorithm="celu", batch_size=16, local_steps=5, workset=4, dz=4, bottom_hidden=(8,),
                        lr=0.2, epochs=2)


@pytest.fixture(scope="module")
def history():
    return collect_snapshots(PROBE_CFG, SMALL, 12)


def test_delta_worked_example():
    diag = DiagnosticsConfig(L_lipschitz=2, sigma=0.5, d=10, delta=0.1)
    value = theoretical_delta(diag, batch_size=100, workset=5, rho=0.8)
    assert value == pytest.approx(4 * math.log(200) / 100 * 1.2 + 0.25 * 1.2, abs=1e-12)
    assert value == pytest.approx(0.55432, abs=1e-4)


def test_delta_isolates_staleness_term():
    diag = DiagnosticsConfig(L_lipschitz=3.0, sigma=1.0, d=0.05, delta=0.1)  # 2d = delta
    assert theoretical_delta(diag, 7, 2, 1.0) == 1.0


def test_delta_monotone_in_w_and_rho():
    diag = DiagnosticsConfig(L_lipschitz=1.5, sigma=0.7, d=50, delta=0.05)
    by_w = [theoretical_delta(diag, 64, w, 0.6) for w in range(1, 10)]
    by_rho = [theoretical_delta(diag, 64, 4, r) for r in np.linspace(0.1, 1.0, 10)]
    assert all(a > b for a, b in zip(by_w, by_w[1:]))
    assert all(a > b for a, b in zip(by_rho, by_rho[1:]))


@pytest.mark.parametrize("rho", [0.0, -0.2, 1.01])
def test_delta_rejects_rho_out_of_range(rho):
    with pytest.raises(ConfigError):
        theoretical_delta(DiagnosticsConfig(1, 1, 1, 0.5), 8, 2, rho)


def test_diagnostics_config_validation():
    with pytest.raises(ConfigError):
        DiagnosticsConfig(1, 1, 1, 1.0)
    with pytest.raises(ConfigError):
        DiagnosticsConfig(0, 1, 1, 0.5)


def test_probe_needs_thirty_trials(history):
    with pytest.raises(ConfigError):
        variance_probe(SMALL, history, 16, 4, trials=29)


def test_probe_zero_staleness_collapses(history):
    rep = variance_probe(SMALL, history[-1:], 16, 4, trials=50, xi=60.0)
    assert rep.term_staleness == 0.0
    assert rep.lhs == rep.term_sampling


def test_probe_full_batch_has_no_sampling_term(history):
    rep = variance_probe(SMALL, history, SMALL.n, 4, trials=30)
    assert rep.term_sampling == 0.0
    assert rep.term_staleness > 0


def test_probe_inequality_every_trial(history):
    rep = variance_probe(SMALL, history[-4:], 16, 4, trials=200, xi=60.0)
    assert rep.trial_holds.all()
    assert rep.lhs <= rep.bound
    assert rep.term_sampling > 0 and rep.term_staleness > 0


def test_full_gradient_is_mean_of_halves(history):
    g_all = full_gradient(history[-1], SMALL, np.arange(200))
    g1 = full_gradient(history[-1], SMALL, np.arange(100))
    g2 = full_gradient(history[-1], SMALL, np.arange(100, 200))
    np.testing.assert_allclose(g_all, (g1 + g2) / 2, atol=1e-12)

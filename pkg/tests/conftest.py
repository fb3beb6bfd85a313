"""Shared fixtures: a small synthetic cohort and models trained on it.

The "small stack" is deliberately light (few patients, narrow nets) so the
contract tests stay fast; the acceptance suite builds its own full-size
stacks.
"""

import numpy as np
import pytest

from sepsense import cohort as ch
from sepsense import imputer as imp
from sepsense import predictor as pred
from sepsense import uncertainty as unc


@pytest.fixture(scope="session")
def schema():
    return ch.default_schema()


@pytest.fixture(scope="session")
def small_cohort(schema):
    cfg = ch.GeneratorConfig(seed=12, n_patients=140, noise_frac=0.4)
    return ch.generate_cohort(cfg, schema)


@pytest.fixture(scope="session")
def small_splits(small_cohort):
    return ch.split_cohort(small_cohort, (0.7, 0.1, 0.2), seed=5)


@pytest.fixture(scope="session")
def small_imputer(small_splits, schema):
    train, _, _ = small_splits
    cfg = imp.ImputerConfig(d=8, hidden=16, epochs_mean=20, epochs_sigma=12,
                            batch_size=32, seed=0)
    model = imp.train_imputer_mean(train, schema, cfg)
    return imp.train_imputer_sigma(train, model, cfg)


@pytest.fixture(scope="session")
def small_predictor(small_splits, schema, small_imputer):
    train, _, _ = small_splits
    seqs = pred.prepare_sequences(train, small_imputer)
    cfg = pred.PredictorConfig(d=8, hidden=16, epochs=15, batch_size=32, seed=0,
                               adv=pred.AdversarialConfig(alpha=0.9, lr=3e-3,
                                                          s_adv=0.2, n_adv=5))
    return pred.train_predictor(seqs, schema, "ras", cfg,
                                t_max=small_imputer.t_max,
                                stats=small_imputer.stats)


@pytest.fixture(scope="session")
def small_rho(small_splits):
    train, _, _ = small_splits
    return unc.estimate_correlations(train)


@pytest.fixture(scope="session")
def small_test_seqs(small_splits, small_imputer):
    _, _, test = small_splits
    return pred.prepare_sequences(test, small_imputer)


def fd_gradient(fn, x, eps=1e-5):
    """Central finite differences of a scalar function of an array."""
    x = np.asarray(x, dtype=float)
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + eps
        hi = fn(x)
        x[idx] = orig - eps
        lo = fn(x)
        x[idx] = orig
        grad[idx] = (hi - lo) / (2 * eps)
        it.iternext()
    return grad


def assert_grad_close(analytic, numeric, rtol=1e-4, atol=1e-7):
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    rel = np.abs(analytic - numeric) / denom
    mask = np.abs(analytic - numeric) > atol
    worst = rel[mask].max() if mask.any() else 0.0
    assert worst < rtol, f"gradient mismatch: worst relative error {worst:.3e}"

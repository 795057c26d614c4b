import numpy as np
import pytest
from scipy import stats

from rotot.rompca import (RompcaError, _tucker, mrcd_lite, mrcd_lite_fit, rompca_fit,
                          rompca_project_many, rompca_project_new)
from rotot.tensor import DimensionError

N, P, K = 60, (8, 10), (3, 4)


def low_rank(rng, n=N, scale=3.0, center=1.0):
    V = [np.linalg.qr(rng.standard_normal((p, k)))[0] for p, k in zip(P, K)]
    U = scale * rng.standard_normal((n,) + K)
    return _tucker(U, V) + center, V


def test_noise_free_recovery(rng):
    X, _ = low_rank(rng)
    m = rompca_fit(X, K)
    assert np.linalg.norm(m.reconstruction() - X) / np.linalg.norm(X) < 1e-6
    assert m.case_weights.min() == 1
    for V in m.projections:
        assert np.allclose(V.T @ V, np.eye(V.shape[1]), atol=1e-10)


def test_identical_cases_give_that_case_as_center(rng):
    X, _ = low_rank(rng)
    X2 = np.broadcast_to(X[0], X.shape).copy()
    m = rompca_fit(X2, K)
    assert np.abs(m.center - X[0]).max() < 1e-8
    assert np.abs(m.reconstruction() - X2).max() < 1e-8


def test_cell_outliers_downweighted_and_imputed(rng):
    X, _ = low_rank(rng)
    Xn = X + 0.3 * rng.standard_normal(X.shape)
    idx = rng.random(X.shape) < 0.05
    Xo = Xn.copy()
    Xo[idx] += 30 * X.std() * np.sign(rng.standard_normal(idx.sum()))
    m = rompca_fit(Xo, K)
    assert (m.cell_weights[idx] < 0.5).mean() >= 0.95
    assert (m.cell_weights[~idx] < 0.5).mean() <= 0.02
    # imputed values come back near the clean tensor
    err = np.abs(m.imputed[idx] - Xn[idx])
    assert np.median(err) < 1.0


def test_trace_nonincreasing(rng):
    X, _ = low_rank(rng)
    Xo = X + 0.3 * rng.standard_normal(X.shape)
    Xo[:5] += 20
    m = rompca_fit(Xo, K)
    tr = np.array(m.trace)
    assert np.all(np.diff(tr) <= 1e-10 * np.abs(tr[:-1]))


def test_casewise_outliers_get_zero_weight(rng):
    X, _ = low_rank(rng)
    Xo = X + 0.3 * rng.standard_normal(X.shape)
    bad = np.arange(6)
    Xo[bad] += 5 * rng.standard_normal((6,) + P) * X.std()
    m = rompca_fit(Xo, K)
    assert np.all(m.case_weights[bad] == 0)
    assert m.case_weights[6:].mean() > 0.9


def test_project_new_reproduces_training_core(rng):
    X, _ = low_rank(rng)
    Xo = X + 0.3 * rng.standard_normal(X.shape)
    m = rompca_fit(Xo, K)
    for n in (0, 7, 31):
        core, imp, w = rompca_project_new(m, Xo[n])
        assert np.abs(core - m.cores[n]).max() < 1e-6
        assert np.abs(imp - m.imputed[n]).max() < 1e-6


def test_project_missing_cells_imputed_from_reconstruction(rng):
    X, _ = low_rank(rng)
    m = rompca_fit(X + 0.01 * rng.standard_normal(X.shape), K)
    x = X[3].copy()
    x[2, 5] = np.nan
    core, imp, w = rompca_project_new(m, x)
    assert w[2, 5] == 0
    assert abs(imp[2, 5] - X[3, 2, 5]) < 0.1


def test_missing_predictor_cells_in_fit(rng):
    X, _ = low_rank(rng)
    Xm = X + 0.1 * rng.standard_normal(X.shape)
    miss = rng.random(X.shape) < 0.05
    Xm[miss] = np.nan
    m = rompca_fit(Xm, K)
    assert np.all(np.isfinite(m.imputed))
    assert np.all(m.cell_weights[miss] == 0)
    assert np.median(np.abs(m.imputed[miss] - X[miss])) < 0.3


def test_errors(rng):
    X, _ = low_rank(rng)
    m = rompca_fit(X, K)
    with pytest.raises(DimensionError):
        rompca_project_new(m, X[0, :4])
    empty = np.full((1,) + P, np.nan)
    with pytest.raises(RompcaError):
        rompca_project_many(m, empty)
    with pytest.raises((ValueError, RompcaError)):
        rompca_fit(X, (9, 4))


def test_mrcd_calibrated_on_gaussian(rng):
    # chi-square consistency: mean of the estimated covariance diagonal near 1
    Z = rng.standard_normal((600, 6))
    S = mrcd_lite(Z)
    assert np.allclose(np.diag(S), 1.0, atol=0.2)
    assert np.abs(S - np.diag(np.diag(S))).max() < 0.15


def test_mrcd_ignores_outlying_rows(rng):
    Z = rng.standard_normal((200, 4))
    Z[:20] += 50
    loc, S = mrcd_lite_fit(Z)[:2]
    assert np.abs(loc).max() < 0.5
    assert np.diag(S).max() < 2.0


def test_score_distance_quantile_rate(rng):
    # on Gaussian cores the chi-square cutoff rejects roughly 1% of cases
    Z = rng.standard_normal((2000, 4))
    loc, S = mrcd_lite_fit(Z)[:2]
    d2 = np.einsum("ij,ij->i", (Z - loc) @ np.linalg.inv(S), Z - loc)
    rate = np.mean(d2 > stats.chi2.ppf(0.99, 4))
    assert rate < 0.03


def _sim_x(eps_case, seed=0):
    from dataclasses import replace
    from rotot import simlab as sl
    x = sl.Contamination(eps_case=eps_case, gamma_case=10.0)
    cfg = replace(sl.SimConfig(), x=x)
    d = sl.generate(cfg, seed)
    X, _, led = sl.contaminate(d, cfg, seed + 1)
    return X, led


def test_clean_generated_data_case_weights():
    X, _ = _sim_x(0.0)
    m = rompca_fit(X, K)
    assert np.mean(m.case_weights == 0) <= 0.05


def test_generator_casewise_outlier_gets_zero_weight():
    # structured predictor outliers of the simulation generator at gamma_case 10
    X, led = _sim_x(0.1)
    m = rompca_fit(X, K)
    assert np.all(m.case_weights[led.x_cases] == 0)

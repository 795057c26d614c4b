import math
from dataclasses import replace

import numpy as np
import pytest
from scipy import linalg

from rotot import simlab as sl
from rotot.blocks import slope_contract


@pytest.mark.parametrize("seed", [0, 1, 17, 123456])
def test_snr_identity(seed):
    cfg = sl.SimConfig(snr=3.0)
    d = sl.generate(cfg, seed)
    S = slope_contract(d.X, d.slope)
    E = d.Y - S
    assert abs(np.sum(S * S) / np.sum(E * E) - 3.0) <= 1e-10 * 3.0


def test_predictor_noise_variance():
    cfg = sl.SimConfig()
    d = sl.generate(cfg, 2)
    Vs = [B[:, :k] for B, k in zip(d.bases, cfg.x_ranks)]
    basis = np.kron(Vs[1], Vs[0])                     # first mode fastest
    x = d.X.reshape(cfg.N, -1, order="F")
    resid = x - (x @ basis) @ basis.T
    dof = x.shape[1] - basis.shape[1]
    var = np.sum(resid * resid) / (cfg.N * dof)
    assert abs(var - 0.1) <= 0.01


@pytest.mark.parametrize("P", [4, 8, 10])
def test_toeplitz_subspace_against_scipy(P):
    i = np.arange(P)
    S = (-0.9) ** np.abs(i[:, None] - i[None, :])
    vals, vecs = linalg.eigh(S)
    ref = vecs[:, np.argsort(vals)[::-1]]
    ours = sl.toeplitz_eigvecs(P)
    for k in range(1, P):
        ang = linalg.subspace_angles(ours[:, :k], ref[:, :k])
        assert ang.max() < 1e-8


def _cfg(x, y, **kw):
    return replace(sl.SimConfig(**kw), x=x, y=y)


def test_clean_spec_leaves_data_unchanged():
    cfg = sl.SimConfig()
    d = sl.generate(cfg, 0)
    X, Y, led = sl.contaminate(d, cfg, 5)
    assert np.array_equal(X, d.X) and np.array_equal(Y, d.Y)
    assert led.size == 0


def test_ledger_counts_and_disjointness():
    x = sl.Contamination(eps_cell=0.05, eps_case=0.1, gamma_cell=5, gamma_case=4, eps_miss=0.05)
    y = sl.Contamination(eps_cell=0.10, eps_case=0.1, gamma_cell=5, gamma_case=4, eps_miss=0.05)
    cfg = _cfg(x, y)
    d = sl.generate(cfg, 0)
    X, Y, led = sl.contaminate(d, cfg, 9)
    Qt, Pt = int(np.prod(cfg.q_dims)), int(np.prod(cfg.p_dims))
    assert led.y_cells.shape[0] == round(0.10 * cfg.N * Qt)
    assert led.x_cells.shape[0] == round(0.05 * cfg.N * Pt)
    assert led.y_cases.size == led.x_cases.size == 6
    assert not set(led.x_cases) & set(led.y_cases)
    assert not set(led.y_cells[:, 0]) & set(led.y_cases)
    assert not set(led.x_cells[:, 0]) & set(led.x_cases)
    as_set = lambda a: {tuple(r) for r in a}  # noqa: E731
    assert not as_set(led.y_cells) & as_set(led.y_missing)
    assert not as_set(led.x_cells) & as_set(led.x_missing)
    assert np.isnan(Y).sum() == led.y_missing.shape[0]
    assert np.isnan(X).sum() == led.x_missing.shape[0]
    # cellwise values are +-gamma * s
    flat = Y.reshape(cfg.N, -1, order="F")
    sd = d.y_sd.reshape(-1, order="F")
    vals = flat[led.y_cells[:, 0], led.y_cells[:, 1]]
    assert np.allclose(np.abs(vals), 5 * sd[led.y_cells[:, 1]])


def test_infeasible_fractions():
    c = sl.Contamination(eps_case=0.6)
    cfg = _cfg(c, c)
    with pytest.raises(ValueError):
        sl.contaminate(sl.generate(cfg, 0), cfg, 1)
    with pytest.raises(ValueError):
        sl.Contamination(eps_cell=1.5)


def test_outlier_core_positions():
    rng = np.random.default_rng(0)
    core = sl._outlier_core(rng, (8, 10), (3, 4), 6.0)
    keep = [{0, 1, 3, 4}, {0, 1, 4, 5}]
    for idx in np.ndindex(*core.shape):
        inside = all(i in k for i, k in zip(idx, keep))
        assert (core[idx] != 0) == inside


def test_outlier_case_is_rotated_core():
    x = sl.Contamination(eps_case=0.1, gamma_case=8.0)
    cfg = _cfg(x, sl.Contamination())
    d = sl.generate(cfg, 0)
    X, _, led = sl.contaminate(d, cfg, 2)
    n = led.x_cases[0]
    core = X[n]
    for ell, B in enumerate(d.bases):
        core = np.moveaxis(np.tensordot(core, B, axes=([ell], [0])), -1, ell)
    off = np.ones(core.shape, bool)
    off[np.ix_([0, 1, 3, 4], [0, 1, 4, 5])] = False
    # outside the structured positions only N(0, 0.1) noise remains
    assert np.abs(core[off]).max() < 6 * math.sqrt(0.1)
    assert np.abs(core[~off]).mean() > 4


def test_rpe_examples():
    rng = np.random.default_rng(0)
    Y = rng.standard_normal((5, 2, 3))
    assert sl.rpe(Y, np.broadcast_to(Y.mean(0), Y.shape)) == pytest.approx(1.0)
    assert sl.rpe(Y, Y) == 0
    Ys = np.array([[1.0], [3.0]])
    pred = np.array([[1.5], [2.0]])
    # mean 2: |1-1.5| + |3-2| over |1-2| + |3-2|
    assert sl.rpe(Ys, pred) == pytest.approx(1.5 / 2.0)


def test_robmse_examples():
    assert sl.robmse(np.ones((8, 3)), np.zeros((8, 3))) == 1
    Y = np.ones((8, 3))
    Y[2] = 1e6
    assert sl.robmse(Y, np.zeros_like(Y)) == 1
    rng = np.random.default_rng(1)
    Yv, P = rng.standard_normal((11, 2, 2)), rng.standard_normal((11, 2, 2))
    H = math.ceil(0.75 * 11)
    tot = []
    for q in np.ndindex(2, 2):
        r = sorted(abs(Yv[(slice(None),) + q] - P[(slice(None),) + q]))
        tot.extend(v * v for v in r[:H])
    assert sl.robmse(Yv, P) == pytest.approx(sum(tot) / len(tot), rel=1e-12)


def test_generation_and_contamination_deterministic():
    x, y = sl.scenario_contamination("x-both", 8.0, missing=True)
    cfg = _cfg(x, y)
    a = sl.contaminate(sl.generate(cfg, 3), cfg, 4)
    b = sl.contaminate(sl.generate(cfg, 3), cfg, 4)
    assert np.array_equal(a[0], b[0], equal_nan=True) and np.array_equal(a[1], b[1], equal_nan=True)
    assert np.array_equal(a[2].y_cells, b[2].y_cells)


def test_scenario_catalogue():
    for sc in sl.SCENARIOS:
        x, y = sl.scenario_contamination(sc, 8)
        assert x.active or y.active
        x0, y0 = sl.scenario_contamination(sc, 0)
        assert not x0.active and not y0.active
    x, y = sl.scenario_contamination("x-case", 8, snr=1.0)
    assert y.gamma_case == 3.5
    with pytest.raises(ValueError):
        sl.scenario_contamination("z-case", 1)


def test_clean_parity_across_methods():
    rows = sl.run_scenario(("y-cell",), gammas=(0,), replications=3)
    med = {m: v for m, _, _, _, v, _ in sl.summary_rows(rows)}
    lo, hi = min(med.values()), max(med.values())
    assert hi <= 1.25 * lo


def test_missing_variant_close_to_complete():
    kw = dict(scenarios=("y-both",), methods=("ROTOT",), gammas=(8,), replications=3)
    full = sl.summary_rows(sl.run_scenario(**kw))[0][4]
    miss = sl.summary_rows(sl.run_scenario(missing=True, **kw))[0][4]
    assert abs(miss - full) <= 0.3 * full


def test_csv_and_config(tmp_path):
    rows = [("ROTOT", "y-cell", 5.0, 8.0, 0, 0.5), ("ROTOT", "y-cell", 5.0, 8.0, 1, math.nan),
            ("ROTOT", "y-cell", 5.0, 8.0, 2, 0.7)]
    text = sl.results_csv(rows)
    assert text.splitlines()[0] == "method,scenario,snr,gamma,replication,rpe"
    assert "nan" in text
    summ = sl.summary_csv(rows).splitlines()
    assert summ[1] == "ROTOT,y-cell,5.0,8.0,0.6,1"
    conf = sl.parse_config("scenarios = y-case  # comment\nN = 30\nlambda.ROTOT = 0.5\nmissing = yes\n")
    assert conf["scenarios"] == ("y-case",) and conf["base"].N == 30
    assert conf["lambdas"] == {"ROTOT": 0.5} and conf["missing"]
    for bad in ("N 30", "foo = 1", "methods = LASSO", "lambda.X = 1"):
        with pytest.raises(ValueError):
            sl.parse_config(bad)


def test_true_slope_validation_rpe_floor():
    # RPE of the exact slope is set by the noise share of the response spread
    cfg = sl.SimConfig()
    vals = []
    for seed in range(10):
        d = sl.generate(cfg, seed)
        vals.append(sl.rpe(d.Y_val, slope_contract(d.X_val, d.slope)))
    med = float(np.median(vals))
    assert 0.40 < med < 0.50

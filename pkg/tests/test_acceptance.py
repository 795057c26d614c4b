"""Acceptance suite: one test per criterion, each printing one PASS/FAIL line.

The lines are also collected and repeated in the pytest terminal summary.
Simulation criteria run at desk scale (N = 60, 20 replications) and take
several minutes in total.
"""

import time
from dataclasses import replace

import numpy as np

from conftest import ACCEPTANCE_LINES, naive_contract, naive_full, random_kruskal
from rotot import simlab as sl
from rotot.blocks import build_C, build_D, slope_contract
from rotot.cli import main
from rotot.diagnostics import build_report, cutoff_cell
from rotot.estimator import (RototConfig, build_weights, cell_residuals, first_order_conditions,
                             fit_rotot, gradient, irls, irls_fit, objective)
from rotot.io import write_tens
from rotot.robust import MScaleConfig, QuadraticRho, TanhRho, mscale
from rotot.tensor import KruskalOperator, contract, kruskal_full, matricize, vec, vec_index
from rotot.tot import TotConfig, random_slope, tot_fit

REPS = 20
GAMMA = 8.0


def verdict(k, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {k}: {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


def instance(seed, N=40, P=(5, 4), Q=(3, 3), R=2, contaminate=True):
    """Small regression problem with casewise, cellwise and missing responses."""
    rng = np.random.default_rng(seed)
    B = random_kruskal(rng, P, Q, R)
    X = rng.standard_normal((N,) + P)
    Y = 0.5 + slope_contract(X, B) + 0.2 * rng.standard_normal((N,) + Q)
    w_x = np.ones(N)
    if contaminate:
        Y[:3] += 15 * rng.standard_normal(3)[:, None, None]
        cells = rng.random(Y.shape) < 0.05
        Y[cells] += 25
        Y[rng.random(Y.shape) < 0.03] = np.nan
        w_x[rng.choice(np.arange(3, N), 2, replace=False)] = 0
    return X, Y, w_x


# ---------------------------------------------------------------------------
# algorithmic properties


def test_criterion_01_descent():
    t0 = time.perf_counter()
    worst = -np.inf
    for seed in range(50):
        X, Y, w_x = instance(seed)
        m = irls_fit(X, Y, 2, 1e-3, w_x=w_x, cfg=RototConfig(max_iter=60, tol=0.0, seed=seed))
        tr = np.array(m.trace)
        worst = max(worst, float(np.max(np.diff(tr) / np.abs(tr[:-1]))))
    dt = time.perf_counter() - t0
    verdict(1, worst <= 1e-10 and dt < 120,
            f"max relative increase {worst:.2e} (<= 1e-10) over 50 instances, {dt:.1f} s (< 120 s)")


def _weights(m, X, Y):
    mask = ~np.isnan(Y)
    res = cell_residuals(m.b0, m.slope, X, Y)
    return build_weights(res, m.sigma1, m.sigma2, m.w_x, mask, m.rho1, m.rho2).total


def test_criterion_02_stationarity():
    # residuals of the stationarity equations divided by 2m, i.e. in gradient units
    t0 = time.perf_counter()
    worst, converged = 0.0, 0
    for seed in range(20):
        X, Y, w_x = instance(100 + seed)
        m = irls_fit(X, Y, 2, 1e-3, w_x=w_x, cfg=RototConfig(max_iter=3000, tol=1e-9, seed=seed))
        converged += m.converged
        W = _weights(m, X, Y)
        mobs = int((~np.isnan(Y)).sum())
        foc = first_order_conditions(X, Y, m.b0, m.slope, W, m.lam, mobs)
        for g in foc["U"] + foc["V"] + [foc["B0"]]:
            worst = max(worst, float(np.abs(g).max()) / (2 * mobs))
    dt = time.perf_counter() - t0
    verdict(2, worst < 1e-4 and converged == 20 and dt < 60,
            f"max scaled stationarity residual {worst:.2e} (< 1e-4), {converged}/20 converged, "
            f"{dt:.1f} s (< 60 s)")


def test_criterion_03_gradient():
    t0 = time.perf_counter()
    worst = 0.0
    h = 1e-6
    for seed in range(10):
        X, Y, w_x = instance(200 + seed, N=25, P=(3, 4), Q=(2, 3))
        m = irls_fit(X, Y, 2, 1e-2, w_x=w_x, cfg=RototConfig(max_iter=5))
        rng = np.random.default_rng(seed)
        slope = random_slope((3, 4), (2, 3), 2, rng)
        b0 = m.b0 + 0.1 * rng.standard_normal(m.b0.shape)
        mask = ~np.isnan(Y)

        def L(sl_, bb):
            r = cell_residuals(bb, sl_, X, Y)
            return objective(r, mask, m.sigma1, m.sigma2, w_x, m.rho1, m.rho2, sl_, m.lam)

        res = cell_residuals(b0, slope, X, Y)
        W = build_weights(res, m.sigma1, m.sigma2, w_x, mask, m.rho1, m.rho2).total
        g = gradient(X, Y, b0, slope, W, m.lam)
        ana, num = [], []
        for kind, factors in (("u", slope.u), ("v", slope.v)):
            for i, F in enumerate(factors):
                for idx in np.ndindex(*F.shape):
                    E = np.zeros_like(F)
                    E[idx] = h
                    plus, minus = list(factors), list(factors)
                    plus[i], minus[i] = F + E, F - E
                    sp, sm = slope.replace(**{kind: plus}), slope.replace(**{kind: minus})
                    num.append((L(sp, b0) - L(sm, b0)) / (2 * h))
                    ana.append(g["U" if kind == "u" else "V"][i][idx])
        for idx in np.ndindex(*b0.shape):
            E = np.zeros_like(b0)
            E[idx] = h
            num.append((L(slope, b0 + E) - L(slope, b0 - E)) / (2 * h))
            ana.append(g["B0"][idx])
        ana, num = np.array(ana), np.array(num)
        worst = max(worst, float(np.linalg.norm(ana - num) / np.linalg.norm(num)))
    dt = time.perf_counter() - t0
    verdict(3, worst < 1e-5 and dt < 60,
            f"max relative gradient error {worst:.2e} (< 1e-5) on 10 instances, {dt:.1f} s (< 60 s)")


def test_criterion_04_quadratic_reduction():
    worst = 0.0
    q = QuadraticRho()
    for seed in range(10):
        X, Y, _ = instance(300 + seed, contaminate=False)
        N, Qs = Y.shape[0], Y.shape[1:]
        lam = 10.0 ** np.random.default_rng(seed).uniform(-4, -1)
        s0 = random_slope(X.shape[1:], Qs, 2, np.random.default_rng(seed))
        b0 = Y.mean(axis=0)
        ir = irls(X, Y, np.ones(N), b0, s0, np.ones(Qs), 1.0, lam, q, q, max_iter=25, tol=0.0)
        tm = tot_fit(X, Y, 2, lam * Y.size, TotConfig(max_iter=25, tol=0.0), init=(b0, s0))
        # a loop run with tol = 0 still stops once the objective is exactly constant
        n = min(len(ir.trace), len(tm.trace))
        a, b = np.array(ir.trace[:n]), np.array(tm.trace[:n]) / Y.size
        worst = max(worst, float(np.max(np.abs(a - b) / np.abs(b))))
    verdict(4, worst < 1e-8, f"max relative objective gap {worst:.2e} (< 1e-8) over 10 shared-start runs")


# ---------------------------------------------------------------------------
# tensor algebra


def _naive_matricize(a, rows, cols):
    J = int(np.prod([a.shape[i] for i in rows]))
    K = int(np.prod([a.shape[i] for i in cols]))
    out = np.zeros((J, K))
    for idx in np.ndindex(*a.shape):
        j = vec_index([idx[i] for i in rows], [a.shape[i] for i in rows])
        k = vec_index([idx[i] for i in cols], [a.shape[i] for i in cols])
        out[j, k] = a[idx]
    return out


def test_criterion_05_tensor_oracles():
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(100):
        order = int(rng.integers(2, 5))
        shape = tuple(int(s) for s in rng.integers(1, 7, size=order))
        a = rng.standard_normal(shape)
        modes = list(range(order))
        k = int(rng.integers(1, order))
        rows = sorted(rng.choice(modes, size=k, replace=False).tolist())
        cols = [i for i in modes if i not in rows]
        worst = max(worst, np.abs(matricize(a, rows, cols) - _naive_matricize(a, rows, cols)).max())
        # contraction of a's trailing modes with a random tensor
        s = int(rng.integers(1, order))
        lead = shape[order - s:]
        tail = tuple(int(v) for v in rng.integers(1, 4, size=int(rng.integers(0, 2))))
        b = rng.standard_normal(lead + tail)
        fast = contract(a, b, s)
        slow = np.zeros(shape[:order - s] + tail)
        for i in np.ndindex(*shape[:order - s]):
            slow[i] = naive_contract(a[i], b, s)
        worst = max(worst, np.abs(fast - slow).max())
        # CP reconstruction
        R = int(rng.integers(1, 4))
        u = [rng.standard_normal((d, R)) for d in shape[:1]]
        v = [rng.standard_normal((d, R)) for d in shape[1:]]
        worst = max(worst, np.abs(kruskal_full(KruskalOperator(u, v)) - naive_full(u, v)).max())
    verdict(5, worst < 1e-10, f"max abs deviation from loop oracles {worst:.2e} (< 1e-10) on 100 shapes")


def test_criterion_06_block_identities():
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(25):
        L, M = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        P = tuple(int(s) for s in rng.integers(1, 5, size=L))
        Q = tuple(int(s) for s in rng.integers(1, 5, size=M))
        R = int(rng.integers(1, 4))
        B = random_kruskal(rng, P, Q, R)
        x = rng.standard_normal(P)
        out = slope_contract(x[None], B)[0]
        for ell in range(L):
            C = build_C(x, B, ell)                               # (P_l, R, Q...)
            # response modes as rows, (p, r) as columns
            Cmat = matricize(C, list(range(2, 2 + M)), [0, 1])
            worst = max(worst, np.abs(vec(out) - Cmat @ vec(B.u[ell])).max())
        for m_ in range(M):
            D = build_D(x, B, m_)
            rest = [i for i in range(M) if i != m_]
            Dmat = matricize(D, rest, [m_]) if rest else D[None, :]
            lhs = matricize(out, [m_], rest) if rest else out[:, None]
            worst = max(worst, np.abs(lhs - B.v[m_] @ Dmat.T).max())
    verdict(6, worst < 1e-10, f"max abs identity residual {worst:.2e} (< 1e-10) on 25 instances")


# ---------------------------------------------------------------------------
# constants


def test_criterion_07_constants():
    t = TanhRho()
    eps = 1e-12
    jumps = []
    for z in (t.b, t.c):
        for f in (t.rho, t.psi):
            jumps.append(abs(float(f(z + eps)) - float(f(z - eps))))
    # psi equals the derivative of rho on either side of b and c
    h = 1e-6
    deriv = max(abs((float(t.rho(z + s * h + h / 10)) - float(t.rho(z + s * h - h / 10))) / (h / 5)
                    - float(t.psi(z + s * h))) for z in (t.b, t.c) for s in (-1, 1))
    z = np.concatenate([np.linspace(4, 100, 1000), -np.linspace(4, 100, 1000)])
    zero = bool(np.all(t.psi(z) == 0.0))
    c_cell = cutoff_cell()
    sample = np.random.default_rng(7).standard_normal(100_000)
    s = mscale(sample, MScaleConfig(delta=1.88, a=0.3431))
    ok = max(jumps) < 1e-10 and deriv < 1e-6 and zero and abs(c_cell - 3.09) <= 0.01 and abs(s - 1) <= 0.02
    verdict(7, ok, f"max jump at b,c {max(jumps):.1e}; derivative gap {deriv:.1e}; psi(|z|>=4)=0 {zero}; "
                   f"c_cell {c_cell:.4f}; M-scale of 1e5 normals {s:.4f}")


# ---------------------------------------------------------------------------
# simulations


_CACHE = {}


def _medians(scenarios, missing=False, gammas=(GAMMA,), methods=sl.METHODS):
    key = (tuple(scenarios), missing, tuple(gammas), tuple(methods))
    if key not in _CACHE:
        t0 = time.perf_counter()
        rows = sl.run_scenario(scenarios, methods, gammas, REPS, sl.SimConfig(), missing=missing)
        med = {(m, sc): v for m, sc, _, _, v, _ in sl.summary_rows(rows)}
        _CACHE[key] = (med, time.perf_counter() - t0)
    return _CACHE[key]


def test_criterion_08_clean_recovery():
    med, dt = _medians(("y-cell",), gammas=(0,), methods=("TOT", "ROTOT"))
    r, t = med[("ROTOT", "y-cell")], med[("TOT", "y-cell")]
    verdict(8, r < 0.3 and r < 1.1 * t and dt < 600,
            f"median RPE ROTOT {r:.4f} (< 0.3), TOT {t:.4f} (ROTOT < 1.1 x TOT: {r < 1.1 * t}), {dt:.0f} s")


def _fmt(med, sc):
    return " ".join(f"{m}={med[(m, sc)]:.3f}" for m in sl.METHODS)


def _orderings(med):
    c, k, b, x = "y-cell", "y-case", "y-both", "x-both"
    i = med[("ROTOT", c)] < med[("TOT", c)] and med[("OnlyCell", c)] < med[("OnlyCase", c)]
    ii = med[("ROTOT", k)] < med[("TOT", k)] and med[("OnlyCase", k)] < med[("OnlyCell", k)]
    iii = all(med[("ROTOT", sc)] < min(med[(m, sc)] for m in sl.METHODS if m != "ROTOT")
              for sc in (b, x))
    return i, ii, iii


def test_criterion_09_orderings():
    med, dt = _medians(("y-cell", "y-case", "y-both", "x-both"))
    i, ii, iii = _orderings(med)
    detail = (f"(i) {i} [{_fmt(med, 'y-cell')}]; (ii) {ii} [{_fmt(med, 'y-case')}]; "
              f"(iii) {iii} [y-both {_fmt(med, 'y-both')} | x-both {_fmt(med, 'x-both')}]; {dt:.0f} s")
    verdict(9, i and ii and iii and dt < 1800, detail)


def test_criterion_10_missing():
    med, dt = _medians(("y-both", "x-both"), missing=True)
    iii = all(med[("ROTOT", sc)] < min(med[(m, sc)] for m in sl.METHODS if m != "ROTOT")
              for sc in ("y-both", "x-both"))
    verdict(10, iii, f"5% missing: y-both {_fmt(med, 'y-both')} | x-both {_fmt(med, 'x-both')}; {dt:.0f} s")


def test_criterion_11_injection_recall():
    x, y = sl.scenario_contamination("y-cell", GAMMA)
    cfg = replace(sl.SimConfig(), x=x, y=y)
    hit = tot = fp = clean = sd_hit = sd_tot = 0
    for rep in range(5):
        d = sl.generate(cfg, 1000 + rep)
        X, Y, led = sl.contaminate(d, cfg, 2000 + rep)
        m = fit_rotot(X, Y, cfg.rank, sl.DEFAULT_LAMBDA["ROTOT"], x_ranks=cfg.x_ranks)
        rep_ = build_report(m, X, Y, B=200, seed=rep)
        N = Y.shape[0]
        flag = np.abs(np.nan_to_num(rep_.std_residuals)).reshape(N, -1, order="F") > rep_.c_cell
        injected = np.zeros_like(flag)
        injected[led.y_cells[:, 0], led.y_cells[:, 1]] = True
        hit += int(flag[injected].sum())
        tot += int(injected.sum())
        # clean cells: not injected, observed, and outside casewise-contaminated cases
        ok = ~injected & rep_.mask.reshape(N, -1, order="F")
        ok[np.union1d(led.x_cases, led.y_cases)] = False
        fp += int(flag[ok].sum())
        clean += int(ok.sum())
        sd_hit += int(np.sum(rep_.score_dist[led.x_cases] > rep_.c_sd))
        sd_tot += led.x_cases.size
    recall, fpr, sd_rate = hit / tot, fp / clean, sd_hit / sd_tot
    verdict(11, recall >= 0.8 and fpr <= 0.02 and sd_rate >= 0.8,
            f"response cell recall {recall:.3f} (>= 0.8), clean-cell false rate {fpr:.4f} (<= 0.02), "
            f"predictor outliers with SD > c_SD {sd_rate:.3f} (>= 0.8)")


def test_criterion_12_determinism(tmp_path):
    d = sl.generate(sl.SimConfig(), 12)
    write_tens(tmp_path / "X.tens", d.X)
    write_tens(tmp_path / "Y.tens", d.Y)
    write_tens(tmp_path / "Xv.tens", d.X_val)
    (tmp_path / "s.cfg").write_text("scenarios = y-both\nmethods = TOT,ROTOT\ngammas = 8\n"
                                    "replications = 2\nseed = 5\n")
    x, y = str(tmp_path / "X.tens"), str(tmp_path / "Y.tens")
    runs = []
    for k in range(2):
        o = tmp_path / f"run{k}"
        o.mkdir()
        codes = [
            main(["fit", x, y, "--x-ranks", "3,4", "--rank", "2", "--lambda", "0.01", "--seed", "3",
                  "--out", str(o / "model.json")]),
            main(["cv", x, y, "--x-ranks", "3,4", "--lambdas", "0.01,1", "--ranks", "2", "--folds", "3",
                  "--seed", "3", "--out", str(o / "cv.csv")]),
            main(["predict", str(o / "model.json"), str(tmp_path / "Xv.tens"), "--out",
                  str(o / "pred.tens")]),
            main(["diagnose", str(o / "model.json"), x, y, "--out-dir", str(o / "diag"),
                  "--replications", "100", "--seed", "3"]),
            main(["simulate", str(tmp_path / "s.cfg"), "--out-dir", str(o / "sim")]),
        ]
        assert codes == [0] * 5
        runs.append({str(p.relative_to(o)): p.read_bytes() for p in sorted(o.rglob("*")) if p.is_file()})
    same = runs[0] == runs[1]
    verdict(12, same and len(runs[0]) == 8,
            f"{len(runs[0])} output files (model, cv, predictions, report CSV, 2 SVGs, 2 simulation CSVs) "
            f"byte-identical across two runs: {same}")

"""Synthetic tensor regression data, contamination, metrics and scenario runs.

Predictors follow a Tucker model whose projections are the leading
eigenvectors of a Toeplitz matrix with entries (-0.9)^|i-j|; responses follow
the linear model with a CP slope scaled to a target signal-to-noise ratio.
Contamination is injected with an exact index ledger.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .blocks import slope_contract
from .estimator import FitFailure, RototConfig, fit_rotot
from .rompca import RompcaError, rompca_fit
from .tensor import KruskalOperator
from .tot import TotConfig, tot_fit

__all__ = [
    "Contamination",
    "SimConfig",
    "SimData",
    "Ledger",
    "toeplitz_eigvecs",
    "generate",
    "contaminate",
    "scenario_contamination",
    "SCENARIOS",
    "METHODS",
    "DEFAULT_LAMBDA",
    "rpe",
    "robmse",
    "fit_method",
    "run_replication",
    "run_scenario",
    "results_csv",
    "summary_rows",
    "summary_csv",
    "parse_config",
    "pilot_lambda",
]

SCENARIOS = ("y-cell", "y-case", "y-both", "x-cell", "x-case", "x-both")
METHODS = ("TOT", "OnlyCell", "OnlyCase", "ROTOT")

# chosen once from clean desk-scale pilots (see pilot_lambda)
DEFAULT_LAMBDA = {"TOT": 10.0, "OnlyCell": 1e-2, "OnlyCase": 1e-2, "ROTOT": 1e-2}

X_NOISE_VAR = 0.1


@dataclass(frozen=True)
class Contamination:
    """Contamination of one side (predictors or responses).

    ``gamma_cell`` and ``gamma_case`` are absolute magnitudes: cellwise
    outliers become ``gamma_cell * s`` (s the clean per-cell sd, random
    sign); casewise outliers use ``gamma_case`` as described in ``contaminate``.
    """

    eps_cell: float = 0.0
    eps_case: float = 0.0
    gamma_cell: float = 0.0
    gamma_case: float = 0.0
    eps_miss: float = 0.0

    def __post_init__(self):
        for name in ("eps_cell", "eps_case", "eps_miss"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")

    @property
    def active(self) -> bool:
        return self.eps_cell > 0 or self.eps_case > 0 or self.eps_miss > 0


@dataclass(frozen=True)
class SimConfig:
    N: int = 60
    N_v: int = 40
    p_dims: tuple = (8, 10)
    x_ranks: tuple = (3, 4)
    q_dims: tuple = (4, 8)
    rank: int = 2
    snr: float = 5.0
    seed: int = 0
    x: Contamination = field(default_factory=Contamination)
    y: Contamination = field(default_factory=Contamination)

    def __post_init__(self):
        if len(self.p_dims) != len(self.x_ranks):
            raise ValueError("one predictor rank per predictor mode")
        if any(k > p or k < 1 for k, p in zip(self.x_ranks, self.p_dims)):
            raise ValueError("predictor ranks must lie in 1..P_l")
        if self.rank < 1 or self.N < 2 or self.N_v < 1:
            raise ValueError("invalid sizes")
        if self.snr <= 0:
            raise ValueError("snr must be positive")


@dataclass(frozen=True, eq=False)
class SimData:
    X: np.ndarray
    Y: np.ndarray
    slope: KruskalOperator    # true B (intercept is zero)
    X_val: np.ndarray
    Y_val: np.ndarray
    bases: tuple              # full eigenbases of the Toeplitz matrices
    c: float                  # SNR scaling of the slope
    y_sd: np.ndarray          # per-cell sd of the clean responses
    x_sd: np.ndarray


@dataclass(frozen=True, eq=False)
class Ledger:
    """Injected indices; cells are (case, flat cell index in F order)."""

    x_cases: np.ndarray
    y_cases: np.ndarray
    x_cells: np.ndarray       # (k, 2)
    y_cells: np.ndarray
    x_missing: np.ndarray
    y_missing: np.ndarray

    @property
    def size(self) -> int:
        return sum(a.shape[0] for a in (self.x_cases, self.y_cases, self.x_cells, self.y_cells,
                                        self.x_missing, self.y_missing))


def toeplitz_eigvecs(P: int, r: float = -0.9) -> np.ndarray:
    """Eigenvectors of ``[r^|i-j|]`` by decreasing eigenvalue, sign fixed."""
    i = np.arange(P)
    S = r ** np.abs(i[:, None] - i[None, :])
    vals, vecs = np.linalg.eigh(S)
    vecs = vecs[:, np.argsort(vals)[::-1]]
    big = np.argmax(np.abs(vecs), axis=0)
    return vecs * np.sign(vecs[big, np.arange(P)])


def _tucker(cores, mats):
    out = cores
    for ell, V in enumerate(mats):
        out = np.moveaxis(np.tensordot(out, V, axes=([ell + 1], [1])), -1, ell + 1)
    return out


def _core_scale(p_dims, ranks):
    grids = np.meshgrid(*[np.arange(1, k + 1) for k in ranks], indexing="ij")
    prod_p = np.prod(np.stack(grids), axis=0)
    return (float(np.prod(p_dims)) / prod_p) ** 0.9


def _predictors(rng, n, p_dims, ranks, bases):
    scale = _core_scale(p_dims, ranks)
    U = rng.standard_normal((n,) + tuple(ranks)) * scale[None]
    V = [B[:, :k] for B, k in zip(bases, ranks)]
    return _tucker(U, V) + math.sqrt(X_NOISE_VAR) * rng.standard_normal((n,) + tuple(p_dims))


def generate(cfg: SimConfig, seed=None) -> SimData:
    """Clean training and validation data; the SNR identity holds exactly."""
    seed = cfg.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    bases = tuple(toeplitz_eigvecs(p) for p in cfg.p_dims)
    X = _predictors(rng, cfg.N, cfg.p_dims, cfg.x_ranks, bases)
    u = [rng.standard_normal((p, cfg.rank)) for p in cfg.p_dims]
    v = [rng.standard_normal((q, cfg.rank)) for q in cfg.q_dims]
    B1 = KruskalOperator(u, v)
    E = rng.standard_normal((cfg.N,) + tuple(cfg.q_dims))
    S = slope_contract(X, B1)
    c = math.sqrt(cfg.snr * np.sum(E * E) / np.sum(S * S))
    slope = KruskalOperator([c * u[0]] + u[1:], v)
    Y = c * S + E
    X_val = _predictors(rng, cfg.N_v, cfg.p_dims, cfg.x_ranks, bases)
    Y_val = slope_contract(X_val, slope) + rng.standard_normal((cfg.N_v,) + tuple(cfg.q_dims))
    return SimData(X=X, Y=Y, slope=slope, X_val=X_val, Y_val=Y_val, bases=bases, c=c,
                   y_sd=Y.std(axis=0, ddof=1), x_sd=X.std(axis=0, ddof=1))


def _outlier_core(rng, p_dims, ranks, gamma):
    idx = []
    for P, K in zip(p_dims, ranks):
        idx.append([i for i in (0, 1, K, K + 1) if i < P])
    core = np.zeros(tuple(p_dims))
    sel = np.ix_(*idx)
    core[sel] = rng.normal(gamma, 1.0, size=core[sel].shape)
    return core


def _pick_cells(rng, eligible: np.ndarray, k: int, label: str) -> np.ndarray:
    """k distinct (case, cell) pairs from a boolean (N, Qtot) eligibility map."""
    cand = np.argwhere(eligible)
    if k > cand.shape[0]:
        raise ValueError(f"cannot place {k} {label} cells in {cand.shape[0]} eligible cells")
    if k == 0:
        return np.zeros((0, 2), dtype=int)
    pick = rng.choice(cand.shape[0], size=k, replace=False)
    return cand[np.sort(pick)]


def contaminate(data: SimData, cfg: SimConfig, seed=None):
    """Inject outliers and missing cells into copies of ``data.X``, ``data.Y``.

    Casewise response outliers add N(gamma_case, 2) noise; casewise predictor
    outliers are rebuilt from a structured core in the full eigenbasis.
    Cellwise outliers avoid casewise-contaminated cases of the same side,
    X and Y casewise indices never overlap, and missing cells avoid cellwise
    outliers.

    Returns
    -------
    X, Y : contaminated copies (NaN = missing)
    ledger : Ledger
    """
    rng = np.random.default_rng(cfg.seed + 1 if seed is None else seed)
    X, Y = data.X.copy(), data.Y.copy()
    N = X.shape[0]
    n_yc = int(round(cfg.y.eps_case * N))
    n_xc = int(round(cfg.x.eps_case * N))
    if n_yc + n_xc > N:
        raise ValueError("casewise fractions exceed the number of cases")
    perm = rng.permutation(N)
    y_cases = np.sort(perm[:n_yc])
    x_cases = np.sort(perm[n_yc:n_yc + n_xc])

    # casewise
    if n_yc:
        Y[y_cases] += rng.normal(cfg.y.gamma_case, math.sqrt(2.0), size=Y[y_cases].shape)
    for n in x_cases:
        core = _outlier_core(rng, X.shape[1:], cfg.x_ranks, cfg.x.gamma_case)
        X[n] = _tucker(core[None], data.bases)[0] + \
            math.sqrt(X_NOISE_VAR) * rng.standard_normal(X.shape[1:])

    def cellwise(A, sd, cases, spec, label):
        flat = np.reshape(A, (N, -1), order="F")
        sdf = np.reshape(sd, -1, order="F")
        elig = np.ones(flat.shape, dtype=bool)
        elig[cases] = False
        k = int(round(spec.eps_cell * flat.size))
        cells = _pick_cells(rng, elig, k, label)
        if k:
            sign = rng.choice([-1.0, 1.0], size=k)
            flat[cells[:, 0], cells[:, 1]] = sign * spec.gamma_cell * sdf[cells[:, 1]]
        return np.reshape(flat, A.shape, order="F"), cells

    Y, y_cells = cellwise(Y, data.y_sd, y_cases, cfg.y, "response")
    X, x_cells = cellwise(X, data.x_sd, x_cases, cfg.x, "predictor")

    def missing(A, cells, spec, label):
        flat = np.reshape(A, (N, -1), order="F")
        elig = np.ones(flat.shape, dtype=bool)
        elig[cells[:, 0], cells[:, 1]] = False
        k = int(round(spec.eps_miss * flat.size))
        miss = _pick_cells(rng, elig, k, label)
        flat[miss[:, 0], miss[:, 1]] = np.nan
        return np.reshape(flat, A.shape, order="F"), miss

    Y, y_miss = missing(Y, y_cells, cfg.y, "missing response")
    X, x_miss = missing(X, x_cells, cfg.x, "missing predictor")
    ledger = Ledger(x_cases=x_cases, y_cases=y_cases, x_cells=x_cells, y_cells=y_cells,
                    x_missing=x_miss, y_missing=y_miss)
    return X, Y, ledger


def scenario_contamination(name: str, gamma: float, snr: float = 5.0, missing: bool = False):
    """(x, y) Contamination of a named scenario at magnitude ``gamma``.

    ``y-*`` scenarios fix severe predictor contamination and vary the
    response; ``x-*`` scenarios fix the response contamination and vary the
    predictor. ``gamma = 0`` leaves the data clean (missing cells aside).
    """
    if name not in SCENARIOS:
        raise ValueError(f"unknown scenario {name!r}")
    miss = 0.05 if missing else 0.0
    if gamma == 0:
        return Contamination(eps_miss=miss), Contamination(eps_miss=miss)
    g = float(gamma)
    if name.startswith("y-"):
        x = Contamination(eps_cell=0.05, eps_case=0.05, gamma_cell=30.0, gamma_case=10.0, eps_miss=miss)
        cell = Contamination(eps_cell=0.10, gamma_cell=4.5 * g, eps_miss=miss)
        case = Contamination(eps_case=0.10, gamma_case=0.5 * g, eps_miss=miss)
        both = Contamination(eps_cell=0.10, eps_case=0.10, gamma_cell=4.5 * g, gamma_case=0.5 * g,
                             eps_miss=miss)
        y = {"y-cell": cell, "y-case": case, "y-both": both}[name]
        return x, y
    y = Contamination(eps_cell=0.10, eps_case=0.10, gamma_cell=20.0,
                      gamma_case=3.5 if snr <= 1 else 4.0, eps_miss=miss)
    cell = Contamination(eps_cell=0.10, gamma_cell=1.5 * g, eps_miss=miss)
    case = Contamination(eps_case=0.10, gamma_case=g, eps_miss=miss)
    both = Contamination(eps_cell=0.05, eps_case=0.05, gamma_cell=1.5 * g, gamma_case=g, eps_miss=miss)
    return {"x-cell": cell, "x-case": case, "x-both": both}[name], y


# ---------------------------------------------------------------------------
# metrics


def rpe(Y_val, pred) -> float:
    """Summed Frobenius prediction errors over those about the mean response."""
    Y_val, pred = np.asarray(Y_val, float), np.asarray(pred, float)
    if Y_val.shape[0] == 0:
        raise ValueError("empty validation set")
    axes = tuple(range(1, Y_val.ndim))
    num = np.sum(np.sqrt(np.sum((Y_val - pred) ** 2, axis=axes)))
    den = np.sum(np.sqrt(np.sum((Y_val - Y_val.mean(axis=0)) ** 2, axis=axes)))
    return float(num / den)


def robmse(Y_val, pred, keep: float = 0.75) -> float:
    """Trimmed MSE keeping the ceil(keep N_v) smallest |residuals| per cell."""
    r = np.abs(np.asarray(Y_val, float) - np.asarray(pred, float))
    if r.shape[0] == 0:
        raise ValueError("empty validation set")
    H = int(math.ceil(keep * r.shape[0]))
    kept = np.sort(r.reshape(r.shape[0], -1), axis=0)[:H]
    return float(np.mean(kept ** 2))


# ---------------------------------------------------------------------------
# running methods


def _mean_impute(A):
    A = np.array(A, dtype=float)
    if np.isnan(A).any():
        mu = np.nanmean(A, axis=0)
        mu = np.where(np.isnan(mu), 0.0, mu)
        A = np.where(np.isnan(A), mu[None], A)
    return A


def fit_method(method, X, Y, cfg: SimConfig, lam, rompca_model=None, rcfg: RototConfig = RototConfig()):
    """(b0, slope) of one method on contaminated data."""
    if method == "TOT":
        m = tot_fit(_mean_impute(X), _mean_impute(Y), cfg.rank, lam, TotConfig(seed=rcfg.seed))
        return m.b0, m.slope
    m = fit_rotot(X, Y, cfg.rank, lam, x_ranks=cfg.x_ranks, rompca_model=rompca_model,
                  method=method, cfg=rcfg)
    return m.b0, m.slope


def run_replication(cfg: SimConfig, methods=METHODS, lambdas=None, rep_seed: int = 0,
                    rcfg: RototConfig = RototConfig()):
    """RPE per method on one dataset; NaN marks a failed fit."""
    lambdas = {**DEFAULT_LAMBDA, **(lambdas or {})}
    ss = np.random.SeedSequence(rep_seed)
    s_data, s_cont = (int(s.generate_state(1)[0]) for s in ss.spawn(2))
    data = generate(cfg, s_data)
    X, Y, ledger = contaminate(data, cfg, s_cont)
    rm = None
    if any(m != "TOT" for m in methods):
        try:
            rm = rompca_fit(X, cfg.x_ranks, rcfg.rompca)
        except RompcaError:
            rm = None
    out = {}
    for m in methods:
        try:
            if m != "TOT" and rm is None:
                raise FitFailure("ROMPCA failed")
            b0, slope = fit_method(m, X, Y, cfg, lambdas[m], rm, rcfg)
            out[m] = rpe(data.Y_val, b0[None] + slope_contract(data.X_val, slope))
        except FitFailure:
            out[m] = math.nan
    return out, ledger


def _rep_seed(master: int, rep: int) -> int:
    return int(np.random.SeedSequence([master, rep]).generate_state(1)[0])


def run_scenario(scenarios=SCENARIOS, methods=METHODS, gammas=(0, 2, 4, 8), replications: int = 20,
                 base: SimConfig = SimConfig(), lambdas=None, missing: bool = False,
                 rcfg: RototConfig = RototConfig(), progress=None):
    """Long-format result rows (method, scenario, snr, gamma, replication, rpe).

    Replication r uses the same clean dataset in every scenario and at every
    gamma (common random numbers), so orderings compare like with like.
    """
    rows = []
    for sc in scenarios:
        for g in gammas:
            x, y = scenario_contamination(sc, g, base.snr, missing)
            cfg = replace(base, x=x, y=y)
            for r in range(replications):
                res, _ = run_replication(cfg, methods, lambdas, _rep_seed(base.seed, r), rcfg)
                for m in methods:
                    rows.append((m, sc, base.snr, g, r, res[m]))
                if progress is not None:
                    progress(sc, g, r)
    return rows


def summary_rows(rows):
    """Median RPE per (method, scenario, snr, gamma), NaNs (failed fits) dropped."""
    groups = {}
    for m, sc, snr, g, _, v in rows:
        groups.setdefault((m, sc, snr, g), []).append(v)
    out = []
    for key, vals in groups.items():
        a = np.asarray(vals, float)
        ok = a[np.isfinite(a)]
        out.append(key + (float(np.median(ok)) if ok.size else math.nan, int(a.size - ok.size)))
    return out


def _fmt(v):
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def results_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("method", "scenario", "snr", "gamma", "replication", "rpe"))
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def summary_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("method", "scenario", "snr", "gamma", "median_rpe", "failed"))
    for row in summary_rows(rows):
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# config files and lambda pilots


def _tuple(v, cast=int):
    return tuple(cast(s) for s in v.split(",") if s.strip())


def parse_config(text: str) -> dict:
    """Flat ``key = value`` config; ``#`` starts a comment.

    Recognized keys: scenarios, methods, gammas, replications, snr, N, N_v,
    p_dims, x_ranks, q_dims, rank, seed, missing, and ``lambda.<method>``.
    """
    raw = {}
    for i, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {i}: expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        raw[k] = v
    base = SimConfig()
    sim = {}
    conv = {"N": int, "N_v": int, "rank": int, "seed": int, "snr": float,
            "p_dims": _tuple, "x_ranks": _tuple, "q_dims": _tuple}
    out = {"scenarios": SCENARIOS, "methods": METHODS, "gammas": (0.0, 2.0, 4.0, 8.0),
           "replications": 20, "missing": False, "lambdas": {}}
    for k, v in raw.items():
        if k in conv:
            sim[k] = conv[k](v)
        elif k == "scenarios":
            out[k] = _tuple(v, str.strip)
            bad = set(out[k]) - set(SCENARIOS)
            if bad:
                raise ValueError(f"unknown scenarios {sorted(bad)}")
        elif k == "methods":
            out[k] = _tuple(v, str.strip)
            bad = set(out[k]) - set(METHODS)
            if bad:
                raise ValueError(f"unknown methods {sorted(bad)}")
        elif k == "gammas":
            out[k] = _tuple(v, float)
        elif k == "replications":
            out[k] = int(v)
        elif k == "missing":
            if v.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError("missing must be a boolean")
            out[k] = v.lower() in ("true", "1", "yes")
        elif k.startswith("lambda."):
            m = k[len("lambda."):]
            if m not in METHODS:
                raise ValueError(f"unknown method in {k}")
            out["lambdas"][m] = float(v)
        else:
            raise ValueError(f"unknown key {k!r}")
    out["base"] = replace(base, **sim)
    return out


def pilot_lambda(method, grid, cfg: SimConfig = SimConfig(), replications: int = 3, seed: int = 123,
                 rcfg: RototConfig = RototConfig()):
    """Median clean-data validation RPE for each lambda in ``grid``."""
    clean = replace(cfg, x=Contamination(), y=Contamination())
    scores = {}
    for lam in grid:
        vals = []
        for r in range(replications):
            res, _ = run_replication(clean, (method,), {method: lam}, _rep_seed(seed, r), rcfg)
            vals.append(res[method])
        scores[lam] = float(np.nanmedian(vals))
    return scores

"""Robust tensor-on-tensor regression.

The fit minimizes

    L = (s2^2 / m) sum_n m_n w^x_n rho2(r_n / s2) + lambda ||B||_F^2,
    r_n^2 = (1 / m_n) sum_q mask s1_q^2 rho1(r_nq / s1_q),

over a CP slope and an intercept by IRLS, with cell scales ``s1`` and the
case scale ``s2`` fixed from a two-candidate initial fit. Predictors are the
ROMPCA-imputed tensors and ``w^x`` the ROMPCA casewise weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import blocks
from .blocks import slope_contract
from .ddc import ddc_lite
from .robust import (DEFAULT_MSCALE, MScaleConfig, NearL1Rho, QuadraticRho, TanhRho, case_devs,
                     cell_mscales, scalar_mscale, scaled_rho, scaled_weight)
from .rompca import RompcaConfig, RompcaModel, rompca_fit, rompca_project_many
from .tensor import DimensionError, KruskalOperator
from .tot import TotConfig, sweep, tot_fit

__all__ = [
    "FitFailure",
    "RototConfig",
    "RototModel",
    "WeightTensor",
    "METHODS",
    "method_rhos",
    "cell_residuals",
    "case_deviations",
    "build_weights",
    "objective",
    "first_order_conditions",
    "gradient",
    "irls",
    "irls_fit",
    "initialize",
    "fit_rotot",
    "predict",
    "cross_validate",
    "DEFAULT_LAMBDAS",
    "DEFAULT_RANKS",
]

DEFAULT_LAMBDAS = tuple(10.0 ** k for k in range(-3, 4))
DEFAULT_RANKS = (1, 2, 3, 4, 5)


class FitFailure(RuntimeError):
    """The robust fit cannot proceed (e.g. every case down-weighted)."""


def method_rhos(method: str):
    """(rho1, rho2) of the named variant."""
    t = TanhRho()
    table = {"ROTOT": (t, t), "OnlyCell": (t, QuadraticRho()), "OnlyCase": (QuadraticRho(), t)}
    if method not in table:
        raise ValueError(f"unknown method {method!r}; choose from {sorted(table)}")
    return table[method]


METHODS = ("ROTOT", "OnlyCell", "OnlyCase")


@dataclass(frozen=True)
class RototConfig:
    max_iter: int = 100
    tol: float = 1e-5
    seed: int = 0
    tau: float = 1e-5
    h_frac: float = 0.75
    case_flag_frac: float = 0.25
    tot_max_iter: int = 100
    init_max_iter: int = 100     # near-L1 start candidate
    init_tol: float = 1e-5       # both start candidates
    mscale: MScaleConfig = DEFAULT_MSCALE
    rompca: RompcaConfig = field(default_factory=RompcaConfig)


@dataclass(frozen=True, eq=False)
class WeightTensor:
    """Per-case weights ``W_n = w^x_n w^case_n w^cell_n * mask``."""

    w_x: np.ndarray      # (N,)
    w_case: np.ndarray   # (N,)
    w_cell: np.ndarray   # (N, Q...)
    mask: np.ndarray     # (N, Q...) bool

    @property
    def total(self) -> np.ndarray:
        shp = (-1,) + (1,) * (self.w_cell.ndim - 1)
        return (self.w_x.reshape(shp) * self.w_case.reshape(shp)) * self.w_cell * self.mask


@dataclass(frozen=True, eq=False)
class RototModel:
    b0: np.ndarray
    slope: KruskalOperator
    sigma1: np.ndarray
    sigma2: float
    lam: float
    rho1: object
    rho2: object
    rompca: RompcaModel | None
    w_x: np.ndarray
    fitted: np.ndarray
    trace: tuple = ()
    converged: bool = False
    method: str = "ROTOT"
    seed: int = 0
    init_candidate: int = 1
    stuck_cells: np.ndarray | None = None

    @property
    def rank(self) -> int:
        return self.slope.rank

    @property
    def n_iter(self) -> int:
        return max(len(self.trace) - 1, 0)

    @property
    def objective_value(self) -> float:
        return self.trace[-1] if self.trace else math.nan


# ---------------------------------------------------------------------------
# residuals, weights, objective


def _stack(X, Y):
    X, Y = np.asarray(X, dtype=float), np.asarray(Y, dtype=float)
    if X.shape[0] != Y.shape[0]:
        raise DimensionError(f"{X.shape[0]} predictor cases vs {Y.shape[0]} responses")
    return X, Y


def cell_residuals(b0, slope: KruskalOperator, X_imp, Y) -> np.ndarray:
    """``y - b0 - <x_imp, B>`` cellwise; NaN where the response is missing."""
    X_imp, Y = _stack(X_imp, Y)
    if X_imp.shape[1:] != slope.p_shape or Y.shape[1:] != slope.q_shape:
        raise DimensionError("data shapes do not match the slope")
    return Y - np.asarray(b0)[None] - slope_contract(X_imp, slope)


def case_deviations(res, sigma1, mask, rho1):
    """Standardized-cell casewise deviations ``r_n``.

    Returns
    -------
    r_n : (N,) with NaN for cases without observed cells
    excluded : indices of those cases
    """
    t, m_n = case_devs(res, mask, sigma1, rho1)
    return t, np.flatnonzero(m_n == 0)


def build_weights(res, sigma1, sigma2, w_x, mask, rho1, rho2) -> WeightTensor:
    r0 = np.where(mask, res, 0.0)
    w_cell = scaled_weight(rho1, r0, sigma1)
    t, m_n = case_devs(res, mask, sigma1, rho1)
    w_case = np.where(m_n > 0, scaled_weight(rho2, np.nan_to_num(t), sigma2), 0.0)
    return WeightTensor(w_x=np.asarray(w_x, float), w_case=w_case, w_cell=w_cell,
                        mask=np.asarray(mask, bool))


def objective(res, mask, sigma1, sigma2, w_x, rho1, rho2, slope, lam) -> float:
    t, m_n = case_devs(res, mask, sigma1, rho1)
    m = m_n.sum()
    ok = m_n > 0
    data = np.sum(m_n[ok] * np.asarray(w_x, float)[ok] * scaled_rho(rho2, t[ok], sigma2)) / m
    return float(data + lam * slope.norm_sq())


def first_order_conditions(X_imp, Y, b0, slope: KruskalOperator, W, lam, m=None):
    """Left-hand sides of the stationarity equations with weights ``W``.

    Returns a dict with lists ``U`` and ``V`` and the array ``B0``; all vanish
    at a fixed point of the IRLS map.
    """
    X_imp, Y = _stack(X_imp, Y)
    mask = ~np.isnan(Y)
    m = int(mask.sum()) if m is None else m
    r = np.where(mask, cell_residuals(b0, slope, X_imp, Y), 0.0)
    rw = r * W
    rwv = blocks._vec_cases(rw)
    out_u, out_v = [], []
    for ell in range(len(slope.u)):
        C = blocks.c_matrices(X_imp, slope, ell)
        g = np.einsum("nq,nqi->i", rwv, C)
        P = slope.u[ell].shape[0]
        T = blocks.gram_hadamard(slope.factors, skip=ell)
        out_u.append(np.reshape(g, (P, slope.rank), order="F") - 4 * lam * m * slope.u[ell] @ T)
    for mm in range(len(slope.v)):
        D = blocks.d_matrices(X_imp, slope, mm)
        Rm = blocks._unfold_cases(rw, mm)
        g = np.einsum("nqj,njr->qr", Rm, D)
        T = blocks.gram_hadamard(slope.factors, skip=len(slope.u) + mm)
        out_v.append(g - 4 * lam * m * slope.v[mm] @ T)
    return {"U": out_u, "V": out_v, "B0": rw.sum(axis=0)}


def gradient(X_imp, Y, b0, slope, W, lam, m=None):
    """Analytic derivatives of the objective with scales frozen.

    Equal to ``-(1 / 2m)`` times the first-order expressions.
    """
    Y = np.asarray(Y, float)
    m = int((~np.isnan(Y)).sum()) if m is None else m
    foc = first_order_conditions(X_imp, Y, b0, slope, W, lam, m)
    f = -1.0 / (2 * m)
    return {"U": [f * g for g in foc["U"]], "V": [f * g for g in foc["V"]], "B0": f * foc["B0"]}


# ---------------------------------------------------------------------------
# IRLS


@dataclass(frozen=True, eq=False)
class IrlsResult:
    b0: np.ndarray
    slope: KruskalOperator
    trace: tuple
    converged: bool
    stuck: np.ndarray


def irls(X_imp, Y, w_x, b0, slope, sigma1, sigma2, lam, rho1, rho2,
         max_iter=100, tol=1e-5) -> IrlsResult:
    """Iterate frozen-weight block updates until the relative decrease is small."""
    X_imp, Y = _stack(X_imp, Y)
    mask = ~np.isnan(Y)
    Y0 = np.where(mask, Y, 0.0)
    m = int(mask.sum())
    if m == 0:
        raise FitFailure("no observed response cells")
    mu = 4.0 * lam * m
    b0 = np.array(b0, dtype=float)

    def state(b0, slope):
        res = cell_residuals(b0, slope, X_imp, Y)
        W = build_weights(res, sigma1, sigma2, w_x, mask, rho1, rho2).total
        return W, objective(res, mask, sigma1, sigma2, w_x, rho1, rho2, slope, lam)

    W, obj = state(b0, slope)
    trace = [obj]
    converged = False
    stuck = np.zeros(Y.shape[1:], dtype=bool)
    for _ in range(max_iter):
        if not np.any(W > 0):
            raise FitFailure("all cases received zero weight")
        slope, b0, stuck = sweep(X_imp, Y0, W, b0, slope, mu)
        W, new = state(b0, slope)
        trace.append(new)
        done = obj == 0 or abs(obj - new) <= tol * abs(obj)
        obj = new
        if done:
            converged = True
            break
    return IrlsResult(b0=b0, slope=slope, trace=tuple(trace), converged=converged, stuck=stuck)


# ---------------------------------------------------------------------------
# initialization


@dataclass(frozen=True, eq=False)
class InitResult:
    b0: np.ndarray
    slope: KruskalOperator
    sigma1: np.ndarray
    sigma2: float
    chosen: int              # 1 or 2
    sigma2_candidates: tuple
    subset: np.ndarray       # I_h
    flagged_cases: np.ndarray


def _scales(b0, slope, X_imp, Y, mask, rho1, mcfg):
    res = cell_residuals(b0, slope, X_imp, Y)
    s1 = cell_mscales(np.where(mask, res, 0.0), mask, mcfg)
    t, _ = case_devs(res, mask, s1, rho1)
    return s1, scalar_mscale(t, mcfg)


def select_subset(ddc, w_x, N, h_frac=0.75, case_frac=0.25):
    """Cases for the first candidate: outside I_x and I_y, fewest flags."""
    I_x = np.flatnonzero(np.asarray(w_x) == 0)
    excluded = np.union1d(I_x, ddc.case_flags)
    avail = np.setdiff1d(np.arange(N), excluded)
    if excluded.size > case_frac * N:
        return avail, excluded
    H = int(math.ceil(h_frac * N))
    nflag = ddc.n_flagged()
    order = sorted(avail.tolist(), key=lambda n: (nflag[n], n))
    return np.array(sorted(order[:H]), dtype=int), excluded


def initialize(X_imp, Y, rank, lam, w_x=None, rho1=None, rho2=None,
               cfg: RototConfig = RototConfig()) -> InitResult:
    """Two-candidate start; returns the candidate with the smaller case scale."""
    X_imp, Y = _stack(X_imp, Y)
    t = TanhRho()
    rho1 = t if rho1 is None else rho1
    rho2 = t if rho2 is None else rho2
    N = Y.shape[0]
    w_x = np.ones(N) if w_x is None else np.asarray(w_x, float)
    mask = ~np.isnan(Y)
    Ymat = blocks._vec_cases(Y)
    ddc = ddc_lite(Ymat, case_frac=cfg.case_flag_frac)
    I_h, excluded = select_subset(ddc, w_x, N, cfg.h_frac, cfg.case_flag_frac)
    if I_h.size < max(rank, 5):
        raise FitFailure(f"only {I_h.size} usable cases for the initial fit")
    Yddc = np.reshape(ddc.imputed, Y.shape, order="F")
    m_h = I_h.size * int(np.prod(Y.shape[1:]))
    c1 = tot_fit(X_imp[I_h], Yddc[I_h], rank, 4.0 * lam * m_h,
                 TotConfig(max_iter=cfg.tot_max_iter, tol=cfg.init_tol, seed=cfg.seed))
    s1a, s2a = _scales(c1.b0, c1.slope, X_imp, Y, mask, rho1, cfg.mscale)

    l1 = NearL1Rho(cfg.tau)
    c2 = irls(X_imp, Y, w_x, c1.b0, c1.slope, s1a, 1.0, lam * cfg.tau, l1, QuadraticRho(),
              max_iter=cfg.init_max_iter, tol=cfg.init_tol)
    s1b, s2b = _scales(c2.b0, c2.slope, X_imp, Y, mask, rho1, cfg.mscale)
    if s2b < s2a:
        b0, slope, s1, s2, chosen = c2.b0, c2.slope, s1b, s2b, 2
    else:
        b0, slope, s1, s2, chosen = c1.b0, c1.slope, s1a, s2a, 1
    return InitResult(b0=b0, slope=slope, sigma1=s1, sigma2=s2, chosen=chosen,
                      sigma2_candidates=(s2a, s2b), subset=I_h, flagged_cases=excluded)


# ---------------------------------------------------------------------------
# public fitters


def irls_fit(X_imp, Y, rank, lam, *, w_x=None, method="ROTOT",
             cfg: RototConfig = RototConfig(), rompca: RompcaModel | None = None) -> RototModel:
    """Initialize and run IRLS on already-cleaned predictors."""
    X_imp, Y = _stack(X_imp, Y)
    if rank < 1:
        raise ValueError("rank must be >= 1")
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    if not np.all(np.isfinite(X_imp)):
        raise ValueError("predictors must be complete (use ROMPCA imputation)")
    rho1, rho2 = method_rhos(method)
    N = Y.shape[0]
    w_x = np.ones(N) if w_x is None else np.asarray(w_x, float)
    init = initialize(X_imp, Y, rank, lam, w_x, rho1, rho2, cfg)
    fit = irls(X_imp, Y, w_x, init.b0, init.slope, init.sigma1, init.sigma2, lam, rho1, rho2,
               max_iter=cfg.max_iter, tol=cfg.tol)
    fitted = fit.b0[None] + slope_contract(X_imp, fit.slope)
    return RototModel(b0=fit.b0, slope=fit.slope, sigma1=init.sigma1, sigma2=init.sigma2,
                      lam=float(lam), rho1=rho1, rho2=rho2, rompca=rompca, w_x=w_x,
                      fitted=fitted, trace=fit.trace, converged=fit.converged, method=method,
                      seed=cfg.seed, init_candidate=init.chosen, stuck_cells=fit.stuck)


def fit_rotot(X, Y, rank, lam, *, x_ranks=None, rompca_model: RompcaModel | None = None,
              method="ROTOT", cfg: RototConfig = RototConfig()) -> RototModel:
    """Full pipeline: ROMPCA on the predictors, then the robust regression.

    Parameters
    ----------
    X : (N, P...) predictors, NaN = missing
    Y : (N, Q...) responses, NaN = missing
    rank : CP rank R
    lam : penalty lambda
    x_ranks : ROMPCA ranks (K_1, ..., K_L); needed unless ``rompca_model`` given
    method : "ROTOT", "OnlyCell" or "OnlyCase"
    """
    X, Y = _stack(X, Y)
    if rompca_model is None:
        if x_ranks is None:
            raise ValueError("x_ranks is required when no ROMPCA model is supplied")
        rompca_model = rompca_fit(X, x_ranks, cfg.rompca)
    elif rompca_model.imputed.shape != X.shape:
        raise DimensionError("ROMPCA model was fitted on different predictors")
    return irls_fit(rompca_model.imputed, Y, rank, lam, w_x=rompca_model.case_weights,
                    method=method, cfg=cfg, rompca=rompca_model)


def predict(model: RototModel, X_star) -> np.ndarray:
    """``B0 + <X_imp, B>`` for one predictor tensor or a stack."""
    X_star = np.asarray(X_star, dtype=float)
    p = model.slope.p_shape
    single = X_star.shape == p
    if not single and X_star.shape[1:] != p:
        raise DimensionError(f"predictor shape {X_star.shape} does not match {p}")
    Xs = X_star[None] if single else X_star
    if model.rompca is not None:
        Xs = rompca_project_many(model.rompca, Xs)[1]
    elif not np.all(np.isfinite(Xs)):
        raise ValueError("model has no ROMPCA part; predictors must be complete")
    out = model.b0[None] + slope_contract(Xs, model.slope)
    return out[0] if single else out


# ---------------------------------------------------------------------------
# cross-validation


class FoldTooSmall(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class CVResult:
    best_lambda: float
    best_rank: int
    table: list            # (rank, lambda, mean validation scale, per-fold scales)


def _folds(idx, K, seed):
    rng = np.random.default_rng(seed)
    perm = idx[rng.permutation(idx.size)]
    return [np.sort(f) for f in np.array_split(perm, K)]


def cross_validate(X, Y, lambda_grid=DEFAULT_LAMBDAS, rank_grid=DEFAULT_RANKS, K: int = 5, *,
                   x_ranks=None, rompca_model: RompcaModel | None = None, method="ROTOT",
                   cfg: RototConfig = RototConfig(), X_is_imputed: bool = False) -> CVResult:
    """K-fold choice of (lambda, R) by the smallest mean validation case scale.

    Predictors and casewise weights are the full-data ROMPCA outputs and are
    not recomputed per fold; only cases with ``w^x = 1`` take part.
    """
    if K < 2:
        raise ValueError("need K >= 2 folds")
    lambda_grid = sorted(float(v) for v in lambda_grid)
    rank_grid = sorted(int(v) for v in rank_grid)
    if not lambda_grid or not rank_grid:
        raise ValueError("grids must be nonempty")
    X, Y = _stack(X, Y)
    if X_is_imputed:
        X_imp, w_x = X, np.ones(X.shape[0])
    else:
        if rompca_model is None:
            if x_ranks is None:
                raise ValueError("x_ranks is required when no ROMPCA model is supplied")
            rompca_model = rompca_fit(X, x_ranks, cfg.rompca)
        X_imp, w_x = rompca_model.imputed, rompca_model.case_weights
    rho1, _ = method_rhos(method)
    cases = np.flatnonzero(w_x == 1)
    folds = _folds(cases, K, cfg.seed)
    mask = ~np.isnan(Y)
    table = []
    best = None
    for R in rank_grid:
        for lam in lambda_grid:
            scores = []
            for k in range(K):
                val = folds[k]
                train = np.setdiff1d(cases, val)
                if train.size < max(R, 5) or val.size < 1:
                    raise FoldTooSmall(f"fold {k} leaves {train.size} training cases for rank {R}")
                fit = irls_fit(X_imp[train], Y[train], R, lam, method=method, cfg=cfg)
                res = cell_residuals(fit.b0, fit.slope, X_imp[val], Y[val])
                t, _ = case_devs(res, mask[val], fit.sigma1, rho1)
                scores.append(scalar_mscale(t, cfg.mscale))
            score = float(np.mean(scores))
            table.append((R, lam, score, tuple(scores)))
            if best is None or score < best[2]:
                best = (R, lam, score)
    return CVResult(best_lambda=best[1], best_rank=best[0], table=table)

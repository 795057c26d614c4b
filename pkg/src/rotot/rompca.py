"""Robust multilinear PCA of a stack of predictor tensors.

The fit minimizes a two-level bounded loss of the residuals
``x_n - C - [[U_n; V_1, ..., V_L]]`` by block IRLS, with cell scales and the
case scale fixed from a clipped median/SVD start. It yields a robust center,
orthonormal projections, cores, cellwise weights, imputed tensors and binary
casewise weights (deviation rule times a score-distance rule).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import reduce

import numpy as np
from scipy import special

from .blocks import pinv_sym
from .robust import (DEFAULT_MSCALE, MScaleConfig, TanhRho, case_devs, cell_mscales,
                     chi2_quantile, scalar_mscale, scaled_weight, two_level_loss,
                     two_level_weights)
from .tensor import DimensionError

__all__ = [
    "RompcaConfig",
    "RompcaModel",
    "RompcaError",
    "rompca_fit",
    "rompca_impute",
    "rompca_case_weight",
    "rompca_project_new",
    "rompca_project_many",
    "score_distance",
    "mrcd_lite",
    "mrcd_lite_fit",
]


class RompcaError(ValueError):
    """Degenerate predictor data."""


@dataclass(frozen=True)
class RompcaConfig:
    max_iter: int = 100
    tol: float = 1e-5
    init_passes: int = 3
    clip: float = 2.5
    huber_k: float = 1.5
    core_tol: float = 1e-10
    core_max_iter: int = 500
    sd_quantile: float = 0.99
    rho: TanhRho = field(default_factory=TanhRho)
    mscale: MScaleConfig = DEFAULT_MSCALE


@dataclass(frozen=True, eq=False)
class RompcaModel:
    center: np.ndarray            # (P...)
    projections: tuple            # V_l, (P_l, K_l), orthonormal columns
    cell_scales: np.ndarray       # (P...), 0 = sentinel
    case_scale: float
    cores: np.ndarray             # (N, K...)
    cell_weights: np.ndarray      # (N, P...), w1 * mask
    case_dev: np.ndarray          # (N,) t_n
    case_weights_dev: np.ndarray  # (N,) 0/1 deviation rule
    core_weights: np.ndarray      # (N,) 0/1 score-distance rule
    core_cov: np.ndarray          # (K, K)
    score_distances: np.ndarray   # (N,)
    imputed: np.ndarray           # (N, P...)
    trace: tuple = ()
    converged: bool = False
    cfg: RompcaConfig = field(default_factory=RompcaConfig)

    @property
    def ranks(self) -> tuple:
        return tuple(v.shape[1] for v in self.projections)

    @property
    def p_shape(self) -> tuple:
        return tuple(v.shape[0] for v in self.projections)

    @property
    def case_weights(self) -> np.ndarray:
        return self.case_weights_dev * self.core_weights

    @property
    def sd_cutoff(self) -> float:
        return float(np.sqrt(chi2_quantile(self.cfg.sd_quantile, int(np.prod(self.ranks)))))

    def reconstruction(self, cores=None) -> np.ndarray:
        cores = self.cores if cores is None else cores
        return self.center + _tucker(cores, self.projections)


# ---------------------------------------------------------------------------
# multilinear helpers (leading case axis)


def _tucker(cores, mats, skip=None):
    """``cores x_1 M_1 ... x_L M_L`` per case, skipping mode ``skip``."""
    T = cores
    for s, M in enumerate(mats):
        if s == skip:
            continue
        T = np.moveaxis(np.tensordot(T, M, axes=([s + 1], [1])), -1, s + 1)
    return T


def _unfold(A, mode):
    k = A.ndim - 1
    perm = [0, mode + 1] + [i + 1 for i in range(k) if i != mode]
    return np.reshape(np.transpose(A, perm), (A.shape[0], A.shape[mode + 1], -1), order="F")


def _basis(mats):
    # vec([[U; V_1..V_L]]) = (V_L kron ... kron V_1) vec(U)
    return reduce(lambda acc, V: np.kron(V, acc), mats[1:], mats[0])


def _flat(A):
    return np.reshape(A, (A.shape[0], -1), order="F")


def _unflat(A, shape):
    return np.reshape(A, (A.shape[0],) + tuple(shape), order="F")


# ---------------------------------------------------------------------------
# core fitting (also used for new cases)


def _wls_cores(B, xc, w, prev):
    """Batched weighted LS ``argmin_u sum_p w_p (xc_p - (B u)_p)^2``."""
    A = np.einsum("pk,np,pl->nkl", B, w, B, optimize=True)
    b = np.einsum("pk,np->nk", B, w * xc, optimize=True)
    out = prev.copy()
    for n in range(xc.shape[0]):
        if w[n].sum() > 0:
            out[n] = pinv_sym(A[n]) @ b[n]
    return out


def _irls_cores(B, xc, mask, s1, wfun, u0, tol, max_iter):
    u = u0
    active = np.ones(xc.shape[0], dtype=bool)
    for _ in range(max_iter):
        r = xc - u @ B.T
        w = np.where(mask, wfun(r), 0.0)
        new = u.copy()
        new[active] = _wls_cores(B, xc[active], w[active], u[active])
        step = np.abs(new - u).max(axis=1)
        size = 1.0 + np.abs(new).max(axis=1)
        u = new
        active &= step > tol * size
        if not active.any():
            break
    return u


def _project_flat(B, xc, mask, s1, cfg):
    """Robust cores for centered flat predictors ``xc`` (zeros at missing).

    LS start, convex Huber IRLS, then tanh IRLS, all on the core only.
    """
    s1f = s1.ravel(order="F")
    w0 = mask.astype(float)
    u = _wls_cores(B, xc, w0, np.zeros((xc.shape[0], B.shape[1])))
    k = cfg.huber_k

    def huber(r):
        a = np.abs(np.where(s1f > 0, r / np.where(s1f > 0, s1f, 1.0), 0.0))
        with np.errstate(divide="ignore"):
            return np.where(a <= k, 1.0, k / a)

    u = _irls_cores(B, xc, mask, s1f, huber, u, cfg.core_tol, cfg.core_max_iter)

    def tanh_w(r):
        return scaled_weight(cfg.rho, r, s1f)

    return _irls_cores(B, xc, mask, s1f, tanh_w, u, cfg.core_tol, cfg.core_max_iter)


# ---------------------------------------------------------------------------
# robust covariance of the cores


def _regularize(S, cap):
    p = S.shape[0]
    tr = np.trace(S)
    target = (tr / p) if tr > 0 else 1.0
    for rho in (0.0, 0.01, 0.05, 0.1, 0.25):
        M = (1 - rho) * S + rho * target * np.eye(p)
        ev = np.linalg.eigvalsh(M)
        if ev[0] > 0 and ev[-1] / ev[0] <= cap:
            return M, rho
    # the largest blend is always well conditioned unless S is degenerate
    return 0.75 * S + 0.25 * target * np.eye(p), 0.25


def _mahal2(Z, mu, S):
    D = Z - mu
    return np.einsum("ij,ij->i", D @ np.linalg.inv(S), D)


def mrcd_lite_fit(Z, *, h_frac: float = 0.75, cap: float = 1e6, max_reweight: int = 20,
                  rw_quantile: float = 0.999):
    """Deterministic regularized robust location and scatter.

    Returns
    -------
    loc : (p,)
    cov : (p, p) symmetric positive definite
    reg : blending weight used in the final step
    """
    Z = np.asarray(Z, dtype=float)
    if Z.ndim != 2 or Z.shape[0] < 2:
        raise ValueError("mrcd_lite needs at least two rows")
    n, p = Z.shape
    med = np.median(Z, axis=0)
    s = 1.4826 * np.median(np.abs(Z - med), axis=0)
    alt = Z.std(axis=0)
    s = np.where(s > 0, s, np.where(alt > 0, alt, 1.0))
    d0 = np.sum(((Z - med) / s) ** 2, axis=1)
    h = min(n, max(int(np.ceil(h_frac * n)), 2))
    H = np.argsort(d0, kind="stable")[:h]
    mu = Z[H].mean(axis=0)
    S, _ = _regularize(np.cov(Z[H], rowvar=False, bias=True).reshape(p, p), cap)
    d2 = _mahal2(Z, mu, S)
    med_d2 = np.median(d2)
    if med_d2 > 0:
        S = S * (med_d2 / chi2_quantile(0.5, p))
        d2 = _mahal2(Z, mu, S)
    # reweighting, repeated until the retained set stops changing
    q = chi2_quantile(rw_quantile, p)
    trunc = rw_quantile / special.gammainc((p + 2) / 2.0, q / 2.0)
    keep = d2 <= q
    for _ in range(max_reweight):
        if keep.sum() < 2:
            break
        mu = Z[keep].mean(axis=0)
        S = np.cov(Z[keep], rowvar=False, bias=True).reshape(p, p) * trunc
        Sr, _ = _regularize(S, cap)
        d2 = _mahal2(Z, mu, Sr)
        med_d2 = np.median(d2)
        if med_d2 > 0:
            # small-sample consistency: in-sample distances run short
            S = S * max(1.0, med_d2 / chi2_quantile(0.5, p))
            Sr, _ = _regularize(S, cap)
            d2 = _mahal2(Z, mu, Sr)
        new = d2 <= q
        if np.array_equal(new, keep):
            break
        keep = new
    cov, reg = _regularize(S, cap)
    return mu, 0.5 * (cov + cov.T), reg


def mrcd_lite(Z, **kw) -> np.ndarray:
    """Regularized robust covariance matrix of the rows of ``Z``."""
    return mrcd_lite_fit(Z, **kw)[1]


def _sd(cores_flat, cov):
    L = np.linalg.cholesky(cov)
    sol = np.linalg.solve(L, cores_flat.T)
    return np.sqrt(np.sum(sol * sol, axis=0))


def score_distance(model: RompcaModel, core) -> float:
    """``sqrt(vec(U)^T Sigma_u^{-1} vec(U))``."""
    core = np.asarray(core, dtype=float)
    if core.shape != model.ranks:
        raise DimensionError(f"core shape {core.shape} != ranks {model.ranks}")
    return float(_sd(core.ravel(order="F")[None], model.core_cov)[0])


# ---------------------------------------------------------------------------
# fitting


def _objective(xv, mask, center, B, cores, s1, s2, rho):
    r = xv - center - cores @ B.T
    return two_level_loss(r, mask, s1, s2, rho, rho)


def _initial(xv, mask, shape, ranks, cfg):
    with np.errstate(all="ignore"):
        center = np.nanmedian(np.where(mask, xv, np.nan), axis=0)
    recon = np.zeros_like(xv)
    mats = None
    for _ in range(max(cfg.init_passes, 1)):
        res = np.where(mask, xv - center - recon, np.nan)
        with np.errstate(all="ignore"):
            s = 1.4826 * np.nanmedian(np.abs(res), axis=0)
        s = np.where(np.isfinite(s), s, 0.0)
        lim = cfg.clip * s
        clipped = np.where(mask, np.clip(np.nan_to_num(res), -lim, lim), 0.0)
        Z = _unflat(recon + clipped, shape)
        mats = []
        for ell, K in enumerate(ranks):
            M = _unfold(Z, ell)
            G = np.einsum("npj,nqj->pq", M, M)
            lam, Q = np.linalg.eigh(0.5 * (G + G.T))
            mats.append(Q[:, ::-1][:, :K].copy())
        B = _basis(mats)
        cores = _flat(Z) @ B
        recon = cores @ B.T
        with np.errstate(all="ignore"):
            shift = np.nanmedian(np.where(mask, xv - center - recon, np.nan), axis=0)
        center = center + np.nan_to_num(shift)
    return center, mats, cores


def _sweep(xv, mask, shape, center, mats, cores, s1, s2, rho):
    """One IRLS pass: cores, projections (with QR), center; never ascends."""
    B = _basis(mats)
    cur = _objective(xv, mask, center, B, cores, s1, s2, rho)

    # cores: per-case inner loss, cell weights only
    r = xv - center - cores @ B.T
    w_cell, _ = two_level_weights(r, mask, s1, s2, rho, rho)
    xc = np.where(mask, xv - center, 0.0)
    cand = _wls_cores(B, xc, w_cell, cores)
    val = _objective(xv, mask, center, B, cand, s1, s2, rho)
    if val <= cur:
        cores, cur = cand, val

    ranks = tuple(V.shape[1] for V in mats)
    for ell in range(len(mats)):
        r = xv - center - cores @ B.T
        w_cell, w_case = two_level_weights(r, mask, s1, s2, rho, rho)
        W = _unflat(w_cell * w_case[:, None], shape)
        Xc = _unflat(xc, shape)
        U = _unflat(cores, ranks)
        G = _unfold(_tucker(U, mats, skip=ell), ell)          # (N, K_l, J)
        Wl, Xl = _unfold(W, ell), _unfold(Xc, ell)            # (N, P_l, J)
        A = np.einsum("npj,nkj,nlj->pkl", Wl, G, G, optimize=True)
        b = np.einsum("npj,nkj->pk", Wl * Xl, G, optimize=True)
        V = np.stack([pinv_sym(A[p]) @ b[p] for p in range(A.shape[0])])
        Qm, Rm = np.linalg.qr(V)
        new_mats = list(mats)
        new_mats[ell] = Qm
        U_new = np.moveaxis(np.tensordot(U, Rm, axes=([ell + 1], [1])), -1, ell + 1)
        Bn = _basis(new_mats)
        cores_n = _flat(U_new)
        val = _objective(xv, mask, center, Bn, cores_n, s1, s2, rho)
        if val <= cur:
            mats, B, cores, cur = new_mats, Bn, cores_n, val

    r = xv - center - cores @ B.T
    w_cell, w_case = two_level_weights(r, mask, s1, s2, rho, rho)
    W = w_cell * w_case[:, None]
    den = W.sum(axis=0)
    num = (W * np.where(mask, xv - cores @ B.T, 0.0)).sum(axis=0)
    cand = np.where(den > 0, num / np.where(den > 0, den, 1.0), center)
    val = _objective(xv, mask, cand, B, cores, s1, s2, rho)
    if val <= cur:
        center, cur = cand, val
    return center, mats, cores, cur


def _sign_fix(mats, cores_t):
    mats = [V.copy() for V in mats]
    for ell, V in enumerate(mats):
        idx = np.argmax(np.abs(V), axis=0)
        sgn = np.where(V[idx, np.arange(V.shape[1])] < 0, -1.0, 1.0)
        mats[ell] = V * sgn
        shp = [1] * cores_t.ndim
        shp[ell + 1] = -1
        cores_t = cores_t * sgn.reshape(shp)
    return mats, cores_t


def rompca_fit(X, ranks, cfg: RompcaConfig = RompcaConfig()) -> RompcaModel:
    """Fit the robust multilinear PCA model.

    Parameters
    ----------
    X : array (N, P_1, ..., P_L); NaN marks missing cells
    ranks : (K_1, ..., K_L) with K_l <= P_l
    """
    X = np.asarray(X, dtype=float)
    if X.ndim < 2:
        raise DimensionError("expected a stack of predictor tensors")
    N, shape = X.shape[0], X.shape[1:]
    ranks = tuple(int(k) for k in ranks)
    if len(ranks) != len(shape) or any(not 1 <= k <= p for k, p in zip(ranks, shape)):
        raise DimensionError(f"ranks {ranks} invalid for predictor shape {shape}")
    if N < 2:
        raise RompcaError("ROMPCA needs at least two cases")
    if np.isinf(X).any():
        raise RompcaError("infinite predictor values")
    maskt = ~np.isnan(X)
    if not maskt.any(axis=0).all():
        raise RompcaError("a predictor cell is missing in every case")
    if not maskt.reshape(N, -1).any(axis=1).all():
        raise RompcaError("a predictor tensor is entirely missing")
    xv = np.where(maskt, X, 0.0).reshape(N, -1, order="F")
    mask = maskt.reshape(N, -1, order="F")
    rho = cfg.rho

    center, mats, cores = _initial(xv, mask, shape, ranks, cfg)
    B = _basis(mats)
    r0 = xv - center - cores @ B.T
    s1 = cell_mscales(np.where(mask, r0, 0.0), mask, cfg.mscale)
    t0, _ = case_devs(r0, mask, s1, rho)
    s2 = scalar_mscale(t0, cfg.mscale)

    obj = _objective(xv, mask, center, B, cores, s1, s2, rho)
    trace = [obj]
    converged = False
    for _ in range(cfg.max_iter):
        center, mats, cores, new = _sweep(xv, mask, shape, center, mats, cores, s1, s2, rho)
        trace.append(new)
        done = obj == 0 or abs(obj - new) <= cfg.tol * abs(obj)
        obj = new
        if done:
            converged = True
            break

    mats, cores_t = _sign_fix(mats, _unflat(cores, ranks))
    B = _basis(mats)
    loc, _, _ = mrcd_lite_fit(_flat(cores_t))
    center = center + B @ loc
    s1t = s1.reshape(shape, order="F")
    proto = dict(center=center.reshape(shape, order="F"), projections=tuple(mats),
                 cell_scales=s1t, case_scale=float(s2), cfg=cfg)
    xc = np.where(mask, xv - center, 0.0)
    cores = _project_flat(B, xc, mask, s1t, cfg)
    cov = mrcd_lite(cores)
    r = xc - cores @ B.T
    w_cell, _ = two_level_weights(r, mask, s1, s2, rho, rho)
    t, _ = case_devs(r, mask, s1, rho)
    wdev = _dev_rule(t, s2, rho)
    sd = _sd(cores, cov)
    cut = np.sqrt(chi2_quantile(cfg.sd_quantile, int(np.prod(ranks))))
    wu = (sd <= cut).astype(int)
    recon = center + cores @ B.T
    imp = recon + w_cell * (np.where(mask, xv, recon) - recon)
    return RompcaModel(cores=_unflat(cores, ranks), cell_weights=_unflat(w_cell, shape),
                       case_dev=t, case_weights_dev=wdev, core_weights=wu, core_cov=cov,
                       score_distances=sd, imputed=_unflat(imp, shape), trace=tuple(trace),
                       converged=converged, **proto)


def _dev_rule(t, s2, rho):
    if s2 > 0:
        return (t / s2 < rho.c).astype(int)
    return (t == 0).astype(int)


# ---------------------------------------------------------------------------
# per-case access and new cases


def rompca_impute(model: RompcaModel, n: int) -> np.ndarray:
    """Imputed predictor tensor of training case ``n``."""
    return model.imputed[n]


def rompca_case_weight(model: RompcaModel, n: int) -> int:
    return int(model.case_weights[n])


def rompca_project_many(model: RompcaModel, X):
    """Cores, imputed tensors, cell weights and score distances for new cases."""
    X = np.asarray(X, dtype=float)
    shape = model.p_shape
    if X.shape[1:] != shape:
        raise DimensionError(f"predictor shape {X.shape[1:]} != {shape}")
    N = X.shape[0]
    maskt = ~np.isnan(X)
    mask = maskt.reshape(N, -1, order="F")
    if not mask.any(axis=1).all():
        raise RompcaError("a new predictor tensor is entirely missing")
    xv = np.where(maskt, X, 0.0).reshape(N, -1, order="F")
    B = _basis(model.projections)
    c = model.center.ravel(order="F")
    xc = np.where(mask, xv - c, 0.0)
    cores = _project_flat(B, xc, mask, model.cell_scales, model.cfg)
    s1 = model.cell_scales.ravel(order="F")
    r = xc - cores @ B.T
    w = np.where(mask, scaled_weight(model.cfg.rho, r, s1), 0.0)
    recon = c + cores @ B.T
    imp = recon + w * (np.where(mask, xv, recon) - recon)
    sd = _sd(cores, model.core_cov)
    return (_unflat(cores, model.ranks), _unflat(imp, shape), _unflat(w, shape), sd)


def rompca_project_new(model: RompcaModel, X_star):
    """Core, imputed tensor and cell weights of one new predictor tensor."""
    X_star = np.asarray(X_star, dtype=float)
    if X_star.shape != model.p_shape:
        raise DimensionError(f"predictor shape {X_star.shape} != {model.p_shape}")
    core, imp, w, _ = rompca_project_many(model, X_star[None])
    return core[0], imp[0], w[0]

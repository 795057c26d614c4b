"""Weighted ridge block updates shared by the TOT and ROTOT fitters.

Stacked data use a leading case axis: ``X`` has shape ``(N, P_1, ..., P_L)``
and ``Y`` has shape ``(N, Q_1, ..., Q_M)``. Weights ``W`` have the shape of
``Y`` and are zero at missing response cells; callers pass responses with
missing cells already replaced by zero.

With weights frozen, every update below is the exact minimizer over its
block of

    sum_n || W_n^(1/2) * (Y_n - B0 - <X_n, B>) ||_F^2 + mu ||B||_F^2,

which is the surrogate (1/4m) sum W r^2 + lambda ||B||^2 multiplied by 4m
when ``mu = 4 lambda m``.
"""

from __future__ import annotations

import functools

import numpy as np

from .tensor import KruskalOperator, outer_columns

__all__ = [
    "pinv_sym",
    "gram_hadamard",
    "slope_contract",
    "build_C",
    "build_D",
    "c_matrices",
    "d_matrices",
    "update_U",
    "update_V",
    "update_B0",
    "surrogate",
]

_L = "abcdefghijklmnopqstuvwxyz"  # einsum letters; 'r' reserved for rank


def pinv_sym(A: np.ndarray, rcond: float = 1e-10) -> np.ndarray:
    """Moore-Penrose inverse of a symmetric PSD matrix via ``eigh``."""
    A = 0.5 * (A + A.T)
    lam, Q = np.linalg.eigh(A)
    top = lam.max() if lam.size else 0.0
    if top <= 0:
        return np.zeros_like(A)
    keep = lam > rcond * top
    inv = np.where(keep, 1.0 / np.where(keep, lam, 1.0), 0.0)
    return (Q * inv) @ Q.T


def gram_hadamard(factors, skip: int | None = None) -> np.ndarray:
    """Hadamard product of the ``F^T F`` Grams, leaving out ``factors[skip]``."""
    R = factors[0].shape[1]
    G = np.ones((R, R))
    for i, f in enumerate(factors):
        if i != skip:
            G = G * (f.T @ f)
    return G


def _case_scores(X: np.ndarray, u, skip: int | None = None) -> np.ndarray:
    """Contract every predictor mode except ``skip`` with its U factor.

    Returns shape ``(N, R)`` when ``skip`` is None, else ``(N, P_skip, R)``.
    """
    L = X.ndim - 1
    xs = "n" + _L[:L]
    ops, subs = [X], [xs]
    for s in range(L):
        if s != skip:
            ops.append(u[s])
            subs.append(_L[s] + "r")
    if len(ops) == 1:
        # single predictor mode and it is skipped: a[n, p, r] = x[n, p]
        return np.repeat(X[..., None], u[0].shape[1], axis=-1)
    out = "n" + ("" if skip is None else _L[skip]) + "r"
    expr = ",".join(subs) + "->" + out
    return np.einsum(expr, *ops, optimize=_path(expr, tuple(o.shape for o in ops)))


@functools.lru_cache(maxsize=256)
def _path(expr, shapes):
    # contraction order depends only on shapes, so plan once
    dummies = [np.empty(s) for s in shapes]
    return np.einsum_path(expr, *dummies, optimize="greedy")[0]


def _vprod(v, skip: int | None = None) -> np.ndarray:
    """Khatri-Rao rows ``prod_m V_m[q_m, r]`` as a ``(Q_rest, R)`` matrix."""
    fs = [f for i, f in enumerate(v) if i != skip]
    R = v[0].shape[1]
    if not fs:
        return np.ones((1, R))
    t = outer_columns(fs)
    return np.reshape(t, (-1, R), order="F")


def slope_contract(X: np.ndarray, slope: KruskalOperator) -> np.ndarray:
    """``<X_n, B>`` for every case, shape ``(N, Q_1, ..., Q_M)``."""
    s = _case_scores(X, slope.u)                      # (N, R)
    kr = _vprod(slope.v)                              # (Q, R)
    out = s @ kr.T                                    # (N, Q)
    return np.reshape(out, (X.shape[0],) + slope.q_shape, order="F")


def _vec_cases(A: np.ndarray) -> np.ndarray:
    """Row n = vec(A[n]) with first-mode-fastest order."""
    return np.reshape(A, (A.shape[0], -1), order="F")


def c_matrices(X: np.ndarray, slope: KruskalOperator, ell: int) -> np.ndarray:
    """Matricized C tensors, shape ``(N, Q, P_ell * R)``.

    Entry ``[n, q, p + P_ell r]`` is ``a[n, p, r] * prod_m v^(m)_{q_m r}`` so
    that ``vec(<X_n, B>) = C_n vec(U_ell)``.
    """
    a = _case_scores(X, slope.u, skip=ell)            # (N, P_ell, R)
    kr = _vprod(slope.v)                              # (Q, R)
    N, P, R = a.shape
    C = a[:, None, :, :] * kr[None, :, None, :]       # (N, Q, P, R)
    return np.reshape(C, (N, kr.shape[0], P * R), order="F")


def d_matrices(X: np.ndarray, slope: KruskalOperator, m: int) -> np.ndarray:
    """Matricized D tensors, shape ``(N, Q_rest, R)``.

    Rows run over the response modes other than ``m`` (first fastest), so
    that the mode-``m`` unfolding of ``<X_n, B>`` equals ``V_m D_n^T``.
    """
    s = _case_scores(X, slope.u)                      # (N, R)
    kr = _vprod(slope.v, skip=m)                      # (Q_rest, R)
    return s[:, None, :] * kr[None, :, :]


def build_C(x_n, slope: KruskalOperator, ell: int) -> np.ndarray:
    """C tensor of one case, shape ``(P_ell, R, Q_1, ..., Q_M)``."""
    x = np.asarray(x_n, dtype=float)[None]
    a = _case_scores(x, slope.u, skip=ell)[0]         # (P_ell, R)
    vp = outer_columns(slope.v)                       # (Q..., R)
    vp = np.moveaxis(vp, -1, 0)                       # (R, Q...)
    return a[(...,) + (None,) * len(slope.v)] * vp[None]


def build_D(x_n, slope: KruskalOperator, m: int) -> np.ndarray:
    """D tensor of one case, shape ``(Q_1, .., Q_{m-1}, R, Q_{m+1}, .., Q_M)``."""
    x = np.asarray(x_n, dtype=float)[None]
    s = _case_scores(x, slope.u)[0]                   # (R,)
    rest = [f for i, f in enumerate(slope.v) if i != m]
    if rest:
        t = outer_columns(rest) * s                   # (Q_rest..., R)
    else:
        t = s.copy()
    return np.moveaxis(t, -1, m)


def _unfold_cases(A: np.ndarray, mode: int) -> np.ndarray:
    """Per-case mode unfolding: ``(N, Q_mode, Q_rest)``."""
    k = A.ndim - 1
    perm = [0, mode + 1] + [i + 1 for i in range(k) if i != mode]
    B = np.transpose(A, perm)
    return np.reshape(B, (A.shape[0], A.shape[mode + 1], -1), order="F")


def update_U(X, Yc, W, slope: KruskalOperator, ell: int, mu: float) -> np.ndarray:
    """Exact weighted ridge update of ``U_ell``.

    Parameters
    ----------
    X : (N, P...) imputed predictors
    Yc : (N, Q...) responses minus intercept, zero at missing cells
    W : (N, Q...) weights, zero at missing cells
    mu : penalty multiplier (``4 lambda m`` for ROTOT, ``lambda`` for TOT)
    """
    C = c_matrices(X, slope, ell)                     # (N, Q, PR)
    w = _vec_cases(W)
    y = _vec_cases(Yc)
    Cf = C.reshape(-1, C.shape[2])
    Cw = Cf * w.reshape(-1, 1)
    A = Cw.T @ Cf
    b = Cw.T @ y.reshape(-1)
    T = gram_hadamard(slope.factors, skip=ell)
    P = slope.u[ell].shape[0]
    A = A + mu * np.kron(T, np.eye(P))
    u = pinv_sym(A) @ b
    return np.reshape(u, (P, slope.rank), order="F")


def update_V(X, Yc, W, slope: KruskalOperator, m: int, mu: float) -> np.ndarray:
    """Exact weighted ridge update of ``V_m``, solved one row at a time.

    The normal equations are block diagonal over the rows of ``V_m``: row q
    solves ``(sum_n D_n^T diag(w_nq) D_n + mu T) v_q = sum_n D_n^T (w_nq y_nq)``.
    """
    D = d_matrices(X, slope, m)                       # (N, J, R)
    Wm = _unfold_cases(W, m)                          # (N, Q_m, J)
    Ym = _unfold_cases(Yc, m)
    R = D.shape[2]
    Qm = Wm.shape[1]
    Wf = np.transpose(Wm, (1, 0, 2)).reshape(Qm, -1)          # (Q_m, N J)
    YWf = np.transpose(Wm * Ym, (1, 0, 2)).reshape(Qm, -1)
    Df = D.reshape(-1, R)
    DD = (Df[:, :, None] * Df[:, None, :]).reshape(-1, R * R)
    A = (Wf @ DD).reshape(Qm, R, R)
    b = YWf @ Df
    T = gram_hadamard(slope.factors, skip=len(slope.u) + m)
    out = np.empty((slope.v[m].shape[0], slope.rank))
    for q in range(out.shape[0]):
        out[q] = pinv_sym(A[q] + mu * T) @ b[q]
    return out


def update_B0(X, Y0, W, slope: KruskalOperator, b0_prev):
    """Weighted mean update of the intercept.

    Returns
    -------
    b0 : ndarray, shape of a response
    stuck : bool ndarray
        Cells whose total weight is zero; they keep ``b0_prev``.
    """
    fit = slope_contract(X, slope)
    den = W.sum(axis=0)
    num = (W * (Y0 - fit)).sum(axis=0)
    stuck = den <= 0
    b0 = np.where(stuck, b0_prev, num / np.where(stuck, 1.0, den))
    return b0, stuck


def surrogate(X, Y0, W, b0, slope: KruskalOperator, mu: float) -> float:
    """``sum W (Y - B0 - <X, B>)^2 + mu ||B||^2`` with ``Y0`` zero at missing."""
    r = Y0 - b0[None] - slope_contract(X, slope)
    return float(np.sum(W * r * r) + mu * slope.norm_sq())

"""Classical penalized tensor-on-tensor regression by alternating least squares."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import blocks
from .tensor import DimensionError, KruskalOperator

__all__ = ["TotConfig", "TotModel", "tot_fit", "tot_predict", "tot_objective", "random_slope"]


@dataclass(frozen=True)
class TotConfig:
    max_iter: int = 100
    tol: float = 1e-5
    seed: int = 0


@dataclass(frozen=True, eq=False)
class TotModel:
    b0: np.ndarray
    slope: KruskalOperator
    lam: float
    trace: tuple = field(default=())
    converged: bool = False

    @property
    def rank(self) -> int:
        return self.slope.rank

    @property
    def n_iter(self) -> int:
        return max(len(self.trace) - 1, 0)


def random_slope(p_shape, q_shape, rank: int, rng) -> KruskalOperator:
    """Standard normal CP factors, column balanced."""
    u = [rng.standard_normal((p, rank)) for p in p_shape]
    v = [rng.standard_normal((q, rank)) for q in q_shape]
    return KruskalOperator(u, v).balanced()


def tot_objective(X, Y, b0, slope: KruskalOperator, lam: float) -> float:
    """``sum_n ||Y_n - B0 - <X_n, B>||_F^2 + lam ||B||_F^2``."""
    X, Y = np.asarray(X, float), np.asarray(Y, float)
    return blocks.surrogate(X, Y, np.ones_like(Y), np.asarray(b0), slope, lam)


def _check(X, Y):
    X, Y = np.asarray(X, float), np.asarray(Y, float)
    if X.ndim < 2 or Y.ndim < 2:
        raise DimensionError("expected stacked cases with a leading case axis")
    if X.shape[0] != Y.shape[0]:
        raise DimensionError("X and Y case counts differ")
    if X.shape[0] < 1:
        raise ValueError("empty data")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
        raise ValueError("tot_fit needs complete data; impute missing cells first")
    return X, Y


def tot_fit(X, Y, rank: int, lam: float, cfg: TotConfig = TotConfig(), *,
            init: tuple | None = None) -> TotModel:
    """Fit ``Y_n = B0 + <X_n, B> + E_n`` with a rank-``rank`` CP slope.

    Parameters
    ----------
    X : array (N, P_1, ..., P_L)
    Y : array (N, Q_1, ..., Q_M), complete
    rank : CP rank R >= 1
    lam : ridge penalty on ``||B||_F^2``
    init : optional ``(b0, KruskalOperator)`` start; otherwise random
        factors from ``cfg.seed`` and the per-cell mean as intercept.
    """
    X, Y = _check(X, Y)
    if rank < 1:
        raise ValueError("rank must be >= 1")
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    if init is None:
        rng = np.random.default_rng(cfg.seed)
        slope = random_slope(X.shape[1:], Y.shape[1:], rank, rng)
        b0 = Y.mean(axis=0)
    else:
        b0, slope = np.array(init[0], dtype=float), init[1]
    W = np.ones_like(Y)
    return _als(X, Y, W, b0, slope, lam, cfg)


def _als(X, Y, W, b0, slope, mu, cfg):
    obj = blocks.surrogate(X, Y, W, b0, slope, mu)
    trace = [obj]
    converged = False
    for _ in range(cfg.max_iter):
        slope, b0, _ = sweep(X, Y, W, b0, slope, mu)
        new = blocks.surrogate(X, Y, W, b0, slope, mu)
        trace.append(new)
        done = obj == 0 or abs(obj - new) <= cfg.tol * abs(obj)
        obj = new
        if done:
            converged = True
            break
    return TotModel(b0=b0, slope=slope, lam=mu, trace=tuple(trace), converged=converged)


def sweep(X, Y0, W, b0, slope: KruskalOperator, mu: float):
    """One Gauss-Seidel pass U_1..U_L, V_1..V_M, B0, then balancing.

    A block whose solution does not lower the frozen-weight surrogate is
    left unchanged, so the pass never increases it.

    Returns
    -------
    slope, b0, stuck
    """
    cur = blocks.surrogate(X, Y0, W, b0, slope, mu)
    Yc = Y0 - b0[None]
    for ell in range(len(slope.u)):
        u = list(slope.u)
        u[ell] = blocks.update_U(X, Yc, W, slope, ell, mu)
        cand = slope.replace(u=u)
        val = blocks.surrogate(X, Y0, W, b0, cand, mu)
        if val <= cur:
            slope, cur = cand, val
    for m in range(len(slope.v)):
        v = list(slope.v)
        v[m] = blocks.update_V(X, Yc, W, slope, m, mu)
        cand = slope.replace(v=v)
        val = blocks.surrogate(X, Y0, W, b0, cand, mu)
        if val <= cur:
            slope, cur = cand, val
    nb0, stuck = blocks.update_B0(X, Y0, W, slope, b0)
    if blocks.surrogate(X, Y0, W, nb0, slope, mu) <= cur:
        b0 = nb0
    return slope.balanced(), b0, stuck


def tot_predict(model, X) -> np.ndarray:
    """``B0 + <X, B>`` for one case (shape P) or a stack (N, P...)."""
    X = np.asarray(X, float)
    p = model.slope.p_shape
    single = X.shape == p
    if not single and X.shape[1:] != p:
        raise DimensionError(f"predictor shape {X.shape} does not match {p}")
    Xs = X[None] if single else X
    out = model.b0[None] + blocks.slope_contract(Xs, model.slope)
    return out[0] if single else out

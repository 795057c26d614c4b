"""Simplified deviating-cell detector for a cases-by-cells response matrix.

Columnwise robust z-scores flag cells; flagged and missing cells are
imputed from the most rank-correlated other column by a Theil-Sen line,
else by the column median. Cases with more than a quarter of their observed
cells flagged form the suspicious case set.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from .robust import chi2_quantile

__all__ = ["DDCResult", "ddc_lite"]

MAD_CONSISTENCY = 1.4826


@dataclass(frozen=True, eq=False)
class DDCResult:
    flags: np.ndarray          # (N, Q) bool, deviating observed cells
    missing: np.ndarray        # (N, Q) bool
    imputed: np.ndarray        # (N, Q) data with flagged/missing cells replaced
    case_flags: np.ndarray     # sorted case indices (I_y)
    z: np.ndarray              # robust z-scores (NaN at missing)

    def n_flagged(self) -> np.ndarray:
        """Flagged plus missing cells per case."""
        return (self.flags | self.missing).sum(axis=1)


def _spearman(a, b) -> float:
    if a.size < 3 or np.ptp(a) == 0 or np.ptp(b) == 0:
        return 0.0
    r = stats.spearmanr(a, b).statistic
    return 0.0 if not np.isfinite(r) else float(r)


def ddc_lite(Y, *, quantile: float = 0.99, case_frac: float = 0.25) -> DDCResult:
    """Flag and impute deviating cells of ``Y`` (N x Q, NaN = missing)."""
    Y = np.asarray(Y, dtype=float)
    if Y.ndim != 2 or Y.shape[0] < 2:
        raise ValueError("ddc_lite needs an N x Q matrix with N >= 2")
    N, Q = Y.shape
    miss = np.isnan(Y)
    cut = np.sqrt(chi2_quantile(quantile, 1))
    with np.errstate(all="ignore"):
        med = np.nanmedian(Y, axis=0)
        mad = MAD_CONSISTENCY * np.nanmedian(np.abs(Y - med), axis=0)
    med = np.where(np.isnan(med), 0.0, med)
    z = np.zeros_like(Y)
    ok = np.isfinite(mad) & (mad > 0)
    z[:, ok] = (Y[:, ok] - med[ok]) / mad[ok]
    z[miss] = np.nan
    flags = np.zeros_like(miss)
    flags[~miss] = np.abs(z[~miss]) > cut

    good = ~(flags | miss)
    # best partner column by |Spearman| over jointly clean rows
    corr = np.zeros((Q, Q))
    for j in range(Q):
        for k in range(j + 1, Q):
            rows = good[:, j] & good[:, k]
            corr[j, k] = corr[k, j] = abs(_spearman(Y[rows, j], Y[rows, k]))
    imputed = Y.copy()
    for j in range(Q):
        bad = ~good[:, j]
        if not bad.any():
            continue
        fill = np.full(int(bad.sum()), med[j])
        if Q > 1 and corr[j].max() > 0:
            k = int(np.argmax(corr[j]))
            rows = good[:, j] & good[:, k]
            if rows.sum() >= 3 and np.ptp(Y[rows, k]) > 0:
                slope, icpt = stats.theilslopes(Y[rows, j], Y[rows, k])[:2]
                src = Y[bad, k]
                usable = good[bad, k]
                fill = np.where(usable, icpt + slope * np.where(usable, src, 0.0), fill)
        imputed[bad, j] = fill
    nobs = (~miss).sum(axis=1)
    frac = np.where(nobs > 0, flags.sum(axis=1) / np.maximum(nobs, 1), 0.0)
    case_flags = np.flatnonzero(frac > case_frac)
    return DDCResult(flags=flags, missing=miss, imputed=imputed, case_flags=case_flags, z=z)

"""Bounded loss functions, weights and M-scales.

Each rho class is vectorized over numpy arrays and exposes ``rho``, ``psi``
and ``weight`` (``psi(z) / z`` with ``weight(0) = psi'(0)``), the supremum
``sup`` and ``quad_coef = rho''(0) / 2``. The last one is what a cell with a
zero (sentinel) scale contributes per squared residual.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, special

__all__ = [
    "TanhRho",
    "QuadraticRho",
    "NearL1Rho",
    "MScaleConfig",
    "mscale",
    "mscale_info",
    "tanh_rho",
    "tanh_psi",
    "weight",
    "near_l1_rho",
    "chi2_quantile",
    "scaled_rho",
    "scaled_weight",
]


@dataclass(frozen=True)
class TanhRho:
    """Hyperbolic tangent rho with knots ``b < c``.

    ``q1`` defaults to ``b / tanh(q2 (c - b))``, the value that makes psi
    continuous at ``b``; it agrees with the usual published constant
    1.540793 to seven digits.
    """

    b: float = 1.5
    c: float = 4.0
    q2: float = 0.8622731
    q1: float | None = None

    def __post_init__(self):
        if not 0 < self.b < self.c:
            raise ValueError("need 0 < b < c")
        if self.q2 <= 0:
            raise ValueError("q2 must be positive")
        if self.q1 is None:
            object.__setattr__(self, "q1", self.b / math.tanh(self.q2 * (self.c - self.b)))
        elif self.q1 <= 0:
            raise ValueError("q1 must be positive")

    @property
    def d(self) -> float:
        b, c, q1, q2 = self.b, self.c, self.q1, self.q2
        return b * b / 2 + (q1 / q2) * _log_cosh(q2 * (c - b))

    sup = d
    quad_coef = 0.5
    name = "tanh"

    def rho(self, z):
        a = np.abs(np.asarray(z, dtype=float))
        mid = self.d - (self.q1 / self.q2) * _log_cosh(self.q2 * (self.c - np.clip(a, self.b, self.c)))
        out = np.where(a <= self.b, 0.5 * a * a, np.where(a >= self.c, self.d, mid))
        return out if out.ndim else float(out)

    def psi(self, z):
        z = np.asarray(z, dtype=float)
        a = np.abs(z)
        mid = self.q1 * np.tanh(self.q2 * (self.c - np.clip(a, self.b, self.c))) * np.sign(z)
        out = np.where(a <= self.b, z, np.where(a >= self.c, 0.0, mid))
        return out if out.ndim else float(out)

    def weight(self, z):
        z = np.asarray(z, dtype=float)
        a = np.abs(z)
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            mid = self.q1 * np.tanh(self.q2 * (self.c - np.clip(a, self.b, self.c))) / a
        out = np.where(a <= self.b, 1.0, np.where(a >= self.c, 0.0, mid))
        return out if out.ndim else float(out)

    def to_dict(self) -> dict:
        return {"name": self.name, "b": self.b, "c": self.c, "q1": self.q1, "q2": self.q2}


@dataclass(frozen=True)
class QuadraticRho:
    """``rho(z) = z**2``; turns either ROTOT loss into least squares."""

    sup = math.inf
    quad_coef = 1.0
    name = "quadratic"

    def rho(self, z):
        z = np.asarray(z, dtype=float)
        out = z * z
        return out if out.ndim else float(out)

    def psi(self, z):
        z = np.asarray(z, dtype=float)
        out = 2.0 * z
        return out if out.ndim else float(out)

    def weight(self, z):
        z = np.asarray(z, dtype=float)
        out = np.full(z.shape, 2.0)
        return out if out.ndim else float(out)

    def to_dict(self) -> dict:
        return {"name": self.name}


@dataclass(frozen=True)
class NearL1Rho:
    """Huber-type rho with a tiny knee ``tau``: nearly the absolute loss."""

    tau: float = 1e-5

    sup = math.inf
    quad_coef = 0.5
    name = "near_l1"

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")

    def rho(self, z):
        a = np.abs(np.asarray(z, dtype=float))
        t = self.tau
        out = np.where(a <= t, 0.5 * a * a, t * (a - 0.5 * t))
        return out if out.ndim else float(out)

    def psi(self, z):
        z = np.asarray(z, dtype=float)
        out = np.clip(z, -self.tau, self.tau)
        return out if out.ndim else float(out)

    def weight(self, z):
        a = np.abs(np.asarray(z, dtype=float))
        with np.errstate(divide="ignore"):
            out = np.where(a <= self.tau, 1.0, self.tau / a)
        return out if out.ndim else float(out)

    def to_dict(self) -> dict:
        return {"name": self.name, "tau": self.tau}


def _log_cosh(x):
    # log(cosh(x)) without overflow
    x = np.abs(x)
    return x + np.log1p(np.exp(-2.0 * x)) - math.log(2.0)


def rho_from_dict(d: dict):
    name = d.get("name")
    if name == "tanh":
        return TanhRho(b=d["b"], c=d["c"], q2=d["q2"], q1=d["q1"])
    if name == "quadratic":
        return QuadraticRho()
    if name == "near_l1":
        return NearL1Rho(tau=d["tau"])
    raise ValueError(f"unknown rho {name!r}")


DEFAULT_TANH = TanhRho()


def tanh_rho(z, p: TanhRho = DEFAULT_TANH):
    return p.rho(z)


def tanh_psi(z, p: TanhRho = DEFAULT_TANH):
    return p.psi(z)


def weight(z, p: TanhRho = DEFAULT_TANH):
    return p.weight(z)


def near_l1_rho(z, tau: float = 1e-5):
    return NearL1Rho(tau).rho(z)


def scaled_rho(rho, r, s):
    """``s**2 rho(r / s)`` with the zero-scale sentinel giving ``quad_coef r**2``."""
    r = np.asarray(r, dtype=float)
    s = np.broadcast_to(np.asarray(s, dtype=float), r.shape)
    pos = s > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(pos, r / np.where(pos, s, 1.0), 0.0)
        return np.where(pos, s * s * rho.rho(z), rho.quad_coef * r * r)


def scaled_weight(rho, r, s):
    """``w(r / s)``; zero-scale sentinel cells get ``w(0)`` (full weight)."""
    r = np.asarray(r, dtype=float)
    s = np.broadcast_to(np.asarray(s, dtype=float), r.shape)
    pos = s > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(pos, r / np.where(pos, s, 1.0), 0.0)
    return rho.weight(z)


# ---------------------------------------------------------------------------
# M-scale


@dataclass(frozen=True)
class MScaleConfig:
    """Settings of the M-scale equation ``mean rho(z / (a sigma)) = delta``."""

    delta: float = 1.88
    a: float = 0.3431
    rho: TanhRho = field(default_factory=TanhRho)
    rtol: float = 1e-12
    max_iter: int = 500

    def __post_init__(self):
        if not 0 < self.delta < self.rho.sup:
            raise ValueError("delta must lie in (0, sup rho)")
        if not self.a > 0:
            raise ValueError("a must be positive")


DEFAULT_MSCALE = MScaleConfig()


def mscale_info(samples, cfg: MScaleConfig = DEFAULT_MSCALE) -> tuple[float, bool]:
    """M-scale and a flag telling whether the sample imploded.

    Returns
    -------
    sigma : float
    imploded : bool
        True when too many zeros make the equation unsolvable for sigma > 0;
        sigma is then 0.
    """
    z = np.abs(np.asarray(samples, dtype=float).ravel())
    if z.size == 0:
        raise ValueError("mscale needs a nonempty sample")
    if not np.all(np.isfinite(z)):
        raise ValueError("mscale input contains non-finite values")
    nz = np.count_nonzero(z)
    if nz == 0:
        return 0.0, False
    if nz / z.size * cfg.rho.sup <= cfg.delta:
        return 0.0, True
    s = float(np.median(z))
    if s == 0.0:
        s = float(np.mean(z))
    rho, a, delta = cfg.rho, cfg.a, cfg.delta

    def g(sig):
        return float(np.mean(rho.rho(z / (a * sig)))) - delta

    lo, hi = 1e-12 * s, 1e6 * s
    # widen if the sample is extreme (only matters for pathological spreads)
    while g(lo) < 0:
        lo *= 1e-6
    while g(hi) > 0:
        hi *= 1e6
    sig = optimize.brentq(g, lo, hi, xtol=1e-300, rtol=max(cfg.rtol, 4 * np.finfo(float).eps),
                          maxiter=cfg.max_iter)
    return float(sig), False


def mscale(samples, cfg: MScaleConfig = DEFAULT_MSCALE) -> float:
    """Robust scale solving ``(1/n) sum rho(z_i / (a sigma)) = delta``."""
    return mscale_info(samples, cfg)[0]


# ---------------------------------------------------------------------------
# chi-square quantiles


def chi2_quantile(p: float, df: float, tol: float = 1e-10) -> float:
    """Quantile of the chi-square law by bisection on its CDF."""
    if not 0 < p < 1:
        raise ValueError("p must lie in (0, 1)")
    if df <= 0:
        raise ValueError("df must be positive")
    k = df / 2.0

    def cdf(x):
        return special.gammainc(k, x / 2.0)

    lo, hi = 0.0, max(1.0, df)
    while cdf(hi) < p:
        lo, hi = hi, 2.0 * hi
    while hi - lo > tol * max(1.0, hi):
        mid = 0.5 * (lo + hi)
        if cdf(mid) < p:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


# ---------------------------------------------------------------------------
# two-level (cell within case) losses shared by ROMPCA and ROTOT


def case_devs(r, mask, s1, rho1):
    """Casewise deviations from cellwise residuals.

    Parameters
    ----------
    r : (N, ...) residuals; values at unobserved cells are ignored
    mask : (N, ...) bool, observed cells
    s1 : (...) per-cell scales, 0 = sentinel
    rho1 : cell loss

    Returns
    -------
    t : (N,) ``sqrt(mean over observed cells of s1^2 rho1(r / s1))``, NaN
        for cases without observed cells
    m_n : (N,) observed-cell counts
    """
    r = np.where(mask, r, 0.0)
    N = r.shape[0]
    cell = np.where(mask, scaled_rho(rho1, r, s1), 0.0).reshape(N, -1)
    m_n = mask.reshape(N, -1).sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        t = np.sqrt(cell.sum(axis=1) / m_n)
    return np.where(m_n > 0, t, np.nan), m_n


def two_level_loss(r, mask, s1, s2, rho1, rho2, case_w=None) -> float:
    """``(s2^2 / m) sum_n m_n w_n rho2(t_n / s2)`` (the data term of both fits)."""
    t, m_n = case_devs(r, mask, s1, rho1)
    w = np.ones_like(t) if case_w is None else np.asarray(case_w, float)
    m = m_n.sum()
    if m == 0:
        return 0.0
    ok = m_n > 0
    term = scaled_rho(rho2, t[ok], s2)
    return float(np.sum(m_n[ok] * w[ok] * term) / m)


def two_level_weights(r, mask, s1, s2, rho1, rho2):
    """Cell weights ``w1(r / s1)`` (0 at missing) and case weights ``w2(t / s2)``."""
    r0 = np.where(mask, r, 0.0)
    w_cell = np.where(mask, scaled_weight(rho1, r0, s1), 0.0)
    t, m_n = case_devs(r, mask, s1, rho1)
    w_case = np.where(m_n > 0, scaled_weight(rho2, np.nan_to_num(t), s2), 0.0)
    return w_cell, w_case


def cell_mscales(r, mask, cfg: MScaleConfig = DEFAULT_MSCALE, rel_floor: float = 1e-9,
                 ref: float | None = None):
    """Per-cell M-scales over cases (axis 0); cells below the floor become 0.

    The floor is ``rel_floor`` times ``ref`` (default: the RMS of all observed
    residuals), so cells that are zero to working precision get the sentinel
    scale.
    """
    r = np.asarray(r, float)
    flat_r = r.reshape(r.shape[0], -1)
    flat_m = np.asarray(mask, bool).reshape(r.shape[0], -1)
    obs = flat_r[flat_m]
    rms = float(np.sqrt(np.mean(obs * obs))) if obs.size else 0.0
    rms = rms if ref is None else ref
    out = np.zeros(flat_r.shape[1])
    for j in range(flat_r.shape[1]):
        col = flat_r[flat_m[:, j], j]
        if col.size:
            out[j] = mscale(col, cfg)
    out[out <= rel_floor * rms] = 0.0
    return out.reshape(r.shape[1:])


def scalar_mscale(t, cfg: MScaleConfig = DEFAULT_MSCALE, ref: float | None = None,
                  rel_floor: float = 1e-9) -> float:
    """M-scale of case deviations with the same numerical-zero floor."""
    t = np.asarray(t, float)
    t = t[np.isfinite(t)]
    if t.size == 0:
        return 0.0
    s = mscale(t, cfg)
    ref = float(np.sqrt(np.mean(t * t))) if ref is None else ref
    return 0.0 if s <= rel_floor * ref else s

"""Outlier diagnostics of a fitted robust regression.

Final residuals are standardized by fresh per-cell M-scales, cases are
summarized by their residual distance, standardized deviation, percentage of
outlying cells (POC) and predictor score distance, and every case receives one
of five labels. Two SVG figures (a residual cellmap and an outlier map) and a
CSV table are produced from the report.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from .estimator import RototModel, method_rhos
from .robust import DEFAULT_MSCALE, MScaleConfig, case_devs, cell_mscales, chi2_quantile, scalar_mscale
from .rompca import rompca_project_many
from .blocks import slope_contract
from .tensor import DimensionError

__all__ = [
    "LABELS",
    "DiagnosticsReport",
    "build_report",
    "poc",
    "cutoff_cell",
    "cutoff_sd",
    "cutoff_sim",
    "classify",
    "standardize",
    "report_csv",
    "write_report_csv",
    "cell_color",
    "render_cellmap",
    "render_outlier_map",
]

LABELS = ("regular", "vertical-casewise", "vertical-cellwise", "good-leverage", "bad-leverage")
CSV_COLUMNS = ("case", "resid_dist", "score_dist", "poc", "std_case_dev", "label")


def cutoff_cell(quantile: float = 0.998) -> float:
    return math.sqrt(chi2_quantile(quantile, 1))


def cutoff_sd(ranks, quantile: float = 0.99) -> float:
    return math.sqrt(chi2_quantile(quantile, int(np.prod(ranks))))


def poc(std_residuals, c_cell: float | None = None) -> float:
    """Fraction of observed cells with ``|r| > c_cell`` (NaN cells ignored)."""
    c = cutoff_cell() if c_cell is None else c_cell
    a = np.asarray(std_residuals, dtype=float)
    obs = ~np.isnan(a)
    if not obs.any():
        return 0.0
    return float(np.count_nonzero(np.abs(a[obs]) > c) / obs.sum())


def standardize(res, sigma):
    """``res / sigma`` cellwise; cells with the 0 sentinel scale read 0."""
    res = np.asarray(res, float)
    pos = np.broadcast_to(np.asarray(sigma) > 0, res.shape)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(pos, res / np.where(pos, sigma, 1.0), 0.0)
    return np.where(np.isnan(res), np.nan, out)


def classify(resid_dist, score_dist, std_dev, c_res, c_sd, c_case) -> list[str]:
    """One label per case; total over every combination of the three tests."""
    out = []
    for rd, sd, td in zip(np.ravel(resid_dist), np.ravel(score_dist), np.ravel(std_dev)):
        far_x = bool(sd > c_sd)
        far_y = bool(rd > c_res)
        if far_x:
            out.append("bad-leverage" if far_y else "good-leverage")
        elif not far_y:
            out.append("regular")
        else:
            out.append("vertical-casewise" if td > c_case else "vertical-cellwise")
    return out


@dataclass(frozen=True, eq=False)
class DiagnosticsReport:
    std_residuals: np.ndarray   # (N, Q...) NaN at missing
    sigma1: np.ndarray          # (Q...)
    sigma2: float
    std_case_dev: np.ndarray    # (N,)
    resid_dist: np.ndarray      # (N,)
    score_dist: np.ndarray      # (N,), NaN when the model has no predictor part
    poc: np.ndarray             # (N,)
    c_cell: float
    c_case: float
    c_sd: float
    c_res: float
    labels: tuple
    mask: np.ndarray

    @property
    def n_cases(self) -> int:
        return self.std_residuals.shape[0]

    def flagged_cells(self) -> np.ndarray:
        return np.abs(np.nan_to_num(self.std_residuals)) > self.c_cell


def _case_stats(R, mask, c_cell):
    N = R.shape[0]
    flat = R.reshape(N, -1)
    m = mask.reshape(N, -1)
    dist = np.sqrt(np.sum(np.where(m, flat, 0.0) ** 2, axis=1))
    n_obs = m.sum(axis=1)
    out = np.where(m, np.abs(np.nan_to_num(flat)) > c_cell, False).sum(axis=1)
    return dist, np.where(n_obs > 0, out / np.maximum(n_obs, 1), 0.0)


def cutoff_sim(sigma1, sigma2, mask, rho1=None, *, B: int = 500, seed: int = 0,
               noise_scale: float = 1.0, quantile: float = 0.99,
               mcfg: MScaleConfig = DEFAULT_MSCALE):
    """Simulated (c_res, c_case).

    Each replication draws Gaussian residuals with cell sd ``noise_scale *
    sigma1`` on the observed pattern ``mask``, standardizes them with the
    fitted ``sigma1`` and ``sigma2``, and records residual distances and
    standardized case deviations. The cutoffs are the empirical quantiles
    over all replications and cases.
    """
    rho1 = method_rhos("ROTOT")[0] if rho1 is None else rho1
    mask = np.asarray(mask, bool)
    sigma1 = np.asarray(sigma1, float)
    rng = np.random.default_rng(seed)
    dists, devs = [], []
    for _ in range(B):
        E = noise_scale * sigma1[None] * rng.standard_normal(mask.shape)
        E = np.where(mask, E, np.nan)
        R = standardize(E, sigma1)
        d, _ = _case_stats(R, mask, math.inf)
        t, m_n = case_devs(E, mask, sigma1, rho1)
        dists.append(d[m_n > 0])
        if sigma2 > 0:
            devs.append(t[m_n > 0] / sigma2)
        else:
            devs.append(np.where(t[m_n > 0] > 0, np.inf, 0.0))
    return (float(np.quantile(np.concatenate(dists), quantile)),
            float(np.quantile(np.concatenate(devs), quantile)))


def build_report(model: RototModel, X, Y, *, B: int = 500, seed: int = 0,
                 mcfg: MScaleConfig = DEFAULT_MSCALE) -> DiagnosticsReport:
    """Standardized residuals, distances, cutoffs and labels for (X, Y)."""
    X, Y = np.asarray(X, float), np.asarray(Y, float)
    if X.shape[0] != Y.shape[0]:
        raise DimensionError("case counts differ")
    if Y.shape[1:] != model.slope.q_shape or X.shape[1:] != model.slope.p_shape:
        raise DimensionError("data shapes do not match the model")
    mask = ~np.isnan(Y)
    if model.rompca is not None:
        _, X_imp, _, sd = rompca_project_many(model.rompca, X)
        c_sd = model.rompca.sd_cutoff
    else:
        X_imp, sd = X, np.full(X.shape[0], np.nan)
        c_sd = math.inf
    res = Y - model.b0[None] - slope_contract(X_imp, model.slope)
    # numerical zero is judged against the response scale, so a perfect fit
    # gets sentinel scales instead of standardized rounding noise
    yc = np.where(mask, Y - model.b0[None], 0.0)
    ref = float(np.sqrt(np.sum(yc * yc) / max(mask.sum(), 1)))
    s1 = cell_mscales(np.where(mask, res, 0.0), mask, mcfg, ref=ref)
    R = standardize(res, s1)
    t, _ = case_devs(res, mask, s1, model.rho1)
    s2 = scalar_mscale(t, mcfg, ref=ref)
    with np.errstate(divide="ignore", invalid="ignore"):
        std_dev = t / s2 if s2 > 0 else np.where(t > 1e-9 * ref, np.inf, 0.0)
    c_cell = cutoff_cell()
    dist, pc = _case_stats(R, mask, c_cell)
    c_res, c_case = cutoff_sim(s1, s2, mask, model.rho1, B=B, seed=seed, mcfg=mcfg)
    labels = classify(dist, np.nan_to_num(sd, nan=0.0), np.nan_to_num(std_dev), c_res, c_sd, c_case)
    return DiagnosticsReport(std_residuals=R, sigma1=s1, sigma2=s2, std_case_dev=std_dev,
                             resid_dist=dist, score_dist=sd, poc=pc, c_cell=c_cell, c_case=c_case,
                             c_sd=c_sd, c_res=c_res, labels=tuple(labels), mask=mask)


# ---------------------------------------------------------------------------
# tables


def _fmt(v) -> str:
    v = float(v)
    if math.isnan(v):
        return "nan"
    return repr(v)


def report_csv(report: DiagnosticsReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for n in range(report.n_cases):
        w.writerow([n + 1, _fmt(report.resid_dist[n]), _fmt(report.score_dist[n]), _fmt(report.poc[n]),
                    _fmt(report.std_case_dev[n]), report.labels[n]])
    return buf.getvalue()


def write_report_csv(report: DiagnosticsReport, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(report_csv(report))


# ---------------------------------------------------------------------------
# figures

YELLOW = (255, 255, 0)
ORANGE, RED = (255, 165, 0), (255, 0, 0)
PURPLE, BLUE = (128, 0, 128), (0, 0, 255)


def _hex(rgb) -> str:
    return "#%02x%02x%02x" % tuple(int(round(c)) for c in rgb)


def _mix(a, b, t):
    return tuple(x + (y - x) * t for x, y in zip(a, b))


def cell_color(value: float, c_cell: float) -> str:
    """Cellmap color of one standardized residual.

    White for missing, yellow for ``|r| <= c_cell``, and beyond it a linear
    ramp over ``[c_cell, 2 c_cell]`` (orange to red above, purple to blue below).
    """
    if value is None or math.isnan(value):
        return "#ffffff"
    a = abs(value)
    if a <= c_cell:
        return _hex(YELLOW)
    t = min((a - c_cell) / c_cell, 1.0)
    return _hex(_mix(ORANGE, RED, t) if value > 0 else _mix(PURPLE, BLUE, t))


def _esc(text) -> str:
    return str(text).replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;").replace('"', "&quot;")


def _num(v: float) -> str:
    return f"{v:.2f}".rstrip("0").rstrip(".")


def render_cellmap(report: DiagnosticsReport, path=None, *, cases=None, cell: int = 12,
                   title: str = "Residual cellmap") -> str:
    """SVG cellmap: one row per case, one column per response cell.

    Cells run in first-mode-fastest order; a vertical separator is drawn
    between consecutive slices of the first response mode (every ``Q_1``
    cells). Returns the SVG text and writes it when ``path`` is given.
    """
    R = report.std_residuals
    N = R.shape[0]
    cases = list(range(N)) if cases is None else [int(c) for c in cases]
    flat = R.reshape(N, -1, order="F")
    Qtot = flat.shape[1]
    slice_len = R.shape[1] if R.ndim > 1 else Qtot
    left, top = 50, 40
    W = left + Qtot * cell + 20
    H = top + len(cases) * cell + 30
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{W}" height="{H}" '
        f'viewBox="0 0 {W} {H}" font-family="Arial,sans-serif">',
        f'<rect width="{W}" height="{H}" fill="white"/>',
        f'<text x="{W / 2:.1f}" y="20" text-anchor="middle" font-size="14">{_esc(title)}</text>',
    ]
    for i, n in enumerate(cases):
        y = top + i * cell
        parts.append(f'<text x="{left - 4}" y="{y + cell - 2}" text-anchor="end" font-size="9">{n + 1}</text>')
        for j in range(Qtot):
            col = cell_color(float(flat[n, j]), report.c_cell)
            parts.append(f'<rect class="cell" x="{left + j * cell}" y="{y}" width="{cell}" height="{cell}" '
                         f'fill="{col}" stroke="#999999" stroke-width="0.3"/>')
    bottom = top + len(cases) * cell
    for j in range(slice_len, Qtot, slice_len):
        x = left + j * cell
        parts.append(f'<line x1="{x}" y1="{top}" x2="{x}" y2="{bottom}" stroke="black" stroke-width="1.5"/>')
    parts.append(f'<text x="{left}" y="{bottom + 18}" font-size="10">cells beyond '
                 f'{_num(report.c_cell)}: orange-red (positive) / purple-blue (negative); missing white</text>')
    parts.append("</svg>")
    svg = "\n".join(parts) + "\n"
    if path is not None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(svg)
    return svg


def _gray(dev, c_case) -> str:
    # light for small deviations, black at or beyond twice the cutoff
    if not np.isfinite(dev):
        return "#000000"
    t = min(max(dev, 0.0) / (2 * c_case), 1.0) if c_case > 0 else 1.0
    g = 220 * (1 - t)
    return _hex((g, g, g))


def render_outlier_map(report: DiagnosticsReport, path=None, *, width: int = 520, height: int = 420,
                       title: str = "Outlier map") -> str:
    """SVG scatter of residual distance against score distance.

    Point area grows with POC, fill darkens with the standardized case
    deviation, and red lines mark ``c_SD`` (vertical) and ``c_res``.
    """
    sd = np.nan_to_num(report.score_dist, nan=0.0)
    rd = report.resid_dist
    ml, mr, mt, mb = 60, 20, 40, 50
    cw, ch = width - ml - mr, height - mt - mb
    fin_sd = sd[np.isfinite(sd)]
    xmax = max(float(fin_sd.max()) if fin_sd.size else 1.0,
               report.c_sd if np.isfinite(report.c_sd) else 0.0) * 1.1 or 1.0
    ymax = max(float(rd.max()) if rd.size else 1.0, report.c_res) * 1.1 or 1.0

    def px(v):
        return ml + cw * min(v, xmax) / xmax

    def py(v):
        return mt + ch * (1 - min(v, ymax) / ymax)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="Arial,sans-serif">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="22" text-anchor="middle" font-size="14">{_esc(title)}</text>',
        f'<line x1="{ml}" y1="{mt + ch}" x2="{ml + cw}" y2="{mt + ch}" stroke="black"/>',
        f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{mt + ch}" stroke="black"/>',
    ]
    for k in range(6):
        xv, yv = xmax * k / 5, ymax * k / 5
        parts.append(f'<text x="{px(xv):.1f}" y="{mt + ch + 16}" text-anchor="middle" font-size="9">{_num(xv)}</text>')
        parts.append(f'<text x="{ml - 6}" y="{py(yv) + 3:.1f}" text-anchor="end" font-size="9">{_num(yv)}</text>')
    parts.append(f'<text x="{ml + cw / 2:.1f}" y="{height - 10}" text-anchor="middle" font-size="11">score distance</text>')
    parts.append(f'<text x="14" y="{mt + ch / 2:.1f}" text-anchor="middle" font-size="11" '
                 f'transform="rotate(-90 14 {mt + ch / 2:.1f})">residual distance</text>')
    if np.isfinite(report.c_sd):
        x = px(report.c_sd)
        parts.append(f'<line class="cutoff-sd" x1="{x:.1f}" y1="{mt}" x2="{x:.1f}" y2="{mt + ch}" stroke="red"/>')
    y = py(report.c_res)
    parts.append(f'<line class="cutoff-res" x1="{ml}" y1="{y:.1f}" x2="{ml + cw}" y2="{y:.1f}" stroke="red"/>')
    for n in range(report.n_cases):
        r = math.sqrt(4.0 + 120.0 * float(report.poc[n]))
        parts.append(f'<circle data-case="{n + 1}" cx="{px(float(sd[n])):.2f}" cy="{py(float(rd[n])):.2f}" '
                     f'r="{r:.2f}" fill="{_gray(float(report.std_case_dev[n]), report.c_case)}" '
                     f'stroke="black" stroke-width="0.5"/>')
    parts.append("</svg>")
    svg = "\n".join(parts) + "\n"
    if path is not None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(svg)
    return svg

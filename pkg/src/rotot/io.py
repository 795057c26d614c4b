"""Binary tensor files and JSON model files.

``.ten``  : b"TEN1", u8 order L, L x u32 dims, prod(dims) f64 values in
            first-mode-fastest order; NaN marks a missing cell.
``.tens`` : b"TENS", u32 case count N, one shared header (u8 L, L x u32
            dims), then N value blocks as in ``.ten``.

All integers and floats are little endian. Model files are JSON text with
floats written by ``repr`` (shortest round-trip form) and NaN as null.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict

import numpy as np

from .estimator import RototModel
from .robust import MScaleConfig, rho_from_dict
from .rompca import RompcaConfig, RompcaModel
from .tensor import KruskalOperator
from .tot import TotModel

__all__ = [
    "MalformedFile",
    "read_ten",
    "write_ten",
    "read_tens",
    "write_tens",
    "read_tensor_stack",
    "model_to_dict",
    "model_from_dict",
    "save_model",
    "load_model",
    "FORMAT_VERSION",
]

FORMAT_VERSION = 1
_F8 = np.dtype("<f8")


class MalformedFile(ValueError):
    """A tensor or model file does not follow its format."""


def _header(dims) -> bytes:
    dims = [int(d) for d in dims]
    if len(dims) > 255 or any(d < 0 or d >= 2 ** 32 for d in dims):
        raise ValueError("dimensions do not fit the header")
    return struct.pack("<B", len(dims)) + struct.pack(f"<{len(dims)}I", *dims)


def _read_header(buf: bytes, off: int):
    if len(buf) < off + 1:
        raise MalformedFile("truncated header")
    L = buf[off]
    off += 1
    if len(buf) < off + 4 * L:
        raise MalformedFile("truncated dimension list")
    dims = struct.unpack_from(f"<{L}I", buf, off)
    return tuple(dims), off + 4 * L


def _values(a) -> bytes:
    return np.asarray(a, dtype=_F8).ravel(order="F").tobytes()


def write_ten(path, a) -> None:
    a = np.asarray(a, dtype=float)
    with open(path, "wb") as fh:
        fh.write(b"TEN1" + _header(a.shape) + _values(a))


def _parse_ten(buf: bytes) -> np.ndarray:
    if buf[:4] != b"TEN1":
        raise MalformedFile("bad magic, expected TEN1")
    dims, off = _read_header(buf, 4)
    n = int(np.prod(dims)) if dims else 1
    if len(buf) != off + 8 * n:
        raise MalformedFile(f"expected {n} values, found {(len(buf) - off) / 8:g}")
    vals = np.frombuffer(buf, dtype=_F8, count=n, offset=off)
    return np.reshape(vals.astype(float), dims, order="F")


def read_ten(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return _parse_ten(fh.read())


def write_tens(path, stack) -> None:
    """Write cases along axis 0 of ``stack``."""
    stack = np.asarray(stack, dtype=float)
    if stack.ndim < 1:
        raise ValueError("a stack needs a leading case axis")
    N = stack.shape[0]
    with open(path, "wb") as fh:
        fh.write(b"TENS" + struct.pack("<I", N) + _header(stack.shape[1:]))
        for n in range(N):
            fh.write(_values(stack[n]))


def _parse_tens(buf: bytes) -> np.ndarray:
    if len(buf) < 8:
        raise MalformedFile("truncated stack header")
    (N,) = struct.unpack_from("<I", buf, 4)
    dims, off = _read_header(buf, 8)
    n = int(np.prod(dims)) if dims else 1
    if len(buf) != off + 8 * n * N:
        raise MalformedFile(f"expected {N} blocks of {n} values")
    vals = np.frombuffer(buf, dtype=_F8, count=n * N, offset=off).astype(float)
    blocks = vals.reshape(N, n)
    return np.stack([np.reshape(b, dims, order="F") for b in blocks]) if N else np.zeros((0,) + dims)


def read_tens(path) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != b"TENS":
        raise MalformedFile("bad magic, expected TENS")
    return _parse_tens(buf)


def read_tensor_stack(path) -> np.ndarray:
    """A ``.tens`` stack, or a ``.ten`` whose first mode indexes cases."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] == b"TENS":
        return _parse_tens(buf)
    if buf[:4] == b"TEN1":
        a = _parse_ten(buf)
        if a.ndim < 2:
            raise MalformedFile("a single-tensor file needs a leading case mode")
        return a
    raise MalformedFile("unknown magic")


# ---------------------------------------------------------------------------
# models


def _arr(a):
    a = np.asarray(a, dtype=float)
    data = [None if math.isnan(v) else float(v) for v in a.ravel(order="F")]
    return {"shape": list(a.shape), "data": data}


def _unarr(d):
    try:
        vals = np.array([math.nan if v is None else float(v) for v in d["data"]], dtype=float)
        return np.reshape(vals, tuple(d["shape"]), order="F")
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedFile(f"bad array record: {exc}") from exc


def _num(v):
    v = float(v)
    return None if math.isnan(v) else v


def _unnum(v):
    return math.nan if v is None else float(v)


def _mscale_dict(m: MScaleConfig):
    return {"delta": m.delta, "a": m.a, "rho": m.rho.to_dict(), "rtol": m.rtol, "max_iter": m.max_iter}


def _mscale_from(d):
    return MScaleConfig(delta=d["delta"], a=d["a"], rho=rho_from_dict(d["rho"]), rtol=d["rtol"],
                        max_iter=d["max_iter"])


def _rompca_dict(m: RompcaModel):
    cfg = m.cfg
    c = {k: v for k, v in asdict(cfg).items() if k not in ("rho", "mscale")}
    c["rho"] = cfg.rho.to_dict()
    c["mscale"] = _mscale_dict(cfg.mscale)
    return {
        "center": _arr(m.center),
        "projections": [_arr(v) for v in m.projections],
        "cell_scales": _arr(m.cell_scales),
        "case_scale": _num(m.case_scale),
        "cores": _arr(m.cores),
        "cell_weights": _arr(m.cell_weights),
        "case_dev": _arr(m.case_dev),
        "case_weights_dev": _arr(m.case_weights_dev),
        "core_weights": _arr(m.core_weights),
        "core_cov": _arr(m.core_cov),
        "score_distances": _arr(m.score_distances),
        "imputed": _arr(m.imputed),
        "trace": [_num(v) for v in m.trace],
        "converged": bool(m.converged),
        "cfg": c,
    }


def _rompca_from(d):
    c = dict(d["cfg"])
    c["rho"] = rho_from_dict(c["rho"])
    c["mscale"] = _mscale_from(c["mscale"])
    cfg = RompcaConfig(**c)
    as_int = lambda a: _unarr(a).astype(int)  # noqa: E731
    return RompcaModel(
        center=_unarr(d["center"]), projections=tuple(_unarr(v) for v in d["projections"]),
        cell_scales=_unarr(d["cell_scales"]), case_scale=_unnum(d["case_scale"]),
        cores=_unarr(d["cores"]), cell_weights=_unarr(d["cell_weights"]),
        case_dev=_unarr(d["case_dev"]), case_weights_dev=as_int(d["case_weights_dev"]),
        core_weights=as_int(d["core_weights"]), core_cov=_unarr(d["core_cov"]),
        score_distances=_unarr(d["score_distances"]), imputed=_unarr(d["imputed"]),
        trace=tuple(_unnum(v) for v in d["trace"]), converged=bool(d["converged"]), cfg=cfg)


def model_to_dict(model) -> dict:
    slope = {"u": [_arr(f) for f in model.slope.u], "v": [_arr(f) for f in model.slope.v]}
    if isinstance(model, TotModel):
        return {"format": "rotot-model", "version": FORMAT_VERSION, "kind": "TOT",
                "b0": _arr(model.b0), "slope": slope, "lambda": model.lam,
                "meta": {"trace": [_num(v) for v in model.trace], "converged": model.converged}}
    if not isinstance(model, RototModel):
        raise TypeError("expected a RototModel or TotModel")
    return {
        "format": "rotot-model",
        "version": FORMAT_VERSION,
        "kind": "ROTOT",
        "method": model.method,
        "rank": model.rank,
        "lambda": model.lam,
        "b0": _arr(model.b0),
        "slope": slope,
        "sigma1": _arr(model.sigma1),
        "sigma2": _num(model.sigma2),
        "rho1": model.rho1.to_dict(),
        "rho2": model.rho2.to_dict(),
        "w_x": _arr(model.w_x),
        "fitted": _arr(model.fitted),
        "stuck_cells": None if model.stuck_cells is None else _arr(model.stuck_cells),
        "rompca": None if model.rompca is None else _rompca_dict(model.rompca),
        "meta": {"seed": model.seed, "iterations": model.n_iter, "converged": bool(model.converged),
                 "init_candidate": model.init_candidate,
                 "trace": [_num(v) for v in model.trace]},
    }


def model_from_dict(d: dict):
    try:
        if d.get("format") != "rotot-model":
            raise MalformedFile("not a model file")
        if d.get("version") != FORMAT_VERSION:
            raise MalformedFile(f"unsupported model version {d.get('version')}")
        slope = KruskalOperator([_unarr(f) for f in d["slope"]["u"]], [_unarr(f) for f in d["slope"]["v"]])
        meta = d["meta"]
        if d["kind"] == "TOT":
            return TotModel(b0=_unarr(d["b0"]), slope=slope, lam=float(d["lambda"]),
                            trace=tuple(_unnum(v) for v in meta["trace"]), converged=meta["converged"])
        if d["kind"] != "ROTOT":
            raise MalformedFile(f"unknown model kind {d['kind']!r}")
        stuck = d.get("stuck_cells")
        return RototModel(
            b0=_unarr(d["b0"]), slope=slope, sigma1=_unarr(d["sigma1"]), sigma2=_unnum(d["sigma2"]),
            lam=float(d["lambda"]), rho1=rho_from_dict(d["rho1"]), rho2=rho_from_dict(d["rho2"]),
            rompca=None if d["rompca"] is None else _rompca_from(d["rompca"]),
            w_x=_unarr(d["w_x"]), fitted=_unarr(d["fitted"]),
            trace=tuple(_unnum(v) for v in meta["trace"]), converged=bool(meta["converged"]),
            method=d["method"], seed=int(meta["seed"]), init_candidate=int(meta["init_candidate"]),
            stuck_cells=None if stuck is None else _unarr(stuck).astype(bool))
    except MalformedFile:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedFile(f"bad model file: {exc}") from exc


def save_model(model, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model_to_dict(model), fh, allow_nan=False, separators=(",", ":"))
        fh.write("\n")


def load_model(path):
    try:
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
    except json.JSONDecodeError as exc:
        raise MalformedFile(f"model file is not JSON: {exc}") from exc
    return model_from_dict(d)

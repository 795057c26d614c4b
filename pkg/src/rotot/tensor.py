"""Dense multiway-array algebra.

All linearizations use the first-mode-fastest convention, so that the
entry ``(p_1, ..., p_L)`` (1-based) of a tensor sits at position
``1 + sum_l (p_l - 1) * prod_{l' < l} P_l'`` of its vectorization. The
storage layer is 0-based; :func:`vec_index` and :func:`unvec_index` own the
translation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

__all__ = [
    "DenseTensor",
    "KruskalOperator",
    "InvalidPartition",
    "DimensionError",
    "vec",
    "unvec",
    "vec_index",
    "unvec_index",
    "matricize",
    "unmatricize",
    "contract",
    "hadamard",
    "frobenius_norm",
    "kruskal_full",
    "identity_tensor",
]


class InvalidPartition(ValueError):
    """Row and column mode sets do not partition the modes."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


def _values(t) -> np.ndarray:
    if isinstance(t, DenseTensor):
        return t.values
    return np.asarray(t, dtype=float)


@dataclass(frozen=True, eq=False)
class DenseTensor:
    """Dense real tensor with an optional missingness mask.

    Missing entries hold NaN in ``values``; ``mask`` is true where observed.
    The stored array is read-only.
    """

    values: np.ndarray
    mask: np.ndarray | None = field(default=None)

    def __post_init__(self):
        v = np.array(self.values, dtype=float, copy=True)
        if v.ndim == 0 or 0 in v.shape:
            raise DimensionError("tensor needs at least one mode of positive size")
        m = self.mask
        if m is None:
            m = ~np.isnan(v) if np.isnan(v).any() else None
        else:
            m = np.array(m, dtype=bool, copy=True)
            if m.shape != v.shape:
                raise DimensionError(f"mask shape {m.shape} != data shape {v.shape}")
            v[~m] = np.nan
        v.flags.writeable = False
        if m is not None:
            m.flags.writeable = False
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "mask", m)

    @classmethod
    def from_vec(cls, shape: Sequence[int], data, mask=None) -> "DenseTensor":
        """Build from a linearized data vector (first mode fastest)."""
        shape = tuple(int(s) for s in shape)
        data = np.asarray(data, dtype=float)
        if data.size != int(np.prod(shape)):
            raise DimensionError("product(shape) != len(data)")
        m = None if mask is None else unvec(np.asarray(mask, dtype=bool), shape)
        return cls(unvec(data, shape), m)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def order(self) -> int:
        return self.values.ndim

    @property
    def data(self) -> np.ndarray:
        return vec(self.values)

    @property
    def observed(self) -> np.ndarray:
        """Boolean mask, all true when nothing is missing."""
        if self.mask is None:
            return np.ones(self.shape, dtype=bool)
        return self.mask

    @property
    def n_observed(self) -> int:
        return int(self.observed.sum())

    def __array__(self, dtype=None, copy=None):
        if dtype is None:
            return self.values
        return self.values.astype(dtype)

    def __repr__(self):
        miss = 0 if self.mask is None else int((~self.mask).sum())
        return f"DenseTensor(shape={self.shape}, missing={miss})"


# ---------------------------------------------------------------------------
# index maps


def vec(a) -> np.ndarray:
    """Vectorize with the first mode varying fastest."""
    return np.ravel(_values(a), order="F")


def unvec(v, shape: Sequence[int]) -> np.ndarray:
    """Inverse of :func:`vec`."""
    return np.reshape(np.asarray(v), tuple(shape), order="F")


def vec_index(idx: Sequence[int], shape: Sequence[int]) -> int:
    """0-based linear position of 0-based multi-index ``idx``."""
    if len(idx) != len(shape):
        raise DimensionError("index length != tensor order")
    j, stride = 0, 1
    for i, s in zip(idx, shape):
        if not 0 <= i < s:
            raise IndexError(f"index {tuple(idx)} out of range for shape {tuple(shape)}")
        j += i * stride
        stride *= s
    return j


def unvec_index(j: int, shape: Sequence[int]) -> tuple[int, ...]:
    """Inverse of :func:`vec_index`."""
    if not 0 <= j < int(np.prod(shape)):
        raise IndexError(f"linear index {j} out of range")
    out = []
    for s in shape:
        out.append(j % s)
        j //= s
    return tuple(out)


def _check_partition(order: int, row_modes, col_modes):
    rows, cols = list(row_modes), list(col_modes)
    for grp in (rows, cols):
        if any(b <= a for a, b in zip(grp, grp[1:])):
            raise InvalidPartition("mode sets must be strictly increasing")
    if sorted(rows + cols) != list(range(order)):
        raise InvalidPartition(
            f"modes {rows} | {cols} do not partition 0..{order - 1}")
    return rows, cols


def matricize(t, row_modes: Sequence[int], col_modes: Sequence[int]) -> np.ndarray:
    """Reshape a tensor into a matrix.

    Parameters
    ----------
    t : DenseTensor or array_like
    row_modes, col_modes : sequence of int
        0-based, strictly increasing, together a partition of all modes.

    Returns
    -------
    ndarray of shape (prod P[row_modes], prod P[col_modes])
        Row and column indices follow the first-mode-fastest map within
        each group.
    """
    a = _values(t)
    rows, cols = _check_partition(a.ndim, row_modes, col_modes)
    J = int(np.prod([a.shape[i] for i in rows]))
    K = int(np.prod([a.shape[i] for i in cols]))
    return np.reshape(np.transpose(a, rows + cols), (J, K), order="F")


def unmatricize(m, shape: Sequence[int], row_modes, col_modes) -> np.ndarray:
    """Inverse of :func:`matricize` for a tensor of the given shape."""
    shape = tuple(shape)
    rows, cols = _check_partition(len(shape), row_modes, col_modes)
    perm = rows + cols
    m = np.asarray(m)
    if m.size != int(np.prod(shape)):
        raise DimensionError("matrix size does not match target shape")
    a = np.reshape(m, [shape[i] for i in perm], order="F")
    return np.transpose(a, np.argsort(perm))


# ---------------------------------------------------------------------------
# products


def contract(a, b, num_shared_modes: int) -> np.ndarray:
    """Contracted product over the trailing modes of ``a`` and leading of ``b``."""
    A, B = _values(a), _values(b)
    k = int(num_shared_modes)
    if k < 0 or k > A.ndim or k > B.ndim:
        raise DimensionError("too many shared modes")
    if A.shape[A.ndim - k:] != B.shape[:k]:
        raise DimensionError(
            f"shared modes differ: {A.shape[A.ndim - k:]} vs {B.shape[:k]}")
    return np.tensordot(A, B, axes=k)


def hadamard(a, b) -> np.ndarray:
    A, B = _values(a), _values(b)
    if A.shape != B.shape:
        raise DimensionError(f"shape mismatch {A.shape} vs {B.shape}")
    return A * B


def frobenius_norm(t) -> float:
    """Square root of the sum of squared entries (the mask is ignored)."""
    a = _values(t)
    return float(np.sqrt(np.sum(a * a)))


def identity_tensor(order: int, size: int) -> np.ndarray:
    """Tensor with ones along the superdiagonal."""
    out = np.zeros((size,) * order)
    idx = np.arange(size)
    out[(idx,) * order] = 1.0
    return out


_LETTERS = "abcdefghijklmnopqstuvwxyzABCDEFGHIJKLMNOPQSTUVWXYZ"  # 'r' is the rank


def outer_columns(factors: Sequence[np.ndarray]) -> np.ndarray:
    """Tensor ``T[i_1, ..., i_k, r] = prod_s F_s[i_s, r]``."""
    if not factors:
        raise DimensionError("need at least one factor")
    subs = ",".join(f"{_LETTERS[i]}r" for i in range(len(factors)))
    out = "".join(_LETTERS[i] for i in range(len(factors))) + "r"
    return np.einsum(f"{subs}->{out}", *factors)


@dataclass(frozen=True, eq=False)
class KruskalOperator:
    """Rank-R CP representation of a slope array.

    ``B = [[U_1, ..., U_L, V_1, ..., V_M]]`` with element
    ``sum_r u^(1)_{p_1 r} ... v^(M)_{q_M r}``.
    """

    u: tuple
    v: tuple

    def __post_init__(self):
        u = tuple(np.array(f, dtype=float, copy=True) for f in self.u)
        v = tuple(np.array(f, dtype=float, copy=True) for f in self.v)
        if not u or not v:
            raise DimensionError("need at least one predictor and one response factor")
        ranks = {f.shape[1] for f in u + v if f.ndim == 2}
        if any(f.ndim != 2 for f in u + v) or len(ranks) != 1:
            raise DimensionError("all factors must be matrices sharing the column count R")
        for f in u + v:
            f.flags.writeable = False
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "v", v)

    @property
    def rank(self) -> int:
        return self.u[0].shape[1]

    @property
    def p_shape(self) -> tuple[int, ...]:
        return tuple(f.shape[0] for f in self.u)

    @property
    def q_shape(self) -> tuple[int, ...]:
        return tuple(f.shape[0] for f in self.v)

    @property
    def factors(self) -> tuple:
        return self.u + self.v

    def full(self) -> np.ndarray:
        return kruskal_full(self)

    def norm_sq(self) -> float:
        """``||B||_F^2`` from the Gram matrices, without materializing B."""
        G = np.ones((self.rank, self.rank))
        for f in self.factors:
            G = G * (f.T @ f)
        return float(max(G.sum(), 0.0))

    def replace(self, *, u=None, v=None) -> "KruskalOperator":
        return KruskalOperator(self.u if u is None else u, self.v if v is None else v)

    def balanced(self) -> "KruskalOperator":
        """Equalize column norms across factors; B is unchanged.

        Each column r of every factor is rescaled to the geometric mean of
        the column-r norms. Components with a zero column are set to zero
        everywhere.
        """
        fs = self.factors
        norms = np.array([np.linalg.norm(f, axis=0) for f in fs])  # (L+M, R)
        out = []
        with np.errstate(divide="ignore", invalid="ignore"):
            logn = np.log(norms)
            target = np.exp(logn.mean(axis=0))
            dead = ~np.all(norms > 0, axis=0)
            for i, f in enumerate(fs):
                s = np.where(dead, 0.0, target / norms[i])
                out.append(f * s)
        L = len(self.u)
        return KruskalOperator(tuple(out[:L]), tuple(out[L:]))

    def __repr__(self):
        return f"KruskalOperator(P={self.p_shape}, Q={self.q_shape}, R={self.rank})"


def kruskal_full(k: KruskalOperator) -> np.ndarray:
    """Materialize the tensor of shape ``P_1 x ... x P_L x Q_1 x ... x Q_M``."""
    return outer_columns(k.factors).sum(axis=-1)

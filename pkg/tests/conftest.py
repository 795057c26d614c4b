import numpy as np
import pytest

from rotot.tensor import KruskalOperator


def random_kruskal(rng, p_shape, q_shape, rank):
    return KruskalOperator([rng.standard_normal((p, rank)) for p in p_shape],
                           [rng.standard_normal((q, rank)) for q in q_shape])


def naive_full(u, v):
    """Element-by-element CP reconstruction."""
    shape = tuple(f.shape[0] for f in u + v)
    out = np.zeros(shape)
    R = u[0].shape[1]
    for idx in np.ndindex(*shape):
        s = 0.0
        for r in range(R):
            t = 1.0
            for f, i in zip(u + v, idx):
                t *= f[i, r]
            s += t
        out[idx] = s
    return out


def naive_contract(X, B, L):
    """<X, B> over the first L modes of B, by explicit loops."""
    P = X.shape
    Q = B.shape[L:]
    out = np.zeros(Q)
    for q in np.ndindex(*Q):
        s = 0.0
        for p in np.ndindex(*P):
            s += X[p] * B[p + q]
        out[q] = s
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)

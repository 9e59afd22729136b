"""Dense/sparse matrix-vector kernels with operation counting, and scalar nonlinearities.

All kernels work in float64 and accumulate over columns in ascending index
order, so results are bit-reproducible and independent of thread count.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class OpCounter:
    """Counts of multiply-accumulates, additions and nonlinearity evaluations.

    Counters only grow; independent counters merge by addition.
    """

    mac: int = 0
    adds: int = 0
    nonlin: int = 0

    def merge(self, other: "OpCounter") -> "OpCounter":
        self.mac += other.mac
        self.adds += other.adds
        self.nonlin += other.nonlin
        return self

    def copy(self) -> "OpCounter":
        return OpCounter(self.mac, self.adds, self.nonlin)


def _column_accumulate(M: np.ndarray, indices, values) -> np.ndarray:
    # Sequential accumulation over columns, ascending index. Slower than a
    # BLAS gemv but the order is pinned, which the oracle tests rely on.
    out = np.zeros(M.shape[0])
    for j, v in zip(indices, values):
        out += M[:, j] * v
    return out


def matvec_counted(M: np.ndarray, v: np.ndarray, counter: OpCounter | None = None) -> np.ndarray:
    """M @ v with mac += m*n. Accumulates columns in ascending order."""
    m, n = M.shape
    if v.shape != (n,):
        raise ValueError(f"matvec shape mismatch: M is {M.shape}, v is {v.shape}")
    if counter is not None:
        counter.mac += m * n
    return _column_accumulate(M, range(n), v)


def sparse_matvec_counted(
    M: np.ndarray,
    events: list[tuple[int, float]],
    counter: OpCounter | None = None,
) -> np.ndarray:
    """Sum of value * column(M, index) over events; mac += m*len(events).

    Events are processed in ascending column-index order regardless of the
    order given, so a dense event list reproduces matvec_counted bit-exactly.
    """
    m, n = M.shape
    events = sorted(events, key=lambda e: e[0])
    for j, _ in events:
        if not (0 <= j < n):
            raise IndexError(f"event index {j} out of range for {n} columns")
    if counter is not None:
        counter.mac += m * len(events)
    return _column_accumulate(M, (j for j, _ in events), (x for _, x in events))


def sigmoid(x):
    with np.errstate(over="ignore"):   # exp overflow saturates to exactly 0
        return 1.0 / (1.0 + np.exp(-x))


def sigmoid_prime(x):
    s = sigmoid(x)
    return s * (1.0 - s)


def tanh(x):
    return np.tanh(x)


def tanh_prime(x):
    t = np.tanh(x)
    return 1.0 - t * t

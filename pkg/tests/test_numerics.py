import numpy as np
import pytest

from egru.numerics import (OpCounter, matvec_counted, sigmoid, sigmoid_prime,
                           sparse_matvec_counted, tanh, tanh_prime)


def scalar_matvec(M, v):
    """Double-loop oracle with the same ascending-column accumulation order."""
    m, n = M.shape
    out = [0.0] * m
    for j in range(n):
        for i in range(m):
            out[i] += M[i, j] * v[j]
    return np.array(out)


class TestMatvec:
    def test_identity(self):
        c = OpCounter()
        out = matvec_counted(np.eye(2), np.array([3.0, 4.0]), c)
        np.testing.assert_array_equal(out, [3.0, 4.0])
        assert c.mac == 4

    def test_zero_matrix(self):
        c = OpCounter()
        out = matvec_counted(np.zeros((3, 3)), np.array([1.0, -2.0, 5.0]), c)
        np.testing.assert_array_equal(out, np.zeros(3))
        assert c.mac == 9

    def test_against_scalar_loop_oracle(self):
        rng = np.random.default_rng(7)
        M = rng.normal(size=(4, 4))
        v = rng.normal(size=4)
        got = matvec_counted(M, v, OpCounter())
        np.testing.assert_array_equal(got, scalar_matvec(M, v))

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            matvec_counted(np.eye(3), np.ones(2), OpCounter())


class TestSparseMatvec:
    def test_empty_events(self):
        c = OpCounter()
        out = sparse_matvec_counted(np.ones((3, 3)), [], c)
        np.testing.assert_array_equal(out, np.zeros(3))
        assert c.mac == 0

    def test_unit_basis_event(self):
        M = np.arange(9.0).reshape(3, 3)
        out = sparse_matvec_counted(M, [(1, 1.0)])
        np.testing.assert_array_equal(out, M[:, 1])

    def test_dense_events_equal_matvec_bitwise(self):
        rng = np.random.default_rng(11)
        M = rng.normal(size=(5, 5))
        v = rng.normal(size=5)
        dense = matvec_counted(M, v, OpCounter())
        events = [(j, float(v[j])) for j in range(5)]
        sparse = sparse_matvec_counted(M, events, OpCounter())
        assert np.array_equal(dense, sparse)

    def test_order_independence_of_event_list(self):
        # accumulation is pinned to ascending column index
        rng = np.random.default_rng(3)
        M = rng.normal(size=(4, 4))
        events = [(2, 0.5), (0, -1.0), (3, 2.0)]
        a = sparse_matvec_counted(M, events)
        b = sparse_matvec_counted(M, list(reversed(events)))
        assert np.array_equal(a, b)

    def test_mac_counts_events_only(self):
        c = OpCounter()
        sparse_matvec_counted(np.ones((6, 4)), [(0, 1.0), (2, 1.0)], c)
        assert c.mac == 12

    def test_index_out_of_range(self):
        with pytest.raises(IndexError):
            sparse_matvec_counted(np.ones((2, 2)), [(2, 1.0)])


class TestCounter:
    def test_merge_is_commutative_and_associative(self):
        rng = np.random.default_rng(0)
        vals = [OpCounter(*rng.integers(0, 100, 3)) for _ in range(3)]
        a = OpCounter().merge(vals[0]).merge(vals[1]).merge(vals[2])
        b = OpCounter().merge(vals[2]).merge(vals[0]).merge(vals[1])
        assert (a.mac, a.adds, a.nonlin) == (b.mac, b.adds, b.nonlin)


class TestNonlinearities:
    def test_sigmoid_at_zero(self):
        assert sigmoid(0.0) == 0.5

    def test_tanh_at_zero(self):
        assert tanh(0.0) == 0.0
        assert tanh_prime(0.0) == 1.0

    def test_sigmoid_prime_vs_central_difference(self):
        x = 0.7
        h = 1e-6
        fd = (sigmoid(x + h) - sigmoid(x - h)) / (2 * h)
        assert abs(sigmoid_prime(x) - fd) < 1e-8

    def test_saturation_is_finite(self):
        assert sigmoid(1e3) == 1.0
        assert sigmoid(-1e3) == 0.0
        assert np.isfinite(tanh_prime(1e3))

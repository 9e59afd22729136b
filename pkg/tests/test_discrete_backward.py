import numpy as np
import pytest

from egru.discrete import (egru_backward, egru_backward_batch, egru_forward,
                           egru_forward_batch, pseudo_derivative)
from egru.gradcheck import run_discrete_gradcheck, scalar_surrogate_gradients
from egru.numerics import OpCounter
from egru.params import init_params


def _random_instance(seed, n=3, T=5, d=2, **kw):
    rng = np.random.default_rng(seed)
    p = init_params(n, d, seed, theta_init_range=(0.15, 0.5), epsilon=0.4, **kw)
    for name in ("V_u", "V_r", "V_z", "U_u", "U_r", "U_z"):
        getattr(p, name)[...] *= 1.8
    xs = rng.normal(size=(T, d))
    dLdy = rng.normal(size=(T, n))
    dLdc_final = rng.normal(size=n)
    return p, xs, dLdy, dLdc_final


class TestBackwardBasics:
    def test_zero_loss_gradient_gives_zero_gradients(self):
        p, xs, _, _ = _random_instance(0)
        tr = egru_forward(p, xs)
        g = egru_backward(p, tr, np.zeros((5, 3)))
        assert g.global_norm() == 0.0

    def test_two_step_single_unit_vs_chain_rule_oracle(self):
        p, _, _, _ = _random_instance(1, n=1, T=2, d=1)
        xs = np.array([[1.2], [-0.7]])
        dLdy = np.array([[0.5], [1.0]])
        tr = egru_forward(p, xs)
        got = egru_backward(p, tr, dLdy)
        want = scalar_surrogate_gradients(p, xs, dLdy)
        for (name, a), (_, b) in zip(got.arrays(), want.arrays()):
            denom = max(1e-12, np.abs(b).max())
            assert np.abs(a - b).max() / denom < 1e-10, name

    def test_silent_subthreshold_network_has_zero_recurrent_grads(self):
        # every c stays below theta - eps and nothing fires
        p, xs, dLdy, dLdc_final = _random_instance(2)
        p.theta_raw[:] = 50.0
        p.theta_transform = "abs"
        p.epsilon = 1.0
        from egru.params import enforce_threshold_positivity
        enforce_threshold_positivity(p)
        tr = egru_forward(p, xs)
        assert not tr.h_flags.any()
        assert np.all(np.abs(tr.c - p.theta) > p.epsilon)
        g = egru_backward(p, tr, dLdy, dLdc_final)
        assert np.all(g.dV_u == 0.0)
        assert np.all(g.dV_r == 0.0)
        assert np.all(g.dV_z == 0.0)
        assert np.all(g.dtheta == 0.0)


class TestSurrogateOracle:
    @pytest.mark.parametrize("seed", range(25))
    def test_random_instances_subtract_mode(self, seed):
        chk = run_discrete_gradcheck(seed, n=4, T=6)
        assert chk.max_err < 1e-9

    @pytest.mark.parametrize("seed", range(10))
    def test_random_instances_hard_reset(self, seed):
        chk = run_discrete_gradcheck(seed, n=3, T=5, reset_mode="hard")
        assert chk.max_err < 1e-9

    def test_dLoss_dc_path(self):
        p, xs, _, _ = _random_instance(3)
        rng = np.random.default_rng(33)
        dLdc = rng.normal(size=(5, 3))
        tr = egru_forward(p, xs)
        got = egru_backward(p, tr, None, dLoss_dc=dLdc)
        want = scalar_surrogate_gradients(p, xs, None, dLoss_dc=dLdc)
        for (name, a), (_, b) in zip(got.arrays(), want.arrays()):
            denom = max(1e-10, np.abs(b).max())
            assert np.abs(a - b).max() / denom < 1e-9, name


class TestBackwardSparsityProperty:
    def test_dead_unit_paths_are_exactly_zero(self):
        # unit i never within eps of threshold and never fires: every gradient
        # entry attributable to its output is exactly zero
        found = False
        for seed in range(30):
            p, xs, dLdy, dLdc_final = _random_instance(seed, n=4, T=6)
            tr = egru_forward(p, xs)
            pd = pseudo_derivative(tr.c, p.theta, p.epsilon)
            dead = ~np.any(tr.h_flags | (pd > 0.0), axis=0)
            alive_events = tr.h_flags.any()
            if not (dead.any() and alive_events):
                continue
            found = True
            g = egru_backward(p, tr, dLdy, dLdc_final)
            for i in np.flatnonzero(dead):
                assert np.all(g.dV_u[:, i] == 0.0)
                assert np.all(g.dV_r[:, i] == 0.0)
                assert np.all(g.dV_z[:, i] == 0.0)
                assert np.all(g.dV_r[i, :] == 0.0)   # reset gate rides on y_i
                assert g.dtheta[i] == 0.0
        assert found, "fixture never produced a dead unit alongside live events"

    def test_backward_support_set(self):
        # contributions through the threshold arrive exactly on the live set
        p, xs, _, _ = _random_instance(11, n=3, T=6)
        tr = egru_forward(p, xs)
        pd = pseudo_derivative(tr.c, p.theta, p.epsilon)
        live = tr.h_flags | (pd > 0.0)
        for t in range(6):
            for i in range(3):
                dLdy = np.zeros((6, 3))
                dLdy[t, i] = 1.0
                g = egru_backward(p, tr, dLdy)
                moved = g.global_norm() > 0.0
                if live[t, i]:
                    continue  # may or may not move depending on c, fine either way
                # dead output entry: loss gradient on y_{t,i} cannot reach any weight
                assert not moved, (t, i)


class TestBatchEquivalence:
    def test_batch_forward_matches_per_sample(self):
        rng = np.random.default_rng(4)
        p = init_params(5, 2, seed=4, theta_init_range=(0.1, 0.4))
        X = rng.normal(size=(7, 3, 2))   # (T, B, d)
        bt = egru_forward_batch(p, X)
        for b in range(3):
            tr = egru_forward(p, X[:, b, :])
            np.testing.assert_allclose(bt.c[:, b], tr.c, atol=1e-12)
            np.testing.assert_array_equal(bt.h_flags[:, b], tr.h_flags)

    def test_batch_backward_matches_per_sample_sum(self):
        rng = np.random.default_rng(14)
        p = init_params(4, 2, seed=14, theta_init_range=(0.1, 0.4))
        for name in ("V_u", "V_r", "V_z", "U_u", "U_r", "U_z"):
            getattr(p, name)[...] *= 1.5
        X = rng.normal(size=(6, 4, 2))
        dLdy = rng.normal(size=(6, 4, 4))
        bt = egru_forward_batch(p, X)
        got = egru_backward_batch(p, bt, dLdy)
        want = None
        for b in range(4):
            tr = egru_forward(p, X[:, b, :])
            g = egru_backward(p, tr, dLdy[:, b, :])
            want = g if want is None else want.add_(g)
        for (name, a), (_, bb) in zip(got.arrays(), want.arrays()):
            np.testing.assert_allclose(a, bb, rtol=1e-9, atol=1e-12, err_msg=name)

    def test_batch_counters_match_per_sample_totals(self):
        rng = np.random.default_rng(15)
        p = init_params(4, 2, seed=15, theta_init_range=(0.1, 0.3))
        X = rng.normal(size=(5, 3, 2))
        cb = OpCounter()
        bt = egru_forward_batch(p, X, cb)
        gb = OpCounter()
        egru_backward_batch(p, bt, np.ones((5, 3, 4)), counter=gb)
        cs, gs = OpCounter(), OpCounter()
        for b in range(3):
            tr = egru_forward(p, X[:, b, :], cs)
            egru_backward(p, tr, np.ones((5, 4)), counter=gs)
        assert cb.mac == cs.mac
        assert gb.mac == gs.mac

"""Discrete-time gated recurrent dynamics: plain GRU step, event-based step with
threshold gating, and sparse backpropagation through time using a triangular
pseudo-derivative in place of the step function's derivative.

Per-sample functions route recurrent matvecs through the counted sparse kernel
so the counters reflect effective work. The *_batch variants compute the same
numbers with dense matmuls for throughput and derive the counters analytically
from the event masks (identical totals by construction).

Pointwise-op counting convention: counter.nonlin grows by 3n per step (three
gate nonlinearities), counter.adds by 7n per step (bias adds and the state
update's elementwise work).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import OpCounter, sigmoid, sigmoid_prime, sparse_matvec_counted, tanh, tanh_prime
from .params import Gradients, LayerParams, theta_transform_chain


@dataclass
class DiscreteTrace:
    """Everything the backward pass needs, one leading time axis of length T."""

    x: np.ndarray        # (T, d)
    u: np.ndarray        # (T, n)
    r: np.ndarray        # (T, n)
    z: np.ndarray        # (T, n)
    c: np.ndarray        # (T, n)
    y: np.ndarray        # (T, n)
    h_flags: np.ndarray  # (T, n) bool

    @property
    def T(self) -> int:
        return self.x.shape[0]

    @property
    def n(self) -> int:
        return self.c.shape[1]


def pseudo_derivative(c, theta, epsilon, peak: float = 1.0):
    """Triangular surrogate for dH/dc: peak at c == theta, zero outside
    (theta - epsilon, theta + epsilon)."""
    return peak * np.maximum(0.0, 1.0 - np.abs(c - theta) / epsilon)


def _events_of(y_prev: np.ndarray) -> list[tuple[int, float]]:
    idx = np.flatnonzero(y_prev)
    return [(int(j), float(y_prev[j])) for j in idx]


def _gate_preacts(params: LayerParams, x_t, y_prev, r_t=None, counter=None):
    """Pre-activations for the three gates; recurrent part via sparse kernel."""
    xev = [(int(j), float(x_t[j])) for j in np.flatnonzero(x_t)]
    yev = _events_of(y_prev)
    pre_u = sparse_matvec_counted(params.U_u, xev, counter) + sparse_matvec_counted(params.V_u, yev, counter) + params.b_u
    pre_r = sparse_matvec_counted(params.U_r, xev, counter) + sparse_matvec_counted(params.V_r, yev, counter) + params.b_r
    if r_t is None:
        r_t = sigmoid(pre_r)
    rev = [(j, v * float(r_t[j])) for j, v in yev]
    pre_z = sparse_matvec_counted(params.U_z, xev, counter) + sparse_matvec_counted(params.V_z, rev, counter) + params.b_z
    if counter is not None:
        counter.nonlin += 3 * params.n
        counter.adds += 7 * params.n
    return pre_u, pre_r, pre_z, r_t


def gru_step(params: LayerParams, x_t: np.ndarray, y_prev: np.ndarray,
             counter: OpCounter | None = None):
    """One plain GRU update; returns (u, r, z, y)."""
    if x_t.shape != (params.d,) or y_prev.shape != (params.n,):
        raise ValueError("gru_step shape mismatch")
    pre_u, pre_r, pre_z, r = _gate_preacts(params, x_t, y_prev, counter=counter)
    u = sigmoid(pre_u)
    z = tanh(pre_z)
    y = u * z + (1.0 - u) * y_prev
    return u, r, z, y


def egru_step(params: LayerParams, x_t: np.ndarray, y_prev: np.ndarray,
              c_prev: np.ndarray, counter: OpCounter | None = None,
              force_fire: bool = False, no_subtract: bool = False):
    """One event-based update; returns (c, y, (u, r, z), h_flags).

    Fired units are read off y_prev (y is nonzero exactly where the previous
    step fired, since thresholds are positive). force_fire / no_subtract are
    debug switches for the plain-GRU reduction.
    """
    if x_t.shape != (params.d,) or y_prev.shape != (params.n,) or c_prev.shape != (params.n,):
        raise ValueError("egru_step shape mismatch")
    pre_u, pre_r, pre_z, r = _gate_preacts(params, x_t, y_prev, counter=counter)
    u = sigmoid(pre_u)
    z = tanh(pre_z)
    if params.reset_mode == "hard":
        fired_prev = y_prev != 0.0
        c = u * z + (1.0 - u) * np.where(fired_prev, 0.0, c_prev)
    else:
        c = u * z + (1.0 - u) * c_prev
        if not no_subtract:
            c = c - y_prev
    h = np.ones(params.n, dtype=bool) if force_fire else (c >= params.theta)
    y = np.where(h, c, 0.0)
    return c, y, (u, r, z), h


def egru_forward(params: LayerParams, inputs: np.ndarray,
                 counter: OpCounter | None = None,
                 force_fire: bool = False, no_subtract: bool = False) -> DiscreteTrace:
    """Run a full sequence from zero state, recording the trace for BPTT."""
    inputs = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    T = inputs.shape[0]
    if T == 0:
        raise ValueError("empty input sequence")
    n = params.n
    u = np.empty((T, n)); r = np.empty((T, n)); z = np.empty((T, n))
    c = np.empty((T, n)); y = np.empty((T, n)); h = np.empty((T, n), dtype=bool)
    y_prev = np.zeros(n)
    c_prev = np.zeros(n)
    for t in range(T):
        c_t, y_t, (u_t, r_t, z_t), h_t = egru_step(
            params, inputs[t], y_prev, c_prev, counter,
            force_fire=force_fire, no_subtract=no_subtract)
        u[t], r[t], z[t], c[t], y[t], h[t] = u_t, r_t, z_t, c_t, y_t, h_t
        y_prev, c_prev = y_t, c_t
    return DiscreteTrace(inputs, u, r, z, c, y, h)


def egru_backward(params: LayerParams, trace: DiscreteTrace,
                  dLoss_dy: np.ndarray | None,
                  dLoss_dc_final: np.ndarray | None = None,
                  counter: OpCounter | None = None,
                  dLoss_dc: np.ndarray | None = None) -> Gradients:
    """Reverse-time gradient accumulation over the stored trace.

    The step function is treated as constant in value with the triangular
    pseudo-derivative as its derivative. Per-unit backward work through the
    output path is skipped wherever the pseudo-derivative is zero and the unit
    did not fire; threshold gradients flow through -c * pd and then through
    the positivity transform.
    """
    T, n = trace.T, trace.n
    if dLoss_dy is None:
        dLoss_dy = np.zeros((T, n))
    dLoss_dy = np.asarray(dLoss_dy, dtype=np.float64)
    if dLoss_dy.shape != (T, n):
        raise ValueError(f"dLoss_dy shape {dLoss_dy.shape}, expected {(T, n)}")
    g = Gradients.zeros_like(params)
    dtheta_eff = np.zeros(n)
    eps = params.epsilon
    theta = params.theta

    carry_y = np.zeros(n)   # dL/dy_t contributions from step t+1
    carry_c = np.zeros(n)   # dL/dc_t contributions from step t+1
    for t in range(T - 1, -1, -1):
        y_prev = trace.y[t - 1] if t > 0 else np.zeros(n)
        c_prev = trace.c[t - 1] if t > 0 else np.zeros(n)
        h_prev = trace.h_flags[t - 1] if t > 0 else np.zeros(n, dtype=bool)
        u_t, r_t, z_t, c_t, h_t = trace.u[t], trace.r[t], trace.z[t], trace.c[t], trace.h_flags[t]

        delta_y = dLoss_dy[t] + carry_y
        delta_c = carry_c.copy()
        if dLoss_dc is not None:
            delta_c += dLoss_dc[t]
        if t == T - 1 and dLoss_dc_final is not None:
            delta_c += dLoss_dc_final

        pd = pseudo_derivative(c_t, theta, eps)
        live = h_t | (pd > 0.0)
        # output path y = c * H(c - theta): dead units contribute exactly zero
        delta_c[live] += delta_y[live] * (h_t[live] + c_t[live] * pd[live])
        dtheta_eff[live] += delta_y[live] * (-c_t[live] * pd[live])

        if params.reset_mode == "hard":
            c_base = np.where(h_prev, 0.0, c_prev)
            carry_c = delta_c * (1.0 - u_t) * (~h_prev)
            carry_y = np.zeros(n)
        else:
            c_base = c_prev
            carry_c = delta_c * (1.0 - u_t)
            carry_y = -delta_c

        d_u = delta_c * (z_t - c_base)
        d_z = delta_c * u_t
        d_pre_u = d_u * u_t * (1.0 - u_t)
        d_pre_z = d_z * (1.0 - z_t * z_t)

        fired = np.flatnonzero(y_prev)
        support = np.flatnonzero(h_prev | (pseudo_derivative(c_prev, theta, eps) > 0.0)) if t > 0 else np.array([], dtype=int)
        xnz = np.flatnonzero(trace.x[t])

        # weight/bias gradients; recurrent outer products touch fired columns only
        if len(xnz):
            g.dU_u[:, xnz] += np.outer(d_pre_u, trace.x[t][xnz])
            g.dU_z[:, xnz] += np.outer(d_pre_z, trace.x[t][xnz])
        g.db_u += d_pre_u
        g.db_z += d_pre_z
        if len(fired):
            g.dV_u[:, fired] += np.outer(d_pre_u, y_prev[fired])
            g.dV_z[:, fired] += np.outer(d_pre_z, r_t[fired] * y_prev[fired])
        if counter is not None:
            counter.mac += 2 * n * len(xnz) + 2 * n * len(fired)

        # reset-gate path exists only through fired outputs
        d_pre_r = np.zeros(n)
        if len(fired):
            s_fired = params.V_z[:, fired].T @ d_pre_z      # (V_z^T d)[fired]
            d_r_fired = s_fired * y_prev[fired]
            d_pre_r[fired] = d_r_fired * r_t[fired] * (1.0 - r_t[fired])
            g.dV_r[np.ix_(fired, fired)] += np.outer(d_pre_r[fired], y_prev[fired])
            if len(xnz):
                g.dU_r[np.ix_(fired, xnz)] += np.outer(d_pre_r[fired], trace.x[t][xnz])
            g.db_r += d_pre_r
            if counter is not None:
                counter.mac += n * len(fired) + len(fired) * len(fired) + len(fired) * len(xnz)

        # backprop into y_{t-1}, needed only where the previous step is live
        if len(support):
            back = params.V_u[:, support].T @ d_pre_u
            back += params.V_r[:, support].T @ d_pre_r
            sz = params.V_z[:, support].T @ d_pre_z
            back += sz * r_t[support]
            carry_y[support] += back
            if counter is not None:
                counter.mac += 3 * n * len(support)

    g.dtheta += theta_transform_chain(params, dtheta_eff)
    return g


# --- batched variants (training throughput path) ---------------------------

@dataclass
class BatchTrace:
    """Same content as DiscreteTrace with a batch axis: arrays are (T, B, n)."""

    x: np.ndarray        # (T, B, d)
    u: np.ndarray
    r: np.ndarray
    z: np.ndarray
    c: np.ndarray
    y: np.ndarray
    h_flags: np.ndarray


def egru_forward_batch(params: LayerParams, inputs: np.ndarray,
                       counter: OpCounter | None = None) -> BatchTrace:
    """Dense-matmul forward over a batch; counters derived from event masks."""
    x = np.asarray(inputs, dtype=np.float64)
    T, B, d = x.shape
    n = params.n
    u = np.empty((T, B, n)); r = np.empty((T, B, n)); z = np.empty((T, B, n))
    c = np.empty((T, B, n)); y = np.empty((T, B, n)); h = np.empty((T, B, n), dtype=bool)
    y_prev = np.zeros((B, n))
    c_prev = np.zeros((B, n))
    Vu_T, Vr_T, Vz_T = params.V_u.T, params.V_r.T, params.V_z.T
    Uu_T, Ur_T, Uz_T = params.U_u.T, params.U_r.T, params.U_z.T
    for t in range(T):
        xt = x[t]
        u_t = sigmoid(xt @ Uu_T + y_prev @ Vu_T + params.b_u)
        r_t = sigmoid(xt @ Ur_T + y_prev @ Vr_T + params.b_r)
        z_t = tanh(xt @ Uz_T + (r_t * y_prev) @ Vz_T + params.b_z)
        if params.reset_mode == "hard":
            c_t = u_t * z_t + (1.0 - u_t) * np.where(y_prev != 0.0, 0.0, c_prev)
        else:
            c_t = u_t * z_t + (1.0 - u_t) * c_prev - y_prev
        h_t = c_t >= params.theta
        y_t = np.where(h_t, c_t, 0.0)
        u[t], r[t], z[t], c[t], y[t], h[t] = u_t, r_t, z_t, c_t, y_t, h_t
        if counter is not None:
            counter.mac += 3 * n * int(np.count_nonzero(y_prev))
            counter.mac += 3 * n * int(np.count_nonzero(xt))
            counter.nonlin += 3 * n * B
            counter.adds += 7 * n * B
        y_prev, c_prev = y_t, c_t
    return BatchTrace(x, u, r, z, c, y, h)


def egru_backward_batch(params: LayerParams, trace: BatchTrace,
                        dLoss_dy: np.ndarray | None,
                        dLoss_dc_final: np.ndarray | None = None,
                        counter: OpCounter | None = None,
                        dLoss_dc: np.ndarray | None = None) -> Gradients:
    """Dense-matmul BPTT over a batch; gradients are summed over samples.

    Numerically equal to summing egru_backward over the batch up to float
    accumulation order. Counters reflect the per-sample sparse work the
    computation stands in for, derived from the trace masks.
    """
    T, B, n = trace.c.shape
    g = Gradients.zeros_like(params)
    dtheta_eff = np.zeros(n)
    eps = params.epsilon
    theta = params.theta
    carry_y = np.zeros((B, n))
    carry_c = np.zeros((B, n))
    for t in range(T - 1, -1, -1):
        y_prev = trace.y[t - 1] if t > 0 else np.zeros((B, n))
        c_prev = trace.c[t - 1] if t > 0 else np.zeros((B, n))
        h_prev = trace.h_flags[t - 1] if t > 0 else np.zeros((B, n), dtype=bool)
        u_t, r_t, z_t, c_t, h_t = trace.u[t], trace.r[t], trace.z[t], trace.c[t], trace.h_flags[t]

        delta_y = carry_y if dLoss_dy is None else dLoss_dy[t] + carry_y
        delta_c = carry_c.copy()
        if dLoss_dc is not None:
            delta_c += dLoss_dc[t]
        if t == T - 1 and dLoss_dc_final is not None:
            delta_c += dLoss_dc_final

        pd = pseudo_derivative(c_t, theta, eps)
        delta_c += delta_y * (h_t + c_t * pd)
        dtheta_eff += np.sum(delta_y * (-c_t * pd), axis=0)

        if params.reset_mode == "hard":
            c_base = np.where(h_prev, 0.0, c_prev)
            carry_c = delta_c * (1.0 - u_t) * (~h_prev)
            carry_y = np.zeros((B, n))
        else:
            c_base = c_prev
            carry_c = delta_c * (1.0 - u_t)
            carry_y = -delta_c

        d_pre_u = delta_c * (z_t - c_base) * u_t * (1.0 - u_t)
        d_pre_z = delta_c * u_t * (1.0 - z_t * z_t)
        s = d_pre_z @ params.V_z
        d_pre_r = s * y_prev * r_t * (1.0 - r_t)

        g.dU_u += d_pre_u.T @ trace.x[t]
        g.dU_r += d_pre_r.T @ trace.x[t]
        g.dU_z += d_pre_z.T @ trace.x[t]
        g.db_u += np.sum(d_pre_u, axis=0)
        g.db_r += np.sum(d_pre_r, axis=0)
        g.db_z += np.sum(d_pre_z, axis=0)
        g.dV_u += d_pre_u.T @ y_prev
        g.dV_r += d_pre_r.T @ y_prev
        g.dV_z += d_pre_z.T @ (r_t * y_prev)

        carry_y += d_pre_u @ params.V_u + d_pre_r @ params.V_r + s * r_t

        if counter is not None:
            fired = np.count_nonzero(y_prev, axis=1)
            if t > 0:
                live_prev = np.count_nonzero(h_prev | (pseudo_derivative(c_prev, theta, eps) > 0.0), axis=1)
            else:
                live_prev = np.zeros(B, dtype=int)
            xnz = np.count_nonzero(trace.x[t], axis=1)
            counter.mac += int(np.sum(2 * n * xnz + 2 * n * fired))
            counter.mac += int(np.sum(n * fired + fired * fired + fired * xnz))
            counter.mac += int(np.sum(3 * n * live_prev))

    g.dtheta += theta_transform_chain(params, dtheta_eff)
    return g

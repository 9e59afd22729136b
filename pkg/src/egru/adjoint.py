"""Event-based backward pass for the continuous-time model.

Adjoint variables flow backward through the smooth pieces of a recorded
trajectory and jump at the stored events; parameter gradients accumulate from
per-event outer products, a quadrature of the gate adjoints (biases), and the
input-event kicks. Thresholds and time constants are not differentiated here.

Backward-time dynamics between events (integrated from T toward 0):

    tau_m dlc/dt  = u * lc
    tau_s dlau/dt = lau + sig'(a_u) * (c - z) * lc
    tau_s dlaz/dt = laz - u * tanh'(a_z) * lc
    tau_s dlar/dt = lar

A point loss at a readout time t_r adds -dl/dc / tau_m to lambda_c as the
integration passes t_r (and -dl/dtr / tau_kappa to the trace adjoints when the
loss reads the leaky output traces).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .continuous import EventRecord, InputRecord, Segment, Trajectory
from .numerics import sigmoid, sigmoid_prime, tanh, tanh_prime
from .params import Gradients, LayerParams


class GrazingEventError(RuntimeError):
    """Raised when an event's pre-reset state velocity is too small for the
    event time to be a differentiable function of the parameters."""


@dataclass
class TraceSpec:
    """Leaky output traces: trace o decays with tau_kappa and jumps by the
    event amplitude whenever its source unit fires."""

    tau_kappa: float
    unit_of_output: tuple

    def output_of_unit(self, n_units: int):
        out = np.full(n_units, -1, dtype=int)
        for o, u in enumerate(self.unit_of_output):
            out[u] = o
        return out


@dataclass
class LossSpec:
    """Point losses at readout times, plus an optional event-time term.

    grad_fn(k, t, c, traces) -> (loss, dl_dc, dl_dtraces); either gradient may
    be None. traces is None unless a TraceSpec is attached.

    event_time_grad(record) -> dL/ds for losses that depend smoothly on the
    internal event times (e.g. a window-averaged trace readout, where each
    event's contribution is a known function of its time). The backward pass
    folds it into the event transition.
    """

    readout_times: tuple
    grad_fn: Callable
    trace: TraceSpec | None = None
    event_time_grad: Callable | None = None


@dataclass
class AdjointState:
    t: float
    lambda_c: np.ndarray
    lambda_au: np.ndarray
    lambda_ar: np.ndarray
    lambda_az: np.ndarray
    lambda_tr: np.ndarray | None = None
    bias_int_u: np.ndarray = field(default=None)
    bias_int_r: np.ndarray = field(default=None)
    bias_int_z: np.ndarray = field(default=None)

    @classmethod
    def terminal(cls, n: int, T: float, n_out: int | None = None) -> "AdjointState":
        return cls(T, np.zeros(n), np.zeros(n), np.zeros(n), np.zeros(n),
                   np.zeros(n_out) if n_out else None,
                   np.zeros(n), np.zeros(n), np.zeros(n))


def traces_at(trajectory: Trajectory, t: float, spec: TraceSpec) -> np.ndarray:
    """Leaky trace values at time t, reconstructed from the event records."""
    out = np.zeros(len(spec.unit_of_output))
    src = {u: o for o, u in enumerate(spec.unit_of_output)}
    for rec in trajectory.records:
        if isinstance(rec, EventRecord) and rec.event.s <= t + 1e-15:
            o = src.get(rec.event.unit)
            if o is not None:
                out[o] += rec.event.value * np.exp(-(t - rec.event.s) / spec.tau_kappa)
    return out


def evaluate_loss(trajectory: Trajectory, loss_spec: LossSpec) -> float:
    """Total readout loss along a recorded trajectory."""
    total = 0.0
    for k, t_r in enumerate(loss_spec.readout_times):
        c = _state_at_boundary(trajectory, t_r)
        tr = traces_at(trajectory, t_r, loss_spec.trace) if loss_spec.trace else None
        loss, _, _ = loss_spec.grad_fn(k, t_r, c, tr)
        total += loss
    return total


def _state_at_boundary(trajectory: Trajectory, t: float) -> np.ndarray:
    for seg in trajectory.segments:
        for point in (seg.points[0], seg.points[-1]):
            if abs(point[0] - t) < 1e-9:
                return point[4]
    raise ValueError(
        f"no trajectory boundary at t={t}; pass readout times as simulate breakpoints")


def _hermite_mid(c1, cd1, c2, cd2, h):
    return 0.5 * (c1 + c2) + (h / 8.0) * (cd1 - cd2)


def adjoint_flow(adj: AdjointState, dt: float, segment: Segment,
                 params: LayerParams) -> AdjointState:
    """Integrate the adjoint ODEs backward by dt across a smooth segment.

    adj.t must sit on the segment's checkpoint grid; the integration walks the
    recorded checkpoints in reverse, reconstructing activations exactly and c
    by cubic Hermite interpolation at the half-step stage points. The bias
    quadrature accumulates alongside with matching stages.
    """
    pts = segment.points
    if not pts:
        raise ValueError("segment has no checkpoints")
    t_target = adj.t - dt
    if t_target < pts[0][0] - 1e-9:
        raise ValueError("dt reaches past the start of the segment")
    # locate current checkpoint index
    k = len(pts) - 1
    while k > 0 and pts[k][0] > adj.t + 1e-12:
        k -= 1
    if abs(pts[k][0] - adj.t) > 1e-9:
        raise ValueError("adjoint time is not on the segment checkpoint grid")
    lc, lau, lar, laz = adj.lambda_c, adj.lambda_au, adj.lambda_ar, adj.lambda_az
    ltr = adj.lambda_tr
    biu, bir, biz = adj.bias_int_u, adj.bias_int_r, adj.bias_int_z
    tau_m, tau_s = params.tau_m, params.tau_s
    b_u, b_r, b_z = params.b_u, params.b_r, params.b_z
    tau_k = None

    while k > 0 and pts[k][0] > t_target + 1e-12:
        t1, au1, ar1, az1, c1 = pts[k - 1]
        t2, au2, ar2, az2, c2 = pts[k]
        h = t2 - t1
        k -= 1
        if h <= 0:
            continue
        f2 = np.exp(-h / (2.0 * tau_s))
        aum = -b_u + (au1 + b_u) * f2
        azm = -b_z + (az1 + b_z) * f2
        u1, z1 = sigmoid(au1), tanh(az1)
        u2, z2 = sigmoid(au2), tanh(az2)
        um, zm = sigmoid(aum), tanh(azm)
        cd1 = u1 * (z1 - c1) / tau_m
        cd2 = u2 * (z2 - c2) / tau_m
        cm = _hermite_mid(c1, cd1, c2, cd2, h)
        spu1, spu2, spum = sigmoid_prime(au1), sigmoid_prime(au2), sigmoid_prime(aum)
        gp1, gp2, gpm = tanh_prime(az1), tanh_prime(az2), tanh_prime(azm)

        def rhs(lc_, lau_, lar_, laz_, u_, z_, c_, spu_, gp_):
            return (u_ * lc_ / tau_m,
                    (lau_ + spu_ * (c_ - z_) * lc_) / tau_s,
                    lar_ / tau_s,
                    (laz_ - u_ * gp_ * lc_) / tau_s)

        s1 = rhs(lc, lau, lar, laz, u2, z2, c2, spu2, gp2)
        s2 = rhs(lc - 0.5 * h * s1[0], lau - 0.5 * h * s1[1], lar - 0.5 * h * s1[2],
                 laz - 0.5 * h * s1[3], um, zm, cm, spum, gpm)
        s3 = rhs(lc - 0.5 * h * s2[0], lau - 0.5 * h * s2[1], lar - 0.5 * h * s2[2],
                 laz - 0.5 * h * s2[3], um, zm, cm, spum, gpm)
        s4 = rhs(lc - h * s3[0], lau - h * s3[1], lar - h * s3[2],
                 laz - h * s3[3], u1, z1, c1, spu1, gp1)

        biu += (h / 6.0) * (lau + 2.0 * (lau - 0.5 * h * s1[1]) + 2.0 * (lau - 0.5 * h * s2[1]) + (lau - h * s3[1]))
        bir += (h / 6.0) * (lar + 2.0 * (lar - 0.5 * h * s1[2]) + 2.0 * (lar - 0.5 * h * s2[2]) + (lar - h * s3[2]))
        biz += (h / 6.0) * (laz + 2.0 * (laz - 0.5 * h * s1[3]) + 2.0 * (laz - 0.5 * h * s2[3]) + (laz - h * s3[3]))

        lc = lc - (h / 6.0) * (s1[0] + 2.0 * s2[0] + 2.0 * s3[0] + s4[0])
        lau = lau - (h / 6.0) * (s1[1] + 2.0 * s2[1] + 2.0 * s3[1] + s4[1])
        lar = lar - (h / 6.0) * (s1[2] + 2.0 * s2[2] + 2.0 * s3[2] + s4[2])
        laz = laz - (h / 6.0) * (s1[3] + 2.0 * s2[3] + 2.0 * s3[3] + s4[3])

    return AdjointState(t_target, lc, lau, lar, laz, ltr, biu, bir, biz)


def default_grazing_floor(params: LayerParams, unit: int) -> float:
    return 1e-6 * float(params.theta[unit]) / params.tau_m


def adjoint_event_transition(adj: AdjointState, record: EventRecord,
                             params: LayerParams, loss_jump: float = 0.0,
                             trace_spec: TraceSpec | None = None,
                             grazing_floor: float | None = None,
                             clamp_velocity: float | None = None) -> AdjointState:
    """Jump the adjoints across an internal event, processed in backward time.

    adj carries the post-event values; the result carries the pre-event values
    the backward integration continues from. loss_jump is l(c+) - l(c-) when
    an instantaneous loss is discontinuous across the event (usually zero).

    clamp_velocity, when set, floors |cdot^-| in the division instead of
    raising on grazing events: gradients stay bounded near grazing at the cost
    of a bias there. Training uses this; gradient checks must not.
    """
    nk = record.event.unit
    if abs(adj.t - record.event.s) > 1e-9:
        raise ValueError("adjoint time does not match the event being processed")
    cdm_n = record.cdot_minus[nk]
    if clamp_velocity is not None:
        sign = 1.0 if cdm_n >= 0 else -1.0
        cdm_n = sign * max(abs(cdm_n), clamp_velocity)
    else:
        floor = grazing_floor if grazing_floor is not None else default_grazing_floor(params, nk)
        if abs(cdm_n) < floor:
            raise GrazingEventError(
                f"grazing event at t={record.event.s:.9g}, unit {nk}: "
                f"|cdot^-|={abs(cdm_n):.3g} < floor {floor:.3g}")

    n = params.n
    mask = np.ones(n, dtype=bool)
    mask[nk] = False
    amp = record.c_minus[nk]
    lau, lar, laz, lc = adj.lambda_au, adj.lambda_ar, adj.lambda_az, adj.lambda_c

    sum_u = float(params.V_u[mask, nk] @ lau[mask])
    sum_r = float(params.V_r[mask, nk] @ lar[mask])
    sum_z = float(params.V_z[mask, nk] @ laz[mask])

    lar_new = lar.copy()
    lar_new[nk] = lar[nk] + amp * sigmoid_prime(record.a_r_minus[nk]) * sum_z

    trace_term = 0.0
    if trace_spec is not None and adj.lambda_tr is not None:
        o = {u: i for i, u in enumerate(trace_spec.unit_of_output)}.get(nk)
        if o is not None:
            trace_term = amp * float(adj.lambda_tr[o])

    r_n = record.r_minus[nk]
    rdot_n = record.rdot_minus[nk]
    num = (params.tau_m * record.cdot_plus[nk] * lc[nk]
           - params.tau_m * float(lc[mask] @ (record.cdot_minus[mask] - record.cdot_plus[mask]))
           - amp * (sum_u + sum_r + (r_n + params.tau_s * rdot_n) * sum_z)
           - loss_jump
           - trace_term)
    lc_new = lc.copy()
    lc_new[nk] = num / (params.tau_m * cdm_n)

    return AdjointState(adj.t, lc_new, lau.copy(), lar_new, laz.copy(),
                        None if adj.lambda_tr is None else adj.lambda_tr.copy(),
                        adj.bias_int_u, adj.bias_int_r, adj.bias_int_z)


def accumulate_event_gradients(record: EventRecord, adj_plus: AdjointState,
                               grads: Gradients, params: LayerParams) -> None:
    """Per-event recurrent-weight contributions, using the post-event adjoints.

    Row = receiving unit, column = firing unit; the firing unit's own column
    entry gets nothing because its activations do not jump at its own event.
    The candidate-gate column carries the pre-event reset gate of the firing
    unit, the update/reset gate columns carry the bare amplitude.
    """
    nk = record.event.unit
    amp = record.c_minus[nk]
    mask = np.ones(params.n, dtype=bool)
    mask[nk] = False
    tau_s = params.tau_s
    grads.dV_u[mask, nk] += -tau_s * adj_plus.lambda_au[mask] * amp
    grads.dV_r[mask, nk] += -tau_s * adj_plus.lambda_ar[mask] * amp
    grads.dV_z[mask, nk] += -tau_s * adj_plus.lambda_az[mask] * record.r_minus[nk] * amp


def accumulate_input_gradients(record: InputRecord, adj: AdjointState,
                               grads: Gradients, params: LayerParams) -> None:
    """Input-weight contributions at an input event; the adjoints are
    continuous across it."""
    i = record.event.component
    x = record.event.value
    if i is None or x == 0.0:
        return
    tau_s = params.tau_s
    grads.dU_u[:, i] += -tau_s * adj.lambda_au * x
    grads.dU_r[:, i] += -tau_s * adj.lambda_ar * x
    grads.dU_z[:, i] += -tau_s * adj.lambda_az * x


def accumulate_bias_gradients(adj: AdjointState, grads: Gradients) -> None:
    """Fold the accumulated quadrature of the gate adjoints into the bias grads."""
    grads.db_u += adj.bias_int_u
    grads.db_r += adj.bias_int_r
    grads.db_z += adj.bias_int_z


def backward(trajectory: Trajectory, loss_spec: LossSpec, params: LayerParams,
             grazing_floor: float | None = None,
             clamp_velocity: float | None = None) -> Gradients:
    """Walk the trajectory in reverse: flow, readout jumps, event transitions,
    and per-event gradient accumulation. Thresholds are left untrained."""
    n = params.n
    trace_spec = loss_spec.trace
    n_out = len(trace_spec.unit_of_output) if trace_spec else None
    adj = AdjointState.terminal(n, trajectory.T, n_out)
    grads = Gradients.zeros_like(params)

    readouts = []  # (time, index), applied as the backward pass crosses them
    for k, t_r in enumerate(loss_spec.readout_times):
        readouts.append((float(t_r), k))
    applied = [False] * len(readouts)

    def apply_readouts_at(t: float):
        for j, (t_r, k) in enumerate(readouts):
            if applied[j] or abs(t_r - t) > 1e-9:
                continue
            c = _state_at_boundary(trajectory, t_r)
            tr = traces_at(trajectory, t_r, trace_spec) if trace_spec else None
            _, dl_dc, dl_dtr = loss_spec.grad_fn(k, t_r, c, tr)
            if dl_dc is not None:
                adj.lambda_c -= np.asarray(dl_dc) / params.tau_m
            if dl_dtr is not None:
                if adj.lambda_tr is None:
                    raise ValueError("loss reads traces but no TraceSpec attached")
                adj.lambda_tr -= np.asarray(dl_dtr) / trace_spec.tau_kappa
            applied[j] = True

    apply_readouts_at(trajectory.T)
    segments, records = trajectory.segments, trajectory.records
    for k in range(len(segments) - 1, -1, -1):
        seg = segments[k]
        span = adj.t - seg.t_start
        if span > 1e-12:
            if adj.lambda_tr is not None:
                adj.lambda_tr = adj.lambda_tr * np.exp(-span / trace_spec.tau_kappa)
            adj = adjoint_flow(adj, span, seg, params)
        adj.t = seg.t_start
        apply_readouts_at(adj.t)
        if k > 0:
            rec = records[k - 1]
            if isinstance(rec, EventRecord):
                accumulate_event_gradients(rec, adj, grads, params)
                # a loss term explicitly dependent on the event time enters the
                # transition in the slot of an instantaneous-loss jump
                lj = 0.0
                if loss_spec.event_time_grad is not None:
                    lj = -float(loss_spec.event_time_grad(rec))
                adj = adjoint_event_transition(adj, rec, params, lj, trace_spec,
                                               grazing_floor, clamp_velocity)
            else:
                accumulate_input_gradients(rec, adj, grads, params)
    if not all(applied):
        missing = [readouts[j][0] for j in range(len(readouts)) if not applied[j]]
        raise ValueError(f"readout times {missing} never matched a boundary; "
                         f"pass them as simulate breakpoints")
    accumulate_bias_gradients(adj, grads)
    return grads

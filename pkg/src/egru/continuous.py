"""Continuous-time event-based recurrent dynamics as a hybrid system.

Between events the gate activations decay exponentially (closed form) and the
internal state follows an ODE integrated with a fixed-substep classical
Runge-Kutta scheme. Threshold crossings are located by bisection on the flow;
crossing a threshold emits an event that resets the unit and kicks the
activations of all other units. External inputs arrive as timed events that
kick activations directly.

Trajectories record dense checkpoints between events so the backward pass can
reconstruct the forward state anywhere: activations exactly, the internal
state by cubic Hermite interpolation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import sigmoid, sigmoid_prime, tanh
from .params import LayerParams


class EventCapExceeded(RuntimeError):
    pass


@dataclass
class HybridState:
    t: float
    a_u: np.ndarray
    a_r: np.ndarray
    a_z: np.ndarray
    c: np.ndarray

    def copy(self) -> "HybridState":
        return HybridState(self.t, self.a_u.copy(), self.a_r.copy(),
                           self.a_z.copy(), self.c.copy())


@dataclass
class Event:
    s: float
    kind: str                 # "internal" | "input"
    unit: int | None = None   # firing unit (internal)
    component: int | None = None  # input channel (input)
    value: float = 0.0        # event amplitude: c^- of the unit, or x


@dataclass
class EventRecord:
    """Quantities captured at an internal event that the backward pass consumes."""

    event: Event
    c_minus: np.ndarray
    r_minus: np.ndarray
    cdot_minus: np.ndarray
    cdot_plus: np.ndarray
    a_u_minus: np.ndarray
    a_r_minus: np.ndarray
    a_z_minus: np.ndarray
    rdot_minus: np.ndarray


@dataclass
class InputRecord:
    event: Event


@dataclass
class Segment:
    """Smooth piece of trajectory: checkpoints (t, a_u, a_r, a_z, c), no events inside."""

    points: list = field(default_factory=list)

    def append(self, state: HybridState) -> None:
        self.points.append((state.t, state.a_u.copy(), state.a_r.copy(),
                            state.a_z.copy(), state.c.copy()))

    @property
    def t_start(self) -> float:
        return self.points[0][0]

    @property
    def t_end(self) -> float:
        return self.points[-1][0]


@dataclass
class Trajectory:
    segments: list
    records: list            # EventRecord | InputRecord, record k between segments k, k+1
    T: float
    final: HybridState

    def internal_events(self):
        return [r for r in self.records if isinstance(r, EventRecord)]

    def input_events(self):
        return [r for r in self.records if isinstance(r, InputRecord)]


@dataclass
class IntegratorConfig:
    max_step: float | None = None     # checkpoint gap; default tau_m / 20
    substeps: int = 1                 # RK4 substeps per checkpoint interval
    tol_event: float = 1e-9           # bisection tolerance on event times
    max_events: int = 1_000_000

    def step_for(self, params: LayerParams) -> float:
        return self.max_step if self.max_step is not None else params.tau_m / 20.0


def cdot_of(a_u, a_z, c, params: LayerParams):
    """State velocity between events."""
    return sigmoid(a_u) * (tanh(a_z) - c) / params.tau_m


def decay_activations(state: HybridState, dt: float, params: LayerParams) -> HybridState:
    """Exact activation decay toward -b over dt; internal state untouched."""
    if dt < 0:
        raise ValueError("dt must be nonnegative")
    f = np.exp(-dt / params.tau_s)
    return HybridState(
        state.t + dt,
        -params.b_u + (state.a_u + params.b_u) * f,
        -params.b_r + (state.a_r + params.b_r) * f,
        -params.b_z + (state.a_z + params.b_z) * f,
        state.c.copy(),
    )


def flow_c(state: HybridState, dt: float, params: LayerParams, substeps: int = 1) -> HybridState:
    """Advance the full smooth flow by dt: activations exact, c by classical RK4.

    The caller guarantees no threshold crossing inside the interval.
    """
    if dt < 0:
        raise ValueError("dt must be nonnegative")
    if dt == 0.0:
        return state.copy()
    h = dt / substeps
    fh = np.exp(-h / params.tau_s)
    f2 = np.exp(-h / (2.0 * params.tau_s))
    a_u, a_r, a_z, c = state.a_u, state.a_r, state.a_z, state.c
    tau_m = params.tau_m
    b_u, b_z = params.b_u, params.b_z
    for _ in range(substeps):
        au2 = -b_u + (a_u + b_u) * f2
        az2 = -b_z + (a_z + b_z) * f2
        au4 = -b_u + (a_u + b_u) * fh
        az4 = -b_z + (a_z + b_z) * fh
        u1, z1 = sigmoid(a_u), tanh(a_z)
        u2, z2 = sigmoid(au2), tanh(az2)
        u4, z4 = sigmoid(au4), tanh(az4)
        k1 = u1 * (z1 - c) / tau_m
        k2 = u2 * (z2 - (c + 0.5 * h * k1)) / tau_m
        k3 = u2 * (z2 - (c + 0.5 * h * k2)) / tau_m
        k4 = u4 * (z4 - (c + h * k3)) / tau_m
        c = c + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        a_u, a_z = au4, az4
    a_r = -params.b_r + (state.a_r + params.b_r) * np.exp(-dt / params.tau_s)
    return HybridState(state.t + dt, a_u, a_r, a_z, c)


def _refine_crossing(state: HybridState, h: float, trial: HybridState,
                     params: LayerParams, substeps: int, tol: float) -> HybridState:
    """Land on the earliest threshold crossing inside (state.t, state.t + h].

    Safeguarded Newton on c(s) - theta for the first unit to cross, using the
    flow velocity, with a bisection bracket as fallback. Returns a state at
    the crossing where at least one unit satisfies c >= theta.
    """
    theta = params.theta
    lo, g_lo = 0.0, None
    hi = h
    at_hi = trial
    # initial guess: linear interpolation for the unit that crosses lowest
    crossed = np.flatnonzero((state.c < theta) & (trial.c >= theta))
    i = int(crossed[0])
    g0 = state.c[i] - theta[i]
    g1 = trial.c[i] - theta[i]
    s = hi * g0 / (g0 - g1) if g1 != g0 else 0.5 * hi
    for _ in range(60):
        if hi - lo <= tol:
            break
        s = min(max(s, lo + 0.1 * (hi - lo)), hi - 0.1 * (hi - lo))
        cand = flow_c(state, s, params, substeps)
        if np.any(cand.c >= theta):
            hi, at_hi = s, cand
        else:
            lo = s
        # Newton step for the currently-earliest crossing unit
        i = int(np.flatnonzero(at_hi.c >= theta)[0])
        g = cand.c[i] - theta[i]
        cd = float(cdot_of(cand.a_u, cand.a_z, cand.c, params)[i])
        s = s - g / cd if cd != 0.0 else 0.5 * (lo + hi)
        if not (lo < s < hi):
            s = 0.5 * (lo + hi)
    return at_hi


def detect_crossing(state: HybridState, dt: float, params: LayerParams,
                    cfg: IntegratorConfig | None = None):
    """Earliest upward threshold crossing in (t, t+dt], or None.

    Scans the integrator grid for a sign change of c_i - theta_i, then refines
    inside the bracketing substep to tol_event. Simultaneous crossings resolve
    to the lowest unit index.
    """
    cfg = cfg or IntegratorConfig()
    if dt <= 0:
        raise ValueError("dt must be positive")
    gap = min(cfg.step_for(params), dt)
    nsub = max(1, int(np.ceil(dt / gap)))
    h = dt / nsub
    theta = params.theta
    cur = state
    for _ in range(nsub):
        nxt = flow_c(cur, h, params, cfg.substeps)
        if np.any((cur.c < theta) & (nxt.c >= theta)):
            at = _refine_crossing(cur, h, nxt, params, cfg.substeps, cfg.tol_event)
            unit = int(np.flatnonzero(at.c >= theta)[0])
            return unit, at.t
        cur = nxt
    return None


def apply_internal_event(state: HybridState, unit: int, params: LayerParams):
    """Fire unit: record pre-event quantities, kick other units, reset c[unit]."""
    n = params.n
    c_minus = state.c.copy()
    r_minus = sigmoid(state.a_r)
    cdot_minus = cdot_of(state.a_u, state.a_z, state.c, params)
    ardot = -(state.a_r + params.b_r) / params.tau_s
    rdot_minus = sigmoid_prime(state.a_r) * ardot
    amp = c_minus[unit]

    mask = np.ones(n, dtype=bool)
    mask[unit] = False
    a_u = state.a_u + np.where(mask, params.V_u[:, unit] * amp, 0.0)
    a_r = state.a_r + np.where(mask, params.V_r[:, unit] * amp, 0.0)
    a_z = state.a_z + np.where(mask, params.V_z[:, unit] * r_minus[unit] * amp, 0.0)
    c = state.c.copy()
    c[unit] = 0.0
    new = HybridState(state.t, a_u, a_r, a_z, c)
    rec = EventRecord(
        event=Event(state.t, "internal", unit=unit, value=float(amp)),
        c_minus=c_minus,
        r_minus=r_minus,
        cdot_minus=cdot_minus,
        cdot_plus=cdot_of(a_u, a_z, c, params),
        a_u_minus=state.a_u.copy(),
        a_r_minus=state.a_r.copy(),
        a_z_minus=state.a_z.copy(),
        rdot_minus=rdot_minus,
    )
    return new, rec


def apply_input_event(state: HybridState, component: int, value: float,
                      params: LayerParams) -> HybridState:
    """Kick every unit's gate activations through the input weights; c unchanged."""
    if not (0 <= component < params.d):
        raise IndexError(f"input component {component} out of range for d={params.d}")
    return HybridState(
        state.t,
        state.a_u + params.U_u[:, component] * value,
        state.a_r + params.U_r[:, component] * value,
        state.a_z + params.U_z[:, component] * value,
        state.c.copy(),
    )


def simulate(params: LayerParams, input_events, T: float,
             cfg: IntegratorConfig | None = None,
             breakpoints=()) -> Trajectory:
    """Run the hybrid system over [0, T] from the zero state.

    input_events: iterable of (s, component, value), times within [0, T].
    breakpoints: extra times forced onto segment boundaries (e.g. loss
    readouts), so the backward pass can jump exactly there.
    """
    cfg = cfg or IntegratorConfig()
    gap = cfg.step_for(params)
    n = params.n
    inputs = sorted((float(s), int(i), float(x)) for s, i, x in input_events)
    if inputs and (inputs[0][0] < 0 or inputs[-1][0] > T):
        raise ValueError("input event times must lie in [0, T]")
    marks = sorted({round(float(b), 15) for b in breakpoints if 0.0 < float(b) < T})

    state = HybridState(0.0, np.zeros(n), np.zeros(n), np.zeros(n), np.zeros(n))
    segments = [Segment()]
    segments[0].append(state)
    records: list = []
    n_events = 0

    def fire_ready_units():
        nonlocal state, n_events
        while True:
            ready = np.flatnonzero(state.c >= params.theta)
            if len(ready) == 0:
                return
            unit = int(ready[0])
            state, rec = apply_internal_event(state, unit, params)
            records.append(rec)
            segments.append(Segment())
            segments[-1].append(state)
            n_events += 1
            if n_events > cfg.max_events:
                raise EventCapExceeded(
                    f"exceeded {cfg.max_events} events by t={state.t:.6g}")

    ii = 0
    mi = 0
    while state.t < T - 1e-12:
        next_input = inputs[ii][0] if ii < len(inputs) else np.inf
        next_mark = marks[mi] if mi < len(marks) else np.inf
        seg_end = min(next_input, next_mark, T)
        while state.t < seg_end - 1e-12:
            h = min(gap, seg_end - state.t)
            trial = flow_c(state, h, params, cfg.substeps)
            crossed = (state.c < params.theta) & (trial.c >= params.theta)
            if not np.any(crossed):
                state = trial
                segments[-1].append(state)
                continue
            state = _refine_crossing(state, h, trial, params, cfg.substeps, cfg.tol_event)
            segments[-1].append(state)
            fire_ready_units()
        # boundary: input event, breakpoint, or T
        if ii < len(inputs) and abs(next_input - seg_end) < 1e-12 and seg_end < T - 1e-12:
            s, comp, val = inputs[ii]
            state = apply_input_event(state, comp, val, params)
            records.append(InputRecord(Event(state.t, "input", component=comp, value=val)))
            segments.append(Segment())
            segments[-1].append(state)
            fire_ready_units()
            ii += 1
            # several inputs may share a time
            while ii < len(inputs) and abs(inputs[ii][0] - s) < 1e-12:
                state = apply_input_event(state, inputs[ii][1], inputs[ii][2], params)
                records.append(InputRecord(Event(state.t, "input",
                                                 component=inputs[ii][1], value=inputs[ii][2])))
                segments.append(Segment())
                segments[-1].append(state)
                fire_ready_units()
                ii += 1
        elif mi < len(marks) and abs(next_mark - seg_end) < 1e-12:
            # plain boundary: split the segment so adjoint jumps land exactly here
            records.append(InputRecord(Event(state.t, "input", component=None, value=0.0)))
            segments.append(Segment())
            segments[-1].append(state)
            mi += 1
    return Trajectory(segments, records, T, state.copy())


def euler_discretize(params: LayerParams, input_events, T: float, dt: float):
    """Forward-Euler recursion of the smooth flow on a fixed grid.

    Input events are applied as activation jumps at their (grid-aligned)
    times. Returns (times, c_values) with c_values of shape (K+1, n). Used to
    check the discrete-to-continuous correspondence in the event-free regime.
    """
    n = params.n
    K = int(round(T / dt))
    inputs = sorted((float(s), int(i), float(x)) for s, i, x in input_events)
    a_u = np.zeros(n); a_r = np.zeros(n); a_z = np.zeros(n); c = np.zeros(n)
    ts = np.empty(K + 1); cs = np.empty((K + 1, n))
    ts[0] = 0.0; cs[0] = c
    ii = 0
    for k in range(K):
        t = k * dt
        while ii < len(inputs) and inputs[ii][0] <= t + 1e-12:
            _, i, x = inputs[ii]
            a_u = a_u + params.U_u[:, i] * x
            a_r = a_r + params.U_r[:, i] * x
            a_z = a_z + params.U_z[:, i] * x
            ii += 1
        u = sigmoid(a_u)
        z = tanh(a_z)
        c = c + dt * u * (z - c) / params.tau_m
        a_u = a_u + dt * (-(a_u + params.b_u) / params.tau_s)
        a_r = a_r + dt * (-(a_r + params.b_r) / params.tau_s)
        a_z = a_z + dt * (-(a_z + params.b_z) / params.tau_s)
        ts[k + 1] = (k + 1) * dt
        cs[k + 1] = c
    return ts, cs


def dump_events(trajectory: Trajectory, fh) -> None:
    """Line-oriented raster: `s kind unit value c_minus` per event."""
    for rec in trajectory.records:
        e = rec.event
        if e.kind == "internal":
            fh.write(f"{e.s:.9f} internal {e.unit} {e.value:.9f} {e.value:.9f}\n")
        elif e.component is not None:
            fh.write(f"{e.s:.9f} input {e.component} {e.value:.9f} nan\n")


def load_events(fh):
    """Parse the raster format back into Event objects."""
    out = []
    for line in fh:
        parts = line.split()
        if not parts:
            continue
        s, kind, idx, value = float(parts[0]), parts[1], int(parts[2]), float(parts[3])
        if kind == "internal":
            out.append(Event(s, "internal", unit=idx, value=value))
        else:
            out.append(Event(s, "input", component=idx, value=value))
    return out

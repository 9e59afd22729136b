"""Gradient validation harnesses.

Discrete: an independent per-scalar reverse-mode differentiation of the
surrogate graph (step function constant in value, triangular pseudo-derivative
as its derivative), compared entry-by-entry against the hand-rolled BPTT.

Continuous: central finite differences of the loss under re-simulation,
compared against the event-based adjoint gradients, restricted to instances
whose event structure is stable under the probe size.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import continuous as ct
from .adjoint import LossSpec, backward as adjoint_backward, evaluate_loss
from .discrete import egru_backward, egru_forward
from .params import Gradients, LayerParams, init_params

PARAM_BLOCKS = ("V_u", "V_r", "V_z", "U_u", "U_r", "U_z", "b_u", "b_r", "b_z")


# --- scalar reverse-mode autodiff (oracle only; deliberately naive) ---------

class Val:
    """One scalar node. Backward walks the exact graph, one float at a time."""

    __slots__ = ("v", "g", "parents", "back")

    def __init__(self, v, parents=(), back=None):
        self.v = float(v)
        self.g = 0.0
        self.parents = parents
        self.back = back

    def __add__(self, o):
        o = o if isinstance(o, Val) else Val(o)
        out = Val(self.v + o.v, (self, o))
        out.back = lambda g: (g, g)
        return out

    __radd__ = __add__

    def __mul__(self, o):
        o = o if isinstance(o, Val) else Val(o)
        out = Val(self.v * o.v, (self, o))
        out.back = lambda g, a=self.v, b=o.v: (g * b, g * a)
        return out

    __rmul__ = __mul__

    def __sub__(self, o):
        o = o if isinstance(o, Val) else Val(o)
        out = Val(self.v - o.v, (self, o))
        out.back = lambda g: (g, -g)
        return out

    def __rsub__(self, o):
        return Val(o) - self

    def __neg__(self):
        return Val(0.0) - self

    def sigmoid(self):
        s = 1.0 / (1.0 + np.exp(-self.v))
        out = Val(s, (self,))
        out.back = lambda g, s=s: (g * s * (1.0 - s),)
        return out

    def tanh(self):
        t = float(np.tanh(self.v))
        out = Val(t, (self,))
        out.back = lambda g, t=t: (g * (1.0 - t * t),)
        return out

    def abs(self):
        out = Val(abs(self.v), (self,))
        out.back = lambda g, s=np.sign(self.v): (g * s,)
        return out


def surrogate_step(c: Val, theta: Val, epsilon: float, peak: float = 1.0) -> Val:
    """Heaviside in value; triangular pseudo-derivative toward c and theta."""
    h = 1.0 if c.v >= theta.v else 0.0
    pd = peak * max(0.0, 1.0 - abs(c.v - theta.v) / epsilon)
    out = Val(h, (c, theta))
    out.back = lambda g, pd=pd: (g * pd, -g * pd)
    return out


def backprop(root: Val) -> None:
    order: list[Val] = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            stack.append((p, False))
    root.g = 1.0
    for node in reversed(order):
        if node.back is None:
            continue
        for parent, g in zip(node.parents, node.back(node.g)):
            parent.g += g


def _val_matrix(arr: np.ndarray):
    return [[Val(x) for x in row] for row in np.atleast_2d(arr)]


def _val_vector(arr: np.ndarray):
    return [Val(x) for x in arr]


def _grads_of(cells) -> np.ndarray:
    if isinstance(cells[0], list):
        return np.array([[c.g for c in row] for row in cells])
    return np.array([c.g for c in cells])


def scalar_surrogate_gradients(params: LayerParams, inputs: np.ndarray,
                               dLoss_dy: np.ndarray | None,
                               dLoss_dc_final: np.ndarray | None = None,
                               dLoss_dc: np.ndarray | None = None) -> Gradients:
    """Rebuild the unrolled surrogate graph with scalar nodes and differentiate."""
    inputs = np.atleast_2d(inputs)
    T, d = inputs.shape
    n = params.n
    V = {x: _val_matrix(getattr(params, "V_" + x)) for x in "urz"}
    U = {x: _val_matrix(getattr(params, "U_" + x)) for x in "urz"}
    b = {x: _val_vector(getattr(params, "b_" + x)) for x in "urz"}
    raw = _val_vector(params.theta_raw)
    if params.theta_transform == "sigmoid":
        theta_eff = [r.sigmoid() for r in raw]
    else:
        theta_eff = [r.abs() for r in raw]
    if len(theta_eff) == 1 and n > 1:
        theta_eff = theta_eff * n

    y_prev = [Val(0.0) for _ in range(n)]
    c_prev = [Val(0.0) for _ in range(n)]
    h_prev = [0.0] * n
    loss_terms: list[Val] = []
    for t in range(T):
        def preact(x, y_gate=None):
            out = []
            for i in range(n):
                acc = b[x][i]
                for j in range(d):
                    acc = acc + U[x][i][j] * inputs[t, j]
                for j in range(n):
                    term = V[x][i][j] * y_prev[j]
                    if y_gate is not None:
                        term = term * y_gate[j]
                    acc = acc + term
                out.append(acc)
            return out

        u = [a.sigmoid() for a in preact("u")]
        r = [a.sigmoid() for a in preact("r")]
        z = [a.tanh() for a in preact("z", y_gate=r)]  # candidate gate sees r * y_prev
        c, y, h_now = [], [], []
        for i in range(n):
            if params.reset_mode == "hard":
                base = c_prev[i] * (1.0 - h_prev[i])   # flag as constant
                ci = u[i] * z[i] + (1.0 - u[i]) * base
            else:
                ci = u[i] * z[i] + (1.0 - u[i]) * c_prev[i] - y_prev[i]
            hi = surrogate_step(ci, theta_eff[i], params.epsilon)
            yi = ci * hi
            c.append(ci)
            y.append(yi)
            h_now.append(hi.v)
            if dLoss_dy is not None and dLoss_dy[t][i] != 0.0:
                loss_terms.append(yi * dLoss_dy[t][i])
            if dLoss_dc is not None and dLoss_dc[t][i] != 0.0:
                loss_terms.append(ci * dLoss_dc[t][i])
            if t == T - 1 and dLoss_dc_final is not None and dLoss_dc_final[i] != 0.0:
                loss_terms.append(ci * dLoss_dc_final[i])
        y_prev, c_prev, h_prev = y, c, h_now

    total = Val(0.0)
    for term in loss_terms:
        total = total + term
    backprop(total)

    g = Gradients.zeros_like(params)
    for x in "urz":
        getattr(g, "dV_" + x)[...] = _grads_of(V[x])
        getattr(g, "dU_" + x)[...] = _grads_of(U[x])
        getattr(g, "db_" + x)[...] = _grads_of(b[x])
    g.dtheta[...] = _grads_of(raw)
    return g


def max_block_rel_err(got: Gradients, want: Gradients, floor: float = 1e-10) -> dict:
    out = {}
    for (name, a), (_, b) in zip(got.arrays(), want.arrays()):
        denom = np.maximum(floor, np.maximum(np.abs(a), np.abs(b)))
        out[name] = float(np.max(np.abs(a - b) / denom)) if a.size else 0.0
    return out


@dataclass
class DiscreteCheck:
    seed: int
    errors: dict
    max_err: float
    n_fired: int


def run_discrete_gradcheck(seed: int, n: int = 4, T: int = 6, d: int = 2,
                           reset_mode: str = "subtract") -> DiscreteCheck:
    """One random instance: hand-rolled sparse BPTT vs the scalar-graph oracle."""
    rng = np.random.default_rng(seed)
    params = init_params(n, d, seed, reset_mode=reset_mode,
                         theta_init_range=(0.15, 0.5), epsilon=0.4)
    # random-sign scale boost so events actually occur at this size
    for name in ("V_u", "V_r", "V_z", "U_u", "U_r", "U_z"):
        getattr(params, name)[...] *= 1.8
    inputs = rng.normal(0.0, 1.0, (T, d))
    trace = egru_forward(params, inputs)
    dLdy = rng.normal(0.0, 1.0, (T, n))
    dLdc_final = rng.normal(0.0, 1.0, n)
    got = egru_backward(params, trace, dLdy, dLdc_final)
    want = scalar_surrogate_gradients(params, inputs, dLdy, dLdc_final)
    errors = max_block_rel_err(got, want)
    return DiscreteCheck(seed, errors, max(errors.values()),
                         int(np.count_nonzero(trace.h_flags)))


# --- continuous finite-difference harness -----------------------------------

@dataclass
class ContinuousCheck:
    seed: int
    errors: dict            # per-block max rel err over stable entries
    max_err: float
    n_events: int
    unstable_entries: int   # entries whose perturbation changed the event structure


def _event_signature(traj: ct.Trajectory):
    return tuple(
        (r.event.kind, r.event.unit if r.event.kind == "internal" else r.event.component)
        for r in traj.records
    )


def make_gradcheck_instance(seed: int, n: int = 3, d: int = 2, T: float = 3.0,
                            min_events: int = 1, max_events: int = 6):
    """Random small network + input events, or None if the event count or the
    grazing margin is unsuitable."""
    rng = np.random.default_rng(seed)
    params = init_params(n, d, seed, tau_s=1.0, tau_m=1.5,
                         theta_init_range=(0.15, 0.3))
    for name in ("V_u", "V_r", "V_z", "U_u", "U_r", "U_z"):
        getattr(params, name)[...] *= 1.6
    n_inputs = int(rng.integers(2, 4))
    times = np.sort(rng.uniform(0.15, 0.7 * T, n_inputs))
    inputs = [(float(t), int(rng.integers(0, d)), float(rng.uniform(0.8, 1.6)))
              for t in times]
    w = rng.normal(0.0, 1.0, n)

    def grad_fn(k, t, c, traces):
        return float(w @ c), w, None

    loss_spec = LossSpec((T,), grad_fn)
    cfg = ct.IntegratorConfig(max_step=params.tau_m / 20.0)
    traj = ct.simulate(params, inputs, T, cfg)
    ev = traj.internal_events()
    if not (min_events <= len(ev) <= max_events):
        return None
    for r in ev:
        # generous grazing margin so the +-h probes stay differentiable
        if abs(r.cdot_minus[r.event.unit]) < 1e-3:
            return None
    return params, inputs, T, loss_spec, cfg


def run_continuous_gradcheck(instance, h: float = 1e-5, floor: float = 1e-8) -> ContinuousCheck:
    """Central differences vs adjoint for every recurrent/input/bias entry.

    Entries whose +-h re-simulation changes the event structure are excluded
    and counted; instances used by the acceptance gate are screened so none
    occur.
    """
    params, inputs, T, loss_spec, cfg = instance
    base = ct.simulate(params, inputs, T, cfg)
    sig = _event_signature(base)
    grads = adjoint_backward(base, loss_spec, params)

    errors = {}
    unstable = 0
    for block in PARAM_BLOCKS:
        arr = getattr(params, block)
        got = getattr(grads, "d" + block)
        worst = 0.0
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = arr[idx]
            arr[idx] = old + h
            tp = ct.simulate(params, inputs, T, cfg)
            arr[idx] = old - h
            tm = ct.simulate(params, inputs, T, cfg)
            arr[idx] = old
            if _event_signature(tp) != sig or _event_signature(tm) != sig:
                unstable += 1
                continue
            fd = (evaluate_loss(tp, loss_spec) - evaluate_loss(tm, loss_spec)) / (2.0 * h)
            ad = got[idx]
            err = abs(fd - ad) / max(floor, abs(fd), abs(ad))
            worst = max(worst, err)
        errors[block] = worst
    return ContinuousCheck(0, errors, max(errors.values()),
                           len(base.internal_events()), unstable)

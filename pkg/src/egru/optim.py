"""Adam, gradient clipping, exponential output traces, losses, and the
activity regularizers."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .discrete import DiscreteTrace, pseudo_derivative
from .params import Gradients, LayerParams, enforce_threshold_positivity


@dataclass
class AdamState:
    """First/second moments per named parameter array, plus step count."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def _slot(self, name: str, like: np.ndarray):
        if name not in self.m:
            self.m[name] = np.zeros_like(like)
            self.v[name] = np.zeros_like(like)
        return self.m[name], self.v[name]


def _adam_update(state: AdamState, name: str, param: np.ndarray, grad: np.ndarray) -> None:
    if state.weight_decay:
        grad = grad + state.weight_decay * param
    m, v = state._slot(name, param)
    m *= state.beta1
    m += (1.0 - state.beta1) * grad
    v *= state.beta2
    v += (1.0 - state.beta2) * grad * grad
    mh = m / (1.0 - state.beta1 ** state.step)
    vh = v / (1.0 - state.beta2 ** state.step)
    param -= state.lr * mh / (np.sqrt(vh) + state.eps_adam)


def adam_step(params: LayerParams, grads: Gradients, state: AdamState,
              extra: dict[str, tuple[np.ndarray, np.ndarray]] | None = None) -> None:
    """Bias-corrected Adam over all trainable fields, then threshold re-projection.

    extra: additional (param, grad) pairs updated with the same optimizer
    state, e.g. a task readout head.
    """
    state.step += 1
    for (name, param), (_, grad) in zip(params.trainable(), grads.arrays()):
        _adam_update(state, name, param, grad)
    if extra:
        for name, (param, grad) in extra.items():
            _adam_update(state, "extra__" + name, param, grad)
    enforce_threshold_positivity(params)


def clip_global_norm(grads: Gradients, max_norm: float) -> Gradients:
    """Scale all entries so the global L2 norm is at most max_norm. Idempotent."""
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = grads.global_norm()
    if norm > max_norm:
        grads.scale_(max_norm / norm)
    return grads


def exp_trace(y_seq: np.ndarray, tau_kappa: float) -> np.ndarray:
    """Leaky integration of an event sequence: trace_t = exp(-1/tau) trace_{t-1} + y_t.

    Works on (T, n) or (T, B, n); the time axis is first.
    """
    if tau_kappa <= 0:
        raise ValueError("tau_kappa must be positive")
    y_seq = np.asarray(y_seq, dtype=np.float64)
    decay = np.exp(-1.0 / tau_kappa)
    out = np.empty_like(y_seq)
    acc = np.zeros_like(y_seq[0])
    for t in range(y_seq.shape[0]):
        acc = decay * acc + y_seq[t]
        out[t] = acc
    return out


def exp_trace_grad(dLoss_dtrace_final: np.ndarray, T: int, tau_kappa: float) -> np.ndarray:
    """Backprop a gradient on the final trace onto each y_t: factor decay^(T-1-t)."""
    decay = np.exp(-1.0 / tau_kappa)
    steps = decay ** np.arange(T - 1, -1, -1)
    return steps.reshape((T,) + (1,) * dLoss_dtrace_final.ndim) * dLoss_dtrace_final


def bce_loss(logits: np.ndarray, targets: np.ndarray):
    """Binary cross-entropy on logits; returns (loss, dloss/dlogits)."""
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    # log(1 + e^{-|x|}) form avoids overflow on both tails
    loss = float(np.sum(np.maximum(logits, 0.0) - logits * targets
                        + np.log1p(np.exp(-np.abs(logits)))))
    p = 1.0 / (1.0 + np.exp(-logits))
    return loss, p - targets


def cross_entropy_softmax(readout: np.ndarray, label):
    """Softmax cross-entropy; supports (K,) with int label or (B, K) with (B,) labels.

    Returns (mean loss, dloss/dreadout) with the gradient of the mean.
    """
    x = np.asarray(readout, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
        labels = np.array([label])
        squeeze = True
    else:
        labels = np.asarray(label)
        squeeze = False
    shifted = x - x.max(axis=1, keepdims=True)
    logz = np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))
    logp = shifted - logz
    B = x.shape[0]
    loss = float(-np.mean(logp[np.arange(B), labels]))
    grad = np.exp(logp)
    grad[np.arange(B), labels] -= 1.0
    grad /= B
    if squeeze:
        grad = grad[0]
    return loss, grad


def sparsity_regularizers(trace: DiscreteTrace, params: LayerParams,
                          w_reg: float, w_v: float,
                          rate_target: float = 0.05, act_offset: float = 0.05):
    """Event-rate and near-threshold regularizers on a stored trace.

    L_reg = w_reg * (mean event indicator - rate_target); its gradient is
    routed through the pseudo-derivative. L_act = w_v * mean(c - (theta -
    act_offset)) with thresholds detached. Returns (L_reg, L_act, dc) where dc
    has the trace's shape and seeds the backward pass.
    """
    T, n = trace.c.shape[0], trace.c.shape[-1]
    count = trace.c.size // 1
    rate = float(np.count_nonzero(trace.h_flags)) / count
    l_reg = w_reg * (rate - rate_target)
    l_act = w_v * float(np.mean(trace.c - (params.theta - act_offset)))
    dc = np.zeros_like(trace.c)
    if w_reg:
        dc += (w_reg / count) * pseudo_derivative(trace.c, params.theta, params.epsilon)
    if w_v:
        dc += w_v / count
    return l_reg, l_act, dc

"""Training harnesses: continuous-time delay-copy with adjoint gradients, and
discrete-time pixel-sequence MNIST with batched sparse BPTT.

Both emit one metrics row per epoch (delay-copy: per optimizer step) and are
deterministic given (config, seed); worker threads only distribute fixed work
chunks whose results merge in a pinned order.
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import continuous as ct
from .adjoint import LossSpec, TraceSpec, backward as adjoint_backward, traces_at
from .data import DelayCopyConfig, all_patterns, delay_copy_sample, maxpool_downscale, mnist_idx_load
from .discrete import egru_backward_batch, egru_forward_batch
from .metrics import activity_sparsity, backward_sparsity, drive_events, write_metrics_csv
from .numerics import OpCounter, sigmoid
from .optim import AdamState, adam_step, bce_loss, cross_entropy_softmax, exp_trace_grad, sparsity_regularizers
from .params import Gradients, LayerParams, init_params, save_checkpoint


@dataclass
class DelayCopyRunConfig:
    """Continuous-model delay-copy run.

    The defaults encode the working recipe: slow gate activations carry the
    pattern through the delay while the update gate stays nearly closed, the
    cue opens the gate, and bits are decoded from the window-averaged output
    traces. Training uses the event-based adjoint gradients end to end.
    """

    seed: int = 0
    n_bits: int = 2
    n_units: int = 2
    max_steps: int = 5000
    lr: float = 0.0075
    clip: float = 0.25
    amplitude: float = 2.0
    gain: float = 8.0
    offset: float = 0.15
    tau_s: float = 6.0
    tau_m: float = 1.0
    tau_kappa: float = 0.5
    input_window: float = 0.8
    delay: float = 4.0
    recall_window: float = 1.6
    n_readouts: int = 5
    theta_init: tuple = (0.25, 0.4)
    b_u_init: float = 3.75       # added to the update-gate bias: positive
                                 # values open with slow state drift (memory)
    u_cue_init: float = 3.0      # added to the cue column of U_u: the cue
                                 # opens the update gate so the kick can move c
    z_cue_init: float = 0.0      # added to the cue column of U_z: upward kick
    cue_gate_only: bool = True   # zero the cue columns of U_z and U_r at init
                                 # so the cue acts purely through the gate
    # Optional inverted output code (set bits decoded from weak traces);
    # the default recipe uses the direct code.
    inverted: bool = False
    # shaping terms, annealed to a floor over aux_anneal_steps: hold targets
    # through the delay and a post-cue target, in units of theta, per bit value
    aux_weight: float = 1.0
    aux_anneal_steps: int = 400
    aux_floor: float = 0.25      # fraction of the weights kept after annealing
    aux_time_frac: float = 0.35  # kick readout at cue + frac * recall_window
    mem_weight: float = 1.0
    mem_set: float = 0.0         # hold target for set bits
    mem_clear: float = 0.0       # hold target for clear bits
    kick_set: float = 1.15       # post-cue target for set bits
    kick_clear: float = 0.1      # post-cue target for clear bits
    velocity_clamp: float = 0.2  # floor for |cdot^-| in adjoint event jumps;
                                 # bounds the near-grazing gradient spikes
    # data curriculum: one-hot patterns first, then the all-set pattern, then
    # all patterns including all-clear. Accuracy is always scored on all
    # patterns; entries are the steps at which the next group joins.
    pattern_phases: tuple = (150, 300)
    max_step: float = 0.1
    threads: int = 1
    record_walltime: bool = True


def window_trace_averages(trajectory, n_outputs: int, tau_kappa: float,
                          w0: float, w1: float):
    """Mean of the leaky output traces over [w0, w1], summed analytically from
    events: each event of unit o at time s <= w1 contributes
    amp * tau * (exp(-max(0, w0-s)/tau) - exp(-(w1-s)/tau)) / (w1 - w0)."""
    avg = np.zeros(n_outputs)
    W = w1 - w0
    for rec in trajectory.records:
        e = rec.event
        if e.kind != "internal" or e.unit >= n_outputs or e.s > w1:
            continue
        lead = max(0.0, w0 - e.s)
        avg[e.unit] += e.value * tau_kappa * (
            np.exp(-lead / tau_kappa) - np.exp(-(w1 - e.s) / tau_kappa)) / W
    return avg


def _delay_copy_loss_spec(cfg: DelayCopyRunConfig, task: DelayCopyConfig,
                          targets: np.ndarray, anneal: float,
                          theta: np.ndarray) -> LossSpec:
    """BCE on the window-averaged output traces, plus an annealed state-space
    curriculum: hold targets through the delay, then a post-cue kick target.

    The window average is a smooth function of the event times with the
    natural orientation (later events leave less area before the window
    closes), so its whole gradient enters through the per-event time
    derivative. The curriculum supplies gradients even on event-free
    trajectories, where the trace loss alone is blind.
    """
    trace_spec = TraceSpec(cfg.tau_kappa, tuple(range(cfg.n_bits)))
    n_bits = cfg.n_bits
    mapped = np.zeros(cfg.n_units)
    mapped[:n_bits] = 1.0
    bitmask = targets > 0
    bce_targets = (1.0 - targets) if cfg.inverted else targets

    def c_target(on_set, on_clear):
        out = np.zeros(cfg.n_units)
        out[:n_bits] = np.where(bitmask, on_set, on_clear) * theta[:n_bits]
        return out

    hold = c_target(cfg.mem_set, cfg.mem_clear)
    shaping = [
        (task.t_input + 0.6 * task.input_window, hold, cfg.mem_weight),
        (task.t_cue - 0.5 * cfg.delay, hold, cfg.mem_weight),
        (task.t_cue, hold, cfg.mem_weight),
        (task.t_cue + cfg.aux_time_frac * cfg.recall_window,
         c_target(cfg.kick_set, cfg.kick_clear), cfg.aux_weight),
    ]

    def grad_fn(k, t, c, traces):
        _, target, w = shaping[k]
        w = w * anneal
        diff = (c - target) * mapped
        return 0.5 * w * float(diff @ diff), w * diff, None

    times = tuple(t for t, _, _ in shaping)
    return LossSpec(times, grad_fn, trace_spec)


def _attach_window_bce(spec: LossSpec, cfg: DelayCopyRunConfig,
                       task: DelayCopyConfig, targets: np.ndarray, trajectory):
    """Compute the window-average BCE for a finished trajectory and wire its
    event-time gradient into the spec. Returns (bce_loss, decoded_bits)."""
    w0, w1 = task.t_cue, task.readout_times[-1]
    W = w1 - w0
    tau = cfg.tau_kappa
    bce_targets = (1.0 - targets) if cfg.inverted else targets
    avg = window_trace_averages(trajectory, cfg.n_bits, tau, w0, w1)
    logits = cfg.gain * (avg - cfg.offset)
    loss, dlogit = bce_loss(logits, bce_targets)

    def event_time_grad(rec):
        e = rec.event
        if e.unit >= cfg.n_bits or e.s > w1:
            return 0.0
        s = e.s
        # d/ds of tau * (exp(-max(0, w0-s)/tau) - exp(-(w1-s)/tau))
        if s >= w0:
            dA_ds = -np.exp(-(w1 - s) / tau)
        else:
            dA_ds = np.exp(-(w0 - s) / tau) - np.exp(-(w1 - s) / tau)
        return float(cfg.gain * dlogit[e.unit] * e.value * dA_ds / W)

    spec.event_time_grad = event_time_grad
    high = (avg > cfg.offset).astype(np.float64)
    decoded = (1.0 - high) if cfg.inverted else high
    return loss, decoded


def _delay_copy_pattern_pass(params: LayerParams, cfg: DelayCopyRunConfig,
                             task: DelayCopyConfig, bits: np.ndarray, icfg,
                             anneal: float, want_grad: bool = True):
    sample = delay_copy_sample(bits, task)
    spec = _delay_copy_loss_spec(cfg, task, sample.bits, anneal, params.theta)
    traj = ct.simulate(params, sample.events, task.T, icfg,
                       breakpoints=spec.readout_times)
    loss, predicted = _attach_window_bce(spec, cfg, task, sample.bits, traj)
    grads = None
    if want_grad:
        grads = adjoint_backward(traj, spec, params, clamp_velocity=cfg.velocity_clamp)
    correct = int(np.sum(predicted == sample.bits))
    return grads, loss, correct, traj


def train_delay_copy(cfg: DelayCopyRunConfig, out_dir=None):
    """Train the small continuous-time network until every bit of every pattern
    is reproduced; returns a summary dict."""
    task = DelayCopyConfig(cfg.n_bits, cfg.input_window, cfg.delay,
                           cfg.recall_window, cfg.amplitude,
                           n_readouts=cfg.n_readouts)
    def phase_patterns(step, all_pats):
        one_hot = [b for b in all_pats if b.sum() == 1]
        rest_set = [b for b in all_pats if b.sum() > 1]
        rest_clear = [b for b in all_pats if b.sum() == 0]
        if step <= cfg.pattern_phases[0]:
            return one_hot
        if step <= cfg.pattern_phases[1]:
            return one_hot + rest_set
        return all_pats

    params = init_params(cfg.n_units, cfg.n_bits + 1, cfg.seed,
                         tau_s=cfg.tau_s, tau_m=cfg.tau_m,
                         theta_init_range=cfg.theta_init)
    params.b_u += cfg.b_u_init
    if cfg.cue_gate_only:
        params.U_z[:, cfg.n_bits] = 0.0
        params.U_r[:, cfg.n_bits] = 0.0
    params.U_u[:, cfg.n_bits] += cfg.u_cue_init
    params.U_z[:, cfg.n_bits] += cfg.z_cue_init
    patterns = all_patterns(cfg.n_bits)
    total_bits = cfg.n_bits * len(patterns)
    icfg = ct.IntegratorConfig(max_step=cfg.max_step)
    adam = AdamState(lr=cfg.lr)
    rows = []
    t0 = time.time()
    converged_step = None
    last_trajs = None

    pool = ThreadPoolExecutor(cfg.threads) if cfg.threads > 1 else None
    try:
        for step in range(1, cfg.max_steps + 1):
            anneal = max(cfg.aux_floor, 1.0 - (step - 1) / cfg.aux_anneal_steps)
            active = phase_patterns(step, patterns)
            active_keys = {tuple(b) for b in active}
            jobs = [(bits, tuple(bits) in active_keys) for bits in patterns]
            if pool is not None:
                results = list(pool.map(
                    lambda job: _delay_copy_pattern_pass(params, cfg, task, job[0],
                                                         icfg, anneal, job[1]),
                    jobs))
            else:
                results = [_delay_copy_pattern_pass(params, cfg, task, bits, icfg,
                                                    anneal, grad)
                           for bits, grad in jobs]
            total = Gradients.zeros_like(params)
            loss_sum = 0.0
            correct = 0
            for grads, loss, corr, _ in results:   # merge in pattern order
                if grads is not None:
                    total.add_(grads)
                loss_sum += loss
                correct += corr
            acc = correct / total_bits
            if not np.isfinite(loss_sum):
                raise FloatingPointError(f"loss diverged at step {step}")
            rows.append({
                "epoch": step, "train_loss": loss_sum, "val_metric": acc,
                "alpha": float("nan"), "beta": float("nan"),
                "effective_mac": 0, "dense_mac": 0,
                "wall_seconds": (time.time() - t0) if cfg.record_walltime else 0.0,
            })
            if acc == 1.0:
                converged_step = step
                last_trajs = [r[3] for r in results]
                break
            norm = total.global_norm()
            if norm > cfg.clip:
                total.scale_(cfg.clip / norm)
            adam_step(params, total, adam)
    finally:
        if pool is not None:
            pool.shutdown()

    result = {
        "converged_step": converged_step,
        "final_accuracy": rows[-1]["val_metric"] if rows else 0.0,
        "steps_run": len(rows),
        "wall_seconds": time.time() - t0,
        "params": params,
        "rows": rows,
        "trajectories": last_trajs,
        "task": task,
    }
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(params, out / "checkpoint.npz", seed=cfg.seed)
        write_metrics_csv(out / "metrics.csv", rows)
        if last_trajs is not None:
            with open(out / "events.txt", "w") as fh:
                for bits, traj in zip(patterns, last_trajs):
                    fh.write(f"# pattern {''.join(str(int(b)) for b in bits)}\n")
                    ct.dump_events(traj, fh)
    return result


@dataclass
class SMNISTRunConfig:
    seed: int = 0
    n_units: int = 128
    epochs: int = 20
    batch: int = 500
    micro_batch: int = 100
    lr: float = 1e-3
    clip: float = 0.25
    tau_kappa: float = 10.0
    epsilon: float = 1.0
    downscale: int = 2           # 28x28 -> 14x14
    limit_train: int | None = None
    limit_test: int | None = None
    w_reg: float = 0.0
    w_v: float = 0.0
    theta_init: tuple | None = None   # effective threshold init band; None
                                      # keeps the normal(0, sqrt(2)) draw
    input_gain: float = 1.0           # scales the input weights after init
    threads: int = 1
    record_walltime: bool = True
    data_dir: str = "data/mnist"


def _load_smnist(cfg: SMNISTRunConfig):
    root = Path(cfg.data_dir)
    def find(stem):
        for suffix in ("", ".gz"):
            p = root / (stem + suffix)
            if p.exists():
                return p
        raise FileNotFoundError(f"missing {stem}[.gz] under {root}")
    xtr, ytr = mnist_idx_load(find("train-images-idx3-ubyte"), find("train-labels-idx1-ubyte"))
    xte, yte = mnist_idx_load(find("t10k-images-idx3-ubyte"), find("t10k-labels-idx1-ubyte"))
    if cfg.limit_train:
        xtr, ytr = xtr[:cfg.limit_train], ytr[:cfg.limit_train]
    if cfg.limit_test:
        xte, yte = xte[:cfg.limit_test], yte[:cfg.limit_test]
    if cfg.downscale > 1:
        xtr = maxpool_downscale(xtr, cfg.downscale)
        xte = maxpool_downscale(xte, cfg.downscale)
    return xtr, ytr, xte, yte


def _as_sequences(images: np.ndarray) -> np.ndarray:
    """(B, H, W) -> (T, B, 1) row-major pixel sequences."""
    B = images.shape[0]
    return images.reshape(B, -1).T[:, :, None]


def _forward_readout(params, head, x_seq, counter=None):
    trace = egru_forward_batch(params, x_seq, counter)
    decay = np.exp(-1.0 / head["tau_kappa"])
    tr = np.zeros((x_seq.shape[1], params.n))
    for t in range(x_seq.shape[0]):
        tr = decay * tr + trace.y[t]
    logits = tr @ head["W_out"].T + head["b_out"]
    return trace, tr, logits


def train_smnist(cfg: SMNISTRunConfig, out_dir=None, progress=None):
    """Batched discrete training with softmax readout on the final output trace."""
    xtr, ytr, xte, yte = _load_smnist(cfg)
    d = 1
    rng = np.random.default_rng(cfg.seed)
    params = init_params(cfg.n_units, d, cfg.seed, epsilon=cfg.epsilon,
                         tau_s=1.0, tau_m=1.0,
                         theta_init_range=cfg.theta_init)
    if cfg.input_gain != 1.0:
        params.U_u *= cfg.input_gain
        params.U_r *= cfg.input_gain
        params.U_z *= cfg.input_gain
    k = np.sqrt(6.0 / (cfg.n_units + 10))
    head = {
        "W_out": rng.uniform(-k, k, (10, cfg.n_units)),
        "b_out": np.zeros(10),
        "tau_kappa": cfg.tau_kappa,
    }
    adam = AdamState(lr=cfg.lr)
    rows = []
    t0 = time.time()
    n = cfg.n_units
    ntrain = xtr.shape[0]
    pool = ThreadPoolExecutor(cfg.threads) if cfg.threads > 1 else None

    def micro_pass(mb_images, mb_labels, counter):
        x_seq = _as_sequences(mb_images)
        T, B, _ = x_seq.shape
        trace, tr, logits = _forward_readout(params, head, x_seq, counter)
        loss, dlogits = cross_entropy_softmax(logits, mb_labels)
        dtr = dlogits @ head["W_out"]
        dW = dlogits.T @ tr
        db = np.sum(dlogits, axis=0)
        dLdy = exp_trace_grad(dtr, T, cfg.tau_kappa)
        dLdc = None
        reg = 0.0
        if cfg.w_reg or cfg.w_v:
            l_reg, l_act, dLdc = sparsity_regularizers(trace, params, cfg.w_reg, cfg.w_v)
            reg = l_reg + l_act
        grads = egru_backward_batch(params, trace, dLdy, counter=counter, dLoss_dc=dLdc)
        acc = float(np.mean(np.argmax(logits, axis=1) == mb_labels))
        events = drive_events(trace)
        alpha = activity_sparsity(trace)
        beta = backward_sparsity(trace, params)
        return grads, (dW, db), loss + reg, acc, alpha, beta, B

    try:
        for epoch in range(1, cfg.epochs + 1):
            order = rng.permutation(ntrain)
            loss_acc = 0.0
            counter = OpCounter()
            batches = 0
            for bstart in range(0, ntrain - cfg.batch + 1, cfg.batch):
                bidx = order[bstart:bstart + cfg.batch]
                total = Gradients.zeros_like(params)
                dW_total = np.zeros_like(head["W_out"])
                db_total = np.zeros_like(head["b_out"])
                batch_loss = 0.0
                chunks = [bidx[i:i + cfg.micro_batch]
                          for i in range(0, len(bidx), cfg.micro_batch)]
                def run_chunk(ch):
                    c = OpCounter()
                    out = micro_pass(xtr[ch], ytr[ch], c)
                    return out, c
                if pool is not None:
                    outs = list(pool.map(run_chunk, chunks))
                else:
                    outs = [run_chunk(ch) for ch in chunks]
                nb = len(chunks)
                for (grads, (dW, db), loss, _acc, _al, _be, B), c in outs:
                    scale = B / cfg.batch
                    total.add_(grads.scale_(scale))
                    dW_total += dW * scale
                    db_total += db * scale
                    batch_loss += loss * scale
                    counter.merge(c)
                norm = np.sqrt(total.global_norm() ** 2
                               + float(np.sum(dW_total ** 2)) + float(np.sum(db_total ** 2)))
                if norm > cfg.clip:
                    s = cfg.clip / norm
                    total.scale_(s)
                    dW_total *= s
                    db_total *= s
                adam_step(params, total, adam,
                          extra={"W_out": (head["W_out"], dW_total),
                                 "b_out": (head["b_out"], db_total)})
                loss_acc += batch_loss
                batches += 1
            # evaluation pass
            test_acc, alpha, beta, eff_mac, dense_mac = evaluate_smnist(
                params, head, xte, yte, cfg, pool)
            row = {
                "epoch": epoch,
                "train_loss": loss_acc / max(1, batches),
                "val_metric": test_acc,
                "alpha": alpha,
                "beta": beta,
                "effective_mac": eff_mac,
                "dense_mac": dense_mac,
                "wall_seconds": (time.time() - t0) if cfg.record_walltime else 0.0,
            }
            rows.append(row)
            if progress:
                progress(row)
    finally:
        if pool is not None:
            pool.shutdown()

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(params, out / "checkpoint.npz", seed=cfg.seed,
                        extra={"W_out": head["W_out"], "b_out": head["b_out"]})
        write_metrics_csv(out / "metrics.csv", rows)
    return {"rows": rows, "params": params, "head": head,
            "test_accuracy": rows[-1]["val_metric"] if rows else 0.0}


def evaluate_smnist(params, head, images, labels, cfg, pool=None, chunk=200):
    """Forward-only accuracy plus sparsity and MAC accounting."""
    n = params.n
    total = 0
    hits = 0
    events_drive = 0
    events_all = 0
    live = 0
    unit_steps = 0
    counter = OpCounter()
    chunks = [slice(i, min(i + chunk, images.shape[0])) for i in range(0, images.shape[0], chunk)]
    def run(sl):
        c = OpCounter()
        x_seq = _as_sequences(images[sl])
        trace, tr, logits = _forward_readout(params, head, x_seq, c)
        pred = np.argmax(logits, axis=1)
        from .discrete import pseudo_derivative
        live_mask = trace.h_flags | (pseudo_derivative(trace.c, params.theta, params.epsilon) > 0.0)
        return (int(np.sum(pred == labels[sl])), int(x_seq.shape[1]),
                drive_events(trace), int(np.count_nonzero(trace.h_flags)),
                int(np.count_nonzero(live_mask)), trace.h_flags.size, c)
    outs = [run(sl) for sl in chunks] if pool is None else list(pool.map(run, chunks))
    for h, b, ed, ea, lv, us, c in outs:
        hits += h; total += b
        events_drive += ed; events_all += ea; live += lv; unit_steps += us
        counter.merge(c)
    T = images.shape[1] * images.shape[2]
    dense_mac = 3 * n * n * T * total
    eff_mac = 3 * n * events_drive
    alpha = 1.0 - events_all / unit_steps
    beta = 1.0 - live / unit_steps
    return hits / total, alpha, beta, eff_mac, dense_mac


def load_run_config(cls, path=None, overrides=None):
    """Config = dataclass defaults, overlaid with a JSON file, then CLI overrides."""
    cfg = cls()
    data = {}
    if path:
        data.update(json.loads(Path(path).read_text()))
    if overrides:
        data.update({k: v for k, v in overrides.items() if v is not None})
    for key, value in data.items():
        if not hasattr(cfg, key):
            raise KeyError(f"unknown config key {key!r} for {cls.__name__}")
        current = getattr(cfg, key)
        if isinstance(current, tuple) and isinstance(value, list):
            value = tuple(value)
        setattr(cfg, key, value)
    return cfg

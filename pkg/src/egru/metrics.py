"""Activity/backward sparsity and effective multiply-accumulate reporting."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .discrete import pseudo_derivative
from .params import LayerParams


def activity_sparsity(trace) -> float:
    """Fraction of unit-timesteps that produced no event, in [0, 1]."""
    h = np.asarray(trace.h_flags)
    if h.size == 0:
        raise ValueError("empty trace")
    return 1.0 - float(np.count_nonzero(h)) / h.size


def backward_sparsity(trace, params: LayerParams) -> float:
    """Fraction of unit-timesteps with neither pseudo-derivative support nor an
    event, i.e. contributing nothing through the threshold nonlinearity."""
    c = np.asarray(trace.c)
    if c.size == 0:
        raise ValueError("empty trace")
    live = np.asarray(trace.h_flags) | (pseudo_derivative(c, params.theta, params.epsilon) > 0.0)
    return 1.0 - float(np.count_nonzero(live)) / live.size


def drive_events(trace) -> int:
    """Total events that drive recurrent work: sum over t of events at t-1.

    The first step is driven by the (empty) initial state, the final step's
    events never drive anything.
    """
    h = np.asarray(trace.h_flags)
    return int(np.count_nonzero(h[:-1]))


@dataclass
class MacReport:
    dense_recurrent: int
    effective_recurrent: int
    input_mac: int
    pointwise_adds: int
    pointwise_nonlin: int
    alpha: float            # activity sparsity over all steps
    alpha_drive: float      # activity sparsity of the steps that drive work

    @property
    def ratio(self) -> float:
        return self.effective_recurrent / self.dense_recurrent if self.dense_recurrent else 0.0


def effective_mac_report(counter, trace, params: LayerParams) -> MacReport:
    """Check the counter against the event record and report dense vs effective.

    The instrumented recurrent MAC must equal 3 * n * (number of driving
    events) exactly: both come from the same event sets. Input-side MACs are
    whatever the counter holds beyond the recurrent identity.
    """
    h = np.asarray(trace.h_flags)
    n = h.shape[-1]
    steps = h.size // n
    expected_recurrent = 3 * n * drive_events(trace)
    input_mac = counter.mac - expected_recurrent
    if input_mac < 0:
        raise AssertionError(
            f"counter {counter.mac} below the recurrent identity {expected_recurrent}")
    alpha = activity_sparsity(trace)
    alpha_drive = 1.0 - drive_events(trace) / (n * steps)
    report = MacReport(
        dense_recurrent=3 * n * n * steps,
        effective_recurrent=expected_recurrent,
        input_mac=input_mac,
        pointwise_adds=counter.adds,
        pointwise_nonlin=counter.nonlin,
        alpha=alpha,
        alpha_drive=alpha_drive,
    )
    # exact identity: effective / dense == 1 - alpha_drive
    lhs = report.effective_recurrent * 1.0
    rhs = report.dense_recurrent * (1.0 - alpha_drive)
    if abs(lhs - rhs) > 1e-6 * max(1.0, rhs):
        raise AssertionError(f"MAC identity violated: {lhs} vs {rhs}")
    return report


METRICS_FIELDS = ("epoch", "train_loss", "val_metric", "alpha", "beta",
                  "effective_mac", "dense_mac", "wall_seconds")


def write_metrics_csv(path, rows) -> None:
    """One row per epoch with the fixed schema; floats rendered repr-stably."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRICS_FIELDS)
        for row in rows:
            w.writerow([_fmt(row[k]) for k in METRICS_FIELDS])


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.10g}"
    return v

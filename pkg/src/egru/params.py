"""Trainable parameters, initialization, threshold positivity, and checkpoints."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .numerics import sigmoid, sigmoid_prime

TRAINABLE_FIELDS = ("V_u", "V_r", "V_z", "U_u", "U_r", "U_z", "b_u", "b_r", "b_z", "theta_raw")


@dataclass
class LayerParams:
    """All weights, biases and constants of one event-based recurrent layer.

    ``theta_raw`` is the stored free parameter; the effective thresholds
    ``theta`` are obtained through the configured positivity transform and
    refreshed by :func:`enforce_threshold_positivity` after every update.
    """

    V_u: np.ndarray
    V_r: np.ndarray
    V_z: np.ndarray
    U_u: np.ndarray
    U_r: np.ndarray
    U_z: np.ndarray
    b_u: np.ndarray
    b_r: np.ndarray
    b_z: np.ndarray
    theta_raw: np.ndarray
    theta_mode: str = "per_unit"          # per_unit | scalar
    theta_transform: str = "sigmoid"      # sigmoid | abs
    reset_mode: str = "subtract"          # subtract | hard
    tau_s: float = 1.0
    tau_m: float = 1.0
    epsilon: float = 1.0
    theta: np.ndarray = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return self.V_u.shape[0]

    @property
    def d(self) -> int:
        return self.U_u.shape[1]

    def trainable(self):
        """(name, array) pairs in a fixed order; update order is pinned to this."""
        return [(name, getattr(self, name)) for name in TRAINABLE_FIELDS]

    def copy(self) -> "LayerParams":
        return LayerParams(
            *(getattr(self, f).copy() for f in TRAINABLE_FIELDS),
            theta_mode=self.theta_mode,
            theta_transform=self.theta_transform,
            reset_mode=self.reset_mode,
            tau_s=self.tau_s,
            tau_m=self.tau_m,
            epsilon=self.epsilon,
            theta=None if self.theta is None else self.theta.copy(),
        )


@dataclass
class Gradients:
    """Additive accumulator, shape-congruent with the trainable fields."""

    dV_u: np.ndarray
    dV_r: np.ndarray
    dV_z: np.ndarray
    dU_u: np.ndarray
    dU_r: np.ndarray
    dU_z: np.ndarray
    db_u: np.ndarray
    db_r: np.ndarray
    db_z: np.ndarray
    dtheta: np.ndarray

    @classmethod
    def zeros_like(cls, params: LayerParams) -> "Gradients":
        return cls(*(np.zeros_like(getattr(params, f)) for f in TRAINABLE_FIELDS))

    def arrays(self):
        return [
            (name, getattr(self, "d" + name.replace("_raw", "")))
            for name in TRAINABLE_FIELDS
        ]

    def add_(self, other: "Gradients") -> "Gradients":
        for (_, a), (_, b) in zip(self.arrays(), other.arrays()):
            a += b
        return self

    def scale_(self, s: float) -> "Gradients":
        for _, a in self.arrays():
            a *= s
        return self

    def global_norm(self) -> float:
        total = 0.0
        for _, a in self.arrays():
            total += float(np.sum(a * a))
        return float(np.sqrt(total))


def _theta_from_raw(raw: np.ndarray, transform: str, n: int) -> np.ndarray:
    if transform == "sigmoid":
        eff = sigmoid(raw)
    elif transform == "abs":
        eff = np.abs(raw)
    else:
        raise ValueError(f"unknown theta transform {transform!r}")
    if eff.shape == (1,) and n > 1:
        eff = np.full(n, eff[0])
    return eff


def enforce_threshold_positivity(params: LayerParams) -> LayerParams:
    """Refresh effective thresholds from the raw parameter.

    sigmoid mode keeps the raw value so gradients flow through the transform;
    abs mode replaces the raw parameter by its absolute value.
    """
    if params.theta_transform == "abs":
        np.abs(params.theta_raw, out=params.theta_raw)
        # exact zero would break the theta > 0 invariant
        np.maximum(params.theta_raw, 1e-12, out=params.theta_raw)
    params.theta = _theta_from_raw(params.theta_raw, params.theta_transform, params.n)
    return params


def theta_transform_chain(params: LayerParams, dtheta_effective: np.ndarray) -> np.ndarray:
    """Map a gradient w.r.t. effective thresholds to one w.r.t. theta_raw."""
    if params.theta_transform == "sigmoid":
        local = sigmoid_prime(params.theta_raw)
    else:
        local = np.sign(params.theta_raw)
    if params.theta_raw.shape == (1,):
        return np.array([np.sum(dtheta_effective)]) * local
    return dtheta_effective * local


def init_params(
    n: int,
    d: int,
    seed: int,
    *,
    theta_mode: str = "per_unit",
    theta_transform: str = "sigmoid",
    reset_mode: str = "subtract",
    tau_s: float = 1.0,
    tau_m: float = 1.0,
    epsilon: float = 1.0,
    theta_init_range: tuple[float, float] | None = None,
) -> LayerParams:
    """Xavier-uniform weights, fan-in uniform biases, normal(0, sqrt(2)) raw thresholds.

    ``theta_init_range=(lo, hi)`` overrides the threshold draw with effective
    values uniform on [lo, hi], mapped back through the inverse transform.
    Deterministic per seed; the draw order is part of the format.
    """
    if n < 1 or d < 1:
        raise ValueError(f"invalid dimensions n={n}, d={d}")
    rng = np.random.default_rng(seed)
    bv = np.sqrt(6.0 / (n + n))
    bu = np.sqrt(6.0 / (n + d))
    bb = 1.0 / np.sqrt(n)
    V = [rng.uniform(-bv, bv, (n, n)) for _ in range(3)]
    U = [rng.uniform(-bu, bu, (n, d)) for _ in range(3)]
    b = [rng.uniform(-bb, bb, n) for _ in range(3)]
    k = 1 if theta_mode == "scalar" else n
    if theta_mode not in ("per_unit", "scalar"):
        raise ValueError(f"unknown theta mode {theta_mode!r}")
    if theta_init_range is not None:
        lo, hi = theta_init_range
        eff = rng.uniform(lo, hi, k)
        if theta_transform == "sigmoid":
            raw = np.log(eff / (1.0 - eff))
        else:
            raw = eff.copy()
    else:
        raw = rng.normal(0.0, np.sqrt(2.0), k)
    params = LayerParams(
        V[0], V[1], V[2], U[0], U[1], U[2], b[0], b[1], b[2], raw,
        theta_mode=theta_mode,
        theta_transform=theta_transform,
        reset_mode=reset_mode,
        tau_s=tau_s,
        tau_m=tau_m,
        epsilon=epsilon,
    )
    return enforce_threshold_positivity(params)


# --- checkpoint container -------------------------------------------------
#
# A checkpoint is a .npz with one named float64 array per trainable field,
# plus a "meta" entry holding a JSON string with dims, mode flags, time
# constants, the seed, and any extra arrays under "extra__<name>".

def save_checkpoint(params: LayerParams, path, *, seed: int | None = None,
                    extra: dict[str, np.ndarray] | None = None) -> None:
    meta = {
        "n": params.n,
        "d": params.d,
        "theta_mode": params.theta_mode,
        "theta_transform": params.theta_transform,
        "reset_mode": params.reset_mode,
        "tau_s": params.tau_s,
        "tau_m": params.tau_m,
        "epsilon": params.epsilon,
        "seed": seed,
    }
    arrays = {name: getattr(params, name) for name in TRAINABLE_FIELDS}
    if extra:
        for k, v in extra.items():
            arrays[f"extra__{k}"] = v
    arrays["meta"] = np.array(json.dumps(meta))
    np.savez(path, **arrays)


def load_checkpoint(path) -> tuple[LayerParams, dict]:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        fields = [z[name].astype(np.float64) for name in TRAINABLE_FIELDS]
        extra = {
            k[len("extra__"):]: z[k].astype(np.float64)
            for k in z.files if k.startswith("extra__")
        }
    params = LayerParams(
        *fields,
        theta_mode=meta["theta_mode"],
        theta_transform=meta["theta_transform"],
        reset_mode=meta["reset_mode"],
        tau_s=meta["tau_s"],
        tau_m=meta["tau_m"],
        epsilon=meta["epsilon"],
    )
    enforce_threshold_positivity(params)
    meta["extra"] = extra
    return params, meta

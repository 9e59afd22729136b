"""Batch entry points.

Every run takes a JSON config (documented per-command dataclasses in
training.py / this module); --seed, --threads and --out override top-level
keys. Outputs land in the run directory: config.json, metrics.csv,
checkpoint.npz, events.txt, and rendered figures. Commands exit nonzero on
any failed check.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import continuous as ct
from .data import delay_copy_sample, DelayCopyConfig
from .discrete import egru_forward_batch
from .gradcheck import (make_gradcheck_instance, run_continuous_gradcheck,
                        run_discrete_gradcheck)
from .metrics import activity_sparsity, backward_sparsity, drive_events
from .numerics import OpCounter
from .params import init_params, load_checkpoint
from .training import (DelayCopyRunConfig, SMNISTRunConfig, load_run_config,
                       train_delay_copy, train_smnist)


def _write_config(out_dir: Path, cfg) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(json.dumps(asdict(cfg), indent=2) + "\n")


def cmd_gradcheck(args) -> int:
    overrides = {"seed": args.seed}
    data = {}
    if args.config:
        data = json.loads(Path(args.config).read_text())
    model = args.model or data.get("model", "continuous")
    seed = args.seed if args.seed is not None else data.get("seed", 0)
    if model == "discrete":
        n = data.get("n", 4)
        T = data.get("T", 6)
        count = data.get("instances", 20)
        tol = data.get("tolerance", 1e-9)
        worst = 0.0
        for k in range(count):
            chk = run_discrete_gradcheck(seed + k, n=n, T=T)
            worst = max(worst, chk.max_err)
            print(f"instance {k}: fired={chk.n_fired} max_rel_err={chk.max_err:.3e}")
        print(f"discrete gradcheck: max rel err {worst:.3e} (tolerance {tol:g})")
        ok = worst < tol
    else:
        n = data.get("n", 3)
        count = data.get("instances", 20)
        tol = data.get("tolerance", 1e-2)
        worst = 0.0
        found = 0
        trial = 0
        while found < count and trial < 50 * count:
            inst = make_gradcheck_instance(seed + trial, n=n)
            trial += 1
            if inst is None:
                continue
            found += 1
            res = run_continuous_gradcheck(inst)
            worst = max(worst, res.max_err)
            blocks = " ".join(f"{k}={v:.1e}" for k, v in res.errors.items())
            print(f"instance {found}: events={res.n_events} "
                  f"unstable={res.unstable_entries} {blocks}")
        if found < count:
            print(f"only found {found} of {count} usable instances", file=sys.stderr)
            return 1
        print(f"continuous gradcheck: max rel err {worst:.3e} (tolerance {tol:g})")
        ok = worst < tol
    print("PASS" if ok else "FAIL")
    return 0 if ok else 1


def cmd_train_delay_copy(args) -> int:
    cfg = load_run_config(DelayCopyRunConfig, args.config,
                          {"seed": args.seed, "threads": args.threads})
    out = Path(args.out or "runs/delay_copy")
    _write_config(out, cfg)
    res = train_delay_copy(cfg, out_dir=out)
    from .plots import save_event_raster, save_training_curves
    save_training_curves(res["rows"], out / "training.png")
    if res["trajectories"]:
        events = [r.event for tr in res["trajectories"] for r in tr.records
                  if r.event.value != 0.0 or r.event.kind == "internal"]
        save_event_raster(events, cfg.n_units, res["task"].T, out / "raster.png",
                          title="events of the four patterns, overlaid")
    step = res["converged_step"]
    if step:
        print(f"converged to 100% bitwise accuracy at step {step} "
              f"({res['wall_seconds']:.1f}s)")
        return 0
    print(f"did not converge within {cfg.max_steps} steps "
          f"(final accuracy {res['final_accuracy']:.2f})")
    return 2


def cmd_train_smnist(args) -> int:
    cfg = load_run_config(SMNISTRunConfig, args.config,
                          {"seed": args.seed, "threads": args.threads})
    out = Path(args.out or "runs/smnist")
    _write_config(out, cfg)
    def progress(row):
        print(f"epoch {row['epoch']}: loss={row['train_loss']:.4f} "
              f"acc={row['val_metric']:.4f} alpha={row['alpha']:.3f} "
              f"beta={row['beta']:.3f}", flush=True)
    try:
        res = train_smnist(cfg, out_dir=out, progress=progress)
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    from .plots import save_training_curves
    save_training_curves(res["rows"], out / "training.png")
    print(f"final test accuracy {res['test_accuracy']:.4f}")
    return 0


@dataclass
class CompareConfig:
    seed: int = 0
    n_units: int = 8
    T: float = 4.0
    tau_m: float = 1.0
    tau_s: float = 1.0
    dt_factors: tuple = (0.2, 0.1, 0.05)
    threads: int = 1


def compare_dt_ct(cfg: CompareConfig):
    """Euler recursion vs the continuous flow in the event-free regime."""
    params = init_params(cfg.n_units, 2, cfg.seed, tau_s=cfg.tau_s, tau_m=cfg.tau_m,
                         theta_transform="abs", theta_init_range=(8.0, 9.0))
    rng = np.random.default_rng(cfg.seed)
    base_dt = min(cfg.dt_factors) * cfg.tau_m
    grid = np.arange(1, 6) * 0.4
    inputs = [(float(t), int(rng.integers(0, 2)), float(rng.uniform(0.5, 1.5)))
              for t in grid if t < 0.8 * cfg.T]
    icfg = ct.IntegratorConfig(max_step=cfg.tau_m / 100.0)
    traj = ct.simulate(params, inputs, cfg.T, icfg)
    assert not traj.internal_events(), "thresholds were not high enough"
    ref_pts = {}
    for seg in traj.segments:
        for p in seg.points:
            ref_pts[round(p[0], 9)] = p[4]
    errors = []
    dts = [f * cfg.tau_m for f in cfg.dt_factors]
    for dt in dts:
        ts, cs = ct.euler_discretize(params, inputs, cfg.T, dt)
        err = 0.0
        for t, c in zip(ts, cs):
            key = round(float(t), 9)
            if key in ref_pts:
                err = max(err, float(np.max(np.abs(c - ref_pts[key]))))
        errors.append(err)
    orders = [float(np.log2(errors[i] / errors[i + 1]) /
                    np.log2(dts[i] / dts[i + 1]))
              for i in range(len(dts) - 1)]
    c_scale = max(float(np.max(np.abs(p))) for p in ref_pts.values())
    return {"dts": dts, "errors": errors, "orders": orders, "c_scale": c_scale}


def cmd_compare_dt_ct(args) -> int:
    cfg = load_run_config(CompareConfig, args.config,
                          {"seed": args.seed, "threads": args.threads})
    out = Path(args.out or "runs/compare_dt_ct")
    _write_config(out, cfg)
    rep = compare_dt_ct(cfg)
    for dt, err in zip(rep["dts"], rep["errors"]):
        print(f"dt={dt:g}: max |c_dt - c_ct| = {err:.3e}")
    print(f"empirical convergence orders: {['%.2f' % o for o in rep['orders']]}")
    (out / "report.json").write_text(json.dumps(rep, indent=2) + "\n")
    from .plots import save_convergence_plot
    save_convergence_plot(rep["dts"], rep["errors"], rep["orders"][-1],
                          out / "convergence.png")
    ok = all(0.5 < o < 1.5 for o in rep["orders"])
    print("PASS" if ok else "FAIL")
    return 0 if ok else 1


@dataclass
class BenchConfig:
    seed: int = 0
    checkpoint: str | None = None
    n_units: int = 64
    n_samples: int = 32
    T: int = 100
    input_rate: float = 0.2      # fraction of nonzero input steps (synthetic)
    threads: int = 1


def cmd_bench_sparsity(args) -> int:
    cfg = load_run_config(BenchConfig, args.config,
                          {"seed": args.seed, "threads": args.threads})
    out = Path(args.out or "runs/bench")
    _write_config(out, cfg)
    if cfg.checkpoint:
        params, _meta = load_checkpoint(cfg.checkpoint)
    else:
        params = init_params(cfg.n_units, 1, cfg.seed, theta_init_range=(0.2, 0.5))
    rng = np.random.default_rng(cfg.seed)
    n = params.n
    x = rng.random((cfg.T, cfg.n_samples, params.d))
    x *= (rng.random(x.shape) < cfg.input_rate)
    counter = OpCounter()
    trace = egru_forward_batch(params, x, counter)
    alpha = activity_sparsity(trace)
    beta = backward_sparsity(trace, params)
    eff = 3 * n * drive_events(trace)
    dense = 3 * n * n * cfg.T * cfg.n_samples
    input_mac = counter.mac - eff
    if input_mac < 0:
        print("FAIL: counter below recurrent identity", file=sys.stderr)
        return 1
    report = {
        "alpha": alpha, "beta": beta,
        "effective_recurrent_mac": eff, "dense_recurrent_mac": dense,
        "input_mac": input_mac,
        "reduction": dense / eff if eff else float("inf"),
    }
    (out / "report.json").write_text(json.dumps(report, indent=2) + "\n")
    print(f"activity sparsity alpha = {alpha:.4f}")
    print(f"backward sparsity beta  = {beta:.4f}")
    print(f"recurrent MAC: dense {dense:,} -> effective {eff:,} "
          f"({report['reduction']:.2f}x reduction)")
    print(f"input MAC: {input_mac:,}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="egru",
        description="Event-based recurrent network runs: training, gradient "
                    "checks, model-form comparisons, and sparsity benchmarks.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--threads", type=int, default=None)
        p.add_argument("--out", help="output directory")

    p = sub.add_parser("gradcheck", help="validate gradients against oracles")
    common(p)
    p.add_argument("--model", choices=["continuous", "discrete"])
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("train-delay-copy", help="train the continuous model on delay-copy")
    common(p)
    p.set_defaults(fn=cmd_train_delay_copy)

    p = sub.add_parser("train-smnist", help="train the discrete model on pixel-sequence MNIST")
    common(p)
    p.set_defaults(fn=cmd_train_smnist)

    p = sub.add_parser("compare-dt-ct", help="Euler recursion vs continuous flow, event-free")
    common(p)
    p.set_defaults(fn=cmd_compare_dt_ct)

    p = sub.add_parser("bench-sparsity", help="dense vs effective MAC on an inference run")
    common(p)
    p.set_defaults(fn=cmd_bench_sparsity)

    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except AssertionError as e:
        print(f"assertion failed: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

import numpy as np
import pytest

from egru.data import write_idx_images, write_idx_labels
from egru.params import load_checkpoint
from egru.training import (DelayCopyRunConfig, SMNISTRunConfig, load_run_config,
                           train_delay_copy, train_smnist, window_trace_averages)


def quick_dc_config(seed=0, **kw):
    base = dict(seed=seed, max_steps=60)
    base.update(kw)
    return DelayCopyRunConfig(**base)


class TestDelayCopyTrainer:
    def test_smoke_and_outputs(self, tmp_path):
        res = train_delay_copy(quick_dc_config(), out_dir=tmp_path / "run")
        assert (tmp_path / "run" / "checkpoint.npz").exists()
        assert (tmp_path / "run" / "metrics.csv").exists()
        assert len(res["rows"]) <= 60
        params, meta = load_checkpoint(tmp_path / "run" / "checkpoint.npz")
        assert params.n == 2 and params.d == 3

    def test_zero_learning_rate_never_improves(self):
        res = train_delay_copy(quick_dc_config(lr=0.0, max_steps=25))
        accs = [r["val_metric"] for r in res["rows"]]
        assert all(a == accs[0] for a in accs)

    def test_deterministic_metrics(self):
        cfg = quick_dc_config(max_steps=15, record_walltime=False)
        a = train_delay_copy(cfg)
        b = train_delay_copy(quick_dc_config(max_steps=15, record_walltime=False))
        assert [r["train_loss"] for r in a["rows"]] == [r["train_loss"] for r in b["rows"]]
        assert [r["val_metric"] for r in a["rows"]] == [r["val_metric"] for r in b["rows"]]

    def test_thread_count_does_not_change_results(self):
        a = train_delay_copy(quick_dc_config(max_steps=12, record_walltime=False))
        b = train_delay_copy(quick_dc_config(max_steps=12, record_walltime=False, threads=3))
        np.testing.assert_array_equal(a["params"].V_u, b["params"].V_u)
        assert [r["train_loss"] for r in a["rows"]] == [r["train_loss"] for r in b["rows"]]

    def test_trains_to_full_accuracy(self):
        res = train_delay_copy(quick_dc_config(seed=9, max_steps=1500))
        assert res["converged_step"] is not None
        assert res["final_accuracy"] == 1.0


class TestWindowAverages:
    def test_single_event_area(self):
        from egru.continuous import Event, EventRecord, Trajectory

        def rec(s, unit, value):
            z = np.zeros(2)
            return EventRecord(Event(s, "internal", unit=unit, value=value),
                               z, z, z, z, z, z, z, z)
        traj = Trajectory([], [rec(1.0, 0, 0.5)], 4.0, None)
        tau, w0, w1 = 0.8, 2.0, 4.0
        avg = window_trace_averages(traj, 2, tau, w0, w1)
        want = 0.5 * tau * (np.exp(-(w0 - 1.0) / tau) - np.exp(-(w1 - 1.0) / tau)) / (w1 - w0)
        assert avg[0] == pytest.approx(want, rel=1e-12)
        assert avg[1] == 0.0

    def test_event_after_window_ignored(self):
        from egru.continuous import Event, EventRecord, Trajectory
        z = np.zeros(2)
        traj = Trajectory([], [EventRecord(Event(5.0, "internal", unit=0, value=1.0),
                                           z, z, z, z, z, z, z, z)], 6.0, None)
        avg = window_trace_averages(traj, 2, 1.0, 2.0, 4.0)
        assert np.all(avg == 0.0)


def digits_idx(tmp_path, n_train=400, n_test=150):
    from sklearn.datasets import load_digits
    X, y = load_digits(return_X_y=True)
    imgs = (X.reshape(-1, 8, 8) * (255.0 / 16.0)).astype(np.uint8)
    write_idx_images(tmp_path / "train-images-idx3-ubyte", imgs[:n_train])
    write_idx_labels(tmp_path / "train-labels-idx1-ubyte", y[:n_train].astype(np.uint8))
    write_idx_images(tmp_path / "t10k-images-idx3-ubyte", imgs[n_train:n_train + n_test])
    write_idx_labels(tmp_path / "t10k-labels-idx1-ubyte",
                     y[n_train:n_train + n_test].astype(np.uint8))
    return tmp_path


class TestSMNISTTrainer:
    def test_missing_data_raises(self, tmp_path):
        cfg = SMNISTRunConfig(data_dir=str(tmp_path / "nope"))
        with pytest.raises(FileNotFoundError):
            train_smnist(cfg)

    def test_smoke_csv_and_checkpoint(self, tmp_path):
        root = digits_idx(tmp_path)
        cfg = SMNISTRunConfig(seed=0, n_units=16, epochs=1, batch=100, micro_batch=50,
                              downscale=1, data_dir=str(root),
                              theta_init=(0.05, 0.3), input_gain=3.0)
        res = train_smnist(cfg, out_dir=tmp_path / "run")
        assert (tmp_path / "run" / "metrics.csv").exists()
        head = (tmp_path / "run" / "metrics.csv").read_text().splitlines()[0]
        assert head.startswith("epoch,train_loss,val_metric,alpha,beta")
        assert len(res["rows"]) == 1
        row = res["rows"][0]
        assert 0.0 <= row["alpha"] <= 1.0 and 0.0 <= row["beta"] <= 1.0
        assert row["effective_mac"] <= row["dense_mac"]

    def test_determinism_across_runs_and_threads(self, tmp_path):
        root = digits_idx(tmp_path)
        def run(threads):
            cfg = SMNISTRunConfig(seed=3, n_units=12, epochs=2, batch=100,
                                  micro_batch=50, downscale=1, data_dir=str(root),
                                  theta_init=(0.05, 0.3), input_gain=3.0,
                                  record_walltime=False, threads=threads)
            return train_smnist(cfg)
        a, b, c = run(1), run(1), run(2)
        assert [r["train_loss"] for r in a["rows"]] == [r["train_loss"] for r in b["rows"]]
        assert [r["train_loss"] for r in a["rows"]] == [r["train_loss"] for r in c["rows"]]
        np.testing.assert_array_equal(a["params"].V_z, c["params"].V_z)

    def test_learns_beyond_chance(self, tmp_path):
        root = digits_idx(tmp_path, n_train=1200, n_test=300)
        cfg = SMNISTRunConfig(seed=0, n_units=48, epochs=16, batch=100, micro_batch=100,
                              downscale=1, data_dir=str(root),
                              theta_init=(0.05, 0.3), input_gain=3.0)
        res = train_smnist(cfg)
        assert res["test_accuracy"] >= 0.22, res["test_accuracy"]

    def test_sparsity_regularizer_path_runs(self, tmp_path):
        root = digits_idx(tmp_path)
        cfg = SMNISTRunConfig(seed=0, n_units=12, epochs=1, batch=100, micro_batch=100,
                              downscale=1, data_dir=str(root), w_reg=0.01, w_v=0.05,
                              theta_init=(0.05, 0.3))
        res = train_smnist(cfg)
        assert np.isfinite(res["rows"][0]["train_loss"])


class TestRunConfigLoading:
    def test_json_and_overrides(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text('{"seed": 5, "lr": 0.5, "theta_init": [0.2, 0.3]}')
        cfg = load_run_config(DelayCopyRunConfig, path, {"seed": 7, "threads": None})
        assert cfg.seed == 7          # CLI override wins
        assert cfg.lr == 0.5
        assert cfg.theta_init == (0.2, 0.3)

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text('{"not_a_key": 1}')
        with pytest.raises(KeyError):
            load_run_config(DelayCopyRunConfig, path, {})

"""Optimizer, schedule, freeze window, early stopping, determinism."""

import math

import numpy as np
import pytest

from axial_lob.errors import ConfigError, DivergenceError, GraphError
from axial_lob.model import AxialLobModel, ModelConfig
from axial_lob.tensor import Parameter
from axial_lob.training import (
    TrainConfig,
    TrainState,
    cosine_lr_multiplier,
    sgd_momentum_step,
    train,
)

TINY = ModelConfig(input_height=8, input_width=8, stem_channels=4, block_channels=4,
                   heads=1, seed=0)


class FakeData:
    def __init__(self, windows, labels):
        self.windows = windows
        self.labels = labels


def planted_data(rng, n, side=8):
    """Windows whose left-half mean sign determines a three-way label."""
    windows = rng.standard_normal((n, side, side)).astype(np.float32)
    shift = rng.integers(0, 3, n)
    windows[:, :, : side // 2] += (shift[:, None, None] - 1) * 2.0
    return FakeData(windows, shift.astype(np.int64))


def tiny_train_config(**kw):
    base = dict(batch_size=16, epochs=4, base_lr=0.05, momentum=0.9,
                gate_unfreeze_epoch=2, early_stop_patience=10, seed=0)
    base.update(kw)
    return TrainConfig(**base)


class TestCosineSchedule:
    def test_endpoints_and_midpoint(self):
        assert cosine_lr_multiplier(0, 100) == 1.0
        assert cosine_lr_multiplier(100, 100) == pytest.approx(0.0, abs=1e-16)
        assert cosine_lr_multiplier(50, 100) == pytest.approx(0.5, abs=1e-15)

    def test_quarter_points_match_formula(self):
        t = 128
        for t_cur in (0, 32, 64, 96, 128):
            want = 0.5 * (1 + math.cos(math.pi * t_cur / t))
            assert cosine_lr_multiplier(t_cur, t) == want

    def test_clamps_past_end_with_warning(self):
        with pytest.warns(UserWarning, match="clamping"):
            assert cosine_lr_multiplier(101, 100) == 0.0

    def test_invalid_total_rejected(self):
        with pytest.raises(ConfigError):
            cosine_lr_multiplier(0, 0)


class TestSgdMomentumStep:
    def test_zero_momentum_is_plain_sgd(self):
        p = Parameter(np.array([1.0, 2.0], dtype=np.float32), "p")
        p.tensor.grad = np.array([0.5, -1.0], dtype=np.float32)
        sgd_momentum_step([p], lr=0.1, momentum=0.0, velocities={})
        np.testing.assert_allclose(p.data, [0.95, 2.1])

    def test_two_steps_constant_grad_unrolls(self):
        p = Parameter(np.zeros(1, dtype=np.float64), "p")
        vel = {}
        for _ in range(2):
            p.tensor.grad = np.array([1.0])
            sgd_momentum_step([p], lr=0.1, momentum=0.9, velocities=vel)
        # buffer: 1 then 1.9; total update lr * (1 + 1.9)
        np.testing.assert_allclose(p.data, [-0.1 * 2.9])

    def test_frozen_parameter_untouched(self):
        p = Parameter(np.array([3.0]), "gate", trainable=False)
        p.tensor.grad = np.array([100.0], dtype=np.float32)
        vel = {}
        sgd_momentum_step([p], lr=0.1, momentum=0.9, velocities=vel)
        np.testing.assert_array_equal(p.data, [3.0])
        assert "gate" not in vel  # momentum buffer stays untouched too

    def test_missing_grad_is_contract_error(self):
        p = Parameter(np.array([1.0]), "p")
        p.tensor.grad = None
        with pytest.raises(GraphError, match="no gradient"):
            sgd_momentum_step([p], lr=0.1, momentum=0.9, velocities={})


class TestTrainConfig:
    def test_invalid_batch(self):
        with pytest.raises(ConfigError):
            TrainConfig(batch_size=0)

    def test_unfreeze_cannot_exceed_epochs(self):
        with pytest.raises(ConfigError):
            TrainConfig(epochs=3, gate_unfreeze_epoch=5)

    def test_pairs_roundtrip(self):
        cfg = TrainConfig(batch_size=32, epochs=7, base_lr=0.25, seed=9,
                          gate_unfreeze_epoch=4)
        again = TrainConfig.from_pairs(cfg.to_pairs())
        assert again == cfg


class TestTrainLoop:
    def test_gates_frozen_then_trained(self, rng):
        data = planted_data(rng, 64)
        val = planted_data(rng, 32)
        model = AxialLobModel(TINY)
        gates_at_init = np.array([float(g.data) for g in model.gates()])
        cfg = tiny_train_config(epochs=2, gate_unfreeze_epoch=2)
        train(model, data, val, cfg)
        np.testing.assert_array_equal(
            np.array([float(g.data) for g in model.gates()]), gates_at_init
        )
        model2 = AxialLobModel(TINY)
        cfg2 = tiny_train_config(epochs=4, gate_unfreeze_epoch=2)
        train(model2, data, val, cfg2)
        assert not np.array_equal(
            np.array([float(g.data) for g in model2.gates()]), gates_at_init
        )

    def test_lr_trace_matches_schedule(self, rng):
        data = planted_data(rng, 32)
        val = planted_data(rng, 16)
        model = AxialLobModel(TINY)
        cfg = tiny_train_config(epochs=2, batch_size=16)
        state = train(model, data, val, cfg)
        t_total = state.t_total
        for t_cur, lr in enumerate(state.lr_trace):
            assert lr == cfg.base_lr * cosine_lr_multiplier(t_cur, t_total)

    def test_early_stopping_on_plateau(self, rng, monkeypatch):
        # scripted validation losses: improve through epoch 12, flat after
        losses = iter([1.0 - 0.01 * e for e in range(13)] + [2.0] * 50)
        import axial_lob.training as tr

        def fake_eval(model, windows, labels, batch_size=256):
            return next(losses), np.zeros(len(labels), dtype=np.int64)

        monkeypatch.setattr(tr, "_eval_pass", fake_eval)
        data = planted_data(rng, 16)
        val = planted_data(rng, 8)
        model = AxialLobModel(TINY)
        cfg = tiny_train_config(epochs=100, batch_size=16, early_stop_patience=10,
                                gate_unfreeze_epoch=5)
        state = train(model, data, val, cfg)
        assert state.stopped_early
        assert state.epoch == 22
        assert state.best_epoch == 12

    def test_runs_all_epochs_when_improving(self, rng, monkeypatch):
        losses = iter([1.0 - 0.001 * e for e in range(1000)])
        import axial_lob.training as tr

        monkeypatch.setattr(
            tr, "_eval_pass",
            lambda m, w, l, batch_size=256: (next(losses), np.zeros(len(l), dtype=np.int64)),
        )
        data = planted_data(rng, 16)
        val = planted_data(rng, 8)
        model = AxialLobModel(TINY)
        cfg = tiny_train_config(epochs=12, batch_size=16, gate_unfreeze_epoch=5)
        state = train(model, data, val, cfg)
        assert not state.stopped_early
        assert state.epoch == 11

    def test_early_stop_never_fires_inside_patience_window_after_unfreeze(
        self, rng, monkeypatch
    ):
        # improvement exactly at the unfreeze epoch resets the counter
        import axial_lob.training as tr

        losses = iter([1.0, 0.99, 0.98, 0.97, 0.96, 0.5] + [0.9] * 9 + [0.2] + [0.9] * 50)
        monkeypatch.setattr(
            tr, "_eval_pass",
            lambda m, w, l, batch_size=256: (next(losses), np.zeros(len(l), dtype=np.int64)),
        )
        data = planted_data(rng, 16)
        val = planted_data(rng, 8)
        model = AxialLobModel(TINY)
        cfg = tiny_train_config(epochs=40, batch_size=16, gate_unfreeze_epoch=5,
                                early_stop_patience=10)
        state = train(model, data, val, cfg)
        assert state.epoch >= cfg.gate_unfreeze_epoch + cfg.early_stop_patience

    def test_divergence_aborts_with_snapshot(self, rng, tmp_path):
        data = planted_data(rng, 32)
        data.windows = data.windows * 1e30  # force immediate overflow
        val = planted_data(rng, 16)
        model = AxialLobModel(TINY)
        cfg = tiny_train_config(epochs=2, base_lr=10.0, gate_unfreeze_epoch=1)
        with pytest.raises(DivergenceError):
            train(model, data, val, cfg, out_dir=str(tmp_path))
        assert (tmp_path / "divergence.txt").exists()

    def test_one_epoch_overfit_small_batch(self, rng):
        # full differentiation path sanity: tiny model memorizes 64 windows
        data = planted_data(rng, 64)
        model = AxialLobModel(TINY)
        cfg = tiny_train_config(epochs=40, batch_size=16, base_lr=0.05,
                                gate_unfreeze_epoch=5, early_stop_patience=40)
        state = train(model, data, data, cfg)
        assert state.t_cur <= 200
        assert state.history[-1]["train_loss"] < 0.05

    def test_deterministic_replay(self, rng):
        data = planted_data(rng, 48)
        val = planted_data(rng, 24)

        def run():
            model = AxialLobModel(TINY)
            cfg = tiny_train_config(epochs=3, gate_unfreeze_epoch=2)
            state = train(model, data, val, cfg)
            return (
                [h["train_loss"] for h in state.history],
                [h["val_loss"] for h in state.history],
                model,
            )

        tl1, vl1, m1 = run()
        tl2, vl2, m2 = run()
        np.testing.assert_allclose(tl1, tl2, atol=1e-6)
        np.testing.assert_allclose(vl1, vl2, atol=1e-6)
        for (n1, a1), (n2, a2) in zip(m1.state_arrays(), m2.state_arrays()):
            np.testing.assert_array_equal(a1, a2)

    def test_metrics_log_written(self, rng, tmp_path):
        data = planted_data(rng, 32)
        val = planted_data(rng, 16)
        model = AxialLobModel(TINY)
        cfg = tiny_train_config(epochs=2, gate_unfreeze_epoch=2)
        log = tmp_path / "metrics.log"
        train(model, data, val, cfg, log_path=str(log))
        lines = log.read_text().splitlines()
        assert lines[0] == "epoch, step, lr, train_loss, val_loss, val_f1_macro"
        assert len(lines) == 3
        fields = lines[1].split(", ")
        assert int(fields[0]) == 0 and len(fields) == 6

    def test_best_checkpoint_saved(self, rng, tmp_path):
        data = planted_data(rng, 32)
        val = planted_data(rng, 16)
        model = AxialLobModel(TINY)
        cfg = tiny_train_config(epochs=2, gate_unfreeze_epoch=2)
        train(model, data, val, cfg, out_dir=str(tmp_path))
        assert (tmp_path / "init.ckpt").exists()
        assert (tmp_path / "best.ckpt").exists()

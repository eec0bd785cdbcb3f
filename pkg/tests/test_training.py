import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cvvls.crate_net import CrateConfig, init_params, load_checkpoint
from cvvls.errors import ContractError, NumericError
from cvvls.training import (AdamWState, Batch, TrainConfig, adamw_step, epoch_order, mse_loss,
                            nls, restore_state, safety_penalty, total_loss, train)


def _penalty_loop(prob, d_e):
    total = 0.0
    lanes, cells = prob.shape
    for l in range(lanes):
        for i in range(cells):
            if prob[l, i] > 0.5:
                s = sum(prob[l, j] for j in range(max(0, i - d_e), min(cells, i + d_e + 1)))
                total += (s - 1.0) ** 2
    return total


class TestLosses:
    def test_mse_brute_force(self):
        rng = np.random.default_rng(0)
        a, b = rng.standard_normal((1, 30, 2)), rng.standard_normal((1, 30, 2))
        loss, grad = mse_loss(a, b)
        assert loss == pytest.approx(sum((x - y) ** 2 for x, y in zip(a.ravel(), b.ravel())) / 60)
        np.testing.assert_allclose(grad, 2 * (a - b) / 60)
        with pytest.raises(ContractError):
            mse_loss(a, b[:, :10])

    def test_nls(self):
        occ = np.zeros((1, 30))
        occ[0, [5, 9, 14, 22]] = 1
        assert nls(occ, 9, 0, 4) == 2.0  # cells 5..13
        assert nls(occ, 9, 0, 5) == 3.0
        assert nls(occ, 22, 0, 7) == 1.0
        with pytest.raises(ContractError):
            nls(occ, 6, 0, 3)

    def test_penalty_zero_for_valid_frame(self):
        occ = np.zeros((1, 40))
        occ[0, [3, 12, 25]] = 1.0
        assert safety_penalty(occ, 6)[0] == 0.0

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1), st.integers(0, 8))
    def test_penalty_brute_force(self, seed, d_e):
        prob = np.random.default_rng(seed).random((2, 25))
        assert safety_penalty(prob, d_e)[0] == pytest.approx(_penalty_loop(prob, d_e), rel=1e-12)

    def test_penalty_gradient(self):
        rng = np.random.default_rng(1)
        prob = rng.random((1, 30))
        prob[np.abs(prob - 0.5) < 0.01] = 0.3  # keep the occupied set fixed under perturbation
        _, g = safety_penalty(prob, 3)
        fd = np.zeros_like(prob)
        for idx in np.ndindex(prob.shape):
            p = prob.copy()
            p[idx] += 1e-6
            up = _penalty_loop(p, 3)
            p[idx] -= 2e-6
            fd[idx] = (up - _penalty_loop(p, 3)) / 2e-6
        np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-7)

    def test_total_loss_brute_force(self):
        rng = np.random.default_rng(2)
        raw = rng.normal(0, 2, (3, 1, 20, 2))
        target = np.stack([rng.integers(0, 2, (3, 1, 20)), rng.uniform(0, 1, (3, 1, 20))], -1)
        loss, _ = total_loss(raw, target, mu=0.3, d_e=2)
        expected = 0.0
        for b in range(3):
            prob = 1 / (1 + np.exp(-raw[b, ..., 0]))
            pred = np.stack([prob, raw[b, ..., 1]], -1)
            expected += np.mean((pred - target[b]) ** 2) + 0.3 * _penalty_loop(prob, 2)
        assert loss == pytest.approx(expected / 3, rel=1e-12)

    def test_total_loss_gradient(self):
        rng = np.random.default_rng(3)
        raw = rng.normal(0, 2, (2, 1, 15, 2))
        raw[..., 0][np.abs(raw[..., 0]) < 0.05] = 1.0
        target = np.stack([rng.integers(0, 2, (2, 1, 15)), rng.uniform(0, 1, (2, 1, 15))], -1)
        _, g = total_loss(raw, target, 0.2, 3)
        fd = np.zeros_like(raw)
        for idx in np.ndindex(raw.shape):
            r = raw.copy()
            r[idx] += 1e-6
            up = total_loss(r, target, 0.2, 3)[0]
            r[idx] -= 2e-6
            fd[idx] = (up - total_loss(r, target, 0.2, 3)[0]) / 2e-6
        np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-8)


def _adamw_reference(p, grads, lr, b1, b2, eps, wd):
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p * (1 - lr * wd)
        p = p - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    return p


class TestAdamW:
    cfg = TrainConfig(learning_rate=1e-2, weight_decay=0.1)

    def test_first_step_is_signed_lr(self):
        p = {"w": np.array([1.0, -2.0, 0.5])}
        g = {"w": np.array([0.3, -4.0, 1e-3])}
        adamw_step(p, g, AdamWState.zeros_like(p), TrainConfig(learning_rate=1e-3, weight_decay=0.0))
        np.testing.assert_allclose(p["w"], [1.0 - 1e-3, -2.0 + 1e-3, 0.5 - 1e-3], rtol=0, atol=1e-8)

    def test_matches_scalar_reference(self):
        rng = np.random.default_rng(0)
        grads = rng.standard_normal((10, 4))
        p = {"w": np.ones(4)}
        state = AdamWState.zeros_like(p)
        for g in grads:
            adamw_step(p, {"w": g}, state, self.cfg)
        for j in range(4):
            ref = _adamw_reference(1.0, grads[:, j], 1e-2, 0.9, 0.999, 1e-8, 0.1)
            assert p["w"][j] == pytest.approx(ref, rel=1e-12)
        assert state.step == 10

    def test_decoupled_decay_with_zero_gradient(self):
        p = {"w": np.array([2.0])}
        adamw_step(p, {"w": np.zeros(1)}, AdamWState.zeros_like(p), self.cfg)
        assert p["w"][0] == pytest.approx(2.0 * (1 - 1e-2 * 0.1))

    def test_descends_quadratic(self):
        target = np.array([3.0, -1.0, 0.5])
        p = {"w": np.zeros(3)}
        state = AdamWState.zeros_like(p)
        cfg = TrainConfig(learning_rate=0.05, weight_decay=0.0)
        for _ in range(800):
            adamw_step(p, {"w": 2 * (p["w"] - target)}, state, cfg)
        np.testing.assert_allclose(p["w"], target, atol=1e-2)

    def test_nonfinite_gradient(self):
        p = {"w": np.ones(2)}
        with pytest.raises(NumericError):
            adamw_step(p, {"w": np.array([1.0, np.inf])}, AdamWState.zeros_like(p), self.cfg)


def _toy(n=12, seed=0):
    cfg = CrateConfig(n_cells=20, k=1, patch=5, dim=8, heads=2, kappa=0.1,
                      input_layout="dense", output_layout="dense")
    rng = np.random.default_rng(seed)
    occ = (rng.random((n, 1, 20)) < 0.15).astype(np.float32)
    spd = np.where(occ > 0, rng.random((n, 1, 20)), -1.0).astype(np.float32)
    y = np.stack([occ, spd], -1)
    keep = rng.random((n, 1, 20)) < 0.5
    x = np.stack([occ * keep, np.where(keep, spd, -1.0)], -1).astype(np.float32)
    return cfg, Batch(x, y)


class TestTrainLoop:
    def test_zero_lr_leaves_params(self):
        cfg, data = _toy()
        params = init_params(cfg)
        res = train(data, TrainConfig(learning_rate=0.0, weight_decay=0.0, epochs=1,
                                      batch_size=len(data)), params)
        assert len(res.history) == 1
        for name, t in params.tensors.items():
            assert np.array_equal(res.params.tensors[name], t)

    def test_input_params_untouched(self):
        cfg, data = _toy()
        params = init_params(cfg)
        before = {k: v.copy() for k, v in params.tensors.items()}
        train(data, TrainConfig(epochs=1, batch_size=4), params)
        assert all(np.array_equal(before[k], params.tensors[k]) for k in before)

    def test_epoch_order(self):
        a = epoch_order(50, 3, 7)
        assert sorted(a) == list(range(50))
        assert np.array_equal(a, epoch_order(50, 3, 7))
        assert not np.array_equal(a, epoch_order(50, 3, 8))

    def test_deterministic(self):
        cfg, data = _toy()
        tc = TrainConfig(epochs=3, batch_size=5, learning_rate=1e-3)
        a = train(data, tc, init_params(cfg, seed=1))
        b = train(data, tc, init_params(cfg, seed=1))
        assert a.history == b.history
        assert all(np.array_equal(a.params.tensors[k], b.params.tensors[k]) for k in a.params.tensors)

    def test_resume_equivalence(self, tmp_path):
        cfg, data = _toy()
        tc = TrainConfig(epochs=4, batch_size=5, learning_rate=1e-3)
        full = train(data, tc, init_params(cfg, seed=2), checkpoint_dir=tmp_path)
        assert [p.name for p in full.checkpoints] == [f"epoch_{i:03d}.ckpt" for i in range(4)]
        params, extra, meta = load_checkpoint(tmp_path / "epoch_001.ckpt")
        assert meta["epoch"] == 1
        resumed = train(data, tc, params, state=restore_state(params, extra, meta), start_epoch=2)
        assert resumed.history == full.history[2:]
        for k in full.params.tensors:
            assert np.array_equal(resumed.params.tensors[k], full.params.tensors[k])

    def test_loss_decreases(self):
        cfg, data = _toy(n=24)
        res = train(data, TrainConfig(epochs=30, batch_size=8, learning_rate=3e-3), init_params(cfg))
        assert res.history[-1] < 0.5 * res.history[0]

    def test_overfit_eight_samples(self):
        from cvvls.pipeline import build_dataset, crate_config_for, simulate, ScenarioSpec
        spec = ScenarioSpec(red_seconds=30, vc_ratio=0.6, penetration=0.4, cycles=6, seed=4)
        ds = build_dataset([simulate(spec)], [spec.name], k=4)
        few = ds.subset(np.arange(0, len(ds), len(ds) // 8)[:8])
        cfg = crate_config_for(few, kappa=0.1, input_layout="dense", output_layout="dense")
        res = train(few.batch(), TrainConfig(epochs=500, batch_size=8), init_params(cfg))
        assert res.history[-1] < 0.01 * res.history[0]

    def test_empty_dataset(self):
        cfg, data = _toy()
        with pytest.raises(ContractError):
            train(Batch(data.inputs[:0], data.targets[:0]), TrainConfig(), init_params(cfg))

    def test_cosine_schedule_reaches_zero(self):
        from cvvls.training import _lr_at
        tc = TrainConfig(learning_rate=1e-3, cosine_schedule=True)
        assert _lr_at(tc, 0, 100) == pytest.approx(1e-3)
        assert _lr_at(tc, 100, 100) == pytest.approx(0.0, abs=1e-15)

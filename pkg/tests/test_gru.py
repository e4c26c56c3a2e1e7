import math

import numpy as np
import pytest

from vadforge.errors import DataError, DivergenceError, FormatError, ShapeError
from vadforge.gru import (
    Adam,
    GruVadConfig,
    backward,
    forward,
    init_params,
    load_params,
    loss,
    save_params,
    train,
    zeros_like_params,
)


def make_params(input_dim=3, hidden=4, layers=1, seed=0):
    cfg = GruVadConfig(input_dim=input_dim, hidden=hidden, layers=layers)
    return init_params(cfg, np.random.default_rng(seed))


def scalar_reference_forward(params, x, h0):
    """Straight-line per-element GRU recurrence using math.* only."""

    def sig(v):
        return 1.0 / (1.0 + math.exp(-v))

    L, H = params.n_layers, params.hidden
    h = [[float(h0[li][i]) for i in range(H)] for li in range(L)]
    scores = []
    for t in range(x.shape[0]):
        inp = [float(v) for v in x[t]]
        for li, p in enumerate(params.layers):
            prev = h[li]
            z = [
                sig(sum(p.W_z[i][j] * inp[j] for j in range(len(inp)))
                    + sum(p.U_z[i][k] * prev[k] for k in range(H)) + p.b_z[i])
                for i in range(H)
            ]
            r = [
                sig(sum(p.W_r[i][j] * inp[j] for j in range(len(inp)))
                    + sum(p.U_r[i][k] * prev[k] for k in range(H)) + p.b_r[i])
                for i in range(H)
            ]
            c = [
                math.tanh(sum(p.W_h[i][j] * inp[j] for j in range(len(inp)))
                          + sum(p.U_h[i][k] * r[k] * prev[k] for k in range(H)) + p.b_h[i])
                for i in range(H)
            ]
            h[li] = [(1.0 - z[i]) * c[i] + z[i] * prev[i] for i in range(H)]
            inp = h[li]
        scores.append(math.tanh(sum(params.w_out[i] * h[-1][i] for i in range(H)) + params.b_out[0]))
    return np.array(scores), np.array(h)


def finite_difference_grads(params, x, y, h0=None, kind="mse", eps=1e-5):
    num = zeros_like_params(params)
    for (_, w), (_, g) in zip(params.named_arrays(), num.named_arrays()):
        it = np.nditer(w, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = w[idx]
            w[idx] = orig + eps
            up = loss(forward(params, x, h0)[0], y, kind)
            w[idx] = orig - eps
            down = loss(forward(params, x, h0)[0], y, kind)
            w[idx] = orig
            g[idx] = (up - down) / (2 * eps)
    return num


def assert_grads_close(analytic, numeric, rtol=1e-4, tiny=1e-7):
    for (name, a), (_, n) in zip(analytic.named_arrays(), numeric.named_arrays()):
        scale = np.maximum(np.abs(a), np.abs(n))
        big = scale > tiny
        rel = np.abs(a - n)[big] / scale[big]
        assert rel.size == 0 or rel.max() < rtol, f"{name}: max rel err {rel.max():.2e}"
        assert np.all(np.abs(a - n)[~big] < 1e-8), f"{name}: tiny-gradient mismatch"


class TestForward:
    def test_zero_params_zero_scores(self):
        params = make_params()
        for _, a in params.named_arrays():
            a[...] = 0.0
        scores, h = forward(params, np.random.default_rng(0).normal(size=(7, 3)))
        np.testing.assert_array_equal(scores, 0.0)
        np.testing.assert_array_equal(h, 0.0)

    def test_empty_input(self):
        params = make_params()
        h0 = np.full((1, 4), 0.25)
        scores, h = forward(params, np.zeros((0, 3)), h0)
        assert scores.shape == (0,)
        np.testing.assert_array_equal(h, h0)

    @pytest.mark.parametrize("layers", [1, 2])
    def test_matches_scalar_reference(self, layers):
        rng = np.random.default_rng(11)
        params = make_params(input_dim=3, hidden=4, layers=layers, seed=5)
        x = rng.normal(size=(5, 3))
        h0 = rng.uniform(-0.5, 0.5, size=(layers, 4))
        scores, h = forward(params, x, h0)
        ref_scores, ref_h = scalar_reference_forward(params, x, h0)
        np.testing.assert_allclose(scores, ref_scores, atol=1e-12)
        np.testing.assert_allclose(h, ref_h, atol=1e-12)

    def test_scores_strictly_inside_unit_interval(self):
        rng = np.random.default_rng(12)
        params = make_params(seed=2)
        scores, _ = forward(params, rng.normal(size=(200, 3)) * 5)
        assert np.all(scores > -1.0) and np.all(scores < 1.0)

    def test_hidden_state_stays_bounded(self):
        rng = np.random.default_rng(13)
        for seed in range(5):
            params = make_params(seed=seed)
            h0 = rng.uniform(-0.99, 0.99, size=(1, 4))
            _, h = forward(params, rng.normal(size=(300, 3)) * 3, h0)
            assert np.all(np.abs(h) < 1.0)

    def test_stateless_repeatability(self):
        rng = np.random.default_rng(14)
        params = make_params(seed=3)
        x = rng.normal(size=(50, 3))
        a, ha = forward(params, x)
        b, hb = forward(params, x)
        np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(ha, hb)

    def test_dim_mismatch(self):
        with pytest.raises(ShapeError):
            forward(make_params(input_dim=3), np.zeros((5, 4)))


class TestLoss:
    def test_perfect_scores(self):
        assert loss(np.array([1.0, -1.0]), np.array([1.0, -1.0])) == 0.0

    def test_zero_scores_unit_loss(self):
        assert loss(np.zeros(10), np.ones(10)) == 1.0

    def test_arithmetic_fixture(self):
        assert loss(np.array([0.5, -0.5]), np.array([1.0, 1.0])) == pytest.approx(1.25)

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            loss(np.zeros(3), np.zeros(4))

    def test_bce_at_chance(self):
        assert loss(np.zeros(8), np.ones(8), kind="bce") == pytest.approx(math.log(2))


class TestBackward:
    def test_spec_instance_against_finite_differences(self):
        rng = np.random.default_rng(20)
        params = make_params(input_dim=3, hidden=4, seed=7)
        x = rng.normal(size=(5, 3))
        y = rng.choice([-1.0, 1.0], size=5)
        grads = backward(params, x, y)
        assert_grads_close(grads, finite_difference_grads(params, x, y))

    @pytest.mark.parametrize("kind", ["mse", "bce"])
    @pytest.mark.parametrize("layers", [1, 2])
    def test_random_instances(self, kind, layers):
        rng = np.random.default_rng(21)
        for seed in range(4):
            params = make_params(input_dim=2, hidden=3, layers=layers, seed=seed)
            T = int(rng.integers(1, 8))
            x = rng.normal(size=(T, 2))
            y = rng.choice([-1.0, 1.0], size=T)
            h0 = rng.uniform(-0.5, 0.5, size=(layers, 3))
            grads = backward(params, x, y, h0, loss_kind=kind)
            assert_grads_close(grads, finite_difference_grads(params, x, y, h0, kind))

    def test_zero_gradient_at_minimum(self):
        # labels equal to the current scores: the MSE quadratic is at its minimum
        rng = np.random.default_rng(22)
        params = make_params(seed=9)
        x = rng.normal(size=(6, 3))
        scores, _ = forward(params, x)
        grads = backward(params, x, scores)
        for name, g in grads.named_arrays():
            np.testing.assert_allclose(g, 0.0, atol=1e-15, err_msg=name)

    def test_head_bias_closed_form_single_frame(self):
        rng = np.random.default_rng(23)
        params = make_params(seed=10)
        x = rng.normal(size=(1, 3))
        y = np.array([1.0])
        s = forward(params, x)[0][0]
        grads = backward(params, x, y)
        assert grads.b_out[0] == pytest.approx(2 * (s - 1.0) * (1 - s**2), rel=1e-12)


class TestTrain:
    def _toy_items(self, rng, n_items, frames):
        items = []
        for _ in range(n_items):
            x = rng.normal(size=(frames, 2))
            y = np.where(x[:, 0] > 0, 1.0, -1.0)
            items.append((x, y))
        return items

    def test_zero_learning_rate_keeps_params(self):
        rng = np.random.default_rng(30)
        train_items = self._toy_items(rng, 2, 100)
        dev_items = self._toy_items(rng, 1, 100)
        cfg = GruVadConfig(input_dim=2, hidden=4, learning_rate=0.0, epochs=2, bptt_chunk=50, seed=1)
        params, report = train(cfg, train_items, dev_items)
        fresh = init_params(cfg, np.random.default_rng(cfg.seed))
        for (name, a), (_, b) in zip(params.named_arrays(), fresh.named_arrays()):
            np.testing.assert_array_equal(a, b, err_msg=name)
        assert len(report.epochs) == 2

    def test_separable_toy_reaches_high_auc(self):
        rng = np.random.default_rng(31)
        train_items = self._toy_items(rng, 4, 500)
        dev_items = self._toy_items(rng, 2, 300)
        cfg = GruVadConfig(input_dim=2, hidden=8, learning_rate=0.01, epochs=5, bptt_chunk=50, seed=2)
        _, report = train(cfg, train_items, dev_items)
        assert max(e.dev_auc for e in report.epochs) >= 0.99
        assert report.best_epoch >= 0

    def test_same_seed_bitwise_identical(self):
        rng = np.random.default_rng(32)
        train_items = self._toy_items(rng, 3, 200)
        dev_items = self._toy_items(rng, 1, 150)
        cfg = GruVadConfig(input_dim=2, hidden=4, epochs=3, bptt_chunk=64, seed=3)
        a, _ = train(cfg, train_items, dev_items)
        b, _ = train(cfg, train_items, dev_items)
        for (name, wa), (_, wb) in zip(a.named_arrays(), b.named_arrays()):
            np.testing.assert_array_equal(wa, wb, err_msg=name)

    def test_divergence_error_on_nonfinite(self):
        x = np.full((20, 2), np.nan)
        y = np.ones(20)
        cfg = GruVadConfig(input_dim=2, hidden=4, epochs=1, seed=4)
        with pytest.raises(DivergenceError, match="epoch 0"):
            train(cfg, [(x, y)], [(np.zeros((10, 2)), np.r_[np.ones(5), -np.ones(5)])])

    def test_empty_sets_rejected(self):
        cfg = GruVadConfig(input_dim=2)
        with pytest.raises(DataError):
            train(cfg, [], [])

    def test_loss_mostly_nonincreasing_on_fixed_batch(self):
        # smoke property at lr 1e-4: repeated steps on one fixed chunk
        rng = np.random.default_rng(33)
        x = rng.normal(size=(200, 2))
        y = np.where(x[:, 0] > 0, 1.0, -1.0)
        cfg = GruVadConfig(input_dim=2, hidden=8, learning_rate=1e-4, seed=5)
        params = init_params(cfg, np.random.default_rng(cfg.seed))
        adam = Adam(params, cfg.learning_rate)
        losses = [loss(forward(params, x)[0], y)]
        for _ in range(60):
            adam.step(params, backward(params, x, y))
            losses.append(loss(forward(params, x)[0], y))
        increases = sum(b > a for a, b in zip(losses, losses[1:]))
        assert increases <= 0.05 * len(losses)


class TestCheckpoint:
    def test_round_trip_bit_identical(self, tmp_path):
        params = make_params(input_dim=5, hidden=6, layers=2, seed=40)
        path = tmp_path / "m.vgp"
        save_params(params, path)
        back = load_params(path)
        for (name, a), (_, b) in zip(params.named_arrays(), back.named_arrays()):
            np.testing.assert_array_equal(a.astype(np.float32), b.astype(np.float32), err_msg=name)

    def test_truncated_file(self, tmp_path):
        params = make_params()
        path = tmp_path / "m.vgp"
        save_params(params, path)
        path.write_bytes(path.read_bytes()[:-9])
        with pytest.raises(FormatError, match="truncated"):
            load_params(path)

    def test_edited_topology_detected(self, tmp_path):
        import struct

        params = make_params(input_dim=3, hidden=4)
        path = tmp_path / "m.vgp"
        save_params(params, path)
        blob = bytearray(path.read_bytes())
        blob[8:12] = struct.pack("<I", 2)  # shrink the declared input_dim
        path.write_bytes(bytes(blob))
        with pytest.raises(ShapeError):
            load_params(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "m.vgp"
        save_params(make_params(), path)
        blob = bytearray(path.read_bytes())
        blob[0:4] = b"JUNK"
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError, match="magic"):
            load_params(path)

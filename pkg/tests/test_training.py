import math

import numpy as np
import pytest

from pscdn import model as M
from pscdn import training as tr
from pscdn.channel import ChannelConfig, generate_bits, generate_dataset

from gradcheck import max_rel_error, numeric_grad


def nmse_double_loop(rec, truth):
    num = den = 0.0
    for i in range(rec.shape[0]):
        for j in range(rec.shape[1]):
            num += (truth[i, j] - rec[i, j]) ** 2
            den += truth[i, j] ** 2
    return num / den


class TestLoss:
    def test_zero_when_equal(self):
        x = generate_bits(7, 9, 0, dtype=np.float64)
        assert tr.mse_loss(x, x) == 0

    def test_all_ones_vs_zero(self):
        assert tr.mse_loss(np.ones((5, 9)), np.zeros((5, 9))) == 9

    def test_gradient(self):
        rng = np.random.default_rng(0)
        rec, truth = rng.random((4, 1, 6)), rng.random((4, 1, 6))
        g = tr.mse_loss_grad(rec, truth)
        np.testing.assert_allclose(g, 2 * (rec - truth) / 4)
        assert max_rel_error(g, numeric_grad(lambda: tr.mse_loss(rec, truth), rec)) <= 1e-5

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            tr.mse_loss(np.zeros((2, 9)), np.zeros((3, 9)))


class TestNMSE:
    def test_basics(self):
        x = np.random.default_rng(1).random((5, 9))
        assert tr.nmse(x, x) == 0
        assert tr.nmse(np.zeros_like(x), x) == 1

    def test_matches_double_loop(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            rec, truth = rng.normal(size=(6, 5)), rng.normal(size=(6, 5))
            assert tr.nmse(rec, truth) == pytest.approx(nmse_double_loop(rec, truth), abs=1e-12)

    def test_zero_reference(self):
        with pytest.raises(ValueError):
            tr.nmse(np.ones(3), np.zeros(3))

    def test_loss_nmse_identity(self):
        rng = np.random.default_rng(3)
        rec = rng.random((11, 1, 9))
        truth = generate_bits(11, 9, 4, dtype=np.float64)
        lhs = tr.mse_loss(rec, truth)
        rhs = tr.nmse(rec, truth) * np.sum(truth ** 2) / 11
        assert lhs == pytest.approx(rhs, rel=1e-12)

    def test_db(self):
        assert tr.to_db(0.1) == pytest.approx(-10)


class TestSchedule:
    def test_start(self):
        assert tr.lr_schedule(1e-3, 0.99, 0, 1000) == 1e-3

    def test_one_period(self):
        assert abs(tr.lr_schedule(1e-3, 0.99, 1000, 1000) - 0.99e-3) <= 1e-15

    def test_two_periods(self):
        assert tr.lr_schedule(1e-3, 0.99, 2000, 1000) == pytest.approx(0.9801e-3, rel=1e-12)

    def test_continuous_exponent(self):
        assert tr.lr_schedule(1.0, 0.99, 500, 1000) == pytest.approx(0.99 ** 0.5)


class TestAdam:
    def test_zero_gradient_leaves_params(self):
        p = [np.array([1.0, -2.0])]
        state = tr.AdamState.zeros_like(p)
        for _ in range(10):
            tr.adam_step(p, [np.zeros(2)], state, 0.1)
        np.testing.assert_array_equal(p[0], [1.0, -2.0])
        assert state.t == 10

    @pytest.mark.parametrize("g", [3.0, -0.01, 1e4])
    def test_first_step_is_signed_lr(self, g):
        p = [np.array([0.0])]
        tr.adam_step(p, [np.array([g])], tr.AdamState.zeros_like(p), 0.01)
        assert p[0][0] == pytest.approx(-0.01 * math.copysign(1, g), rel=1e-5)

    def test_second_step_not_larger(self):
        p = [np.array([0.0])]
        state = tr.AdamState.zeros_like(p)
        tr.adam_step(p, [np.array([0.7])], state, 0.01)
        first = abs(p[0][0])
        tr.adam_step(p, [np.array([0.7])], state, 0.01)
        assert abs(p[0][0]) - first <= first * (1 + 1e-6)

    def test_matches_reference_recursion(self):
        rng = np.random.default_rng(5)
        p = [rng.normal(size=3)]
        ref = p[0].copy()
        state = tr.AdamState.zeros_like(p)
        m = v = np.zeros(3)
        for t in range(1, 6):
            g = rng.normal(size=3)
            tr.adam_step(p, [g], state, 0.05)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            ref = ref - 0.05 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        np.testing.assert_allclose(p[0], ref, rtol=1e-12)

    def test_non_finite_gradient(self):
        p = [np.zeros(2)]
        with pytest.raises(tr.DivergenceError):
            tr.adam_step(p, [np.array([np.nan, 0.0])], tr.AdamState.zeros_like(p), 0.1)


def test_end_to_end_gradient_with_frozen_noise():
    spec = M.build_pscdn(4, 2, 4)
    rng = np.random.default_rng(6)
    params = M.init_parameters(spec, 0, dtype=np.float64)
    for e in params:
        e.weight[...] = rng.normal(0, 1 / np.sqrt(e.weight.shape[1]), e.weight.shape)
        e.bias[...] = rng.normal(0, 0.3, e.bias.shape)
    x = generate_bits(8, 4, 1, dtype=np.float64)
    channel = ChannelConfig(1.0, 5.0)

    def loss():
        return tr.loss_and_grads(spec, params, x, channel, np.random.default_rng(11))[0]

    _, analytic, _ = tr.loss_and_grads(spec, params, x, channel, np.random.default_rng(11))
    worst = max(max_rel_error(g, numeric_grad(loss, p)) for p, g in zip(params.arrays(), analytic))
    assert worst <= 1e-4


class TestTrain:
    def test_smoke(self):
        spec = M.build_pscdn(9, 2, 8)
        params = M.init_parameters(spec, 0)
        data = generate_dataset(10, 9, 0)
        params, records = tr.train(spec, params, data, tr.TrainConfig(epochs=1, batch_size=4))
        assert len(records) == 1
        r = records[0]
        assert all(math.isfinite(v) for v in (r.train_loss, r.val_nmse_linear, r.val_nmse_db, r.lr))
        assert r.val_nmse_db == pytest.approx(10 * math.log10(r.val_nmse_linear))

    def test_deterministic(self):
        spec = M.build_pscn_variant("c", 9, 8, 3)
        data = generate_bits(64, 9, 1)
        cfg = tr.TrainConfig(epochs=3, batch_size=16, seed=4)
        runs = []
        for _ in range(2):
            params, records = tr.train(spec, M.init_parameters(spec, 2), data, cfg)
            runs.append(([(r.train_loss, r.val_nmse_linear, r.bit_error_rate) for r in records],
                         [a.tobytes() for a in params.arrays()]))
        assert runs[0] == runs[1]

    def test_bn_needs_batches_of_two(self):
        spec = M.build_pscn_variant("b", 9, 8, 2)
        with pytest.raises(Exception):
            tr.train(spec, M.init_parameters(spec, 0), generate_bits(8, 9, 0), tr.TrainConfig(batch_size=1))

    def test_lr_decays_with_steps(self):
        spec = M.build_pscdn(9, 2, 4)
        cfg = tr.TrainConfig(epochs=3, batch_size=2, decay_steps=5, decay_rate=0.5)
        _, records = tr.train(spec, M.init_parameters(spec, 0), generate_bits(10, 9, 0), cfg)
        # records carry the rate used for the last step of each epoch (steps 4, 9, 14)
        assert [r.lr for r in records] == pytest.approx([1e-3 * 0.5 ** (s / 5) for s in (4, 9, 14)])

    def test_divergence_reports_last_good_state(self):
        spec = M.build_pscdn(9, 2, 4)
        params = M.init_parameters(spec, 0)
        params["enc0"].weight[...] = 3e38
        cfg = tr.TrainConfig(epochs=3, batch_size=5)
        with np.errstate(over="ignore", invalid="ignore"), pytest.raises(tr.DivergenceError) as info:
            tr.train(spec, params, generate_bits(10, 9, 0), cfg)
        assert info.value.params is not None

    def test_memorises_small_set_noiseless(self):
        spec = M.build_pscdn(9, 3, 16)
        data = generate_bits(10, 9, 3)
        cfg = tr.TrainConfig(epochs=400, batch_size=10, lr0=3e-3, train_snr_db=math.inf)
        params, _ = tr.train(spec, M.init_parameters(spec, 0, scheme="he"), data, cfg)
        assert tr.evaluate(spec, params, data, math.inf, 0).val_nmse_linear <= 1e-3


@pytest.fixture(scope="module")
def trained():
    spec = M.build_pscdn(9, 3, 8)
    params, _ = tr.train(spec, M.init_parameters(spec, 0), generate_bits(400, 9, 0),
                         tr.TrainConfig(epochs=5, batch_size=50))
    return spec, params, generate_bits(500, 9, 9)


class TestEvaluate:
    def test_same_seed_same_record(self, trained):
        spec, params, test = trained
        a = tr.evaluate(spec, params, test, 10.0, 3)
        b = tr.evaluate(spec, params, test, 10.0, 3)
        assert (a.val_nmse_linear, a.bit_error_rate) == (b.val_nmse_linear, b.bit_error_rate)

    def test_snr_monotone(self, trained):
        spec, params, test = trained
        assert tr.evaluate(spec, params, test, 20.0, 1).val_nmse_linear <= \
            tr.evaluate(spec, params, test, 0.0, 1).val_nmse_linear

    def test_time_inference(self, trained):
        spec, params, test = trained
        t = tr.time_inference(spec, params, test, 3)
        assert t > 0
        with pytest.raises(ValueError):
            tr.time_inference(spec, params, test, 2)

    def test_phase_nmse_perfect(self):
        truth = generate_bits(20, 9, 2, dtype=np.float64)
        assert tr.phase_nmse(truth * 0.9 + 0.05, truth) == 0


def test_denoise_path_trainable_to_identity():
    """Fitting only the denoising module toward identity on noiseless codes drives its estimate to ~0."""
    from pscdn import tensor as T
    spec = M.build_pscdn(9, 3, 8)
    params = M.init_parameters(spec, 0, dtype=np.float64)
    code, _ = M.encode(spec, params, generate_bits(64, 9, 0, dtype=np.float64))
    feat, module = params["dec0"], params["dec1"]
    arrays = [feat.weight, feat.bias, module.weight, module.bias]
    state = tr.AdamState.zeros_like(arrays)

    def estimate():
        pre = T.conv1d(code, feat.weight, feat.bias)
        joined = T.concat_channels(code, T.relu(pre))
        return pre, joined, T.conv1d(joined, module.weight, module.bias)

    _, _, est = estimate()
    start = np.linalg.norm(est) / np.linalg.norm(code)
    for _ in range(300):
        pre, joined, est = estimate()
        # loss = |residual_sub(code, est) - code|^2 = |est|^2
        g_mod = T.conv1d_backward(joined, module.weight, 2 * est)
        _, d_feat = T.concat_channels_backward(code.shape[1], g_mod.input_grad)
        g_feat = T.conv1d_backward(code, feat.weight, T.relu_backward(pre, d_feat).input_grad)
        tr.adam_step(arrays, [*g_feat.param_grads, *g_mod.param_grads], state, 1e-2)
    end = np.linalg.norm(estimate()[2]) / np.linalg.norm(code)
    assert start > 0.1
    assert end <= 1e-2 * start


def test_end_to_end_bits_map_to_grid_phase():
    from pscdn.channel import hard_decision, phase_from_bits, quantize_phase
    spec = M.build_pscdn(9, 2, 8)
    params = M.init_parameters(spec, 3)
    _, out = M.forward(spec, params, generate_bits(32, 9, 5))
    for row in hard_decision(out)[:, 0, :]:
        theta = phase_from_bits([int(b) for b in row])
        assert 0 <= theta < 2 * math.pi
        assert quantize_phase(theta, 9).radians == theta

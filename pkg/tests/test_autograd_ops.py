import numpy as np
import pytest

from wxadapt.autograd import Tape, Tensor, ops


def scalar(t):
    return float(t.data.reshape(-1)[0])


class TestConv2d:
    def test_ones_kernel_sums_window(self):
        x = Tensor(np.ones((1, 1, 3, 3)))
        w = Tensor(np.ones((1, 1, 3, 3)))
        out = ops.conv2d(x, w, None, stride=1, padding=0)
        assert out.shape == (1, 1, 1, 1)
        assert scalar(out) == 9.0

    def test_identity_kernel(self):
        rng = np.random.default_rng(3)
        x = Tensor(rng.uniform(-1, 1, (2, 1, 5, 5)).astype(np.float32))
        w = Tensor(np.ones((1, 1, 1, 1), dtype=np.float32))
        out = ops.conv2d(x, w, None, stride=1, padding=0)
        np.testing.assert_array_equal(out.data, x.data)

    def test_output_size_law(self):
        x = Tensor(np.zeros((1, 2, 9, 11), dtype=np.float32))
        w = Tensor(np.zeros((4, 2, 3, 3), dtype=np.float32))
        out = ops.conv2d(x, w, None, stride=2, padding=1)
        assert out.shape == (1, 4, (9 + 2 - 3) // 2 + 1, (11 + 2 - 3) // 2 + 1)

    def test_channel_mismatch_raises(self):
        x = Tensor(np.zeros((1, 3, 4, 4)))
        w = Tensor(np.zeros((2, 4, 3, 3)))
        with pytest.raises(ValueError, match="channels"):
            ops.conv2d(x, w)

    def test_kernel_larger_than_input_raises(self):
        x = Tensor(np.zeros((1, 1, 2, 2)))
        w = Tensor(np.zeros((1, 1, 3, 3)))
        with pytest.raises(ValueError, match="kernel"):
            ops.conv2d(x, w, padding=0)

    def test_fast_path_matches_general(self):
        rng = np.random.default_rng(11)
        x = rng.uniform(-1, 1, (2, 3, 8, 8)).astype(np.float32)
        w = rng.uniform(-1, 1, (5, 3, 3, 3)).astype(np.float32)
        b = rng.uniform(-1, 1, (5,)).astype(np.float32)
        fast = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), 1, 1)
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        general = ops._conv2d_general(Tensor(xp), Tensor(w), Tensor(b), 1, 0)
        np.testing.assert_allclose(fast.data, general.data, rtol=1e-5, atol=1e-6)


class TestPool2d:
    def test_max_2x2(self):
        x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
        out = ops.pool2d(x, "max", 2, 2)
        assert scalar(out) == 4.0

    def test_avg_2x2(self):
        x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
        out = ops.pool2d(x, "avg", 2, 2)
        assert scalar(out) == 2.5

    def test_halves_dims(self):
        x = Tensor(np.zeros((2, 3, 8, 6), dtype=np.float32))
        out = ops.pool2d(x, "max", 2, 2)
        assert out.shape == (2, 3, 4, 3)

    def test_non_divisible_names_axis(self):
        x = Tensor(np.zeros((1, 1, 5, 4)))
        with pytest.raises(ValueError, match="height 5"):
            ops.pool2d(x, "max", 2, 2)
        x = Tensor(np.zeros((1, 1, 4, 5)))
        with pytest.raises(ValueError, match="width 5"):
            ops.pool2d(x, "avg", 2, 2)

    def test_max_tie_routes_to_first_index(self):
        x = Tensor(np.array([[[[2.0, 2.0], [2.0, 1.0]]]]), requires_grad=True)
        with Tape() as tape:
            loss = ops.sum_all(ops.pool2d(x, "max", 2, 2))
        tape.backward(loss)
        np.testing.assert_array_equal(
            x.grad, np.array([[[[1.0, 0.0], [0.0, 0.0]]]])
        )

    def test_avg_backward_uniform(self):
        x = Tensor(np.arange(16.0).reshape(1, 1, 4, 4), requires_grad=True)
        with Tape() as tape:
            loss = ops.sum_all(ops.pool2d(x, "avg", 2, 2))
        tape.backward(loss)
        np.testing.assert_allclose(x.grad, np.full((1, 1, 4, 4), 0.25))


class TestActivations:
    def test_relu_values(self):
        x = Tensor(np.array([-1.0, 0.0, 2.0]))
        np.testing.assert_array_equal(ops.relu(x).data, [0.0, 0.0, 2.0])

    def test_relu_zero_subgradient(self):
        x = Tensor(np.array([-1.0, 0.0, 2.0]), requires_grad=True)
        with Tape() as tape:
            loss = ops.sum_all(ops.relu(x))
        tape.backward(loss)
        np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0])

    def test_tanh_at_zero(self):
        assert scalar(ops.tanh(Tensor(np.array([0.0])))) == 0.0

    def test_activation_dispatch(self):
        x = Tensor(np.array([0.5]))
        assert scalar(ops.activation(x, "relu")) == 0.5
        with pytest.raises(ValueError):
            ops.activation(x, "gelu")


class TestBatchNorm:
    def test_constant_channel_gives_zeros(self):
        x = Tensor(np.full((2, 3, 4, 4), 0.7, dtype=np.float32))
        gamma = Tensor(np.ones(3, dtype=np.float32))
        beta = Tensor(np.zeros(3, dtype=np.float32))
        rm = np.zeros(3, dtype=np.float32)
        rv = np.ones(3, dtype=np.float32)
        out = ops.batchnorm2d(x, gamma, beta, rm, rv, training=True)
        np.testing.assert_allclose(out.data, 0.0, atol=1e-6)

    def test_gamma_zero_gives_beta(self):
        rng = np.random.default_rng(5)
        x = Tensor(rng.uniform(-1, 1, (2, 3, 4, 4)).astype(np.float32))
        gamma = Tensor(np.zeros(3, dtype=np.float32))
        beta = Tensor(np.array([0.1, -0.2, 0.3], dtype=np.float32))
        rm = np.zeros(3, dtype=np.float32)
        rv = np.ones(3, dtype=np.float32)
        out = ops.batchnorm2d(x, gamma, beta, rm, rv, training=True)
        expected = np.broadcast_to(beta.data[None, :, None, None], out.shape)
        np.testing.assert_allclose(out.data, expected, atol=1e-7)

    def test_single_value_batch_rejected(self):
        x = Tensor(np.zeros((1, 3, 1, 1)))
        gamma = Tensor(np.ones(3))
        beta = Tensor(np.zeros(3))
        with pytest.raises(ValueError, match="larger batch"):
            ops.batchnorm2d(x, gamma, beta, np.zeros(3), np.ones(3), training=True)

    def test_running_stats_update_and_eval(self):
        rng = np.random.default_rng(6)
        x = rng.normal(2.0, 3.0, (4, 2, 5, 5)).astype(np.float32)
        gamma = Tensor(np.ones(2, dtype=np.float32))
        beta = Tensor(np.zeros(2, dtype=np.float32))
        rm = np.zeros(2, dtype=np.float32)
        rv = np.ones(2, dtype=np.float32)
        ops.batchnorm2d(Tensor(x), gamma, beta, rm, rv, training=True, momentum=0.1)
        batch_mean = x.mean(axis=(0, 2, 3))
        np.testing.assert_allclose(rm, 0.1 * batch_mean, rtol=1e-5)
        out = ops.batchnorm2d(Tensor(x), gamma, beta, rm, rv, training=False)
        expected = (x - rm[None, :, None, None]) / np.sqrt(
            rv[None, :, None, None] + 1e-5
        )
        np.testing.assert_allclose(out.data, expected, rtol=1e-4)


class TestGradReverse:
    def test_forward_is_identity(self):
        rng = np.random.default_rng(7)
        x = Tensor(rng.uniform(-1, 1, (3, 4)))
        out = ops.grad_reverse(x, 1.0)
        np.testing.assert_array_equal(out.data, x.data)

    def test_sum_through_grl_gives_minus_one(self):
        x = Tensor(np.arange(6.0), requires_grad=True)
        with Tape() as tape:
            loss = ops.sum_all(ops.grad_reverse(x, 1.0))
        tape.backward(loss)
        np.testing.assert_array_equal(x.grad, -np.ones(6))

    def test_two_tape_comparison_coeff_half(self):
        rng = np.random.default_rng(8)
        base = rng.uniform(-1, 1, 10)

        def run(with_grl):
            x = Tensor(base.copy(), requires_grad=True)
            with Tape() as tape:
                y = ops.grad_reverse(x, 0.5) if with_grl else x
                loss = ops.mse_map_loss(y, Tensor(np.zeros(10)))
            tape.backward(loss)
            return x.grad

        g_grl = run(True)
        g_plain = run(False)
        np.testing.assert_array_equal(g_grl, -0.5 * g_plain)

    def test_negative_coeff_rejected(self):
        with pytest.raises(ValueError):
            ops.grad_reverse(Tensor(np.zeros(2)), -1.0)


class TestLosses:
    def test_mse_zero_iff_equal(self):
        rng = np.random.default_rng(9)
        a = rng.uniform(-1, 1, (2, 3))
        assert scalar(ops.mse_map_loss(Tensor(a), Tensor(a.copy()))) == 0.0

    def test_mse_constant_closed_form(self):
        c = 0.3
        p = Tensor(np.zeros((2, 4)))
        t = Tensor(np.full((2, 4), c))
        assert abs(scalar(ops.mse_map_loss(p, t)) - c * c) < 1e-12

    def test_mse_gradient_formula(self):
        rng = np.random.default_rng(10)
        p = Tensor(rng.uniform(-1, 1, (2, 1, 3, 3)), requires_grad=True)
        t = Tensor(rng.uniform(-1, 1, (2, 1, 3, 3)))
        with Tape() as tape:
            loss = ops.mse_map_loss(p, t)
        tape.backward(loss)
        expected = 2.0 * (p.data - t.data) / p.size
        np.testing.assert_allclose(p.grad, expected, rtol=1e-12)

    def test_l1_zeros(self):
        assert scalar(ops.l1_penalty(Tensor(np.zeros((3, 4))))) == 0.0

    def test_l1_single_sample(self):
        x = Tensor(np.array([[1.0, -2.0, 3.0]]))
        assert scalar(ops.l1_penalty(x)) == 6.0

    def test_l1_batch_mean_and_grad(self):
        x = Tensor(np.array([[1.0, -1.0], [2.0, 2.0]]), requires_grad=True)
        with Tape() as tape:
            loss = ops.l1_penalty(x)
        tape.backward(loss)
        assert scalar(loss) == (2.0 + 4.0) / 2
        np.testing.assert_array_equal(x.grad, np.sign(x.data) / 2)

    def test_cross_entropy_uniform_logits(self):
        for c in (2, 5, 7):
            logits = Tensor(np.zeros((3, c)))
            loss = ops.cross_entropy(logits, np.zeros(3, dtype=int))
            assert abs(scalar(loss) - np.log(c)) < 1e-12

    def test_cross_entropy_label_range(self):
        with pytest.raises(ValueError, match="range"):
            ops.cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 3]))

    def test_smooth_l1_zero_at_equal(self):
        a = np.array([0.5, -0.25])
        assert scalar(ops.smooth_l1(Tensor(a), Tensor(a.copy()))) == 0.0

    def test_smooth_l1_linear_zone(self):
        p = Tensor(np.array([2.0]))
        t = Tensor(np.array([0.0]))
        assert abs(scalar(ops.smooth_l1(p, t, beta=1.0)) - 1.5) < 1e-12

    def test_smooth_l1_quadratic_zone(self):
        p = Tensor(np.array([0.5]))
        t = Tensor(np.array([0.0]))
        assert abs(scalar(ops.smooth_l1(p, t, beta=1.0)) - 0.125) < 1e-12

    def test_bce_confident_correct_near_zero(self):
        z = Tensor(np.array([20.0, -20.0]))
        t = Tensor(np.array([1.0, 0.0]))
        assert scalar(ops.bce_with_logits(z, t)) < 1e-8


class TestTape:
    def test_double_backward_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            loss = ops.sum_all(x)
        tape.backward(loss)
        with pytest.raises(RuntimeError, match="consumed"):
            tape.backward(loss)

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            y = ops.relu(x)
        with pytest.raises(ValueError, match="scalar"):
            tape.backward(y)

    def test_grad_shape_matches_data(self):
        rng = np.random.default_rng(12)
        x = Tensor(rng.uniform(-1, 1, (2, 3, 4, 4)).astype(np.float32), requires_grad=True)
        w = Tensor(rng.uniform(-1, 1, (5, 3, 3, 3)).astype(np.float32), requires_grad=True)
        with Tape() as tape:
            loss = ops.mse_map_loss(
                ops.conv2d(x, w, None, 1, 1),
                Tensor(np.zeros((2, 5, 4, 4), dtype=np.float32)),
            )
        tape.backward(loss)
        assert x.grad.shape == x.shape
        assert w.grad.shape == w.shape

    def test_backward_deterministic(self):
        def run():
            rng = np.random.default_rng(13)
            x = Tensor(rng.uniform(-1, 1, (2, 3, 8, 8)).astype(np.float32), requires_grad=True)
            w = Tensor(rng.uniform(-1, 1, (4, 3, 3, 3)).astype(np.float32), requires_grad=True)
            with Tape() as tape:
                h = ops.relu(ops.conv2d(x, w, None, 1, 1))
                h = ops.pool2d(h, "max", 2, 2)
                loss = ops.mse_map_loss(h, Tensor(np.zeros(h.shape, dtype=np.float32)))
            tape.backward(loss)
            return x.grad.copy(), w.grad.copy()

        gx1, gw1 = run()
        gx2, gw2 = run()
        np.testing.assert_array_equal(gx1, gx2)
        np.testing.assert_array_equal(gw1, gw2)

    def test_gradient_accumulates_across_uses(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        with Tape() as tape:
            loss = ops.sum_all(ops.add(x, x))
        tape.backward(loss)
        np.testing.assert_array_equal(x.grad, [2.0, 2.0])

    def test_nan_debug_flag(self, monkeypatch):
        monkeypatch.setenv("WXADAPT_DEBUG_NAN", "1")
        x = Tensor(np.array([np.inf, 1.0]))
        with pytest.raises(FloatingPointError):
            ops.relu(x)

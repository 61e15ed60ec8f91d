import numpy as np
import pytest

from lindit import gradcheck
from lindit import tensor as T
from lindit.errors import ConfigurationError, ContractError, DimensionError

from conftest import naive_depthwise_conv, rel_err


class TestMatmul:
    def test_identity(self):
        eye = T.Tensor(np.eye(2))
        m = T.Tensor([[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal((eye @ m).data, m.data)

    def test_hand_arithmetic(self):
        out = T.Tensor([[1.0, 2.0]]) @ T.Tensor([[3.0], [4.0]])
        assert out.data.tolist() == [[11.0]]

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            T.Tensor(np.zeros((2, 3))) @ T.Tensor(np.zeros((2, 3)))

    def test_gradient_matches_finite_differences(self, rng):
        with T.precision("f64"):
            a = T.Tensor(rng.uniform(-1, 1, (3, 4)), requires_grad=True)
            b = T.Tensor(rng.uniform(-1, 1, (4, 2)), requires_grad=True)
            errs = gradcheck.check_gradients(lambda: (a @ b).sum(), [("a", a), ("b", b)])
        assert max(errs.values()) < 1e-4

    def test_batched_broadcast_gradient(self, rng):
        with T.precision("f64"):
            a = T.Tensor(rng.uniform(-1, 1, (2, 3, 4, 5)), requires_grad=True)
            b = T.Tensor(rng.uniform(-1, 1, (5, 6)), requires_grad=True)
            probe = rng.standard_normal((2, 3, 4, 6))
            errs = gradcheck.check_gradients(
                lambda: T.mul(a @ b, probe).sum(), [("a", a), ("b", b)]
            )
        assert max(errs.values()) < 1e-4


class TestDepthwiseConv:
    def test_centered_delta_kernel_is_identity(self, rng):
        x = T.Tensor(rng.uniform(-1, 1, (2, 3, 5, 5)))
        w = np.zeros((3, 1, 3, 3), dtype=np.float32)
        w[:, 0, 1, 1] = 1.0
        out = T.conv2d_depthwise(x, T.Tensor(w), T.Tensor(np.zeros(3)))
        assert np.allclose(out.data, x.data, atol=1e-7)

    def test_all_ones_interior_pixel(self):
        x = T.Tensor(np.ones((1, 1, 4, 4)))
        w = T.Tensor(np.ones((1, 1, 3, 3)))
        out = T.conv2d_depthwise(x, w, T.Tensor(np.zeros(1)))
        assert out.data[0, 0, 1, 1] == pytest.approx(9.0)

    def test_matches_naive_loop_reference_k5(self, rng):
        x = rng.uniform(-1, 1, (2, 4, 6, 6))
        w = rng.uniform(-1, 1, (4, 1, 5, 5))
        b = rng.uniform(-1, 1, 4)
        got = T.conv2d_depthwise(T.Tensor(x), T.Tensor(w), T.Tensor(b)).data
        want = naive_depthwise_conv(x, w, b)
        assert rel_err(got, want) < 1e-6

    def test_even_kernel_rejected(self):
        with pytest.raises(ConfigurationError):
            T.conv2d_depthwise(T.Tensor(np.zeros((1, 1, 4, 4))), T.Tensor(np.zeros((1, 1, 2, 2))))

    def test_no_cross_channel_mixing(self, rng):
        x = np.zeros((1, 2, 4, 4), dtype=np.float32)
        x[0, 0] = rng.uniform(-1, 1, (4, 4))
        w = T.Tensor(rng.uniform(-1, 1, (2, 1, 3, 3)))
        out = T.conv2d_depthwise(T.Tensor(x), w, T.Tensor(np.zeros(2))).data
        assert np.all(out[0, 1] == 0.0)


class TestActivations:
    def test_softmax_symmetry(self):
        out = T.softmax(T.Tensor([[0.0, 0.0, 0.0]]))
        assert np.allclose(out.data, 1.0 / 3.0)

    def test_relu(self):
        assert T.relu(T.Tensor([-1.0, 2.0])).data.tolist() == [0.0, 2.0]

    def test_layernorm_moments(self, rng):
        x = T.Tensor(rng.uniform(-3, 3, (4, 32)))
        y = T.layernorm(x, axis=-1).data.astype(np.float64)
        assert np.abs(y.mean(axis=-1)).max() < 1e-6
        assert np.abs(y.var(axis=-1) - 1.0).max() < 1e-5

    def test_softmax_rows_are_distributions(self, rng):
        for _ in range(20):
            x = T.Tensor(rng.uniform(-30, 30, (5, 7)))
            y = T.softmax(x, axis=-1).data
            assert (y >= 0).all()
            assert np.abs(y.sum(axis=-1) - 1.0).max() < 1e-6

    def test_gelu_tanh_approximation_value(self):
        # frozen from direct evaluation of 0.5*x*(1+tanh(sqrt(2/pi)*(x+0.044715*x^3)))
        out = T.gelu(T.Tensor([1.0], dtype=np.float64)).data[0]
        assert out == pytest.approx(0.8411919906082768, rel=1e-12)


class TestElementwiseAndShape:
    def test_mean(self):
        assert T.Tensor([2.0, 4.0]).mean().item() == pytest.approx(3.0)

    def test_reshape_round_trip(self, rng):
        x = T.Tensor(rng.uniform(-1, 1, (3, 4)))
        back = x.reshape(2, 6).reshape(3, 4)
        assert np.array_equal(back.data, x.data)

    def test_grad_of_sum_product_is_other_factor(self, rng):
        x = T.Tensor(rng.uniform(-1, 1, (3, 3)), requires_grad=True)
        y = T.Tensor(rng.uniform(-1, 1, (3, 3)))
        T.backward((x * y).sum())
        assert np.allclose(x.grad, y.data)

    def test_clip_and_clamp_magnitude(self):
        x = T.Tensor([-2.0, -0.5, 0.0, 0.5, 2.0], requires_grad=True)
        c = T.clip(x, -1.0, 1.0)
        assert c.data.tolist() == [-1.0, -0.5, 0.0, 0.5, 1.0]
        m = T.clamp_magnitude(T.Tensor([-0.1, 0.0, 0.1, 5.0]), 0.5)
        assert m.data.tolist() == [-0.5, 0.5, 0.5, 5.0]

    def test_repeat_gradient_sums_copies(self):
        x = T.Tensor([[1.0], [2.0]], requires_grad=True)
        T.backward(T.repeat(x, 3, axis=1).sum())
        assert np.allclose(x.grad, [[3.0], [3.0]])

    def test_take_rows(self):
        table = T.Tensor(np.arange(12.0).reshape(4, 3), requires_grad=True)
        out = T.take_rows(table, np.array([3, 0, 3]))
        assert np.array_equal(out.data[0], table.data[3])
        T.backward(out.sum())
        assert np.allclose(table.grad[3], 2.0)
        assert np.allclose(table.grad[1], 0.0)


class TestBackward:
    def test_sum_gives_ones(self, rng):
        x = T.Tensor(rng.uniform(-1, 1, (2, 3)), requires_grad=True)
        T.backward(x.sum())
        assert np.array_equal(x.grad, np.ones((2, 3), dtype=np.float32))

    def test_sum_of_squares(self):
        x = T.Tensor([1.0, 2.0], requires_grad=True)
        T.backward((x * x).sum())
        assert np.allclose(x.grad, [2.0, 4.0])

    def test_non_scalar_loss_rejected(self):
        x = T.Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ContractError):
            T.backward(x * 2.0)

    def test_repeated_backward_accumulates(self):
        x = T.Tensor([1.0, 2.0], requires_grad=True)
        T.backward(x.sum())
        T.backward(x.sum())
        assert np.allclose(x.grad, [2.0, 2.0])

    def test_backward_is_linear_in_the_loss(self, rng):
        x0 = rng.uniform(-1, 1, (4, 4))

        def grad_of(a, b):
            x = T.Tensor(x0, requires_grad=True, dtype=np.float64)
            loss = T.add(T.mul((x * x).sum(), a), T.mul(T.exp(x).mean(), b))
            T.backward(loss)
            return x.grad

        g = grad_of(2.0, 3.0)
        assert rel_err(g, 2.0 * grad_of(1.0, 0.0) + 3.0 * grad_of(0.0, 1.0)) < 1e-12

    def test_diamond_graph_accumulates_once_per_path(self):
        x = T.Tensor([3.0], requires_grad=True)
        y = x * 2.0
        T.backward((y * y).sum())  # d/dx (2x)^2 = 8x
        assert np.allclose(x.grad, [24.0])

    def test_composite_attention_like_graph_matches_fd(self, rng):
        with T.precision("f64"):
            x = T.Tensor(rng.uniform(-1, 1, (2, 4, 6)), requires_grad=True)
            w = T.Tensor(rng.uniform(-1, 1, (6, 6)), requires_grad=True)

            def loss():
                scores = T.softmax((x @ w) @ T.swap_last(x), axis=-1)
                return T.gelu(T.layernorm(scores @ x)).sum()

            errs = gradcheck.check_gradients(loss, [("x", x), ("w", w)])
        assert max(errs.values()) < 1e-4


class TestAdamW:
    def _store(self, value):
        return {"p": T.Tensor(np.array([value]), requires_grad=True)}

    def test_zero_grad_leaves_parameter_unchanged(self):
        store = self._store(1.5)
        opt = T.AdamW(store, lr=1e-4, weight_decay=0.0)
        store["p"].grad = np.zeros(1, dtype=np.float32)
        opt.step()
        assert store["p"].data[0] == pytest.approx(1.5)

    def test_single_step_delta(self):
        # hand evaluation: m_hat = v_hat = 1 after one unit-gradient step,
        # so the update is -lr / (1 + eps) ~= -1e-4
        store = self._store(0.0)
        opt = T.AdamW(store, lr=1e-4, betas=(0.9, 0.999), eps=1e-8)
        store["p"].grad = np.ones(1, dtype=np.float32)
        opt.step()
        expected = -1e-4 / (1.0 + 1e-8)
        assert store["p"].data[0] == pytest.approx(expected, rel=1e-5)

    def test_determinism_bitwise(self, rng):
        def run():
            store = self._store(0.3)
            opt = T.AdamW(store, lr=1e-3)
            g = np.random.default_rng(7)
            for _ in range(10):
                store["p"].grad = g.standard_normal(1).astype(np.float32)
                opt.step()
            return store["p"].data.tobytes()

        assert run() == run()

    def test_invalid_lr(self):
        with pytest.raises(ConfigurationError):
            T.AdamW(self._store(0.0), lr=0.0)


class TestModes:
    def test_no_grad_detaches(self):
        x = T.Tensor([1.0], requires_grad=True)
        with T.no_grad():
            y = x * 2.0
        assert not y.requires_grad

    def test_precision_mode(self):
        with T.precision("f64"):
            assert T.Tensor([1.0]).dtype == np.float64
        assert T.Tensor([1.0]).dtype == np.float32

    def test_mac_tally_counts_matmul(self):
        with T.mac_tally() as tally:
            T.Tensor(np.zeros((3, 4))) @ T.Tensor(np.zeros((4, 2)))
        assert tally.total() == 3 * 4 * 2

    def test_macs_require_instrumentation(self):
        with pytest.raises(ContractError):
            T.macs_executed()

    def test_operations_are_deterministic(self, rng):
        x = rng.uniform(-1, 1, (8, 8)).astype(np.float32)
        a = T.gelu(T.softmax(T.Tensor(x) @ T.Tensor(x), -1)).data.tobytes()
        b = T.gelu(T.softmax(T.Tensor(x) @ T.Tensor(x), -1)).data.tobytes()
        assert a == b

    def test_forward_outputs_finite(self, rng):
        x = T.Tensor(rng.uniform(-5, 5, (16, 16)))
        out = T.layernorm(T.gelu(x @ T.Tensor(rng.uniform(-1, 1, (16, 16)))))
        assert np.isfinite(out.data).all()


class TestInit:
    def test_trunc_normal_bounds_and_determinism(self):
        a = T.trunc_normal((1000,), 0.02, np.random.default_rng(3))
        b = T.trunc_normal((1000,), 0.02, np.random.default_rng(3))
        assert np.abs(a).max() <= 0.04 + 1e-9
        assert np.array_equal(a, b)


def test_gradient_suite_every_op_under_1e4():
    results = gradcheck.run_gradient_suite(seed=0)
    worst = max(results, key=results.get)
    assert results[worst] < 1e-4, f"worst case {worst}: {results[worst]}"

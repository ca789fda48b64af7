"""Autodiff core: forward values against hand-computed oracles, backward
against central finite differences, format round-trips."""

import weakref

import numpy as np
import pytest

from htdn.errors import ContractError, ShapeError
from htdn.prng import PrngState
from htdn import tensor as T
from htdn.tensor import (
    Tensor, add, multiply, matmul, sigmoid, tanh, relu, concat, reshape,
    conv2d, maxpool2d, dropout, fuse_outer, bce_with_logits,
    xavier_uniform, zeros_param, tensor_to_bytes, tensor_from_bytes,
)
from htdn.optim import Adam

from gradcheck import check_grads


def t64(data, requires_grad=True):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=requires_grad)


def rand64(rng, *shape, requires_grad=True):
    return Tensor(rng.standard_normal(shape), requires_grad=requires_grad)


class TestCreation:
    def test_empty_rejected(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros((0, 3)))

    def test_shape_product_matches_size(self):
        t = Tensor(np.zeros((2, 3, 4), dtype=np.float32))
        assert t.shape == (2, 3, 4)
        assert t.size == 24

    def test_int_input_becomes_float(self):
        t = Tensor([[1, 2], [3, 4]])
        assert t.dtype in (np.float32, np.float64)


class TestForwardOracles:
    def test_matmul_hand_value(self):
        # [[1,2],[3,4]] @ [[5],[6]] = [[17],[39]], worked by hand
        a = t64([[1.0, 2.0], [3.0, 4.0]])
        b = t64([[5.0], [6.0]])
        assert np.array_equal(matmul(a, b).data, [[17.0], [39.0]])

    def test_matmul_identity_preserves(self):
        rng = np.random.default_rng(7)
        eye = t64(np.eye(3), requires_grad=False)
        for _ in range(20):
            m = rng.standard_normal((3, 3))
            assert np.allclose(matmul(eye, t64(m, requires_grad=False)).data, m)

    def test_sigmoid_at_zero(self):
        assert sigmoid(t64([0.0])).data.item() == 0.5

    def test_sigmoid_extremes_stay_finite(self):
        out = sigmoid(t64([-500.0, 500.0]))
        assert np.all(np.isfinite(out.data))
        assert out.data[0] >= 0.0 and out.data[1] <= 1.0

    def test_add_broadcasts_bias(self):
        x = t64(np.ones((2, 3)))
        b = t64([1.0, 2.0, 3.0])
        assert np.array_equal(add(x, b).data, [[2, 3, 4], [2, 3, 4]])

    def test_conv_all_ones_gives_nine(self):
        x = t64(np.ones((1, 3, 3)))
        k = t64(np.ones((1, 1, 3, 3)))
        out = conv2d(x, k, stride=1, padding=0)
        assert out.shape == (1, 1, 1)
        assert out.data.item() == 9.0

    def test_conv_1x1_kernel_is_pointwise(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((2, 4, 5))
        k = np.array([[[[2.0]]], [[[0.5]]]])[:, :1]  # (2,1,...) wrong C_in; build properly
        k = rng.standard_normal((3, 2, 1, 1))
        out = conv2d(t64(x), t64(k))
        expect = np.einsum("oc,chw->ohw", k[:, :, 0, 0], x)
        assert np.allclose(out.data, expect)

    def test_conv_shape_formula(self):
        # H' = floor((H + 2p - k)/s) + 1
        for (h, w, k, s, p) in [(7, 9, 3, 1, 0), (8, 8, 3, 2, 1), (10, 6, 5, 2, 2), (4, 4, 4, 4, 0)]:
            x = t64(np.zeros((2, h, w)))
            ker = t64(np.zeros((3, 2, k, k)))
            out = conv2d(x, ker, stride=s, padding=p)
            assert out.shape == (3, (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1)

    def test_fuse_outer_hand_value(self):
        hl = t64([1.0, 2.0])
        hv = t64([[3.0], [5.0]])
        out = fuse_outer(hl, hv)
        assert out.shape == (2, 1, 2)
        assert np.array_equal(out.data, [[[3.0, 6.0]], [[5.0, 10.0]]])

    def test_bce_hand_values(self):
        # z=0, y=1: loss = log 2
        assert float(bce_with_logits(t64([0.0]), [1.0]).data) == pytest.approx(np.log(2.0))
        # extreme logits stay finite
        big = bce_with_logits(t64([1000.0, -1000.0]), [1.0, 0.0])
        assert float(big.data) == pytest.approx(0.0, abs=1e-12)
        worst = bce_with_logits(t64([-1000.0]), [1.0])
        assert float(worst.data) == pytest.approx(1000.0)


class TestShapeErrors:
    def test_matmul_inner_mismatch_names_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\)"):
            matmul(t64(np.zeros((2, 3))), t64(np.zeros((4, 5))))

    def test_elementwise_incompatible(self):
        with pytest.raises(ShapeError):
            add(t64(np.zeros((2, 3))), t64(np.zeros((4,))))

    def test_conv_channel_mismatch(self):
        with pytest.raises(ShapeError, match="channel"):
            conv2d(t64(np.zeros((3, 5, 5))), t64(np.zeros((4, 2, 3, 3))))

    def test_conv_kernel_exceeds_input(self):
        with pytest.raises(ShapeError):
            conv2d(t64(np.zeros((1, 2, 2))), t64(np.zeros((1, 1, 3, 3))))

    def test_pool_window_exceeds_input(self):
        with pytest.raises(ShapeError):
            maxpool2d(t64(np.zeros((1, 2, 2))), window=3)

    def test_concat_mismatch(self):
        with pytest.raises(ShapeError):
            concat([t64(np.zeros((2, 3))), t64(np.zeros((2, 4)))], axis=0)


class TestBackwardSemantics:
    def test_backward_requires_scalar(self):
        x = t64([1.0, 2.0])
        with pytest.raises(ContractError):
            (x * 2.0).backward()

    def test_gradients_accumulate_until_cleared(self):
        x = t64([2.0])
        (x * 3.0).sum().backward()
        first = x.grad.copy()
        (x * 3.0).sum().backward()
        assert np.array_equal(x.grad, 2 * first)
        x.zero_grad()
        assert x.grad is None

    def test_unused_parameter_gets_no_gradient(self):
        x = t64([1.0, 2.0])
        p = t64([5.0])
        (x * x).sum().backward()
        assert p.grad is None  # not in the graph: gradient is identically zero

    def test_shared_input_sums_both_paths(self):
        x = t64([3.0])
        (x * x).sum().backward()  # d/dx x^2 = 2x
        assert x.grad[0] == pytest.approx(6.0)

    def test_deep_chain_no_recursion_limit(self):
        x = t64([1.0])
        y = x
        for _ in range(5000):
            y = y + 1.0
        y.sum().backward()
        assert x.grad[0] == 1.0

    def test_backward_releases_interior_nodes(self):
        # closures form reference cycles; backward() must break them so
        # big captured buffers free by refcount, not by the gc
        x = t64([1.0, 2.0])
        y = x * 3.0
        loss = y.sum()
        ref = weakref.ref(y.data)
        loss.backward()
        assert y._backward is None
        assert y._parents == ()
        assert y.grad is None
        assert np.array_equal(x.grad, [3.0, 3.0])
        del y, loss
        assert ref() is None

    def test_free_graph_false_keeps_graph_reusable(self):
        x = t64([1.0, 2.0])
        loss = (x * 3.0).sum()
        loss.backward(free_graph=False)
        first = x.grad.copy()
        loss.backward(free_graph=False)
        assert np.array_equal(x.grad, 2 * first)

    def test_three_layer_composite_every_entry(self):
        # matmul -> tanh -> matmul -> sigmoid -> sum, all entries checked
        rng = np.random.default_rng(11)
        x = rand64(rng, 4, 5, requires_grad=False)
        w1 = rand64(rng, 5, 6)
        w2 = rand64(rng, 6, 2)

        def build():
            return sigmoid(matmul(tanh(matmul(x, w1)), w2)).sum()

        check_grads(build, [w1, w2])


class TestOpGradients:
    """Randomized finite-difference checks, one op at a time."""

    def test_add_broadcast(self):
        rng = np.random.default_rng(21)
        for _ in range(5):
            a = rand64(rng, 3, 4)
            b = rand64(rng, 4)
            check_grads(lambda: add(a, b).sum(), [a, b])

    def test_multiply_broadcast(self):
        rng = np.random.default_rng(22)
        for _ in range(5):
            a = rand64(rng, 2, 3, 4)
            b = rand64(rng, 3, 1)
            check_grads(lambda: multiply(a, b).mean(), [a, b])

    def test_matmul_rect(self):
        rng = np.random.default_rng(23)
        for _ in range(5):
            a = rand64(rng, 3, 4)
            b = rand64(rng, 4, 2)
            check_grads(lambda: matmul(a, b).sum(), [a, b])

    def test_matmul_batched(self):
        rng = np.random.default_rng(24)
        a = rand64(rng, 5, 3, 4)
        b = rand64(rng, 4, 2)
        check_grads(lambda: matmul(a, b).sum(), [a, b])

    def test_time_slice(self):
        rng = np.random.default_rng(31)
        x = rand64(rng, 2, 4, 3)
        check_grads(lambda: (T.time_slice(x, 1) * T.time_slice(x, 3)).sum(), [x])
        with pytest.raises(ShapeError):
            T.time_slice(rand64(rng, 2, 3), 0)
        with pytest.raises(ShapeError):
            T.time_slice(x, 4)

    def test_activations(self):
        rng = np.random.default_rng(25)
        for fn in (sigmoid, tanh):
            x = rand64(rng, 4, 3)
            check_grads(lambda: fn(x).sum(), [x])
        # keep relu inputs away from the kink
        data = rng.standard_normal((4, 3))
        data[np.abs(data) < 0.05] = 0.5
        x = t64(data)
        check_grads(lambda: relu(x).sum(), [x])

    def test_reductions(self):
        rng = np.random.default_rng(26)
        x = rand64(rng, 3, 4, 2)
        check_grads(lambda: x.sum(), [x])
        check_grads(lambda: x.mean(), [x])
        check_grads(lambda: x.sum(axis=1).mean(), [x])
        check_grads(lambda: x.mean(axis=(0, 2)).sum(), [x])
        check_grads(lambda: x.sum(axis=0, keepdims=True).mean(), [x])

    def test_concat_and_reshape(self):
        rng = np.random.default_rng(27)
        a = rand64(rng, 2, 3)
        b = rand64(rng, 2, 3)
        check_grads(lambda: concat([a, b], axis=0).mean(), [a, b])
        check_grads(lambda: concat([a, b], axis=1).sum(), [a, b])
        check_grads(lambda: reshape(a, 3, 2).sum(), [a])
        check_grads(lambda: a.reshape(6).mean(), [a])

    @pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 0), (2, 1)])
    def test_conv2d(self, stride, padding):
        rng = np.random.default_rng(hash((stride, padding)) % 2**32)
        x = rand64(rng, 2, 6, 7)
        k = rand64(rng, 3, 2, 3, 3)
        check_grads(lambda: conv2d(x, k, stride=stride, padding=padding).sum(), [x, k])

    def test_conv2d_batched(self):
        rng = np.random.default_rng(29)
        x = rand64(rng, 4, 2, 5, 5)
        k = rand64(rng, 3, 2, 3, 3)
        check_grads(lambda: conv2d(x, k, stride=1, padding=1).mean(), [x, k])

    def test_maxpool_grad(self):
        rng = np.random.default_rng(30)
        x = rand64(rng, 2, 6, 6)
        check_grads(lambda: maxpool2d(x, window=2).sum(), [x])
        # overlapping windows
        check_grads(lambda: maxpool2d(x, window=3, stride=2).sum(), [x])

    def test_fuse_outer_grads(self):
        rng = np.random.default_rng(31)
        hl = rand64(rng, 6)
        hv = rand64(rng, 5, 4)
        check_grads(lambda: fuse_outer(hl, hv).sum(), [hl, hv])
        bl = rand64(rng, 3, 6)
        bv = rand64(rng, 3, 5, 4)
        check_grads(lambda: fuse_outer(bl, bv).mean(), [bl, bv])

    def test_bce_grad(self):
        rng = np.random.default_rng(32)
        z = rand64(rng, 8)
        y = (rng.random(8) > 0.5).astype(np.float64)
        check_grads(lambda: bce_with_logits(z, y), [z])

    def test_dropout_grad_fixed_mask(self):
        rng = np.random.default_rng(33)
        x = rand64(rng, 5, 4)
        check_grads(lambda: dropout(x, 0.4, True, PrngState(99)).sum(), [x])


class TestMaxpoolTies:
    def test_tie_goes_to_first_row_major(self):
        x = t64([[[1.0, 1.0], [1.0, 1.0]]])
        out = maxpool2d(x, window=2)
        out.sum().backward()
        assert np.array_equal(x.grad[0], [[1.0, 0.0], [0.0, 0.0]])

    def test_forward_max_value(self):
        x = t64([[[1.0, 3.0, 2.0, 0.0], [0.0, 1.0, 5.0, 1.0],
                  [2.0, 2.0, 1.0, 1.0], [0.0, 4.0, 1.0, 0.0]]])
        out = maxpool2d(x, window=2)
        assert np.array_equal(out.data, [[[3.0, 5.0], [4.0, 1.0]]])


class TestDropout:
    def test_rate_zero_is_identity_both_modes(self):
        x = Tensor(np.random.default_rng(1).random((10, 10)))
        assert dropout(x, 0.0, True, PrngState(5)) is x
        assert dropout(x, 0.0, False, PrngState(5)) is x

    def test_eval_mode_identity(self):
        x = Tensor(np.random.default_rng(2).random((4, 4)))
        assert dropout(x, 0.5, False, PrngState(5)) is x

    def test_zeroed_fraction_matches_rate(self):
        # Monte Carlo at n = 1e5: |observed - p| < 0.01
        x = Tensor(np.ones(100_000))
        for p in (0.2, 0.5):
            out = dropout(x, p, True, PrngState(42))
            frac = float(np.mean(out.data == 0.0))
            assert abs(frac - p) < 0.01

    def test_kept_values_scaled(self):
        x = Tensor(np.ones(1000) * 3.0)
        out = dropout(x, 0.5, True, PrngState(7))
        kept = out.data[out.data != 0.0]
        assert np.allclose(kept, 6.0)

    def test_same_seed_same_mask(self):
        x = Tensor(np.ones((50, 50)))
        a = dropout(x, 0.5, True, PrngState(123)).data
        b = dropout(x, 0.5, True, PrngState(123)).data
        assert np.array_equal(a, b)

    def test_invalid_rate(self):
        x = Tensor(np.ones(3))
        with pytest.raises(ContractError):
            dropout(x, 1.0, True, PrngState(1))
        with pytest.raises(ContractError):
            dropout(x, -0.1, True, PrngState(1))


class TestInitializers:
    def test_xavier_bound_for_fan_3_3(self):
        # sqrt(6/(3+3)) = 1
        t = xavier_uniform((3, 3), 3, 3, PrngState(1))
        assert np.all(np.abs(t.data) <= 1.0)

    def test_xavier_stats(self):
        b = np.sqrt(6.0 / 200.0)
        t = xavier_uniform((100, 100), 100, 100, PrngState(2))
        assert float(t.data.min()) >= -b and float(t.data.max()) <= b
        assert abs(float(t.data.mean())) < 0.005

    def test_xavier_deterministic(self):
        a = xavier_uniform((4, 4), 4, 4, PrngState(3)).data
        b = xavier_uniform((4, 4), 4, 4, PrngState(3)).data
        assert np.array_equal(a, b)

    def test_zeros_param(self):
        t = zeros_param((2, 2))
        assert t.requires_grad and np.all(t.data == 0)


class TestSerialization:
    def test_roundtrip_bitwise(self):
        rng = np.random.default_rng(9)
        for shape in [(3,), (2, 3), (2, 3, 4), ()]:
            t = Tensor(rng.standard_normal(shape).astype(np.float32) if shape else
                       np.float32(rng.standard_normal()))
            back = tensor_from_bytes(tensor_to_bytes(t))
            assert back.shape == t.shape
            assert np.array_equal(back.data, t.data.astype(np.float32))

    def test_header_layout(self):
        t = Tensor(np.arange(6, dtype=np.float32).reshape(2, 3))
        buf = tensor_to_bytes(t)
        assert buf[:4] == b"HTTN"
        assert int.from_bytes(buf[4:6], "little") == 1
        assert buf[6] == 2  # rank
        assert int.from_bytes(buf[7:15], "little") == 2
        assert int.from_bytes(buf[15:23], "little") == 3
        assert len(buf) == 23 + 4 * 6

    def test_bad_magic_rejected(self):
        buf = b"XXXX" + tensor_to_bytes(Tensor([1.0]))[4:]
        with pytest.raises(ContractError):
            tensor_from_bytes(buf)

    def test_truncated_rejected(self):
        buf = tensor_to_bytes(Tensor([1.0, 2.0]))
        with pytest.raises(ContractError):
            tensor_from_bytes(buf[:-3])

    def test_file_roundtrip(self, tmp_path):
        t = Tensor(np.random.default_rng(4).standard_normal((5, 5)).astype(np.float32))
        p = tmp_path / "t.bin"
        T.save_tensor(p, t)
        assert np.array_equal(T.load_tensor(p).data, t.data)


class TestAdam:
    def test_first_step_hand_value(self):
        # param 0, grad 1, lr 1e-3: bias-corrected step is lr/(1+eps) ~ 1e-3
        p = Tensor(np.zeros(1), requires_grad=True)
        opt = Adam([p], lr=0.001)
        p.grad = np.ones(1)
        opt.step()
        assert p.data.item() == pytest.approx(-0.001, rel=1e-6)

    def test_zero_grad_leaves_param(self):
        p = Tensor(np.array([1.5]), requires_grad=True)
        opt = Adam([p], lr=0.01)
        p.grad = np.zeros(1)
        opt.step()
        assert p.data.item() == 1.5

    def test_missing_grad_raises(self):
        p = Tensor(np.ones(2), requires_grad=True)
        opt = Adam([p])
        with pytest.raises(ContractError):
            opt.step()

    def test_quadratic_convergence(self):
        p = t64([10.0])
        opt = Adam([p], lr=0.1)
        for _ in range(500):
            opt.zero_grad()
            loss = ((p - 3.0) * (p - 3.0)).sum()
            loss.backward()
            opt.step()
        assert p.data.item() == pytest.approx(3.0, abs=1e-3)

    def test_deterministic_trajectory(self):
        def run():
            prng = PrngState(77)
            w = xavier_uniform((4, 4), 4, 4, prng, dtype=np.float64)
            x = Tensor(PrngState(5).normal(size=(8, 4)))
            opt = Adam([w], lr=0.01)
            for _ in range(20):
                opt.zero_grad()
                sigmoid(matmul(x, w)).mean().backward()
                opt.step()
            return w.data.copy()

        assert np.array_equal(run(), run())

import math
import warnings

import numpy as np
import pytest

from adssm import tensor as T
from adssm.gradcheck import grad_check
from adssm.nn import Adam, Linear, adam_step, cosine_lr
from adssm.tensor import Tensor


def leaf(arr):
    return Tensor(np.asarray(arr, dtype=np.float32), requires_grad=True)


class TestForward:
    def test_matmul_identity(self):
        x = np.random.default_rng(0).normal(size=(3, 5)).astype(np.float32)
        out = T.apply("matmul", np.eye(3, dtype=np.float32), x)
        np.testing.assert_array_equal(out.data, x)

    def test_softplus_zero(self):
        assert T.apply("softplus", np.zeros(1, np.float32)).data[0] == pytest.approx(math.log(2), abs=1e-7)

    def test_mean(self):
        assert T.apply("mean", np.array([1, 2, 3, 4], np.float32)).item() == 2.5

    def test_shape_error_is_descriptive(self):
        with pytest.raises(T.ShapeError, match="inner dimensions"):
            T.matmul(np.zeros((2, 3), np.float32), np.zeros((4, 2), np.float32))
        with pytest.raises(T.ShapeError):
            T.add(np.zeros((2, 3), np.float32), np.zeros((4,), np.float32))

    def test_unknown_op(self):
        with pytest.raises(ValueError):
            T.apply("conv3d", np.zeros(1))

    def test_finite_guard(self):
        x = leaf([-1.0])
        assert not np.isfinite(T.log(x).data).all()
        with T.finite_guard(), pytest.raises(T.NonFiniteError):
            T.log(x)

    def test_no_graph_without_grad(self):
        out = T.exp(Tensor(np.ones(2, np.float32)))
        assert not out.requires_grad and out._parents == ()
        with T.no_grad():
            out = T.exp(leaf([1.0]))
        assert not out.requires_grad

    def test_scan_matches_loop(self):
        rng = np.random.default_rng(1)
        a = rng.uniform(0, 1, (2, 7, 3)).astype(np.float32)
        u = rng.normal(size=(2, 7, 3)).astype(np.float32)
        h = T.cumulative_scan_linear(a, u).data
        np.testing.assert_allclose(h, T.scan_linear_reference(a, u), atol=1e-6)


class TestBackward:
    def test_sum_of_squares(self):
        x = leaf([1.0, 2.0])
        T.backward(T.sum(x * x))
        np.testing.assert_allclose(x.grad, [2.0, 4.0])

    def test_independent_param_gets_zero(self):
        x, p = leaf([1.0, 2.0]), leaf([3.0])
        loss = T.sum(x * x) + 0 * T.sum(p)
        T.backward(loss)
        np.testing.assert_array_equal(p.grad, [0.0])

    def test_unreachable_grad_untouched(self):
        x, p = leaf([1.0]), leaf([5.0])
        p.grad = np.array([7.0], np.float32)
        T.backward(T.sum(x * x))
        np.testing.assert_array_equal(p.grad, [7.0])

    def test_non_scalar_loss(self):
        with pytest.raises(T.ShapeError):
            T.backward(leaf([1.0, 2.0]) * 2)

    def test_nonfinite_gradient_flagged(self):
        x = leaf([0.0])
        with pytest.warns(T.NonFiniteGradientWarning), np.errstate(divide="ignore"):
            T.backward(T.sum(T.log(x)))

    def test_reused_node_accumulates(self):
        x = leaf([3.0])
        y = x * x
        T.backward(T.sum(y + y))
        np.testing.assert_allclose(x.grad, [12.0])

    def test_deterministic(self):
        def run():
            rng = np.random.default_rng(3)
            lin = Linear(4, 3, rng)
            x = Tensor(rng.normal(size=(5, 4)).astype(np.float32))
            T.backward(T.mean(T.tanh(lin(x)) ** 2))
            return lin.weight.grad.tobytes()
        assert run() == run()

    def test_mlp_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        l1, l2 = Linear(3, 8, rng), Linear(8, 2, rng)
        x = Tensor(rng.normal(size=(4, 3)))
        y = Tensor(rng.normal(size=(4, 2)))

        def loss():
            d = l2(T.tanh(l1(x))) - y
            return T.mean(d * d)

        err = grad_check(loss, l1.parameters() + l2.parameters(), step=1e-3)
        assert err < 1e-3


class TestGradCheck:
    def test_square_at_three(self):
        assert grad_check(lambda x: T.sum(x * x), np.array([3.0]), step=1e-3) < 1e-6

    def test_params_restored_bit_exact(self):
        p = leaf(np.random.default_rng(0).normal(size=(3,)))
        before = p.data.copy()
        grad_check(lambda: T.sum(T.exp(p)), [p])
        assert p.data.dtype == np.float32
        np.testing.assert_array_equal(p.data, before)

    def test_nonfinite_raises(self):
        with pytest.raises(T.NonFiniteError):
            grad_check(lambda x: T.sum(T.log(x)), np.array([-1.0]))


def _op_cases():
    pos = lambda rng, s: rng.uniform(0.5, 2.0, s)  # noqa: E731
    nrm = lambda rng, s: rng.normal(size=s)  # noqa: E731
    return {
        "matmul": (lambda a, b: T.matmul(a, b), [(nrm, (2, 3, 4)), (nrm, (4, 5))]),
        "matmul_batched": (lambda a, b: T.matmul(a, b), [(nrm, (2, 3, 4)), (nrm, (2, 4, 2))]),
        "add": (lambda a, b: a + b, [(nrm, (3, 4)), (nrm, (4,))]),
        "sub": (lambda a, b: a - b, [(nrm, (3, 1)), (nrm, (3, 4))]),
        "mul": (lambda a, b: a * b, [(nrm, (3, 4)), (nrm, (1, 4))]),
        "div": (lambda a, b: a / b, [(nrm, (3, 4)), (pos, (3, 4))]),
        "pow": (lambda a: T.power(a, -0.5), [(pos, (5,))]),
        "exp": (T.exp, [(nrm, (6,))]),
        "log": (T.log, [(pos, (6,))]),
        "softplus": (T.softplus, [(nrm, (6,))]),
        "silu": (T.silu, [(nrm, (6,))]),
        "tanh": (T.tanh, [(nrm, (6,))]),
        "sigmoid": (T.sigmoid, [(nrm, (6,))]),
        "gelu": (T.gelu, [(nrm, (6,))]),
        "softmax_lastdim": (T.softmax_lastdim, [(nrm, (3, 5))]),
        "sum": (lambda a: T.sum(a, axis=1), [(nrm, (3, 4, 2))]),
        "mean": (lambda a: T.mean(a, axis=(0, 2), keepdims=True), [(nrm, (3, 4, 2))]),
        "slice": (lambda a: a[:, 1:3], [(nrm, (3, 4))]),
        "slice_fancy": (lambda a: a[np.array([0, 2, 2])], [(nrm, (3, 4))]),
        "concat": (lambda a, b: T.concat([a, b], axis=1), [(nrm, (2, 3)), (nrm, (2, 2))]),
        "reshape": (lambda a: T.reshape(a, (4, 3)), [(nrm, (2, 6))]),
        "transpose_last2": (T.transpose_last2, [(nrm, (2, 3, 4))]),
        "permute": (lambda a: T.permute(a, (2, 0, 1)), [(nrm, (2, 3, 4))]),
        "cumulative_scan_linear": (T.cumulative_scan_linear, [(pos, (2, 5, 3)), (nrm, (2, 5, 3))]),
    }


@pytest.mark.parametrize("name", sorted(_op_cases()))
def test_op_gradients_random(name):
    fn, specs = _op_cases()[name]
    rng = np.random.default_rng(abs(hash(name)) % 2**32)
    for _ in range(100):
        inputs = [Tensor(gen(rng, shape), requires_grad=True) for gen, shape in specs]
        w = rng.normal(size=fn(*inputs).shape)

        def loss():
            return T.sum(fn(*inputs) * w)

        assert grad_check(loss, inputs, step=1e-4) < 1e-3, name


class TestAdam:
    def test_zero_grad_identity(self):
        p = leaf(np.random.default_rng(0).normal(size=(4,)))
        before = p.data.copy()
        opt = Adam([p], lr=0.1, weight_decay=0.0)
        for _ in range(5):
            p.grad = np.zeros(4, np.float32)
            opt.step()
        np.testing.assert_array_equal(p.data, before)
        assert opt.t == 5

    def test_first_step(self):
        # bias-corrected m = 1, v = 1 -> step = lr * 1 / (1 + eps)
        p = leaf([0.0])
        adam_step([p], [np.ones(1)], Adam([p], lr=0.1, betas=(0.9, 0.999), eps=1e-8))
        assert p.data[0] == pytest.approx(-0.1, rel=1e-6)

    def test_weight_decay_multiplicative(self):
        p = leaf([2.0])
        opt = Adam([p], lr=0.1, weight_decay=5e-4)
        for _ in range(3):
            p.grad = np.zeros(1, np.float32)
            opt.step()
        assert p.data[0] == pytest.approx(2.0 * (1 - 0.1 * 5e-4) ** 3, rel=1e-6)

    def test_shape_mismatch(self):
        p = leaf([1.0, 2.0])
        with pytest.raises(T.ShapeError):
            adam_step([p], [np.ones(3)], Adam([p]))


def test_cosine_schedule_peak_at_end_of_warmup():
    total, warm = 100, 0.1
    assert cosine_lr(9, total, 3e-4, warm) == pytest.approx(3e-4)
    assert cosine_lr(0, total, 3e-4, warm) < 3e-4
    assert cosine_lr(total, total, 3e-4, warm) == pytest.approx(0.0, abs=1e-12)

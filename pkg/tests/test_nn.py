import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import bn_eval_scalar, central_diff, rel_err, sgd_unrolled
from tepalab.errors import ConfigError, ContractError, DegenerateBatchError, ShapeError
from tepalab.nn import ops
from tepalab.nn.layers import BatchNorm2d, GroupNorm, NormMode
from tepalab.nn.optim import SGD, sgd_step
from tepalab.nn.tensor import Tape, Tensor, backward, grad


def _t(a, rg=True):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=rg)


def check_grads(build, arrays, tol=1e-4):
    """Compare autodiff gradients of ``build(*tensors)`` with central differences."""
    tensors = [_t(a) for a in arrays]
    analytic = grad(build(*tensors), tensors)
    for k, t in enumerate(tensors):
        num = central_diff(lambda: build(*[_t(x.data, False) for x in tensors]).item(), t.data)
        assert rel_err(analytic[k], num) < tol, f"operand {k}"


class TestTensor:
    def test_element_count_matches_shape(self):
        t = Tensor(np.zeros((2, 3, 4)))
        assert t.size == 2 * 3 * 4

    def test_grad_shape_matches(self):
        x = _t(np.ones((3, 2)))
        gm = backward(ops.sum(ops.mul(x, x)))
        assert gm[x].shape == x.shape
        assert x.grad.shape == x.shape

    def test_linear_map_gradient_is_w(self):
        w = np.arange(6.0).reshape(2, 3)
        x = _t(np.ones((2, 3)))
        np.testing.assert_array_equal(grad(ops.sum(ops.mul(x, w)), [x])[0], w)

    def test_non_scalar_loss_rejected(self):
        x = _t(np.ones(3))
        with pytest.raises(ContractError):
            backward(ops.mul(x, 2.0))

    def test_detached_tensor_has_no_gradient(self):
        x = _t(np.ones(3))
        y = Tensor(np.ones(3))
        gm = backward(ops.sum(ops.mul(x, y)))
        with pytest.raises(ContractError):
            gm[y]

    def test_tape_topological(self):
        x = _t(np.ones(2))
        y = ops.mul(ops.add(x, 1.0), ops.exp(x))
        order = list(Tape.from_output(ops.sum(y)))
        pos = {id(n): i for i, n in enumerate(order)}
        for n in order:
            for p in n._parents:
                if p.requires_grad:
                    assert pos[id(p)] < pos[id(n)]

    def test_accumulate_into_grad(self):
        x = _t(np.ones(2))
        backward(ops.sum(x))
        backward(ops.sum(x))
        np.testing.assert_array_equal(x.grad, [2.0, 2.0])


class TestGradientsFiniteDifference:
    """Every primitive against central differences in float64."""

    rng = np.random.default_rng(0)

    def test_elementwise(self):
        a = self.rng.uniform(0.5, 2, (3, 4))
        b = self.rng.uniform(0.5, 2, (1, 4))
        check_grads(lambda x, y: ops.sum(ops.log(ops.mul(ops.exp(ops.sub(x, y)), ops.add(x, y)))), [a, b])

    def test_mean_reshape_rows(self):
        a = self.rng.normal(size=(4, 6))
        check_grads(lambda x: ops.sum(ops.mul(ops.rows(ops.reshape(x, (8, 3)), 2, 6), 1.7)) + ops.mean(ops.mul(x, x)), [a])

    def test_relu(self):
        a = self.rng.normal(size=(5, 4))
        a[np.abs(a) < 0.05] = 0.3  # keep away from the kink
        check_grads(lambda x: ops.sum(ops.mul(ops.relu(x), x)), [a])

    def test_linear(self):
        x, w, b = self.rng.normal(size=(3, 5)), self.rng.normal(size=(4, 5)), self.rng.normal(size=4)
        check_grads(lambda x, w, b: ops.sum(ops.mul(ops.linear(x, w, b), ops.linear(x, w, b))), [x, w, b])

    @pytest.mark.parametrize("stride", [1, 2])
    def test_conv2d(self, stride):
        x = self.rng.normal(size=(2, 3, 6, 6))
        w = self.rng.normal(size=(4, 3, 3, 3)) * 0.3
        b = self.rng.normal(size=4)
        tgt = self.rng.normal(size=(2, 4, 6 // stride, 6 // stride))
        check_grads(lambda x, w, b: ops.sum(ops.mul(ops.conv2d(x, w, b, stride=stride), tgt)), [x, w, b])

    def test_global_avg_pool(self):
        x = self.rng.normal(size=(2, 3, 4, 5))
        tgt = self.rng.normal(size=(2, 3))
        check_grads(lambda x: ops.sum(ops.mul(ops.global_avg_pool(x), tgt)), [x])

    def test_batch_norm_batch_stats(self):
        x = self.rng.normal(size=(4, 3, 3, 3))
        g, b = self.rng.uniform(0.5, 1.5, 3), self.rng.normal(size=3)
        tgt = self.rng.normal(size=x.shape)
        check_grads(lambda x, g, b: ops.sum(ops.mul(ops.batch_norm(x, g, b), tgt)), [x, g, b])

    def test_batch_norm_stored_stats(self):
        x = self.rng.normal(size=(2, 3, 3, 3))
        g, b = self.rng.uniform(0.5, 1.5, 3), self.rng.normal(size=3)
        mu, var = self.rng.normal(size=3), self.rng.uniform(0.5, 2, 3)
        tgt = self.rng.normal(size=x.shape)
        check_grads(lambda x, g, b: ops.sum(ops.mul(ops.batch_norm(x, g, b, mu, var), tgt)), [x, g, b])

    def test_group_norm(self):
        x = self.rng.normal(size=(2, 4, 3, 3))
        g, b = self.rng.uniform(0.5, 1.5, 4), self.rng.normal(size=4)
        tgt = self.rng.normal(size=x.shape)
        check_grads(lambda x, g, b: ops.sum(ops.mul(ops.group_norm(x, g, b, 2), tgt)), [x, g, b])

    def test_gather_pixels(self):
        x = self.rng.normal(size=(2, 2, 4, 4))
        rows = self.rng.integers(0, 4, (2, 4, 4))
        cols = self.rng.integers(0, 4, (2, 4, 4))
        valid = self.rng.random((2, 4, 4)) < 0.7
        tgt = self.rng.normal(size=x.shape)
        check_grads(lambda x: ops.sum(ops.mul(ops.gather_pixels(x, rows, cols, valid), tgt)), [x])

    def test_softmax_and_log_softmax(self):
        z = self.rng.normal(size=(3, 5))
        tgt = self.rng.normal(size=(3, 5))
        check_grads(lambda z: ops.sum(ops.mul(ops.softmax(z), tgt)), [z])
        check_grads(lambda z: ops.sum(ops.mul(ops.log_softmax(z), tgt)), [z])

    def test_losses(self):
        z = self.rng.normal(size=(6, 4)) * 2
        y = self.rng.integers(0, 4, 6)
        check_grads(lambda z: ops.cross_entropy(z, y), [z])
        check_grads(lambda z: ops.entropy(z), [z])
        check_grads(lambda z: ops.gce(z, 0.8), [z])
        w = self.rng.normal(size=6)
        check_grads(lambda z: ops.sum(ops.mul(ops.entropy(z, "none"), w)), [z])
        check_grads(lambda z: ops.sum(ops.mul(ops.gce(z, 0.5, "none"), w)), [z])


class TestBatchNorm:
    def test_eval_scalar_value(self):
        # 1 channel, one pixel: (1 - 0) / sqrt(1 + 1e-5) * 2 + 0.5
        out = ops.batch_norm(_t([[[[1.0]]]], False), _t([2.0], False), _t([0.5], False), np.array([0.0]), np.array([1.0]))
        expected = bn_eval_scalar(1.0, 0.0, 1.0, 2.0, 0.5, 1e-5)
        np.testing.assert_allclose(out.data.item(), expected, atol=1e-12)
        np.testing.assert_allclose(out.data.item(), 2.49999, atol=1e-4)

    def test_eval_centering(self):
        x = np.random.default_rng(1).normal(size=(3, 2, 2, 2))
        mu = x[0].mean(axis=(1, 2))
        out = ops.batch_norm(_t(x[:1] * 0 + mu[None, :, None, None], False), _t(np.ones(2), False), _t(np.zeros(2), False), mu, np.array([0.3, 4.0]))
        np.testing.assert_allclose(out.data, 0.0, atol=1e-12)

    def test_batch_stats_equal_stored_match_eval(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(8, 3, 4, 4))
        mu, var = x.mean(axis=(0, 2, 3)), x.var(axis=(0, 2, 3))
        g, b = _t(rng.uniform(0.5, 2, 3), False), _t(rng.normal(size=3), False)
        np.testing.assert_allclose(ops.batch_norm(_t(x, False), g, b).data, ops.batch_norm(_t(x, False), g, b, mu, var).data, atol=1e-6)

    def test_degenerate_batch(self):
        with pytest.raises(DegenerateBatchError):
            ops.batch_norm(_t(np.ones((1, 2, 3, 3))), _t(np.ones(2)), _t(np.zeros(2)))

    def test_layer_shape_mismatch(self):
        bn = BatchNorm2d(3, np.float32)
        with pytest.raises(ShapeError):
            bn(Tensor(np.zeros((2, 4, 3, 3), np.float32)))

    def test_group_norm_batch_independent(self):
        gn = GroupNorm(4, 2, np.float64)
        x = np.random.default_rng(3).normal(size=(3, 4, 3, 3))
        full = gn(Tensor(x)).data
        np.testing.assert_allclose(gn(Tensor(x[1:2])).data, full[1:2], atol=1e-12)

    def test_modes(self):
        bn = BatchNorm2d(2, np.float64)
        x = Tensor(np.random.default_rng(4).normal(2.0, 3.0, size=(16, 2, 2, 2)))
        bn.mode = NormMode.BATCH
        bn(x)
        np.testing.assert_array_equal(bn.running_mean, 0.0)  # batch-stats leaves stored ones alone
        bn.mode = NormMode.TRAIN
        bn(x)
        np.testing.assert_allclose(bn.running_mean, 0.1 * x.data.mean(axis=(0, 2, 3)), atol=1e-12)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(2, 6), st.integers(1, 4), st.floats(0.5, 3.0), st.floats(-2, 2), st.integers(0, 10_000))
    def test_batch_output_moments(self, n, c, gamma, beta, seed):
        x = np.random.default_rng(seed).normal(5.0, 10.0, size=(n, c, 3, 3))
        out = ops.batch_norm(_t(x, False), _t(np.full(c, gamma), False), _t(np.full(c, beta), False)).data
        np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), beta, atol=1e-3)
        np.testing.assert_allclose(out.var(axis=(0, 2, 3)), gamma**2, rtol=1e-3)


class TestSoftmax:
    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-30, 30), min_size=2, max_size=12), st.floats(-100, 100))
    def test_sums_to_one_and_shift_invariant(self, z, shift):
        z = np.array([z])
        p = ops.softmax_np(z)
        np.testing.assert_allclose(p.sum(), 1.0, atol=1e-6)
        np.testing.assert_allclose(ops.softmax_np(z + shift), p, atol=1e-6)

    def test_uniform_ce_gradient(self):
        c, j = 5, 2
        z = _t(np.zeros((1, c)))
        g = grad(ops.cross_entropy(z, [j]), [z])[0][0]
        expected = np.full(c, 1 / c)
        expected[j] -= 1
        np.testing.assert_allclose(g, expected, atol=1e-6)


class TestSGD:
    def test_plain_step(self):
        p = _t([1.0])
        SGD([p], lr=0.1).step({p: np.array([2.0])})
        np.testing.assert_allclose(p.data, [0.8])

    def test_zero_grad_no_change(self):
        p = _t([1.5, -2.0])
        SGD([p], lr=0.3).step({p: np.zeros(2)})
        np.testing.assert_array_equal(p.data, [1.5, -2.0])

    def test_momentum_unroll(self):
        p = _t([0.0])
        opt = SGD([p], lr=1.0, momentum=0.9)
        for _ in range(2):
            opt.step({p: np.array([1.0])})
        np.testing.assert_allclose(p.data, [-2.9])
        np.testing.assert_allclose(p.data, [sgd_unrolled(0.0, [1, 1], 1.0, 0.9)[-1]])

    def test_functional_matches_object(self):
        new_p, _ = sgd_step([np.array([1.0])], [np.array([2.0])], 0.1)
        np.testing.assert_allclose(new_p[0], [0.8])

    def test_bad_lr(self):
        with pytest.raises(ConfigError):
            SGD([_t([1.0])], lr=0.0)
        with pytest.raises(ConfigError):
            sgd_step([np.ones(1)], [np.ones(1)], -1.0)

    def test_foreign_gradient_rejected(self):
        p, q = _t([1.0]), _t([1.0])
        with pytest.raises(ContractError):
            SGD([p], lr=0.1).step({p: np.ones(1), q: np.ones(1)})

    def test_uncovered_parameters_unchanged(self):
        p, q = _t([1.0]), _t([5.0])
        SGD([p], lr=0.1).step({p: np.ones(1)})
        np.testing.assert_array_equal(q.data, [5.0])


class TestDeterminism:
    def test_conv_bit_identical(self):
        rng = np.random.default_rng(5)
        x, w = rng.normal(size=(2, 3, 8, 8)).astype(np.float32), rng.normal(size=(4, 3, 3, 3)).astype(np.float32)
        a = ops.conv2d(Tensor(x), Tensor(w)).data
        b = ops.conv2d(Tensor(x), Tensor(w)).data
        assert a.tobytes() == b.tobytes()

    def test_entropy_bounded_by_log_c(self):
        z = np.random.default_rng(6).normal(size=(100, 10)) * 5
        assert ops.entropy(Tensor(z), "none").data.max() <= math.log(10) + 1e-9

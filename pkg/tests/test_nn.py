"""Parameter store, optimizer, schedule, activations, and the grad checker."""

import numpy as np
import pytest

from dinozaur import autodiff as ad
from dinozaur.autodiff import NonFiniteError, Tensor
from dinozaur.nn import (AffineLayer, OptimizerState, ParamStore, adamw_step,
                         gelu, gelu_grad, gradcheck, one_cycle_lr, stream_rng,
                         tanh, tanh_grad)


class TestParamStore:
    def test_add_zero_accumulate(self):
        store = ParamStore()
        store.add("a.w", np.ones((2, 2)))
        store.add("a.b", np.zeros(2))
        assert store.names() == ["a.w", "a.b"]
        assert store.num_values() == 6
        store["a.w"].grad += 1.0
        store.zero_grad()
        assert np.all(store["a.w"].grad == 0)
        with pytest.raises(ValueError):
            store.add("a.w", np.zeros(1))

    def test_snapshot_restore(self):
        store = ParamStore()
        store.add("x", np.array([1.0, 2.0]))
        snap = store.snapshot()
        store["x"].value[...] = 9.0
        store.restore(snap)
        np.testing.assert_array_equal(store["x"].value, [1.0, 2.0])

    def test_finite_check(self):
        store = ParamStore()
        store.add("x", np.array([1.0]))
        store["x"].value[0] = np.nan
        with pytest.raises(NonFiniteError):
            store.check_finite()


class TestAffineInit:
    def test_glorot_bounds_and_zero_bias(self):
        layer = AffineLayer.init(stream_rng(0, 0), 20, 30)
        bound = np.sqrt(6.0 / 50)
        assert layer.weight.shape == (20, 30)
        assert np.all(np.abs(layer.weight) <= bound)
        assert np.all(layer.bias == 0)


class TestActivations:
    def test_gelu_values(self):
        assert gelu(0.0) == 0.0
        assert abs(gelu(10.0) - 10.0) < 1e-12  # asymptotically linear
        # gelu(x) = x Phi(x); at x=1: 1 * 0.841344746...
        assert abs(gelu(1.0) - 0.8413447460685429) < 1e-12

    def test_gelu_grad_matches_fd(self):
        x = np.linspace(-3, 3, 31)
        h = 1e-6
        fd = (gelu(x + h) - gelu(x - h)) / (2 * h)
        np.testing.assert_allclose(gelu_grad(x), fd, atol=1e-9)

    def test_tanh_pair(self):
        assert tanh(0.0) == 0.0
        assert tanh_grad(0.0) == 1.0
        x = np.linspace(-2, 2, 21)
        fd = (tanh(x + 1e-6) - tanh(x - 1e-6)) / 2e-6
        np.testing.assert_allclose(tanh_grad(x), fd, atol=1e-9)


class TestAdamW:
    def test_first_step_moves_by_lr(self):
        store = ParamStore()
        store.add("w", np.array([5.0]))
        store["w"].grad[...] = 1.0
        opt = OptimizerState(lr=0.1)
        adamw_step(store, opt)
        # bias correction makes mhat = vhat = g on step one
        assert abs(store["w"].value[0] - (5.0 - 0.1 / (1 + 1e-8))) < 1e-12

    def test_zero_grad_is_identity_without_decay(self):
        store = ParamStore()
        store.add("w", np.array([1.5, -2.0]))
        opt = OptimizerState(lr=0.1, weight_decay=0.0)
        adamw_step(store, opt)
        np.testing.assert_array_equal(store["w"].value, [1.5, -2.0])

    def test_decoupled_decay_scales_multiplicatively(self):
        store = ParamStore()
        store.add("w", np.array([2.0]))
        opt = OptimizerState(lr=0.1, weight_decay=0.01)
        adamw_step(store, opt)
        assert abs(store["w"].value[0] - 2.0 * (1 - 0.001)) < 1e-15

    def test_gradients_zeroed_after_step(self):
        store = ParamStore()
        store.add("w", np.array([1.0]))
        store["w"].grad[...] = 3.0
        adamw_step(store, OptimizerState(lr=0.01))
        assert np.all(store["w"].grad == 0)

    def test_nonfinite_gradient_aborts_before_update(self):
        store = ParamStore()
        store.add("w", np.array([1.0]))
        store["w"].grad[...] = np.inf
        with pytest.raises(NonFiniteError):
            adamw_step(store, OptimizerState(lr=0.1))
        assert store["w"].value[0] == 1.0

    def test_moment_update_matches_reference(self):
        rng = np.random.default_rng(0)
        store = ParamStore()
        store.add("w", rng.standard_normal(4))
        opt = OptimizerState(lr=0.05, weight_decay=0.01)
        w = store["w"].value.copy()
        m = np.zeros(4)
        v = np.zeros(4)
        for t in range(1, 6):
            g = rng.standard_normal(4)
            store["w"].grad[...] = g
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g ** 2
            w = w * (1 - 0.05 * 0.01)
            w = w - 0.05 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
            adamw_step(store, opt)
            np.testing.assert_allclose(store["w"].value, w, rtol=1e-12)


class TestOneCycle:
    def test_boundaries(self):
        assert one_cycle_lr(0, 1000, 1.0) == pytest.approx(1.0 / 25)
        assert one_cycle_lr(300, 1000, 1.0) == pytest.approx(1.0)
        assert abs(one_cycle_lr(1000, 1000, 1.0) - 1e-4) < 1e-12

    def test_continuous_at_junction(self):
        total, max_lr = 1000, 0.3
        warm = 0.3 * total
        left = one_cycle_lr(warm - 1e-9, total, max_lr)
        right = one_cycle_lr(warm + 1e-9, total, max_lr)
        assert abs(left - right) < 1e-9
        assert abs(one_cycle_lr(warm, total, max_lr) - max_lr) < 1e-12

    def test_monotone_phases(self):
        total = 200
        lrs = [one_cycle_lr(s, total, 1.0) for s in range(total + 1)]
        warm_end = int(0.3 * total)
        assert all(a < b for a, b in zip(lrs[:warm_end], lrs[1:warm_end + 1]))
        assert all(a > b for a, b in zip(lrs[warm_end:-1], lrs[warm_end + 1:]))

    def test_range_validation(self):
        with pytest.raises(ValueError):
            one_cycle_lr(-1, 10, 1.0)
        with pytest.raises(ValueError):
            one_cycle_lr(11, 10, 1.0)


class TestStreamRng:
    def test_deterministic_and_independent(self):
        a1 = stream_rng(42, 0).standard_normal(5)
        a2 = stream_rng(42, 0).standard_normal(5)
        b = stream_rng(42, 1).standard_normal(5)
        c = stream_rng(43, 0).standard_normal(5)
        np.testing.assert_array_equal(a1, a2)
        assert not np.allclose(a1, b)
        assert not np.allclose(a1, c)


class TestGradcheck:
    def test_affine_model_tight(self):
        # pure-affine loss: analytic gradients, max rel error <= 1e-9
        rng = np.random.default_rng(1)
        store = ParamStore()
        store.add("w", rng.standard_normal((3, 4)))
        store.add("b", rng.standard_normal(3))
        x = rng.standard_normal((8, 4))
        y = rng.standard_normal((8, 3))

        def loss_fn():
            leaves = store.leaves()
            pred = ad.affine(Tensor(x), leaves["w"], leaves["b"])
            return ad.tmean(ad.square(ad.sub(pred, Tensor(y))))

        # quadratic loss: central differences are exact, so a larger step
        # only reduces cancellation noise
        report = gradcheck(loss_fn, store, h=1e-4)
        assert report.max_rel_error <= 1e-9, report.summary()

    def test_saturated_tanh_handled(self):
        # gradients vanish in the tanh plateau; the floor keeps the check clean
        store = ParamStore()
        store.add("w", np.array([30.0, -30.0, 0.3]))
        x = np.array([1.0, 1.0, 1.0])

        def loss_fn():
            return ad.tsum(ad.ttanh(ad.mul(store.leaves()["w"], x)))

        report = gradcheck(loss_fn, store, h=1e-6)
        assert report.passed(1e-5), report.summary()

    def test_detects_wrong_gradient(self):
        store = ParamStore()
        store.add("w", np.array([1.3]))

        def loss_fn():
            w = store.leaves()["w"]
            # op with a deliberately wrong vjp
            bad = Tensor(w.data ** 2, parents=(w,), vjp=lambda g: (3.0 * w.data * g,))
            return ad.tsum(bad)

        report = gradcheck(loss_fn, store)
        assert not report.passed(1e-5)
        assert report.worst.param == "w"

import numpy as np
from django.test import SimpleTestCase

from numerics import functional as F
from numerics.gradcheck import grad_check
from numerics.optim import OptState, Schedule, adamw_step, lr_at
from numerics.tensor import Tensor, no_grad, parameter
from ticon_lab.exceptions import ConfigError, NumericalError, RangeError, ShapeError


class GradCheckTests(SimpleTestCase):
    def setUp(self):
        self.rng = np.random.default_rng(7)

    def test_polynomial(self):
        self.assertLessEqual(grad_check(lambda x: F.sum(F.mul(x, x)), np.array([1.0, 2.0]), eps=1e-5), 1e-6)
        x = parameter([1.0, 2.0])
        F.sum(F.mul(x, x)).backward()
        np.testing.assert_allclose(x.grad, [2.0, 4.0])

    def test_cosine_against_constant(self):
        c = self.rng.standard_normal(8)
        error = grad_check(lambda x: F.sum(F.cosine_similarity(x, c)), self.rng.standard_normal(8))
        self.assertLessEqual(error, 1e-5)

    def test_primitives(self):
        a = self.rng.standard_normal((3, 4))
        b = self.rng.standard_normal((4, 5))
        w = self.rng.standard_normal((3, 5))
        bias = self.rng.standard_normal(4)
        gamma = self.rng.standard_normal(4)
        beta = self.rng.standard_normal(4)
        mask = np.array([[True, True, False, True]] * 3)
        cases = {
            'matmul': lambda x: F.sum(F.mul(F.matmul(x, b), w)),
            'add': lambda x: F.sum(F.mul(F.add(x, a), F.add(x, a))),
            'mul': lambda x: F.sum(F.mul(F.mul(x, a), x)),
            'bias': lambda x: F.sum(F.mul(F.add_bias(x, bias), a)),
            'layer_norm': lambda x: F.sum(F.mul(F.layer_norm(x, gamma, beta), a)),
            'softmax_bias': lambda x: F.sum(F.mul(F.softmax(x, bias=a), a)),
            'softmax_mask': lambda x: F.sum(F.mul(F.softmax(x, mask=mask), a)),
            'gelu': lambda x: F.sum(F.mul(F.gelu(x), a)),
            'tanh': lambda x: F.sum(F.mul(F.tanh(x), a)),
            'sigmoid': lambda x: F.sum(F.mul(F.sigmoid(x), a)),
            'l2_normalize': lambda x: F.sum(F.mul(F.l2_normalize(x), a)),
            'cosine': lambda x: F.sum(F.cosine_similarity(x, a)),
            'mean_over': lambda x: F.sum(F.mul(F.mean_over(x, [0, 2], axis=0), bias)),
            'concat': lambda x: F.sum(F.mul(F.concat([x, F.tanh(x)], axis=-1), F.concat([a, a], axis=-1))),
            'gather': lambda x: F.sum(F.mul(F.gather(x, [2, 0, 2], axis=0), a)),
            'log_softmax': lambda x: F.sum(F.mul(F.log_softmax(x), a)),
        }
        for name, f in cases.items():
            with self.subTest(primitive=name):
                self.assertLessEqual(grad_check(f, self.rng.standard_normal((3, 4))), 1e-5)

    def test_bias_gradient_of_softmax(self):
        x = self.rng.standard_normal((2, 5))
        target = self.rng.standard_normal((2, 5))
        error = grad_check(lambda b: F.sum(F.mul(F.softmax(x, bias=b), target)), self.rng.standard_normal((2, 5)))
        self.assertLessEqual(error, 1e-5)


class PrimitiveContractTests(SimpleTestCase):
    def setUp(self):
        self.rng = np.random.default_rng(11)

    def test_softmax_rows(self):
        p = F.softmax(self.rng.standard_normal((6, 9)), bias=self.rng.standard_normal((6, 9))).data
        np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)
        self.assertTrue(np.all(p > 0))

    def test_masked_softmax_zeroes_masked_entries(self):
        mask = np.array([True, False, True])
        p = F.softmax(np.array([1.0, 50.0, 2.0]), mask=mask).data
        self.assertEqual(p[1], 0.0)
        self.assertAlmostEqual(p.sum(), 1.0, places=12)
        with self.assertRaises(NumericalError):
            F.softmax(np.zeros(3), mask=np.zeros(3, dtype=bool))

    def test_l2_normalize(self):
        y = F.l2_normalize(self.rng.standard_normal((5, 7)) * 100).data
        np.testing.assert_allclose(np.linalg.norm(y, axis=-1), 1.0, atol=1e-12)
        with self.assertRaises(NumericalError):
            F.l2_normalize(np.zeros(4))

    def test_mean_over_distributes_gradient(self):
        x = parameter(self.rng.standard_normal((5, 3)))
        F.sum(F.mean_over(x, [1, 3], axis=0)).backward()
        expected = np.zeros((5, 3))
        expected[[1, 3]] = 0.5
        np.testing.assert_array_equal(x.grad, expected)

    def test_non_finite_is_an_error(self):
        with self.assertRaises(NumericalError):
            Tensor([1.0, np.nan])

    def test_matmul_shape_mismatch(self):
        with self.assertRaises(ShapeError):
            F.matmul(np.zeros((2, 3)), np.zeros((2, 3)))

    def test_no_grad_builds_no_tape(self):
        x = parameter([1.0, 2.0])
        with no_grad():
            y = F.mul(x, x)
        self.assertFalse(y.requires_grad)


class OptimizerTests(SimpleTestCase):
    def test_zero_lr_leaves_parameters(self):
        params = {'p': parameter([1.0, -2.0])}
        state = OptState.for_params(params)
        adamw_step(params, {'p': np.array([0.3, 0.4])}, state, lr=0.0)
        np.testing.assert_array_equal(params['p'].data, [1.0, -2.0])
        self.assertEqual(state.step_count, 1)
        self.assertTrue(np.any(state.first_moment['p']))

    def test_first_step(self):
        params = {'p': parameter([1.0])}
        state = OptState.for_params(params)
        adamw_step(params, {'p': np.array([1.0])}, state, lr=0.1, betas=(0.9, 0.95), weight_decay=0.0)
        self.assertAlmostEqual(params['p'].data[0], 0.9, places=6)

    def test_decay_only(self):
        params = {'p': parameter([2.0])}
        state = OptState.for_params(params)
        adamw_step(params, {'p': np.array([0.0])}, state, lr=0.1, weight_decay=0.05)
        self.assertAlmostEqual(params['p'].data[0], 2.0 * (1 - 0.1 * 0.05), places=12)

    def test_shape_mismatch(self):
        params = {'p': parameter([1.0, 2.0])}
        with self.assertRaises(ShapeError):
            adamw_step(params, {'p': np.zeros(3)}, OptState.for_params(params), lr=0.1)

    def test_schedule(self):
        sched = Schedule(base_lr=2e-4, warmup_iters=100, total_iters=1000, floor_fraction=0.1)
        self.assertEqual(lr_at(0, sched), 0.0)
        self.assertAlmostEqual(lr_at(100, sched), 2e-4)
        self.assertAlmostEqual(lr_at(1000, sched), 2e-5)
        self.assertLess(lr_at(600, sched), lr_at(300, sched))
        with self.assertRaises(RangeError):
            lr_at(1001, sched)
        with self.assertRaises(ConfigError):
            Schedule(base_lr=1e-3, warmup_iters=0, total_iters=10)

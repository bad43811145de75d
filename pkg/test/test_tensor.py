from pysgsf import tensor as T
from pysgsf.tensor import Tensor
from pysgsf.errors import GraphError
from hypothesis import given, settings, strategies as st
import numpy as np
import unittest
import math


def direct_conv(x, w, pad):
    """Brute-force zero-padded cross-correlation of one [C, H, W] image"""
    c, h, wd = x.shape
    co, _, kh, kw = w.shape
    xp = np.zeros((c, h + 2 * pad, wd + 2 * pad))
    xp[:, pad:pad + h, pad:pad + wd] = x
    out = np.zeros((co, h, wd))
    for o in range(co):
        for i in range(h):
            for j in range(wd):
                total = 0.0
                for ci in range(c):
                    for a in range(kh):
                        for b in range(kw):
                            total += w[o, ci, a, b] * xp[ci, i + a, j + b]
                out[o, i, j] = total
    return out


class TestConv2d(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.rng = np.random.default_rng(12)
        cls.x = cls.rng.uniform(-1, 1, size=(2, 3, 5, 6)).astype(np.float32)
        cls.delta = np.zeros((3, 1, 3, 3), dtype=np.float32)
        cls.delta[:, 0, 1, 1] = 1.0

    def test_delta_kernel_identity(self):
        """A centred delta kernel leaves the input unchanged for every padding mode
        """
        for mode in T.PADDING_MODES:
            out = T.conv2d(Tensor(self.x), Tensor(self.delta), padding_mode=mode, groups=3)
            np.testing.assert_array_equal(out.data, self.x)

    def test_scaling_kernel(self):
        x = np.full((1, 1, 4, 4), 0.5, dtype=np.float32)
        out = T.conv2d(Tensor(x), Tensor(np.full((1, 1, 1, 1), 2.0)))
        np.testing.assert_array_equal(out.data, np.ones((1, 1, 4, 4)))

    def test_ones_kernel_small_image(self):
        x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
        out = T.conv2d(Tensor(x), Tensor(np.ones((1, 1, 3, 3))))
        np.testing.assert_array_equal(out.data[0, 0], [[10.0, 10.0], [10.0, 10.0]])

    def test_direct_summation(self):
        x = self.rng.integers(-3, 4, size=(1, 2, 4, 5)).astype(np.float64)
        w = self.rng.integers(-2, 3, size=(3, 2, 3, 3)).astype(np.float64)
        out = T.conv2d(Tensor(x), Tensor(w))
        np.testing.assert_array_equal(out.data[0], direct_conv(x[0], w, 1))

    def test_channel_mismatch(self):
        self.assertRaises(ValueError, lambda: T.conv2d(Tensor(self.x), Tensor(np.ones((2, 2, 3, 3)))))

    def test_even_kernel(self):
        self.assertRaises(ValueError, lambda: T.conv2d(Tensor(self.x), Tensor(np.ones((2, 3, 2, 2)))))

    def test_deterministic(self):
        w = Tensor(self.rng.standard_normal((4, 3, 3, 3)).astype(np.float32))
        first = T.conv2d(Tensor(self.x), w, padding_mode='reflect').data
        second = T.conv2d(Tensor(self.x), w, padding_mode='reflect').data
        np.testing.assert_array_equal(first, second)


class TestMatmul(unittest.TestCase):

    def test_identity(self):
        a = np.arange(12, dtype=np.float32).reshape(3, 4)
        np.testing.assert_array_equal(T.matmul(Tensor(np.eye(3)), Tensor(a)).data, a)

    def test_hand_sum(self):
        out = T.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
        np.testing.assert_array_equal(out.data, [[3.0], [7.0]])

    def test_triple_loop(self):
        rng = np.random.default_rng(3)
        a = rng.integers(-5, 6, size=(5, 7)).astype(np.float32)
        b = rng.integers(-5, 6, size=(7, 3)).astype(np.float32)
        expected = np.zeros((5, 3))
        for i in range(5):
            for j in range(3):
                for k in range(7):
                    expected[i, j] += a[i, k] * b[k, j]
        np.testing.assert_array_equal(T.matmul(Tensor(a), Tensor(b)).data, expected)

    def test_inner_mismatch(self):
        self.assertRaises(ValueError, lambda: T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3)))))


class TestSoftmax(unittest.TestCase):

    def test_uniform(self):
        out = T.softmax_rows(Tensor(np.zeros((1, 4))))
        np.testing.assert_allclose(out.data, [[0.25, 0.25, 0.25, 0.25]])

    def test_masked_entry(self):
        out = T.softmax_rows(Tensor([[3.7, -np.inf]]))
        np.testing.assert_array_equal(out.data, [[1.0, 0.0]])

    def test_closed_form(self):
        out = T.softmax_rows(Tensor([[1.0, 2.0]]))
        e = math.e
        np.testing.assert_allclose(out.data, [[1 / (1 + e), e / (1 + e)]], rtol=1e-6)

    def test_all_masked_row(self):
        self.assertRaises(ValueError, lambda: T.softmax_rows(Tensor([[-np.inf, -np.inf]])))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(min_value=0, max_value=2 ** 31 - 1))
    def test_rows_sum_to_one(self, seed):
        logits = np.random.default_rng(seed).normal(0, 5, size=(4, 6)).astype(np.float32)
        out = T.softmax_rows(Tensor(logits)).data
        np.testing.assert_allclose(out.sum(axis=-1), np.ones(4), atol=1e-6)
        self.assertTrue(np.all((out >= 0) & (out <= 1)))


class TestLayerNorm(unittest.TestCase):

    def test_constant_input(self):
        out = T.layernorm(Tensor(np.full((1, 4, 2, 2), 3.0)), Tensor(np.ones(4)), Tensor(np.zeros(4)))
        np.testing.assert_array_equal(out.data, np.zeros((1, 4, 2, 2)))

    def test_zero_gamma(self):
        x = np.random.default_rng(0).standard_normal((2, 3, 2, 2))
        out = T.layernorm(Tensor(x), Tensor(np.zeros(3)), Tensor([0.5, -1.0, 2.0]))
        np.testing.assert_allclose(out.data[:, :, 0, 0], [[0.5, -1.0, 2.0]] * 2)

    def test_two_channels(self):
        x = np.array([1.0, 3.0]).reshape(1, 2, 1, 1)
        out = T.layernorm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-12)
        np.testing.assert_allclose(out.data.reshape(-1), [-1.0, 1.0], rtol=1e-6)

    def test_shape_mismatch(self):
        self.assertRaises(ValueError, lambda: T.layernorm(Tensor(np.ones((1, 3, 2, 2))), Tensor(np.ones(2)),
                                                          Tensor(np.zeros(2))))


class TestElementwise(unittest.TestCase):

    def test_sigmoid(self):
        self.assertEqual(T.elementwise('sigmoid', Tensor(0.0)).item(), 0.5)

    def test_elu(self):
        self.assertAlmostEqual(T.elementwise('elu', Tensor(-1.0)).item(), math.exp(-1) - 1, places=6)
        self.assertEqual(T.elu(Tensor(0.0)).item(), 0.0)

    def test_relu(self):
        np.testing.assert_array_equal(T.elementwise('relu', Tensor([-2.0, 0.0, 3.0])).data, [0.0, 0.0, 3.0])

    def test_mul_ones(self):
        x = np.random.default_rng(1).standard_normal((3, 4)).astype(np.float32)
        np.testing.assert_array_equal(T.elementwise('mul', Tensor(x), Tensor(np.ones((3, 4)))).data, x)

    def test_unknown_op(self):
        self.assertRaises(ValueError, lambda: T.elementwise('tanh', Tensor(0.0)))

    def test_broadcast_mismatch(self):
        self.assertRaises(ValueError, lambda: T.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,)))))


class TestShuffle(unittest.TestCase):

    def test_unshuffle_block(self):
        x = np.arange(4, dtype=np.float32).reshape(1, 1, 2, 2)
        out = T.pixel_unshuffle(Tensor(x), 2)
        self.assertEqual(out.shape, (1, 4, 1, 1))
        np.testing.assert_array_equal(out.data.reshape(-1), [0.0, 1.0, 2.0, 3.0])

    @settings(max_examples=25, deadline=None)
    @given(st.integers(min_value=1, max_value=3), st.integers(min_value=1, max_value=4),
           st.integers(min_value=1, max_value=4))
    def test_inverse_permutations(self, c, h, w):
        x = np.random.default_rng(c * 100 + h * 10 + w).standard_normal((2, 4 * c, h, w)).astype(np.float32)
        np.testing.assert_array_equal(T.pixel_unshuffle(T.pixel_shuffle(Tensor(x))).data, x)
        y = np.random.default_rng(7).standard_normal((1, c, 2 * h, 2 * w)).astype(np.float32)
        np.testing.assert_array_equal(T.pixel_shuffle(T.pixel_unshuffle(Tensor(y))).data, y)

    def test_odd_extent(self):
        self.assertRaises(ValueError, lambda: T.pixel_unshuffle(Tensor(np.ones((1, 1, 3, 4)))))


class TestShapes(unittest.TestCase):

    def test_pad_reflect(self):
        x = Tensor(np.array([[[[1.0, 2.0, 3.0]]]]))
        out = T.pad2d(x, (0, 0, 1, 2), 'reflect')
        np.testing.assert_array_equal(out.data[0, 0, 0], [2.0, 1.0, 2.0, 3.0, 2.0, 1.0])

    def test_pad_circular(self):
        x = Tensor(np.array([[[[1.0, 2.0, 3.0]]]]))
        out = T.pad2d(x, (0, 0, 2, 1), 'circular')
        np.testing.assert_array_equal(out.data[0, 0, 0], [2.0, 3.0, 1.0, 2.0, 3.0, 1.0])

    def test_pad_unknown_mode(self):
        self.assertRaises(ValueError, lambda: T.pad2d(Tensor(np.ones((1, 1, 2, 2))), (1, 1, 1, 1), 'edge'))

    def test_split_concat(self):
        x = np.random.default_rng(0).standard_normal((1, 6, 2, 2)).astype(np.float32)
        parts = T.split(Tensor(x), 3)
        self.assertEqual([p.shape for p in parts], [(1, 2, 2, 2)] * 3)
        np.testing.assert_array_equal(T.concat(parts).data, x)

    def test_split_uneven(self):
        self.assertRaises(ValueError, lambda: T.split(Tensor(np.ones((1, 5, 2, 2))), 2))

    def test_narrow_copies(self):
        x = Tensor(np.zeros((1, 3, 2, 2)))
        part = T.narrow(x, 1, 1)
        part.data[...] = 5.0
        np.testing.assert_array_equal(x.data, np.zeros((1, 3, 2, 2)))

    def test_avg_pool(self):
        x = np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4)
        np.testing.assert_array_equal(T.avg_pool2(Tensor(x)).data[0, 0], [[2.5, 4.5], [10.5, 12.5]])

    def test_normalize(self):
        out = T.normalize(Tensor([[3.0, 4.0], [0.0, 0.0]]))
        np.testing.assert_allclose(out.data, [[0.6, 0.8], [0.0, 0.0]], rtol=1e-6)


class TestTopK(unittest.TestCase):

    @staticmethod
    def oracle(row, k):
        """Full-sort brute force: highest value first, lower column first on ties"""
        ranked = sorted(range(len(row)), key=lambda j: (-row[j], j))
        keep = np.zeros(len(row), dtype=bool)
        keep[ranked[:k]] = True
        return keep

    def test_against_sort_oracle(self):
        rng = np.random.default_rng(2024)
        for trial in range(200):
            rows, cols = rng.integers(1, 9, size=2)
            if trial % 2:
                # duplicated values make ties
                logits = rng.integers(0, 3, size=(rows, cols)).astype(np.float32)
            else:
                logits = rng.standard_normal((rows, cols)).astype(np.float32)
            k = int(rng.integers(1, cols + 1))
            masked = T.topk_mask(Tensor(logits), k).data
            for r in range(rows):
                keep = self.oracle(logits[r], k)
                np.testing.assert_array_equal(masked[r][keep], logits[r][keep])
                self.assertTrue(np.all(np.isneginf(masked[r][~keep])))

    def test_k_bounds(self):
        self.assertRaises(ValueError, lambda: T.topk_mask(Tensor(np.ones((2, 3))), 0))
        self.assertRaises(ValueError, lambda: T.topk_mask(Tensor(np.ones((2, 3))), 4))

    def test_gradient_on_kept_entries(self):
        logits = Tensor(np.array([[1.0, 3.0, 2.0]]), requires_grad=True)
        T.backward(T.topk_mask(logits, 2), grad=np.ones((1, 3)))
        np.testing.assert_array_equal(logits.grad, [[0.0, 1.0, 1.0]])


class TestBackward(unittest.TestCase):

    def test_mul_constant(self):
        x = Tensor(np.array([1.0, -2.0, 0.5]), requires_grad=True)
        T.backward(T.tsum(x * 3.0))
        np.testing.assert_array_equal(x.grad, [3.0, 3.0, 3.0])

    def test_non_scalar(self):
        x = Tensor(np.ones(3), requires_grad=True)
        self.assertRaises(GraphError, lambda: T.backward(x * 2.0))

    def test_broadcast_grad(self):
        x = Tensor(np.ones((2, 3)), requires_grad=True)
        b = Tensor(np.ones(3), requires_grad=True)
        T.backward(T.tsum(x + b))
        np.testing.assert_array_equal(b.grad, [2.0, 2.0, 2.0])

    def test_no_grad(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with T.no_grad():
            y = x * 2.0
        self.assertFalse(y.requires_grad)

    def test_float64_kept(self):
        x = Tensor(np.ones(2, dtype=np.float64))
        self.assertEqual((x * 2.0).dtype, np.float64)
        self.assertEqual(Tensor([1.0, 2.0]).dtype, np.float32)

    def test_frozen_branches_replay(self):
        x = Tensor(np.array([-1.0, 2.0]))
        with T.frozen_branches() as branches:
            first = T.relu(x).data
            branches.rewind()
            replayed = T.relu(Tensor(np.array([1.0, -2.0]))).data
        np.testing.assert_array_equal(first, [0.0, 2.0])
        np.testing.assert_array_equal(replayed, [0.0, -2.0])


if __name__ == '__main__':
    unittest.main()

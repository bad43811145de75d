from pysgsf.metrics import psnr, ssim, psnr_tensor, ssim_tensor, gaussian_window, SSIM_K1
from pysgsf.tensor import Tensor
from hypothesis import given, settings, strategies as st
import numpy as np
import unittest


class TestPsnr(unittest.TestCase):

    def test_identical_floor(self):
        x = np.random.default_rng(0).uniform(0, 1, (3, 8, 8))
        self.assertAlmostEqual(psnr(x, x), 100.0)

    def test_uniform_error(self):
        a = np.full((3, 8, 8), 0.3)
        self.assertAlmostEqual(psnr(a, a + 0.1), 20.0, delta=1e-6)

    def test_opposite(self):
        self.assertAlmostEqual(psnr(np.zeros((3, 4, 4)), np.ones((3, 4, 4))), 0.0)

    def test_tensor_matches(self):
        rng = np.random.default_rng(4)
        a, b = rng.uniform(0, 1, (2, 3, 8, 8)), rng.uniform(0, 1, (2, 3, 8, 8))
        self.assertAlmostEqual(psnr_tensor(Tensor(a), Tensor(b)).item(), psnr(a, b), places=5)

    def test_shape_mismatch(self):
        self.assertRaises(ValueError, lambda: psnr(np.zeros((3, 4, 4)), np.zeros((3, 4, 5))))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(min_value=0, max_value=2 ** 31 - 1))
    def test_symmetric(self, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.uniform(0, 1, (3, 12, 12)), rng.uniform(0, 1, (3, 12, 12))
        self.assertEqual(psnr(a, b), psnr(b, a))
        self.assertEqual(ssim(a, b), ssim(b, a))


class TestSsim(unittest.TestCase):

    def test_self_similarity_exact(self):
        x = np.random.default_rng(1).uniform(0, 1, (3, 16, 16)).astype(np.float32)
        self.assertEqual(ssim(x, x), 1.0)

    def test_inverted_pattern(self):
        y, x = np.mgrid[0:32, 0:32]
        pattern = 0.5 + 0.4 * np.sign(np.sin(x / 2.0) * np.sin(y / 3.0))
        img = np.stack([pattern] * 3)
        self.assertLess(ssim(img, 1.0 - img), 0.5)

    def test_constant_images(self):
        a, b = np.full((3, 16, 16), 0.25), np.full((3, 16, 16), 0.75)
        c1 = SSIM_K1 ** 2
        expected = (2 * 0.25 * 0.75 + c1) / (0.25 ** 2 + 0.75 ** 2 + c1)
        self.assertAlmostEqual(ssim(a, b), expected, places=6)

    def test_window(self):
        window = gaussian_window()
        self.assertEqual(window.shape, (11, 11))
        self.assertAlmostEqual(window.sum(), 1.0)
        self.assertEqual(window.argmax(), 60)

    def test_small_images(self):
        x = np.random.default_rng(2).uniform(0, 1, (3, 6, 6))
        self.assertAlmostEqual(ssim(x, x), 1.0)

    def test_batched(self):
        x = np.random.default_rng(3).uniform(0, 1, (2, 3, 16, 16))
        self.assertEqual(ssim_tensor(Tensor(x), Tensor(x)).shape, ())


if __name__ == '__main__':
    unittest.main()

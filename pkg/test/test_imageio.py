from pysgsf.imageio import read_png, write_png, encode_rle, decode_rle, read_masks, write_masks
from hypothesis import given, settings, strategies as st
import numpy as np
import unittest
import tempfile
import json
import os


class TestPng(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()

    def tearDown(self):
        self.tmp.cleanup()

    def test_roundtrip_8bit(self):
        rng = np.random.default_rng(1)
        img = rng.integers(0, 256, size=(3, 5, 7)) / 255.0
        filename = os.path.join(self.tmp.name, 'img.png')
        write_png(filename, img)
        back = read_png(filename)
        self.assertEqual(back.shape, (3, 5, 7))
        self.assertEqual(back.dtype, np.float32)
        np.testing.assert_allclose(back, img, atol=1e-6)

    def test_clipping(self):
        filename = os.path.join(self.tmp.name, 'clip.png')
        write_png(filename, np.full((3, 2, 2), 1.7))
        np.testing.assert_array_equal(read_png(filename), np.ones((3, 2, 2)))

    def test_bad_shape(self):
        self.assertRaises(ValueError, lambda: write_png(os.path.join(self.tmp.name, 'x.png'), np.ones((2, 2))))

    def test_missing(self):
        self.assertRaises(FileNotFoundError, lambda: read_png(os.path.join(self.tmp.name, 'none.png')))


class TestRle(unittest.TestCase):

    def test_leading_zero_run(self):
        mask = np.array([[1, 1, 0], [0, 1, 1]])
        self.assertEqual(encode_rle(mask), [0, 2, 2, 2])

    def test_zeros_first(self):
        mask = np.array([[0, 0, 1, 0]])
        self.assertEqual(encode_rle(mask), [2, 1, 1])

    @settings(max_examples=60, deadline=None)
    @given(st.integers(min_value=1, max_value=6), st.integers(min_value=1, max_value=6),
           st.integers(min_value=0, max_value=2 ** 31 - 1))
    def test_runs_sum_to_area(self, h, w, seed):
        mask = np.random.default_rng(seed).integers(0, 2, size=(h, w))
        runs = encode_rle(mask)
        self.assertEqual(sum(runs), h * w)
        np.testing.assert_array_equal(decode_rle(runs, h, w), mask)

    def test_invalid_runs(self):
        self.assertRaises(ValueError, lambda: decode_rle([1, 2], 2, 2))
        self.assertRaises(ValueError, lambda: decode_rle([5, -1], 2, 2))

    def test_mask_file(self):
        masks = [np.eye(3, dtype=np.uint8), 1 - np.eye(3, dtype=np.uint8)]
        with tempfile.TemporaryDirectory() as tmp:
            filename = os.path.join(tmp, 'masks.json')
            write_masks(filename, masks)
            with open(filename) as f:
                records = json.load(f)
            self.assertEqual(records[0], {'height': 3, 'width': 3, 'rle': [0, 1, 3, 1, 3, 1]})
            back = read_masks(filename)
        self.assertEqual(len(back), 2)
        for m, b in zip(masks, back):
            np.testing.assert_array_equal(m, b)


if __name__ == '__main__':
    unittest.main()

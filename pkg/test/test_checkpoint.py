from pysgsf.checkpoint import CheckpointFile, atomic_write, MAGIC
from pysgsf.errors import CheckpointError
from collections import OrderedDict
import numpy as np
import unittest
import tempfile
import os


class TestCheckpointFile(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        rng = np.random.default_rng(0)
        cls.tensors = OrderedDict([('enc.0.w', rng.standard_normal((4, 3, 3, 3)).astype(np.float32)),
                                   ('enc.0.b', rng.standard_normal(4).astype(np.float32)),
                                   ('scalar', np.array(2.5, dtype=np.float32))])
        cls.optimizer = OrderedDict([('adam.m.enc.0.b', np.zeros(4, dtype=np.float32)),
                                     ('adam.step', np.array([7.0], dtype=np.float32))])
        cls.config = {'model': {'base_width': 8}, 'train': {'seed': 1}}

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.filename = os.path.join(self.tmp.name, 'model.ckpt')

    def tearDown(self):
        self.tmp.cleanup()

    def test_roundtrip(self):
        CheckpointFile(self.filename).save(self.tensors, self.optimizer, self.config)
        tensors, optimizer, config = CheckpointFile(self.filename).load()
        self.assertEqual(list(tensors), list(self.tensors))
        for name in self.tensors:
            np.testing.assert_array_equal(tensors[name], self.tensors[name])
        np.testing.assert_array_equal(optimizer['adam.step'], [7.0])
        self.assertEqual(config, self.config)

    def test_byte_identical_resave(self):
        CheckpointFile(self.filename).save(self.tensors, self.optimizer, self.config)
        again = os.path.join(self.tmp.name, 'again.ckpt')
        CheckpointFile(again).save(*CheckpointFile(self.filename).load())
        with open(self.filename, 'rb') as f1, open(again, 'rb') as f2:
            self.assertEqual(f1.read(), f2.read())

    def test_no_config(self):
        payload = CheckpointFile('x').encode(self.tensors)
        tensors, optimizer, config = CheckpointFile('x').decode(payload)
        self.assertIsNone(config)
        self.assertEqual(len(optimizer), 0)

    def test_bad_magic(self):
        payload = CheckpointFile('x').encode(self.tensors)
        self.assertTrue(payload.startswith(MAGIC))
        self.assertRaises(CheckpointError, lambda: CheckpointFile('x').decode(b'NOPE' + payload[4:]))

    def test_bad_version(self):
        payload = CheckpointFile('x').encode(self.tensors)
        bad = payload[:4] + np.array(99, '<u4').tobytes() + payload[8:]
        self.assertRaises(CheckpointError, lambda: CheckpointFile('x').decode(bad))

    def test_truncated(self):
        payload = CheckpointFile('x').encode(self.tensors, self.optimizer, self.config)
        for cut in (3, 10, len(payload) // 2, len(payload) - 1):
            self.assertRaises(CheckpointError, lambda: CheckpointFile('x').decode(payload[:cut]))

    def test_missing_file(self):
        self.assertRaises(FileNotFoundError, lambda: CheckpointFile(self.filename).load())

    def test_atomic_write_leaves_no_temporary(self):
        atomic_write(self.filename, 'text')
        atomic_write(self.filename, b'bytes')
        self.assertEqual(os.listdir(self.tmp.name), ['model.ckpt'])
        with open(self.filename, 'rb') as f:
            self.assertEqual(f.read(), b'bytes')


if __name__ == '__main__':
    unittest.main()

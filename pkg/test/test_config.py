from pysgsf.config import RunConfig, ModelConfig, TrainConfig, DegradeParams
from pysgsf.errors import ConfigError
import unittest
import tempfile
import json
import io
import os


class TestRunConfig(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.filename = os.path.join(self.tmp.name, 'run.json')

    def tearDown(self):
        self.tmp.cleanup()

    def write(self, values):
        with open(self.filename, 'w') as f:
            json.dump(values, f)

    def test_defaults(self):
        cfg = RunConfig()
        self.assertEqual(cfg.model.base_width, 8)
        self.assertEqual(cfg.train.patch, 64)
        self.assertEqual(cfg.train.stage_switch, 0.6)
        self.assertEqual(cfg.degrade.gamma, 0.8)
        self.assertEqual(cfg.model.widths, [8, 16, 32, 64])
        self.assertEqual(cfg.model.latent_width, 128)

    def test_read_partial_file(self):
        self.write({'train': {'steps': 12, 'lr_hi': 1}, 'model': {'base_width': 4, 'caab_reduction': 2}})
        cfg = RunConfig().read_from(self.filename)
        self.assertEqual(cfg.train.steps, 12)
        self.assertEqual(cfg.train.lr_hi, 1.0)
        self.assertIsInstance(cfg.train.lr_hi, float)
        self.assertEqual(cfg.train.batch, 4)
        self.assertEqual(cfg.model.base_width, 4)

    def test_unknown_key_named(self):
        self.write({'train': {'stepz': 3}})
        with self.assertRaises(ConfigError) as ctx:
            RunConfig().read_from(self.filename)
        self.assertIn('train.stepz', str(ctx.exception))

    def test_unknown_section(self):
        self.assertRaises(ConfigError, lambda: RunConfig.from_dict({'optim': {}}))

    def test_wrong_type(self):
        self.assertRaises(ConfigError, lambda: RunConfig.from_dict({'train': {'steps': 'many'}}))
        self.assertRaises(ConfigError, lambda: RunConfig.from_dict({'train': {'augment': 1}}))

    def test_invalid_values(self):
        self.assertRaises(ConfigError, lambda: TrainConfig.from_dict({'patch': 40}))
        self.assertRaises(ConfigError, lambda: DegradeParams.from_dict({'psf_kind': 'bessel'}))
        self.assertRaises(ConfigError, lambda: ModelConfig.from_dict({'sparsity_ratio': 0.0}))
        self.assertRaises(ConfigError, lambda: ModelConfig.from_dict({'enc_heads': [1, 2, 4]}))
        self.assertRaises(ConfigError, lambda: ModelConfig.from_dict({'guidance_fusion': 'concat'}))
        self.assertEqual(ModelConfig.from_dict({'guidance_fusion': 'conv1x1'}).guidance_fusion, 'conv1x1')

    def test_bad_json(self):
        with open(self.filename, 'w') as f:
            f.write('{"train": ')
        self.assertRaises(ConfigError, lambda: RunConfig().read_from(self.filename))

    def test_missing_file(self):
        self.assertRaises(FileNotFoundError, lambda: RunConfig().read_from(self.filename))

    def test_write_read(self):
        cfg = RunConfig()
        cfg.train.steps = 5
        cfg.write_to(self.filename)
        self.assertEqual(RunConfig().read_from(self.filename), cfg)

    def test_describe_every_value(self):
        out = io.StringIO()
        RunConfig().describe(file=out)
        text = out.getvalue()
        self.assertIn('model.base_width: 8', text)
        self.assertIn('paths.checkpoint: sgsf.ckpt', text)
        self.assertIn('degrade.mask_source: scene', text)

    def test_presets(self):
        self.assertEqual(ModelConfig.tiny().base_width, 8)
        self.assertEqual(ModelConfig.full().base_width, 10)


if __name__ == '__main__':
    unittest.main()

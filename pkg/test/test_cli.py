from pysgsf.cli import main, build_parser
from pysgsf.config import RunConfig, ModelConfig, TrainConfig, PathsConfig, DegradeParams
from pysgsf.model import SGSFormer
from pysgsf.imageio import read_png, write_png
from pysgsf.segment import MaskSet
from pysgsf.training import LossLog
from contextlib import redirect_stdout, redirect_stderr
import numpy as np
import unittest
import tempfile
import json
import io
import os


def run(argv):
    """Exit code, stdout and stderr of one sgsf invocation"""
    out, err = io.StringIO(), io.StringIO()
    with redirect_stdout(out), redirect_stderr(err):
        code = main(argv)
    return code, out.getvalue(), err.getvalue()


class TestCli(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.cfg = RunConfig(
            model=ModelConfig(base_width=4, enc_caab_depths=[1, 1, 1, 1], enc_heads=[1, 1, 2, 2], latent_depth=1,
                              latent_heads=4, dec_module_counts=[1, 1, 1, 1], dec_heads=[2, 2, 1, 1],
                              caab_reduction=2),
            degrade=DegradeParams(psf_kind='gaussian', psf_size=5, psf_sigma=1.0),
            train=TrainConfig(steps=2, batch=1, patch=16, checkpoint_every=1),
            paths=PathsConfig(dataset=self.path('data'), checkpoint=self.path('sgsf.ckpt'),
                              reports=self.path('reports')))
        self.config = self.path('run.json')
        self.cfg.write_to(self.config)

    def tearDown(self):
        self.tmp.cleanup()

    def path(self, name):
        return os.path.join(self.tmp.name, name)

    def simulate(self, count=2):
        code, out, _ = run(['simulate-dataset', '--config', self.config, '--count', str(count)])
        self.assertEqual(code, 0)
        self.assertIn('Wrote {0} samples'.format(count), out)

    def test_eval_identity_checkpoint(self):
        self.simulate()
        SGSFormer(self.cfg.model).save(self.cfg.paths.checkpoint, config=self.cfg.to_dict())
        code, out, _ = run(['eval', '--config', self.config, '--figure', self.path('fig/panel.png')])
        self.assertEqual(code, 0)
        report = json.loads(out)
        self.assertEqual(report['psnr_mean'], report['baseline_psnr_mean'])
        self.assertEqual(report['n'], 2)
        self.assertTrue(os.path.exists(self.path('fig/panel.png')))
        with open(self.path('reports/eval.json')) as f:
            self.assertEqual(json.load(f), report)

    def test_train_and_resume(self):
        self.simulate()
        code, out, _ = run(['train', '--config', self.config, '--steps', '1'])
        self.assertEqual(code, 0)
        self.assertIn('Trained to step 1', out)
        code, out, _ = run(['train', '--config', self.config, '--resume', self.cfg.paths.checkpoint])
        self.assertEqual(code, 0)
        self.assertIn('Trained to step 2', out)
        log = LossLog().read_from(self.path('reports/loss.csv'))
        self.assertEqual([row['step'] for row in log.rows], [0, 1])

    def test_invalid_config_key(self):
        with open(self.config, 'w') as f:
            json.dump({'train': {'stepz': 3}}, f)
        code, _, err = run(['train', '--config', self.config])
        self.assertEqual(code, 2)
        self.assertIn('train.stepz', err)

    def test_missing_dataset(self):
        code, _, err = run(['train', '--config', self.config])
        self.assertEqual(code, 1)
        self.assertIn('sgsf train: error', err)

    def test_segment_and_infer(self):
        rng = np.random.default_rng(0)
        img = np.zeros((3, 16, 24))
        img[0, :, :12] = 1.0
        img[2, :, 12:] = 1.0
        img += rng.uniform(0, 0.02, img.shape)
        write_png(self.path('in.png'), np.clip(img, 0, 1))
        code, _, _ = run(['segment', '--in', self.path('in.png'), '--out', self.path('masks.json')])
        self.assertEqual(code, 0)
        self.assertEqual(len(MaskSet().read_from(self.path('masks.json'))), 2)

        SGSFormer(self.cfg.model).save(self.cfg.paths.checkpoint, config=self.cfg.to_dict())
        for extra in ([], ['--masks', self.path('masks.json')]):
            code, _, _ = run(['infer', '--ckpt', self.cfg.paths.checkpoint, '--in', self.path('in.png'),
                              '--out', self.path('out.png')] + extra)
            self.assertEqual(code, 0)
            np.testing.assert_array_equal(read_png(self.path('out.png')), read_png(self.path('in.png')))

    def test_infer_missing_checkpoint(self):
        code, _, _ = run(['infer', '--ckpt', self.path('none.ckpt'), '--in', self.path('in.png'),
                          '--out', self.path('out.png')])
        self.assertEqual(code, 1)

    def test_grad_check_single_suite(self):
        code, out, _ = run(['grad-check', '--module', 'tensor', '--seeds', '1'])
        self.assertEqual(code, 0)
        self.assertIn('checks passed', out)

    def test_usage(self):
        with redirect_stdout(io.StringIO()):
            with self.assertRaises(SystemExit) as ctx:
                main(['--version'])
        self.assertEqual(ctx.exception.code, 0)
        with redirect_stderr(io.StringIO()):
            with self.assertRaises(SystemExit) as ctx:
                main([])
        self.assertEqual(ctx.exception.code, 2)
        with redirect_stderr(io.StringIO()):
            self.assertRaises(SystemExit, lambda: main(['grad-check', '--module', 'everything']))

    def test_parser_defaults(self):
        args = build_parser().parse_args(['simulate-dataset'])
        self.assertEqual((args.count, args.source, args.workers), (16, 'procedural', None))
        args = build_parser().parse_args(['grad-check'])
        self.assertEqual((args.seeds, args.tolerance, args.module), (20, 1e-3, None))


if __name__ == '__main__':
    unittest.main()

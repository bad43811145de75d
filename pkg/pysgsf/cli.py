import os
import sys
import json
import argparse
import matplotlib.pyplot as plt

from . import __version__
from .errors import SGSFError, ConfigError
from .config import RunConfig
from .imageio import read_png, write_png
from .segment import MaskSet, naive_segment
from .simulate import SampleSet, psf_from_params, gen_dataset
from .model import SGSFormer, restore
from .training import train, evaluate, write_report
from .gradcheck import SUITES, run_suites
from .logutils import sgsflogger, logfile

__author__ = 'SGSFormerTools developers'
"""Command line entry point `sgsf`.

Example:
========

    sgsf simulate-dataset --config run.json --out data --count 64
    sgsf train --config run.json
    sgsf eval --config run.json --ckpt sgsf.ckpt --data data --figure panel.png

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

logger = sgsflogger(__name__, logfile)

LOSS_LOG = 'loss.csv'
EVAL_REPORT = 'eval.json'


def _load_config(filename):
    """Effective run config (defaults when no file is given), echoed to stderr"""
    cfg = RunConfig() if filename is None else RunConfig().read_from(filename)
    cfg.describe(file=sys.stderr)
    return cfg


def _parent_dir(filename):
    directory = os.path.dirname(filename)
    if directory:
        os.makedirs(directory, exist_ok=True)


def cmd_simulate_dataset(args):
    cfg = _load_config(args.config)
    out_dir = args.out if args.out is not None else cfg.paths.dataset
    workers = args.workers if args.workers is not None else cfg.train.workers
    psf = psf_from_params(cfg.degrade)
    manifest = gen_dataset(args.source, args.count, cfg.train.patch, psf, cfg.degrade, out_dir,
                           image_dir=args.image_dir, workers=workers)
    print("Wrote {0} samples to {1}".format(manifest['count'], out_dir))
    return 0


def cmd_segment(args):
    img = read_png(args.input)
    masks = naive_segment(img, threshold=args.threshold, min_size=args.min_size)
    masks.write_to(args.out)
    print("Wrote {0} masks to {1}".format(len(masks), args.out))
    return 0


def cmd_train(args):
    cfg = _load_config(args.config)
    os.makedirs(cfg.paths.reports, exist_ok=True)
    dataset = SampleSet(cfg.paths.dataset)
    log_file = os.path.join(cfg.paths.reports, LOSS_LOG)
    _, state, log = train(cfg, dataset, steps=args.steps, resume=args.resume, log_file=log_file)
    final = log.rows[-1]['total'] if len(log) else float('nan')
    print("Trained to step {0}, final loss {1:.6f}; checkpoint {2}".format(state.step, final,
                                                                           cfg.paths.checkpoint))
    return 0


def cmd_eval(args):
    cfg = _load_config(args.config)
    ckpt = args.ckpt if args.ckpt is not None else cfg.paths.checkpoint
    data = args.data if args.data is not None else cfg.paths.dataset
    model, _, _ = SGSFormer.load(ckpt)
    samples = SampleSet(data)
    report = evaluate(model, samples)
    os.makedirs(cfg.paths.reports, exist_ok=True)
    write_report(os.path.join(cfg.paths.reports, EVAL_REPORT), report)
    if args.figure is not None:
        sample = samples[0]
        sample.add_to_plot(restored=restore(model, sample.degraded, sample.masks))
        _parent_dir(args.figure)
        plt.savefig(args.figure, bbox_inches='tight')
        plt.close('all')
        logger.info("Saved figure to {0}".format(args.figure))
    print(json.dumps(report, indent=2))
    return 0


def cmd_infer(args):
    model, _, _ = SGSFormer.load(args.ckpt)
    img = read_png(args.input)
    if args.masks is not None:
        masks = MaskSet().read_from(args.masks)
    else:
        logger.info("No mask file given, segmenting {0}".format(args.input))
        masks = naive_segment(img)
    restored = restore(model, img, masks)
    write_png(args.out, restored)
    print("Wrote {0}".format(args.out))
    return 0


def cmd_grad_check(args):
    names = None if args.module is None else [args.module]
    reports = run_suites(names, seeds=args.seeds, tolerance=args.tolerance)
    print("{0:<32s} {1:>12s}  {2}".format('check', 'max rel err', 'status'))
    for report in reports:
        report.describe()
    failed = [report.name for report in reports if not report.passed]
    if failed:
        print("{0} of {1} checks failed".format(len(failed), len(reports)))
        return 1
    print("All {0} checks passed".format(len(reports)))
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog='sgsf', description='Segmentation-guided sparse Transformer '
                                                              'restoration of under-display-camera images')
    parser.add_argument('--version', action='version', version='%(prog)s {0}'.format(__version__))
    commands = parser.add_subparsers(dest='command', metavar='command')
    commands.required = True

    sim = commands.add_parser('simulate-dataset', help='synthesise paired (degraded, clean) samples')
    sim.add_argument('--config', help='JSON run config')
    sim.add_argument('--out', help='output directory (default paths.dataset)')
    sim.add_argument('--count', type=int, default=16, help='number of samples')
    sim.add_argument('--source', choices=('procedural', 'image-dir'), default='procedural')
    sim.add_argument('--image-dir', dest='image_dir', help='directory of clean PNG images')
    sim.add_argument('--workers', type=int, help='worker processes (default train.workers)')
    sim.set_defaults(func=cmd_simulate_dataset)

    seg = commands.add_parser('segment', help='naive instance segmentation of a PNG image')
    seg.add_argument('--in', dest='input', required=True, help='input PNG')
    seg.add_argument('--out', required=True, help='output masks.json')
    seg.add_argument('--threshold', type=float, default=0.25, help='colour distance threshold')
    seg.add_argument('--min-size', dest='min_size', type=int, default=16, help='smallest kept component')
    seg.set_defaults(func=cmd_segment)

    tr = commands.add_parser('train', help='train the network on paths.dataset')
    tr.add_argument('--config', help='JSON run config')
    tr.add_argument('--resume', help='checkpoint to continue from')
    tr.add_argument('--steps', type=int, help='total number of steps (default train.steps)')
    tr.set_defaults(func=cmd_train)

    ev = commands.add_parser('eval', help='PSNR/SSIM report of a checkpoint on a dataset')
    ev.add_argument('--config', help='JSON run config')
    ev.add_argument('--ckpt', help='checkpoint (default paths.checkpoint)')
    ev.add_argument('--data', help='dataset directory (default paths.dataset)')
    ev.add_argument('--figure', help='save a degraded / restored / clean panel of the first sample')
    ev.set_defaults(func=cmd_eval)

    inf = commands.add_parser('infer', help='restore one PNG image')
    inf.add_argument('--ckpt', required=True, help='checkpoint')
    inf.add_argument('--in', dest='input', required=True, help='degraded PNG')
    inf.add_argument('--masks', help='masks.json (naive segmentation when omitted)')
    inf.add_argument('--out', required=True, help='restored PNG')
    inf.set_defaults(func=cmd_infer)

    gc = commands.add_parser('grad-check', help='finite-difference verification of the gradients')
    gc.add_argument('--module', choices=list(SUITES), help='run a single suite')
    gc.add_argument('--seeds', type=int, default=20, help='number of random seeds')
    gc.add_argument('--tolerance', type=float, default=1e-3, help='maximum relative error')
    gc.set_defaults(func=cmd_grad_check)
    return parser


def main(argv=None):
    """Run one command and return its exit code"""
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as err:
        print("sgsf: config error: {0}".format(err), file=sys.stderr)
        return 2
    except (SGSFError, OSError, ValueError) as err:
        logger.error("{0} failed: {1}".format(args.command, err))
        print("sgsf {0}: error: {1}".format(args.command, err), file=sys.stderr)
        return 1


if __name__ == '__main__':
    sys.exit(main())

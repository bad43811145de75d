from collections import OrderedDict
import numpy as np

from . import tensor as T
from .tensor import Tensor, no_grad, backward, frozen_branches
from .nn import ModuleList, Downsample, Upsample
from .attention import MODES, FUSIONS, make_attention
from .blocks import MGFN, CAAB, TransformerUnit, EncoderBlock, DecoderBlock, LatentBlock, Refine
from .segment import SGFT, SegPyramid
from .training import LossWeights, PerceptualPyramid, loss_terms, loss_total
from .logutils import sgsflogger, logfile

__author__ = 'SGSFormerTools developers'
"""Finite-difference verification of the analytic gradients.

All evaluations run in float64. Branch decisions of piecewise kernels (top-k
sets, ReLU patterns, clamps) are recorded on the first forward pass and held
fixed while perturbing.
"""

logger = sgsflogger(__name__, logfile)


class GradCheckReport(object):
    """Maximum relative errors per checked tensor
    """

    def __init__(self, name, errors, tolerance):
        """
        :param name: label of the operation under test
        :type name: str
        :param errors: checked tensor label -> max relative error
        :type errors: OrderedDict
        :param tolerance: pass threshold
        :type tolerance: float
        """
        self.name = name
        self.errors = errors
        self.tolerance = tolerance
        self.max_error = max(errors.values()) if errors else 0.0
        self.passed = bool(self.max_error <= tolerance)

    def describe(self, file=None):
        status = 'ok' if self.passed else 'FAIL'
        print("{0:<32s} {1:>12.3e}  {2}".format(self.name, self.max_error, status), file=file)


def relative_error(analytic, numeric, floor=1e-4):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / scale)) if analytic.size else 0.0


def grad_check(fn, inputs, tolerance=1e-3, step=1e-4, module=None, max_checks=None, seed=0, name='op'):
    """Compare analytic gradients with central finite differences.

    Non-scalar outputs are reduced with a fixed random projection. Inputs with
    requires_grad and all trainable parameters of module are checked.
    :param fn: callable taking the (float64 copies of the) inputs, returning a Tensor
    :type fn: callable
    :param inputs: leaf tensors passed to fn
    :type inputs: list
    :param tolerance: maximum accepted relative error
    :type tolerance: float
    :param step: finite-difference step
    :type step: float
    :param module: module whose parameters are used inside fn
    :type module: pysgsf.nn.Module
    :param max_checks: number of sampled elements per tensor (None: all)
    :type max_checks: int
    :return: report
    :rtype: GradCheckReport
    """
    rng = np.random.default_rng(seed)
    inputs64 = [Tensor(np.array(t.data, dtype=np.float64), requires_grad=t.requires_grad) for t in inputs]

    targets = [('input{0}'.format(i), t) for i, t in enumerate(inputs64) if t.requires_grad]
    if module is not None:
        module.astype(np.float64)
        targets.extend(module.trainable_parameters())

    try:
        with frozen_branches() as branches:
            out = fn(*inputs64)
            projection = rng.standard_normal(out.shape) if out.size > 1 else None

            def _scalar(result):
                if projection is None:
                    return result.sum()
                return (result * Tensor(projection)).sum()

            if module is not None:
                module.zero_grad()
            backward(_scalar(out))

            errors = OrderedDict()
            for label, target in targets:
                analytic = target.grad if target.grad is not None else np.zeros_like(target.data)
                size = target.size
                if max_checks is not None and size > max_checks:
                    indices = np.sort(rng.choice(size, max_checks, replace=False))
                else:
                    indices = np.arange(size)
                numeric = np.empty(len(indices))
                flat = target.data.reshape(-1)
                with no_grad():
                    for n, index in enumerate(indices):
                        original = flat[index]
                        flat[index] = original + step
                        branches.rewind()
                        plus = _scalar(fn(*inputs64)).item()
                        flat[index] = original - step
                        branches.rewind()
                        minus = _scalar(fn(*inputs64)).item()
                        flat[index] = original
                        numeric[n] = (plus - minus) / (2.0 * step)
                errors[label] = relative_error(analytic.reshape(-1)[indices], numeric)
                logger.debug("{0}: {1} max relative error {2:.3e}".format(name, label, errors[label]))
    finally:
        if module is not None:
            module.astype(np.float32)
            module.zero_grad()

    report = GradCheckReport(name, errors, tolerance)
    if report.passed:
        logger.info("Gradient check {0} passed (max rel. error {1:.3e})".format(name, report.max_error))
    else:
        logger.warning("Gradient check {0} failed (max rel. error {1:.3e})".format(name, report.max_error))
    return report


# ----------------------------------------------------------------------------
# Suites run by `sgsf grad-check`
# ----------------------------------------------------------------------------

def _leaf(rng, shape, low=-1.0, high=1.0):
    return Tensor(rng.uniform(low, high, size=shape), requires_grad=True)


def check_tensor_ops(seed, tolerance=1e-3):
    """Every differentiable kernel on tiny random inputs"""
    rng = np.random.default_rng([seed, 0])
    x = _leaf(rng, (2, 3, 4, 4))
    y = _leaf(rng, (2, 3, 4, 4))
    w3 = _leaf(rng, (4, 3, 3, 3), -0.5, 0.5)
    wdw = _leaf(rng, (3, 1, 3, 3), -0.5, 0.5)
    bias = _leaf(rng, (4,))
    gamma = _leaf(rng, (3,), 0.5, 1.5)
    beta = _leaf(rng, (3,))
    rows = _leaf(rng, (2, 3, 5), -2.0, 2.0)
    a = _leaf(rng, (2, 3, 4))
    b = _leaf(rng, (2, 4, 5))
    cases = [
        ('add', T.add, [x, y]),
        ('sub', T.sub, [x, y]),
        ('mul', T.mul, [x, y]),
        ('div', lambda u, v: T.div(u, v * v + 1.0), [x, y]),
        ('neg', T.neg, [x]),
        ('exp', T.exp, [x]),
        ('log', lambda u: T.log(u * u + 0.5), [x]),
        ('abs', T.tabs, [x]),
        ('sqrt', lambda u: T.sqrt(u * u + 0.5), [x]),
        ('power', lambda u: T.power(u * u + 0.5, 1.5), [x]),
        ('clamp', lambda u: T.clamp(u, -0.5, 0.5), [x]),
        ('sigmoid', T.sigmoid, [x]),
        ('relu', T.relu, [x]),
        ('gelu', T.gelu, [x]),
        ('elu', T.elu, [x]),
        ('sum', lambda u: T.tsum(u, axis=(1, 3), keepdims=True), [x]),
        ('mean', lambda u: T.mean(u, axis=2), [x]),
        ('transpose', lambda u: T.transpose(u, (0, 2, 3, 1)), [x]),
        ('concat', lambda u, v: T.concat([u, v], axis=1), [x, y]),
        ('crop', lambda u: T.crop(u, 1, 0, 2, 3), [x]),
        ('split', lambda u: T.split(u, 3, axis=1)[1], [x]),
        ('pad2d[reflect]', lambda u: T.pad2d(u, (1, 2, 2, 1), 'reflect'), [x]),
        ('pad2d[circular]', lambda u: T.pad2d(u, (2, 0, 1, 1), 'circular'), [x]),
        ('conv2d[zeros]', lambda u, k, c: T.conv2d(u, k, c), [x, w3, bias]),
        ('conv2d[reflect]', lambda u, k: T.conv2d(u, k, padding_mode='reflect'), [x, w3]),
        ('conv2d[circular]', lambda u, k: T.conv2d(u, k, padding_mode='circular'), [x, w3]),
        ('conv2d[depthwise]', lambda u, k: T.conv2d(u, k, groups=3), [x, wdw]),
        ('matmul', T.matmul, [a, b]),
        ('softmax_rows', T.softmax_rows, [rows]),
        ('topk_mask', lambda r: T.softmax_rows(T.topk_mask(r, 3)), [rows]),
        ('layernorm', T.layernorm, [x, gamma, beta]),
        ('normalize', lambda u: T.normalize(u, axis=-1), [x]),
        ('pixel_unshuffle', lambda u: T.pixel_unshuffle(u, 2), [x]),
        ('pixel_shuffle', lambda u: T.pixel_shuffle(T.concat([u, T.narrow(u, 0, 1)]), 2), [x]),
        ('avg_pool2', T.avg_pool2, [x]),
    ]
    return [grad_check(fn, inputs, tolerance, seed=seed, name='tensor.' + name) for name, fn, inputs in cases]


def check_attention(seed, tolerance=1e-3):
    """The four attention variants, guidance included, and the guided modes under every fusion"""
    rng = np.random.default_rng([seed, 1])
    reports = []
    for mode in MODES:
        module = make_attention(mode, 8, heads=2, sparsity_ratio=0.67).reset_parameters(seed)
        x = _leaf(rng, (1, 8, 4, 4))
        s = _leaf(rng, (1, 8, 4, 4), 0.2, 1.2)
        reports.append(grad_check(lambda u, v: module(u, v), [x, s], tolerance, module=module, max_checks=8,
                                  seed=seed, name='attention.' + mode))
    for mode in ('sgsa', 'l_sgsa'):
        for fusion in FUSIONS[1:]:
            module = make_attention(mode, 8, heads=2, sparsity_ratio=0.67, fusion=fusion).reset_parameters(seed)
            x = _leaf(rng, (1, 8, 4, 4))
            s = _leaf(rng, (1, 8, 4, 4), 0.2, 1.2)
            reports.append(grad_check(lambda u, v: module(u, v), [x, s], tolerance, module=module, max_checks=8,
                                      seed=seed, name='attention.{0}[{1}]'.format(mode, fusion)))
    return reports


def check_blocks(seed, tolerance=1e-3):
    """Composite blocks; residual output layers keep their random initialisation"""
    rng = np.random.default_rng([seed, 2])
    x = _leaf(rng, (1, 4, 4, 4))
    s = _leaf(rng, (1, 4, 4, 4), 0.2, 1.2)
    cases = [
        ('mgfn', MGFN(4), lambda m: (lambda u, v: m(u)), [x, s]),
        ('caab', CAAB(4, reduction=2), lambda m: (lambda u, v: m(u)), [x, s]),
        ('transformer_unit', TransformerUnit(4, 2, 'sgsa'), lambda m: (lambda u, v: m(u, v)), [x, s]),
        ('encoder_block', EncoderBlock(4, 2, 1, 1, reduction=2), lambda m: (lambda u, v: m(u, v)), [x, s]),
        ('decoder_block', DecoderBlock(4, 2, 1), lambda m: (lambda u, v: m(u, v)), [x, s]),
        ('latent_block', LatentBlock(4, 1, 2), lambda m: (lambda u, v: m(u)), [x, s]),
        ('resample', ModuleList([Downsample(4), Upsample(8)]), lambda m: (lambda u, v: m[1](m[0](u))), [x, s]),
    ]
    reports = []
    for name, module, wrap, inputs in cases:
        module.reset_parameters(seed)
        reports.append(grad_check(wrap(module), inputs, tolerance, module=module, max_checks=6, seed=seed,
                                  name='blocks.' + name))
    head = Refine(2).reset_parameters(seed)
    outputs = [_leaf(rng, (1, 2 * 2 ** i, 8 >> i, 8 >> i)) for i in range(4)]
    reports.append(grad_check(lambda *d: head(list(d)), outputs, tolerance, module=head, max_checks=6,
                              seed=seed, name='blocks.refine'))
    return reports


def check_segment(seed, tolerance=1e-3):
    """SGFT and the guidance pyramid"""
    rng = np.random.default_rng([seed, 3])
    transform = SGFT(4).reset_parameters(seed)
    t = _leaf(rng, (1, 4, 4, 4))
    reports = [grad_check(lambda u: transform(u), [t], tolerance, module=transform, max_checks=6, seed=seed,
                          name='segment.sgft')]
    pyramid = SegPyramid([2, 4, 8, 16]).reset_parameters(seed)
    i_seg = _leaf(rng, (1, 3, 16, 16), 0.0, 1.0)

    def _pyramid(u):
        scales = pyramid(u)
        total = T.mean(scales[0] * scales[0])
        for scale in list(scales)[1:]:
            total = total + T.mean(scale * scale)
        return total
    reports.append(grad_check(_pyramid, [i_seg], tolerance, module=pyramid, max_checks=6, seed=seed,
                              name='segment.pyramid'))
    return reports


def check_loss(seed, tolerance=1e-3):
    """Each loss term w.r.t. the restored image, then the weighted total"""
    rng = np.random.default_rng([seed, 4])
    i_r = _leaf(rng, (1, 3, 16, 16), 0.0, 1.0)
    i_gt = Tensor(rng.uniform(0.0, 1.0, size=(1, 3, 16, 16)))
    pyramid = PerceptualPyramid(seed=seed)
    reports = []
    for term in ('l1', 'psnr_term', 'ssim_term', 'perc_term'):
        reports.append(grad_check(lambda u, term=term: loss_terms(u, i_gt, pyramid)[term], [i_r], tolerance,
                                  max_checks=48, seed=seed, name='loss.' + term))
    for weights in (LossWeights.early(), LossWeights.late()):
        reports.append(grad_check(lambda u, w=weights: loss_total(u, i_gt, w, pyramid)[0], [i_r], tolerance,
                                  max_checks=48, seed=seed, name='loss.total[{0}]'.format(weights.stage)))
    return reports


SUITES = OrderedDict([
    ('tensor', check_tensor_ops),
    ('attention', check_attention),
    ('blocks', check_blocks),
    ('segment', check_segment),
    ('loss', check_loss),
])


def run_suites(names=None, seeds=20, tolerance=1e-3):
    """Run the named suites (all when None) at seeds 0..seeds-1.
    :return: one report per check, holding the errors of every seed
    :rtype: list
    """
    names = list(SUITES) if names is None else list(names)
    unknown = [name for name in names if name not in SUITES]
    if unknown:
        logger.error("Unknown gradient suite {0}".format(unknown[0]))
        raise ValueError("Unknown gradient suite {0}, try one of {1}".format(unknown[0], list(SUITES)))
    merged = OrderedDict()
    for name in names:
        for seed in range(seeds):
            for report in SUITES[name](seed, tolerance):
                errors = merged.setdefault(report.name, OrderedDict())
                for label, error in report.errors.items():
                    errors['seed{0}.{1}'.format(seed, label)] = error
    return [GradCheckReport(name, errors, tolerance) for name, errors in merged.items()]

import os
import json
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
import numpy as np
import matplotlib.pyplot as plt

from . import tensor as T
from .tensor import Tensor, backward
from .errors import CheckpointError
from .config import ModelConfig
from .checkpoint import atomic_write
from .nn import Module, Conv2d
from .segment import MaskSet
from .simulate import DatasetSample
from .model import SGSFormer, restore, param_count
from .metrics import psnr, ssim, psnr_tensor, ssim_tensor
from .logutils import sgsflogger, logfile

__author__ = 'SGSFormerTools developers'
"""Optimisation of the restoration network: composite loss, Adam with a
cyclical learning rate, augmentation, the training loop and evaluation.
"""

logger = sgsflogger(__name__, logfile)

LOG_COLUMNS = ('step', 'lr', 'l1', 'psnr_term', 'ssim_term', 'perc_term', 'total')


class LossWeights(object):
    """Weights of the L1, PSNR, SSIM and perceptual terms
    """

    EARLY = (1.0, 0.2, 0.2, 1.0)
    LATE = (0.0, 0.2, 0.1, 1.0)

    def __init__(self, l1, psnr, ssim, perceptual, stage='custom'):
        self.l1 = l1
        self.psnr = psnr
        self.ssim = ssim
        self.perceptual = perceptual
        self.stage = stage

    @classmethod
    def early(cls):
        return cls(*cls.EARLY, stage='early')

    @classmethod
    def late(cls):
        return cls(*cls.LATE, stage='late')

    @classmethod
    def for_step(cls, step, total_steps, switch=0.6):
        """Early weights before switch * total_steps, late weights afterwards"""
        return cls.early() if step < switch * total_steps else cls.late()

    def __repr__(self):
        return "LossWeights({0}, {1}, {2}, {3}, stage={4})".format(self.l1, self.psnr, self.ssim, self.perceptual,
                                                                   self.stage)


class PerceptualPyramid(Module):
    """Frozen, seed-fixed random conv features at three scales (8, 16 and 32 channels)"""

    def __init__(self, seed=0):
        Module.__init__(self)
        self.stage1 = Conv2d(3, 8, 3)
        self.stage2 = Conv2d(8, 16, 3)
        self.stage3 = Conv2d(16, 32, 3)
        self.reset_parameters(seed)
        for param in self.parameters():
            param.requires_grad = False

    def forward(self, x):
        f1 = T.relu(self.stage1(x))
        f2 = T.relu(self.stage2(T.avg_pool2(f1)))
        f3 = T.relu(self.stage3(T.avg_pool2(f2)))
        return [f1, f2, f3]


def perceptual_loss(a, b, pyramid):
    features = [T.mean(T.tabs(fa - fb)) for fa, fb in zip(pyramid(a), pyramid(b))]
    return (features[0] + features[1] + features[2]) / 3.0


def loss_terms(i_r, i_gt, pyramid):
    """The four differentiable loss terms"""
    i_r, i_gt = T.tensor(i_r), T.tensor(i_gt)
    return OrderedDict([
        ('l1', T.mean(T.tabs(i_r - i_gt))),
        ('psnr_term', psnr_tensor(i_r, i_gt) * (-1.0 / 40.0)),
        ('ssim_term', 1.0 - ssim_tensor(i_r, i_gt)),
        ('perc_term', perceptual_loss(i_r, i_gt, pyramid)),
    ])


def loss_total(i_r, i_gt, w, pyramid):
    """lambda1 L1 + lambda2 L_psnr + lambda3 L_ssim + lambda4 L_perceptual.
    :param i_r: restored images [N, 3, H, W]
    :type i_r: Tensor
    :param i_gt: ground truth of the same shape
    :type i_gt: Tensor
    :param w: term weights
    :type w: LossWeights
    :param pyramid: perceptual feature extractor
    :type pyramid: PerceptualPyramid
    :return: (scalar loss, term values as floats)
    :rtype: tuple
    """
    terms = loss_terms(i_r, i_gt, pyramid)
    total = (terms['l1'] * w.l1 + terms['psnr_term'] * w.psnr
             + terms['ssim_term'] * w.ssim + terms['perc_term'] * w.perceptual)
    values = OrderedDict((name, term.item()) for name, term in terms.items())
    values['total'] = total.item()
    return total, values


def cyclic_lr(step, lo=1e-5, hi=1e-4, period=400):
    """Triangular wave: hi at step 0, lo at period / 2, hi again at period"""
    t = (step % period) / float(period)
    frac = abs(2.0 * t - 1.0)
    return hi * frac + lo * (1.0 - frac)


# float32 holds every integer below 2**24 exactly; the step is stored as (high, low) words
STEP_WORD = 2 ** 24


class OptimState(object):
    """Adam moments per parameter name and the step count
    """

    def __init__(self, params=(), beta1=0.9, beta2=0.999, eps=1e-8):
        """
        :param params: (name, Parameter) pairs
        :type params: list
        """
        self.m = OrderedDict((name, np.zeros_like(p.data)) for name, p in params)
        self.v = OrderedDict((name, np.zeros_like(p.data)) for name, p in params)
        self.step = 0
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps

    def to_tensors(self):
        tensors = OrderedDict()
        for name, m in self.m.items():
            tensors['adam.m.' + name] = m
        for name, v in self.v.items():
            tensors['adam.v.' + name] = v
        tensors['adam.step'] = np.array(divmod(self.step, STEP_WORD), dtype=np.float32)
        return tensors

    @classmethod
    def from_tensors(cls, tensors, params):
        state = cls(params)
        if 'adam.step' not in tensors:
            logger.error("Optimizer state without step count")
            raise CheckpointError("Optimizer state has no adam.step entry")
        words = [int(w) for w in np.asarray(tensors['adam.step']).ravel()]
        if len(words) == 1:
            state.step = words[0]
        elif len(words) == 2 and 0 <= words[1] < STEP_WORD:
            state.step = words[0] * STEP_WORD + words[1]
        else:
            logger.error("Malformed adam.step entry {0}".format(words))
            raise CheckpointError("adam.step must hold 1 or 2 words, got {0}".format(words))
        known = {'adam.step'}
        for moments, prefix in ((state.m, 'adam.m.'), (state.v, 'adam.v.')):
            for name in moments:
                key = prefix + name
                if key not in tensors:
                    logger.error("Optimizer state misses {0}".format(key))
                    raise CheckpointError("Optimizer state misses {0}".format(key))
                if tensors[key].shape != moments[name].shape:
                    logger.error("Optimizer moment {0} has shape {1}".format(key, tensors[key].shape))
                    raise CheckpointError("Optimizer moment {0}: stored shape {1}, expected {2}"
                                          .format(key, tensors[key].shape, moments[name].shape))
                moments[name] = np.array(tensors[key], dtype=np.float32)
                known.add(key)
        unknown = [key for key in tensors if key not in known]
        if unknown:
            logger.error("Unknown optimizer entries: {0}".format(unknown[:5]))
            raise CheckpointError("Unknown optimizer state name {0}".format(unknown[0]))
        return state


def adam_step(params, state, lr):
    """One Adam update with bias correction; parameters without gradient keep
    their value while their moments decay.
    :param params: (name, Parameter) pairs
    :type params: list
    :param state: moments and step count, updated in place
    :type state: OptimState
    :param lr: learning rate
    :type lr: float
    """
    state.step += 1
    bias1 = 1.0 - state.beta1 ** state.step
    bias2 = 1.0 - state.beta2 ** state.step
    for name, param in params:
        grad = param.grad if param.grad is not None else np.zeros_like(param.data)
        m = state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * grad
        v = state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * grad * grad
        update = lr * (m / bias1) / (np.sqrt(v / bias2) + state.eps)
        param.data = (param.data - update).astype(param.data.dtype)


def spatial_transform(img, flip, rotations):
    """Optional horizontal flip, then rotation by rotations x 90 degrees of the two trailing axes"""
    out = img[..., ::-1] if flip else img
    return np.ascontiguousarray(np.rot90(out, rotations, axes=(-2, -1)))


def augment(sample, seed):
    """Random flip + rotation, applied identically to images and masks
    :type sample: DatasetSample
    :rtype: DatasetSample
    """
    rng = np.random.default_rng(seed)
    flip = bool(rng.integers(2))
    rotations = int(rng.integers(4))
    return DatasetSample(spatial_transform(sample.degraded, flip, rotations),
                         spatial_transform(sample.clean, flip, rotations),
                         sample.masks.transform(lambda m: spatial_transform(m, flip, rotations)),
                         sample.sample_id)


def random_crop(sample, patch, rng):
    height, width = sample.shape[-2:]
    if height < patch or width < patch:
        logger.error("Sample {0} of size {1} is smaller than the patch {2}".format(sample.sample_id,
                                                                                   (height, width), patch))
        raise ValueError("Sample of size {0}x{1} is smaller than the {2} px patch".format(height, width, patch))
    top = int(rng.integers(0, height - patch + 1))
    left = int(rng.integers(0, width - patch + 1))
    if (height, width) == (patch, patch):
        return sample
    return DatasetSample(sample.degraded[:, top:top + patch, left:left + patch],
                         sample.clean[:, top:top + patch, left:left + patch],
                         sample.masks.transform(lambda m: m[top:top + patch, left:left + patch]),
                         sample.sample_id)


def load_batch(dataset, tc, step):
    """Batch of training step `step`; depends on (seed, step) only"""
    rng = np.random.default_rng([tc.seed, step])
    degraded, clean, masks = [], [], []
    for index in rng.integers(0, len(dataset), size=tc.batch):
        sample = random_crop(dataset[int(index)], tc.patch, rng)
        if tc.augment:
            sample = augment(sample, int(rng.integers(2 ** 31)))
        degraded.append(sample.degraded)
        clean.append(sample.clean)
        masks.append(sample.masks)
    return Tensor(np.stack(degraded)), Tensor(np.stack(clean)), masks


class LossLog(object):
    """Per-step loss values (CSV step,lr,l1,psnr_term,ssim_term,perc_term,total)
    """

    def __init__(self, rows=None):
        self.rows = list(rows) if rows else []

    def __len__(self):
        return len(self.rows)

    def append(self, step, lr, values):
        row = OrderedDict([('step', step), ('lr', lr)])
        for column in LOG_COLUMNS[2:]:
            row[column] = values[column]
        self.rows.append(row)

    def truncate(self, step):
        """Keep the rows of the steps before `step`"""
        self.rows = [row for row in self.rows if row['step'] < step]
        return self

    def column(self, name):
        return np.array([row[name] for row in self.rows])

    def write_to(self, filename):
        lines = [','.join(LOG_COLUMNS)]
        for row in self.rows:
            lines.append(','.join([str(row['step'])] + [repr(float(row[c])) for c in LOG_COLUMNS[1:]]))
        atomic_write(filename, '\n'.join(lines) + '\n')
        logger.info("Wrote {0} loss rows to {1}".format(len(self.rows), filename))

    def read_from(self, filename):
        if not os.path.exists(filename):
            logger.error("File {0} does not exist".format(filename))
            raise FileNotFoundError('File {0} does not exist'.format(filename))
        with open(filename, 'r') as f:
            header = f.readline().strip().split(',')
            if tuple(header) != LOG_COLUMNS:
                logger.error("Unexpected loss log header {0}".format(header))
                raise ValueError("{0} is not a loss log (header {1})".format(filename, header))
            self.rows = []
            for number, line in enumerate(f, start=2):
                if not line.strip():
                    continue
                fields = line.strip().split(',')
                try:
                    if len(fields) != len(LOG_COLUMNS):
                        raise ValueError("{0} fields, expected {1}".format(len(fields), len(LOG_COLUMNS)))
                    row = OrderedDict([('step', int(fields[0]))])
                    row.update((c, float(v)) for c, v in zip(LOG_COLUMNS[1:], fields[1:]))
                except ValueError as err:
                    logger.error("Malformed loss log line {0} in {1}: {2}".format(number, filename, err))
                    raise ValueError("{0}, line {1}: malformed loss row {2!r} ({3})"
                                     .format(filename, number, line.strip(), err))
                self.rows.append(row)
        return self

    def add_to_plot(self, column='total', **kwargs):
        """Plot one column against the step.

        Example:
        ========

            log = LossLog().read_from('reports/loss.csv')
            log.add_to_plot('total', color='k')
            plt.show()
        """
        if column not in LOG_COLUMNS[1:]:
            logger.error("Column {0} not in the loss log".format(column))
            raise ValueError("Unknown column {0}, try one of {1}".format(column, LOG_COLUMNS[1:]))
        logger.debug("Adding loss column {0} to plot".format(column))
        return plt.plot(self.column('step'), self.column(column), **kwargs)


def train(cfg, dataset, steps=None, resume=None, log_file=None):
    """Optimise the network on dataset.

    All randomness is keyed on (train.seed, step), so a run resumed from a
    checkpoint written after step s continues exactly like the uninterrupted run.
    :param cfg: run configuration
    :type cfg: pysgsf.config.RunConfig
    :param dataset: indexable collection of DatasetSample (e.g. SampleSet)
    :param steps: total number of steps (default train.steps)
    :type steps: int
    :param resume: checkpoint to continue from
    :type resume: str
    :param log_file: loss CSV (truncated to the resumed step)
    :type log_file: str
    :return: (model, optimizer state, loss log)
    :rtype: tuple
    """
    tc = cfg.train
    total = tc.steps if steps is None else steps
    if not len(dataset):
        logger.error("Empty training set")
        raise ValueError("The training set is empty")

    if resume is not None:
        model, optimizer, _ = SGSFormer.load(resume)
        state = OptimState.from_tensors(optimizer, model.trainable_parameters())
        if model.cfg != cfg.model:
            logger.warning("Resuming with the model config stored in {0}".format(resume))
        logger.info("Resuming from {0} at step {1}".format(resume, state.step))
    else:
        model = SGSFormer(cfg.model)
        state = OptimState(model.trainable_parameters())

    log = LossLog()
    if resume is not None and log_file is not None and os.path.exists(log_file):
        log.read_from(log_file).truncate(state.step)
    pyramid = PerceptualPyramid(seed=tc.seed)
    params = model.trainable_parameters()
    start = state.step
    model.train()

    with ThreadPoolExecutor(max_workers=tc.workers) as pool:
        pending = OrderedDict((s, pool.submit(load_batch, dataset, tc, s))
                              for s in range(start, min(start + tc.workers, total)))
        for step in range(start, total):
            degraded, clean, masks = pending.pop(step).result()
            ahead = step + tc.workers
            if ahead < total:
                pending[ahead] = pool.submit(load_batch, dataset, tc, ahead)

            model.zero_grad()
            restored = model(degraded, masks)
            weights = LossWeights.for_step(step, total, tc.stage_switch)
            loss, values = loss_total(restored, clean, weights, pyramid)
            backward(loss)
            lr = cyclic_lr(step, tc.lr_lo, tc.lr_hi, tc.lr_period)
            adam_step(params, state, lr)
            log.append(step, lr, values)
            logger.info("step {0}/{1} lr {2:.3e} loss {3:.6f} ({4})".format(step + 1, total, lr, values['total'],
                                                                          weights.stage))

            if (step + 1) % tc.checkpoint_every == 0 or step + 1 == total:
                model.save(cfg.paths.checkpoint, state.to_tensors(), cfg.to_dict())
                if log_file is not None:
                    log.write_to(log_file)
    model.eval()
    return model, state, log


def evaluate(model, samples):
    """PSNR/SSIM of the restored images and of the raw degraded inputs.
    :param samples: iterable of DatasetSample
    :return: report
    :rtype: OrderedDict
    """
    restored_psnr, restored_ssim, baseline_psnr, baseline_ssim = [], [], [], []
    for sample in samples:
        restored = restore(model, sample.degraded, sample.masks)
        restored_psnr.append(psnr(restored, sample.clean))
        restored_ssim.append(ssim(restored, sample.clean))
        baseline_psnr.append(psnr(sample.degraded, sample.clean))
        baseline_ssim.append(ssim(sample.degraded, sample.clean))
    if not restored_psnr:
        logger.error("evaluate called without samples")
        raise ValueError("No sample to evaluate")
    full = ModelConfig.full()
    report = OrderedDict([
        ('psnr_mean', float(np.mean(restored_psnr))),
        ('ssim_mean', float(np.mean(restored_ssim))),
        ('baseline_psnr_mean', float(np.mean(baseline_psnr))),
        ('baseline_ssim_mean', float(np.mean(baseline_ssim))),
        ('n', len(restored_psnr)),
        ('param_count', model.param_count()),
        ('base_width', model.cfg.base_width),
        ('full_param_count', param_count(full)),
        ('full_base_width', full.base_width),
    ])
    logger.info("Evaluated {0} samples: PSNR {1:.3f} dB (baseline {2:.3f} dB)".format(
        report['n'], report['psnr_mean'], report['baseline_psnr_mean']))
    return report


def write_report(filename, report):
    atomic_write(filename, json.dumps(report, indent=2))
    logger.info("Wrote report to {0}".format(filename))

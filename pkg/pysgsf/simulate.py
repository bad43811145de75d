import os
import glob
import json
from collections import OrderedDict
from concurrent.futures import ProcessPoolExecutor
import numpy as np
import matplotlib.pyplot as plt
from scipy import special

from . import tensor as T
from .tensor import Tensor
from .errors import SGSFError
from .config import DegradeParams, PSF_KINDS
from .checkpoint import CheckpointFile, atomic_write
from .imageio import read_png
from .segment import MaskSet, naive_segment
from .logutils import sgsflogger, logfile

__author__ = 'SGSFormerTools developers'
"""Synthetic under-display-camera data.

Two forward models are available: Y = clip((gamma X) * k + n) and the HDR
variant Y = tonemap(clip(X * k + n, 0, clip_max)); the blur is a circular
convolution with a per-channel PSF and n is zero-mean Gaussian noise whose
variance grows with the blurred signal.
"""

logger = sgsflogger(__name__, logfile)

# wavelengths (nm) of the R, G, B channels, relative to green
WAVELENGTHS = (610.0, 530.0, 470.0)
AIRY_FIRST_ZERO = 3.8317059702075125

MANIFEST = 'manifest.json'
SAMPLE_TENSORS = 'tensors.bin'
SAMPLE_MASKS = 'masks.json'


class Psf(object):
    """Per-channel blur kernel, non-negative and normalised to unit sum
    """

    def __init__(self, kernel, kind='custom'):
        """
        :param kernel: shape [k, k] (shared) or [3, k, k], k odd
        :type kernel: numpy.ndarray
        :param kind: label of the generator
        :type kind: str
        """
        kernel = np.asarray(kernel, dtype=np.float64)
        if kernel.ndim == 2:
            kernel = np.repeat(kernel[None], 3, axis=0)
        if kernel.ndim != 3 or kernel.shape[0] != 3 or kernel.shape[1] != kernel.shape[2]:
            logger.error("PSF kernel of shape {0}".format(kernel.shape))
            raise ValueError("PSF kernel must have shape [k, k] or [3, k, k], got {0}".format(kernel.shape))
        if kernel.shape[1] % 2 == 0:
            logger.error("PSF of even size {0}".format(kernel.shape[1]))
            raise ValueError("PSF size must be odd, got {0}".format(kernel.shape[1]))
        if np.any(kernel < 0):
            logger.error("PSF with negative entries")
            raise ValueError("PSF entries must be non-negative")
        sums = kernel.sum(axis=(1, 2), keepdims=True)
        if np.any(sums <= 0):
            logger.error("PSF channel with zero energy")
            raise ValueError("Every PSF channel needs positive energy")
        self.kernel = kernel / sums
        self.kind = kind

    @property
    def size(self):
        return self.kernel.shape[-1]

    def describe(self):
        print("PSF kind: {0}".format(self.kind))
        print("PSF size: {0}".format(self.size))
        print("Centre values (R, G, B): {0}".format(self.kernel[:, self.size // 2, self.size // 2]))

    def add_to_plot(self, channel=1, **kwargs):
        """Show one channel of the kernel
        :param channel: 0, 1 or 2 (R, G, B)
        :type channel: int
        """
        logger.debug("Adding PSF channel {0} to plot".format(channel))
        return plt.imshow(self.kernel[channel], interpolation='nearest', **kwargs)


def _grid(size):
    half = size // 2
    return np.mgrid[-half:half + 1, -half:half + 1].astype(np.float64)


def _delta(size):
    kernel = np.zeros((size, size))
    kernel[size // 2, size // 2] = 1.0
    return kernel


def _gaussian(size, sigma, dy=0.0, dx=0.0):
    if sigma <= 0:
        return _delta(size)
    y, x = _grid(size)
    return np.exp(-((y - dy) ** 2 + (x - dx) ** 2) / (2.0 * sigma * sigma))


def _airy(size, radius):
    """Airy pattern (2 J1(v) / v)^2 with its first dark ring at radius pixels"""
    if radius <= 0:
        return _delta(size)
    y, x = _grid(size)
    v = AIRY_FIRST_ZERO * np.hypot(y, x) / radius
    safe = np.where(v > 0, v, 1.0)
    return np.where(v > 0, (2.0 * special.j1(safe) / safe) ** 2, 1.0)


def synth_psf(kind='gaussian', size=15, sigma=1.5):
    """Build a normalised PSF.

    gaussian: isotropic Gaussian of standard deviation sigma (sigma = 0 gives a delta).
    airy_like: one Airy pattern per colour channel, first dark ring at 2 sigma
    pixels scaled by the channel wavelength.
    two_lobe: central Gaussian plus two weaker side lobes at +/- 2 sigma.
    :param kind: 'gaussian', 'airy_like' or 'two_lobe'
    :type kind: str
    :param size: odd kernel size, >= 3
    :type size: int
    :param sigma: width in pixels
    :type sigma: float
    :rtype: Psf
    """
    if size < 3 or size % 2 == 0:
        logger.error("synth_psf: invalid size {0}".format(size))
        raise ValueError("PSF size must be odd and >= 3, got {0}".format(size))
    if kind == 'gaussian':
        kernel = _gaussian(size, sigma)
    elif kind == 'airy_like':
        kernel = np.stack([_airy(size, 2.0 * sigma * wl / WAVELENGTHS[1]) for wl in WAVELENGTHS])
    elif kind == 'two_lobe':
        offset = min(max(1.0, round(2.0 * sigma)), size // 2)
        lobe = max(0.5 * sigma, 0.5)
        kernel = (_gaussian(size, sigma)
                  + 0.3 * _gaussian(size, lobe, dx=offset)
                  + 0.3 * _gaussian(size, lobe, dx=-offset))
    else:
        logger.error("Unknown PSF kind {0}".format(kind))
        raise ValueError("Unknown PSF kind {0}, try one of {1}".format(kind, PSF_KINDS))
    logger.debug("Created {0} PSF of size {1}".format(kind, size))
    return Psf(kernel, kind)


def psf_from_params(p):
    return synth_psf(p.psf_kind, p.psf_size, p.psf_sigma)


def circular_blur(img, psf):
    """Circular convolution of [3, H, W] (float64) with the per-channel PSF"""
    weight = np.ascontiguousarray(psf.kernel[:, None, ::-1, ::-1])
    out = T.conv2d(Tensor(np.asarray(img, dtype=np.float64)[None]), Tensor(weight),
                   padding_mode='circular', groups=3)
    return out.data[0]


def _add_noise(blurred, p, rng):
    if p.noise_sigma_read == 0 and p.noise_sigma_shot == 0:
        return blurred
    if rng is None:
        rng = np.random.default_rng(p.seed)
    variance = p.noise_sigma_read ** 2 + p.noise_sigma_shot ** 2 * np.maximum(blurred, 0.0)
    return blurred + rng.standard_normal(blurred.shape) * np.sqrt(variance)


def _as_image(clean):
    clean = clean.data if isinstance(clean, Tensor) else clean
    clean = np.asarray(clean)
    if clean.ndim != 3 or clean.shape[0] != 3:
        logger.error("Expected an image of shape [3, H, W], got {0}".format(clean.shape))
        raise ValueError("Expected an image of shape [3, H, W], got {0}".format(clean.shape))
    return clean.astype(np.float64)


def degrade_simple(clean, psf, p, rng=None):
    """Y = clip((gamma X) * k + n, 0, 1)
    :param clean: image in [0, 1], shape [3, H, W]
    :type clean: numpy.ndarray or Tensor
    :param psf: blur kernel
    :type psf: Psf
    :param p: forward-model parameters
    :type p: DegradeParams
    :param rng: noise generator (default: seeded with p.seed)
    :type rng: numpy.random.Generator
    :rtype: Tensor
    """
    blurred = circular_blur(p.gamma * _as_image(clean), psf)
    noisy = _add_noise(blurred, p, rng)
    return Tensor(np.clip(noisy, 0.0, 1.0).astype(np.float32))


def tone_map(x, c):
    """Extended Reinhard curve x (1 + x / c^2) / (1 + x)"""
    return x * (1.0 + x / (c * c)) / (1.0 + x)


def degrade_hdr(clean_hdr, psf, p, rng=None):
    """Y = tonemap(clip(X * k + n, 0, clip_max)), clipped to [0, 1]
    :param clean_hdr: scene radiance >= 0, may exceed 1
    :type clean_hdr: numpy.ndarray or Tensor
    :rtype: Tensor
    """
    blurred = circular_blur(_as_image(clean_hdr), psf)
    noisy = _add_noise(blurred, p, rng)
    mapped = tone_map(np.clip(noisy, 0.0, p.clip_max), p.tone_c)
    return Tensor(np.clip(mapped, 0.0, 1.0).astype(np.float32))


def degrade(clean, psf, p, rng=None):
    if p.model == 'hdr':
        return degrade_hdr(clean, psf, p, rng)
    return degrade_simple(clean, psf, p, rng)


def sample_rngs(seed, index):
    """Independent (scene, noise) generators derived from (seed, index) only"""
    scene, noise = np.random.SeedSequence([seed, index]).spawn(2)
    return np.random.default_rng(scene), np.random.default_rng(noise)


# ----------------------------------------------------------------------------
# Procedural scenes
# ----------------------------------------------------------------------------

def _gradient(rng, size):
    y, x = np.mgrid[0:size, 0:size] / float(size - 1)
    angle = rng.uniform(0, 2 * np.pi)
    t = np.cos(angle) * x + np.sin(angle) * y
    t = (t - t.min()) / max(t.max() - t.min(), 1e-12)
    start, stop = rng.uniform(0.05, 0.95, size=(2, 3))
    return start[:, None, None] * (1 - t) + stop[:, None, None] * t


def _rectangle(rng, size):
    h, w = rng.integers(size // 8, size // 2, size=2, endpoint=True)
    top, left = rng.integers(0, size - h + 1), rng.integers(0, size - w + 1)
    region = np.zeros((size, size), dtype=bool)
    region[top:top + h, left:left + w] = True
    return region


def _ellipse(rng, size):
    cy, cx = rng.uniform(0, size, size=2)
    ry, rx = rng.uniform(size / 12.0, size / 4.0, size=2)
    y, x = np.mgrid[0:size, 0:size]
    return ((y - cy) / ry) ** 2 + ((x - cx) / rx) ** 2 <= 1.0


def _strokes(rng, size):
    """A cluster of short thin line segments resembling a word"""
    region = np.zeros((size, size), dtype=bool)
    cy, cx = rng.integers(size // 8, size - size // 8, size=2)
    thickness = int(rng.integers(1, 3))
    for _ in range(int(rng.integers(3, 7))):
        y0, x0 = cy + rng.integers(-4, 5), cx + rng.integers(-8, 9)
        length = rng.uniform(3, 8)
        angle = rng.uniform(0, np.pi)
        y1, x1 = y0 + length * np.sin(angle), x0 + length * np.cos(angle)
        n = int(2 * length) + 2
        ys = np.round(np.linspace(y0, y1, n)).astype(int)
        xs = np.round(np.linspace(x0, x1, n)).astype(int)
        for dy in range(thickness):
            for dx in range(thickness):
                region[np.clip(ys + dy, 0, size - 1), np.clip(xs + dx, 0, size - 1)] = True
    return region


def _emitter(rng, size):
    cy, cx = rng.uniform(0, size, size=2)
    radius = rng.uniform(1.0, 3.0)
    y, x = np.mgrid[0:size, 0:size]
    return (y - cy) ** 2 + (x - cx) ** 2 <= radius * radius


def procedural_scene(rng, size, hdr=False):
    """Seeded composition of a gradient background, shapes and text-like strokes.

    With hdr, bright emitters (values up to 3) are added on top.
    :return: (scene [3, size, size] float64, layout masks)
    :rtype: tuple
    """
    scene = _gradient(rng, size)
    layout = np.zeros((size, size), dtype=np.int64)
    label = 0
    elements = [_rectangle, _ellipse] * int(rng.integers(2, 4)) + [_strokes] * int(rng.integers(1, 3))
    for index in rng.permutation(len(elements)):
        region = elements[index](rng, size)
        label += 1
        colour = rng.uniform(0.0, 1.0, size=3)
        scene[:, region] = colour[:, None]
        layout[region] = label
    if hdr:
        for _ in range(int(rng.integers(1, 4))):
            region = _emitter(rng, size)
            label += 1
            scene[:, region] = rng.uniform(1.5, 3.0) * rng.uniform(0.8, 1.0, size=3)[:, None]
            layout[region] = label
    masks = [(layout == value).astype(np.uint8) for value in np.unique(layout)]
    return scene, masks


# ----------------------------------------------------------------------------
# Dataset samples
# ----------------------------------------------------------------------------

class DatasetSample(object):
    """Paired (degraded, clean) images with the instance masks of the scene
    """

    def __init__(self, degraded=None, clean=None, masks=None, sample_id=None):
        """
        :param degraded: image in [0, 1], shape [3, H, W]
        :type degraded: numpy.ndarray
        :param clean: ground truth, same shape
        :type clean: numpy.ndarray
        :param masks: instance masks of size H x W
        :type masks: MaskSet
        """
        if degraded is not None and clean is not None:
            degraded = np.asarray(degraded, dtype=np.float32)
            clean = np.asarray(clean, dtype=np.float32)
            if degraded.shape != clean.shape or degraded.ndim != 3 or degraded.shape[0] != 3:
                logger.error("Sample shapes {0} and {1} do not match".format(degraded.shape, clean.shape))
                raise ValueError("degraded {0} and clean {1} must share a [3, H, W] shape"
                                 .format(degraded.shape, clean.shape))
            if masks is None:
                masks = MaskSet()
            elif not isinstance(masks, MaskSet):
                masks = MaskSet(masks)
            masks.check_shape(*degraded.shape[-2:])
        self.degraded = degraded
        self.clean = clean
        self.masks = masks
        self.sample_id = sample_id

    @property
    def shape(self):
        return self.degraded.shape

    def write_to(self, directory):
        """Write tensors.bin and masks.json into directory"""
        os.makedirs(directory, exist_ok=True)
        tensors = OrderedDict([('degraded', self.degraded), ('clean', self.clean)])
        CheckpointFile(os.path.join(directory, SAMPLE_TENSORS)).save(tensors, config={'id': self.sample_id})
        self.masks.write_to(os.path.join(directory, SAMPLE_MASKS))

    def read_from(self, directory):
        tensors, _, config = CheckpointFile(os.path.join(directory, SAMPLE_TENSORS)).load()
        self.degraded = tensors['degraded']
        self.clean = tensors['clean']
        maskfile = os.path.join(directory, SAMPLE_MASKS)
        self.masks = MaskSet().read_from(maskfile) if os.path.exists(maskfile) else MaskSet()
        self.sample_id = (config or {}).get('id', os.path.basename(os.path.normpath(directory)))
        return self

    def add_to_plot(self, restored=None, axes=None, **kwargs):
        """Show degraded | (restored) | clean | masks panels side by side.
        :param restored: optional network output, shape [3, H, W]
        :type restored: numpy.ndarray
        :param axes: matplotlib axes, one per panel (created when None)
        :return: the axes
        """
        panels = [('degraded', self.degraded)]
        if restored is not None:
            panels.append(('restored', np.asarray(restored)))
        panels.append(('clean', self.clean))
        if axes is None:
            _, axes = plt.subplots(1, len(panels) + 1, figsize=(3 * (len(panels) + 1), 3))
        for ax, (title, img) in zip(axes, panels):
            ax.imshow(np.clip(np.transpose(img, (1, 2, 0)), 0, 1), **kwargs)
            ax.set_title(title)
            ax.axis('off')
        plt.sca(axes[len(panels)])
        self.masks.add_to_plot(cmap=plt.cm.tab20)
        axes[len(panels)].set_title('{0} masks'.format(len(self.masks)))
        axes[len(panels)].axis('off')
        return axes


def list_images(image_dir):
    if not os.path.isdir(image_dir):
        logger.error("Image directory {0} does not exist".format(image_dir))
        raise FileNotFoundError('Directory {0} does not exist'.format(image_dir))
    return sorted(glob.glob(os.path.join(image_dir, '*.png')))


def make_sample(index, source, patch, psf, p, images=()):
    """Build sample number index; its randomness depends on (p.seed, index) only"""
    scene_rng, noise_rng = sample_rngs(p.seed, index)
    if source == 'procedural':
        scene, layout = procedural_scene(scene_rng, patch, hdr=(p.model == 'hdr'))
        masks = MaskSet(layout, source='scene')
    else:
        filename = images[index % len(images)]
        img = read_png(filename)
        height, width = img.shape[-2:]
        top = int(scene_rng.integers(0, height - patch + 1))
        left = int(scene_rng.integers(0, width - patch + 1))
        scene = img[:, top:top + patch, left:left + patch].astype(np.float64)
        masks = None
    degraded = degrade(scene, psf, p, noise_rng).data
    if p.model == 'hdr':
        clean = np.clip(tone_map(np.clip(scene, 0.0, p.clip_max), p.tone_c), 0.0, 1.0)
    else:
        clean = np.clip(scene, 0.0, 1.0)
    if masks is None or p.mask_source == 'naive':
        masks = naive_segment(degraded)
    return DatasetSample(degraded, clean.astype(np.float32), masks, sample_id='{0:06d}'.format(index))


def _write_sample(args):
    index, source, patch, psf, p, images, out_dir = args
    sample = make_sample(index, source, patch, psf, p, images)
    sample.write_to(os.path.join(out_dir, sample.sample_id))
    return OrderedDict([('id', sample.sample_id), ('shape', list(sample.shape)), ('masks', len(sample.masks))])


def gen_dataset(source, count, patch, psf, p, out_dir, image_dir=None, workers=1):
    """Generate count samples into out_dir and write the manifest.

    Parallel and serial generation produce identical files.
    :param source: 'procedural' or 'image-dir'
    :type source: str
    :param count: number of samples
    :type count: int
    :param patch: side of the square samples, a multiple of 16
    :type patch: int
    :param psf: blur kernel
    :type psf: Psf
    :param p: forward-model parameters
    :type p: DegradeParams
    :param out_dir: output directory
    :type out_dir: str
    :param image_dir: directory of PNG files (source 'image-dir')
    :type image_dir: str
    :return: manifest
    :rtype: dict
    """
    if patch < 16 or patch % 16:
        logger.error("gen_dataset: patch {0} is not a multiple of 16".format(patch))
        raise ValueError("patch must be a positive multiple of 16, got {0}".format(patch))
    if source not in ('procedural', 'image-dir'):
        logger.error("Unknown dataset source {0}".format(source))
        raise ValueError("Unknown source {0}, try 'procedural' or 'image-dir'".format(source))
    images = []
    if source == 'image-dir':
        if image_dir is None:
            logger.error("image-dir source without an image directory")
            raise ValueError("source 'image-dir' needs image_dir")
        for filename in list_images(image_dir):
            try:
                img = read_png(filename)
            except (OSError, ValueError) as err:
                logger.warning("Skipping unreadable image {0}: {1}".format(filename, err))
                continue
            if min(img.shape[-2:]) < patch:
                logger.warning("Skipping {0}: smaller than the {1} px patch".format(filename, patch))
                continue
            images.append(filename)
        if not images:
            logger.error("No usable PNG image in {0}".format(image_dir))
            raise SGSFError("No readable PNG image of at least {0}x{0} px in {1}".format(patch, image_dir))

    os.makedirs(out_dir, exist_ok=True)
    jobs = [(index, source, patch, psf, p, images, out_dir) for index in range(count)]
    logger.info("Generating {0} {1} samples in {2} with {3} workers".format(count, source, out_dir, workers))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            entries = list(pool.map(_write_sample, jobs))
    else:
        entries = [_write_sample(job) for job in jobs]

    manifest = OrderedDict([
        ('version', 1),
        ('source', source),
        ('count', count),
        ('patch', patch),
        ('psf', OrderedDict([('kind', psf.kind), ('size', psf.size)])),
        ('degrade', p.to_dict()),
        ('samples', entries),
    ])
    atomic_write(os.path.join(out_dir, MANIFEST), json.dumps(manifest, indent=1))
    logger.info("Wrote manifest of {0} samples to {1}".format(count, out_dir))
    return manifest


class SampleSet(object):
    """Read access to a generated dataset directory
    """

    def __init__(self, directory):
        manifest = os.path.join(directory, MANIFEST)
        if not os.path.exists(manifest):
            logger.error("No {0} in {1}".format(MANIFEST, directory))
            raise FileNotFoundError('File {0} does not exist'.format(manifest))
        with open(manifest, 'r') as f:
            self.manifest = json.load(f)
        self.directory = directory
        self.ids = [entry['id'] for entry in self.manifest['samples']]
        logger.info("Opened dataset {0} with {1} samples".format(directory, len(self.ids)))

    def __len__(self):
        return len(self.ids)

    def __getitem__(self, index):
        return DatasetSample().read_from(os.path.join(self.directory, self.ids[index]))

    def __iter__(self):
        for index in range(len(self)):
            yield self[index]

    @property
    def degrade(self):
        return DegradeParams.from_dict(self.manifest['degrade'])

import math
import numpy as np
import matplotlib.pyplot as plt
from scipy import ndimage

from . import tensor as T
from .tensor import Tensor
from .nn import Module, ModuleList, Conv2d, Downsample
from .imageio import read_masks, write_masks
from .logutils import sgsflogger, logfile

__author__ = 'SGSFormerTools developers'
"""Segmentation guidance: instance masks, the coloured segmentation map and
the multi-scale modulation pyramid fed to the attention blocks.
"""

logger = sgsflogger(__name__, logfile)

MASK_SOURCES = ('file', 'naive', 'external', 'scene')


class MaskSet(object):
    """Binary instance masks of one image
    """

    def __init__(self, masks=None, source='external'):
        """
        :param masks: binary arrays of identical shape [H, W]
        :type masks: list
        :param source: 'file', 'naive', 'external' or 'scene'
        :type source: str
        """
        masks = [] if masks is None else [np.asarray(m) for m in masks]
        if source not in MASK_SOURCES:
            logger.error("Unknown mask source {0}".format(source))
            raise ValueError("Unknown mask source {0}, try one of {1}".format(source, MASK_SOURCES))
        shapes = {m.shape for m in masks}
        if len(shapes) > 1:
            logger.error("Masks of different shapes: {0}".format(sorted(shapes)))
            raise ValueError("All masks must share one H x W shape, got {0}".format(sorted(shapes)))
        for m in masks:
            if m.ndim != 2 or not np.all((m == 0) | (m == 1)):
                logger.error("Mask is not a binary 2-D array")
                raise ValueError("Masks must be binary 2-D arrays")
        self.masks = [m.astype(np.uint8) for m in masks]
        self.source = source

    def __len__(self):
        return len(self.masks)

    def __iter__(self):
        return iter(self.masks)

    @property
    def shape(self):
        return self.masks[0].shape if self.masks else None

    def check_shape(self, height, width):
        if self.masks and self.shape != (height, width):
            logger.error("Mask shape {0} does not match image {1}".format(self.shape, (height, width)))
            raise ValueError("Mask shape {0} does not match image size {1}".format(self.shape, (height, width)))

    def transform(self, fn):
        """New MaskSet with fn applied to every mask (flips, rotations, crops)"""
        return MaskSet([np.ascontiguousarray(fn(m)) for m in self.masks], self.source)

    def write_to(self, filename):
        write_masks(filename, self.masks)

    def read_from(self, filename):
        self.masks = read_masks(filename)
        self.source = 'file'
        return self

    def labels(self):
        """Integer label image (0 = uncovered, i + 1 = last mask i covering the pixel)"""
        if not self.masks:
            return None
        labels = np.zeros(self.shape, dtype=np.int64)
        for i, m in enumerate(self.masks):
            labels[m > 0] = i + 1
        return labels

    def add_to_plot(self, **kwargs):
        """Show the masks as a label image.
        :param kwargs: options for imshow
        """
        if not self.masks:
            logger.warning("No mask to plot")
            return None
        logger.debug("Adding {0} masks to plot".format(len(self.masks)))
        return plt.imshow(self.labels(), interpolation='nearest', **kwargs)


def _merge_small_components(labels, min_size):
    """Merge every component smaller than min_size into the neighbour sharing the
    longest boundary (ties: lowest label), smallest component first."""
    while True:
        sizes = np.bincount(labels.ravel())
        present = np.flatnonzero(sizes)
        if len(present) <= 1:
            return labels
        small = present[sizes[present] < min_size]
        if not len(small):
            return labels
        target = small[np.lexsort((small, sizes[small]))[0]]
        left = np.concatenate([labels[:, :-1].ravel(), labels[:-1, :].ravel()])
        right = np.concatenate([labels[:, 1:].ravel(), labels[1:, :].ravel()])
        neighbours = np.concatenate([right[(left == target) & (right != target)],
                                     left[(right == target) & (left != target)]])
        if not len(neighbours):
            return labels
        labels[labels == target] = np.argmax(np.bincount(neighbours))


def naive_segment(img, threshold=0.25, min_size=16):
    """Colour-quantised connected components, a stand-in for a learnt segmenter.

    Each channel is quantised to ceil(1/threshold) levels, equal colour codes are
    labelled with 4-connectivity and components smaller than min_size pixels are
    merged into their neighbours. The masks partition the image.
    :param img: image in [0, 1], shape [3, H, W]
    :type img: numpy.ndarray or Tensor
    :param threshold: quantisation step
    :type threshold: float
    :rtype: MaskSet
    """
    img = img.data if isinstance(img, Tensor) else np.asarray(img)
    if threshold <= 0:
        logger.error("naive_segment threshold must be positive, got {0}".format(threshold))
        raise ValueError("threshold must be positive, got {0}".format(threshold))
    levels = int(math.ceil(1.0 / threshold))
    quantised = np.minimum(np.floor(np.clip(img, 0.0, 1.0) * levels), levels - 1).astype(np.int64)
    code = (quantised[0] * levels + quantised[1]) * levels + quantised[2]

    labels = np.zeros(code.shape, dtype=np.int64)
    count = 0
    for value in np.unique(code):
        components, n = ndimage.label(code == value)
        inside = components > 0
        labels[inside] = components[inside] + count
        count += n
    labels = _merge_small_components(labels, min_size)
    masks = [(labels == label).astype(np.uint8) for label in np.unique(labels)]
    logger.debug("naive_segment: {0} components, {1} masks after merging".format(count, len(masks)))
    return MaskSet(masks, source='naive')


def compose_seg_map(img, masks, alpha=0.5):
    """Coloured segmentation map alpha * img + (1 - alpha) * sum Color(M_i).

    Color(M_i) paints the mask with the per-channel mean of img under it; pixels
    covered by several masks take the mean of their colours, uncovered pixels
    contribute 0.
    :param img: shape [3, H, W]
    :type img: numpy.ndarray or Tensor
    :param masks: instance masks
    :type masks: MaskSet
    :param alpha: blend weight in [0, 1]
    :type alpha: float
    :rtype: Tensor
    """
    img = img.data if isinstance(img, Tensor) else np.asarray(img, dtype=np.float32)
    if not 0.0 <= alpha <= 1.0:
        logger.error("alpha {0} outside [0, 1]".format(alpha))
        raise ValueError("alpha must lie in [0, 1], got {0}".format(alpha))
    if not isinstance(masks, MaskSet):
        masks = MaskSet(masks)
    masks.check_shape(*img.shape[-2:])
    if not len(masks):
        logger.warning("compose_seg_map called with an empty mask set")

    colour = np.zeros(img.shape, dtype=np.float64)
    cover = np.zeros(img.shape[-2:], dtype=np.float64)
    for m in masks:
        region = m > 0
        area = region.sum()
        if not area:
            continue
        mean = img[:, region].astype(np.float64).mean(axis=1)
        colour += mean[:, None, None] * region[None]
        cover += region
    colour = np.where(cover > 0, colour / np.maximum(cover, 1.0), 0.0)
    seg = alpha * img.astype(np.float64) + (1.0 - alpha) * colour
    return Tensor(np.clip(seg, 0.0, 1.0).astype(np.float32))


class SGFT(Module):
    """Gated 1x1-conv feature transform: sigmoid(gate(t)) * b(a(t)) + t"""

    output_projections = ('b',)

    def __init__(self, channels):
        Module.__init__(self)
        self.gate = Conv2d(channels, channels, 1)
        self.a = Conv2d(channels, channels, 1)
        self.b = Conv2d(channels, channels, 1)

    def forward(self, t):
        return T.sigmoid(self.gate(t)) * self.b(self.a(t)) + t


def sgft(t, module):
    return module(t)


class SegGuidance(object):
    """Modulation matrices S_1..S_4 (full resolution first)
    """

    def __init__(self, scales, alpha):
        self.scales = list(scales)
        self.alpha = alpha

    def __getitem__(self, index):
        return self.scales[index]

    def __len__(self):
        return len(self.scales)

    @classmethod
    def ones(cls, batch, widths, height, width, alpha=1.0, dtype=np.float32):
        """All-ones guidance: modulation by it leaves the attention unchanged"""
        scales = [Tensor(np.ones((batch, c, height >> i, width >> i), dtype=dtype)) for i, c in enumerate(widths)]
        return cls(scales, alpha)


class SegPyramid(Module):
    """SSFE (1x1 conv 3 -> C1), three down-sampling steps and one SGFT per scale"""

    def __init__(self, widths):
        Module.__init__(self)
        self.widths = list(widths)
        self.ssfe = Conv2d(3, self.widths[0], 1)
        self.down = ModuleList([Downsample(c) for c in self.widths[:-1]])
        self.sgft = ModuleList([SGFT(c) for c in self.widths])

    def forward(self, i_seg, alpha=None):
        return build_pyramid(i_seg, self, alpha)


def build_pyramid(i_seg, pyramid, alpha=None):
    """
    :param i_seg: segmentation maps, shape [N, 3, H, W], H and W multiples of 16
    :type i_seg: Tensor
    :param pyramid: the SSFE/SGFT parameters
    :type pyramid: SegPyramid
    :rtype: SegGuidance
    """
    i_seg = T.tensor(i_seg)
    height, width = i_seg.shape[-2:]
    if height % 16 or width % 16:
        logger.error("build_pyramid: spatial size {0} not a multiple of 16".format((height, width)))
        raise ValueError("build_pyramid: H and W must be multiples of 16, got {0}x{1}".format(height, width))
    t = pyramid.ssfe(i_seg)
    scales = [sgft(t, pyramid.sgft[0])]
    for down, transform in zip(pyramid.down, list(pyramid.sgft)[1:]):
        t = down(t)
        scales.append(sgft(t, transform))
    return SegGuidance(scales, alpha)

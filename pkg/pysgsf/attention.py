import math

from . import tensor as T
from .nn import Module, Parameter, Conv2d, DepthwiseConv2d
from .logutils import sgsflogger, logfile

__author__ = 'SGSFormerTools developers'
"""Channel-token self-attention variants.

Tokens are the channels of a head (each one an H*W vector), so the attention
matrix of a head is (C/heads) x (C/heads). Q and K are L2-normalised along
the spatial axis and the logits are scaled by a learnable per-head temperature.

- SGSA: K and V modulated by the guidance S, top-k masked logits.
- LightSGSA: only V modulated, top-k masked logits.
- DenseAttention: V modulated by S' = ELU(conv3x3(x)), no masking.
- PlainAttention: no modulation, no masking.

The guided modes fuse S into K and V by `multiply` (default), `add` or
`conv1x1` (a learned 1x1 conv over the concatenation [t, S]).
"""

logger = sgsflogger(__name__, logfile)

MODES = ('sgsa', 'l_sgsa', 'dense', 'plain')
FUSIONS = ('multiply', 'add', 'conv1x1')


def k_th(ratio, tokens):
    """Number of logits kept per row: max(1, ceil(ratio * tokens)), at most tokens"""
    if not 0.0 < ratio <= 1.0:
        logger.error("Sparsity ratio {0} outside (0, 1]".format(ratio))
        raise ValueError("Sparsity ratio must lie in (0, 1], got {0}".format(ratio))
    # the small offset keeps e.g. 0.67 * 100 from rounding up to 68
    return min(tokens, max(1, int(math.ceil(ratio * tokens - 1e-9))))


class ChannelAttention(Module):
    """Multi-head channel-token attention with optional guidance modulation
    and top-k sparsification.
    """

    output_projections = ('project_out',)
    mode = 'plain'

    def __init__(self, channels, heads=1, sparsity_ratio=0.67, fusion='multiply'):
        """
        :param channels: feature width C, divisible by heads
        :type channels: int
        :param heads: number of heads
        :type heads: int
        :param sparsity_ratio: fraction of logits kept per row (sparse modes only)
        :type sparsity_ratio: float
        :param fusion: how the guidance enters K and V, one of FUSIONS
        :type fusion: str
        """
        Module.__init__(self)
        if heads < 1 or channels % heads:
            logger.error("{0} channels not divisible by {1} heads".format(channels, heads))
            raise ValueError("Channel dimension {0} is not divisible by heads={1}".format(channels, heads))
        if fusion not in FUSIONS:
            logger.error("Unknown guidance fusion {0}".format(fusion))
            raise ValueError("Unknown guidance fusion {0}, try one of {1}".format(fusion, FUSIONS))
        self.channels = channels
        self.heads = heads
        self.sparsity_ratio = sparsity_ratio
        self.fusion = fusion
        self.k_th = k_th(sparsity_ratio, channels // heads)
        self.qkv = Conv2d(channels, 3 * channels, 1)
        self.qkv_dwconv = DepthwiseConv2d(3 * channels, 3)
        self.temperature = Parameter((heads, 1, 1), init='ones')
        if self.mode == 'dense':
            self.dense_conv = Conv2d(channels, channels, 3)
        if fusion == 'conv1x1' and self.sparse:
            if self.mode == 'sgsa':
                self.fuse_k = Conv2d(2 * channels, channels, 1)
            self.fuse_v = Conv2d(2 * channels, channels, 1)
        self.project_out = Conv2d(channels, channels, 1)
        self.last_keep = None

    @property
    def sparse(self):
        return self.mode in ('sgsa', 'l_sgsa')

    def _fuse(self, t, s, layer):
        if self.fusion == 'add':
            return t + s
        if self.fusion == 'conv1x1':
            return getattr(self, layer)(T.concat([t, s], axis=1))
        return t * s

    def _heads(self, x):
        n, c, h, w = x.shape
        return T.reshape(x, (n, self.heads, c // self.heads, h * w))

    def forward(self, x, s=None):
        """
        :param x: features [N, C, H, W]
        :type x: Tensor
        :param s: guidance of the same shape (SGSA and LightSGSA only)
        :type s: Tensor
        :rtype: Tensor
        """
        x = T.tensor(x)
        if x.ndim != 4 or x.shape[1] != self.channels:
            logger.error("{0}: input {1} does not have {2} channels".format(self.mode, x.shape, self.channels))
            raise ValueError("{0}: channel dimension of {1} does not match C={2}"
                             .format(self.mode, x.shape, self.channels))
        q, k, v = T.split(self.qkv_dwconv(self.qkv(x)), 3, axis=1)
        if self.mode in ('sgsa', 'l_sgsa'):
            if s is None or tuple(s.shape) != tuple(x.shape):
                logger.error("{0}: guidance shape {1} does not match input {2}".format(
                    self.mode, None if s is None else s.shape, x.shape))
                raise ValueError("{0}: guidance shape must equal the input shape {1}".format(self.mode, x.shape))
            if self.mode == 'sgsa':
                k = self._fuse(k, s, 'fuse_k')
            v = self._fuse(v, s, 'fuse_v')
        elif self.mode == 'dense':
            v = v * T.elu(self.dense_conv(x))

        q = T.normalize(self._heads(q), axis=-1)
        k = T.normalize(self._heads(k), axis=-1)
        attn = T.matmul(q, T.transpose(k)) * self.temperature
        if self.sparse:
            self.last_keep = T.branch_decision(lambda: T.topk_keep(attn.data, self.k_th))
            attn = T.topk_mask(attn, self.k_th, self.last_keep)
        attn = T.softmax_rows(attn)
        out = T.matmul(attn, self._heads(v))
        return self.project_out(T.reshape(out, x.shape))


class SGSA(ChannelAttention):
    mode = 'sgsa'


class LightSGSA(ChannelAttention):
    mode = 'l_sgsa'


class DenseAttention(ChannelAttention):
    mode = 'dense'

    def forward(self, x, s=None):
        return ChannelAttention.forward(self, x)


class PlainAttention(ChannelAttention):
    mode = 'plain'

    def forward(self, x, s=None):
        return ChannelAttention.forward(self, x)


ATTENTION = {'sgsa': SGSA, 'l_sgsa': LightSGSA, 'dense': DenseAttention, 'plain': PlainAttention}


def make_attention(mode, channels, heads=1, sparsity_ratio=0.67, fusion='multiply'):
    if mode not in ATTENTION:
        logger.error("Unknown attention mode {0}".format(mode))
        raise ValueError("Unknown attention mode {0}, try one of {1}".format(mode, MODES))
    return ATTENTION[mode](channels, heads, sparsity_ratio, fusion)


def sgsa(x, s, module):
    return module(x, s)


def l_sgsa(x, s, module):
    return module(x, s)


def dense_attn(x, module):
    return module(x)

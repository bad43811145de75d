from . import tensor as T
from .nn import Module, ModuleList, Conv2d, DepthwiseConv2d, LayerNorm2d, Upsample
from .attention import make_attention
from .logutils import sgsflogger, logfile

__author__ = 'SGSFormerTools developers'
"""Composite blocks of the restoration network: the gated feed-forward
network, the channel-attention activation block, the encoder, decoder and
latent blocks and the multi-scale refine head.

Every residual block keeps its last layer in `output_projections`; zeroing
those layers turns the block into an exact identity map.
"""

logger = sgsflogger(__name__, logfile)


def _check_guidance(name, x, s):
    if s is not None and tuple(s.shape) != tuple(x.shape):
        logger.error("{0}: guidance shape {1} does not match features {2}".format(name, s.shape, x.shape))
        raise ValueError("{0}: guidance shape {1} does not match feature shape {2}".format(name, s.shape, x.shape))


class MGFN(Module):
    """Mixed gated depth-wise-conv feed-forward network.

    Ma = gelu(dw3(conv1(x))), X1 and X2 the same form with their own weights,
    Ga = conv1(relu(dw3([X1, X2])) ++ relu(dw5([X2, X1]))),
    out = conv1(Ma * Ga) (+ x when residual).
    """

    output_projections = ('project_out',)

    def __init__(self, channels, expansion=2):
        Module.__init__(self)
        hidden = expansion * channels
        self.main_in = Conv2d(channels, hidden, 1)
        self.main_dw = DepthwiseConv2d(hidden, 3)
        self.x1_in = Conv2d(channels, hidden, 1)
        self.x1_dw = DepthwiseConv2d(hidden, 3)
        self.x2_in = Conv2d(channels, hidden, 1)
        self.x2_dw = DepthwiseConv2d(hidden, 3)
        self.gate_dw3 = DepthwiseConv2d(2 * hidden, 3)
        self.gate_dw5 = DepthwiseConv2d(2 * hidden, 5)
        self.gate_mix = Conv2d(4 * hidden, hidden, 1)
        self.project_out = Conv2d(hidden, channels, 1)

    def forward(self, x, residual=True):
        main = T.gelu(self.main_dw(self.main_in(x)))
        x1 = T.gelu(self.x1_dw(self.x1_in(x)))
        x2 = T.gelu(self.x2_dw(self.x2_in(x)))
        gate = self.gate_mix(T.concat([T.relu(self.gate_dw3(T.concat([x1, x2]))),
                                       T.relu(self.gate_dw5(T.concat([x2, x1])))]))
        out = self.project_out(main * gate)
        return out + x if residual else out


def mgfn(x, module):
    return module(x)


class CAAB(Module):
    """Channel attention activation block (squeeze-excite on a 3x3 conv feature):
    out = x + conv3(x) * sigmoid(fc2(relu(fc1(mean_hw(conv3(x))))))
    """

    output_projections = ('conv',)

    def __init__(self, channels, reduction=4):
        Module.__init__(self)
        if channels < reduction:
            logger.error("CAAB: {0} channels below the reduction ratio {1}".format(channels, reduction))
            raise ValueError("CAAB needs C >= r, got C={0}, r={1}".format(channels, reduction))
        self.conv = Conv2d(channels, channels, 3)
        self.fc1 = Conv2d(channels, channels // reduction, 1)
        self.fc2 = Conv2d(channels // reduction, channels, 1)

    def forward(self, x):
        feature = self.conv(x)
        squeeze = T.mean(feature, axis=(2, 3), keepdims=True)
        scale = T.sigmoid(self.fc2(T.relu(self.fc1(squeeze))))
        return x + feature * scale


def caab(x, module):
    return module(x)


class TransformerUnit(Module):
    """Pre-norm unit: x + attn(LN(x), s), then x + ffn(LN(x))"""

    def __init__(self, channels, heads, attention='plain', sparsity_ratio=0.67, expansion=2, fusion='multiply'):
        Module.__init__(self)
        self.norm1 = LayerNorm2d(channels)
        self.attn = make_attention(attention, channels, heads, sparsity_ratio, fusion)
        self.norm2 = LayerNorm2d(channels)
        self.ffn = MGFN(channels, expansion)

    def forward(self, x, s=None):
        x = x + self.attn(self.norm1(x), s)
        return x + self.ffn(self.norm2(x), residual=False)


class ReconstructionModule(Module):
    """Decoder module: a sparse (guided) unit followed by a dense unit"""

    def __init__(self, channels, heads, sparsity_ratio=0.67, expansion=2, attention=('sgsa', 'dense'),
                 fusion='multiply'):
        Module.__init__(self)
        self.sgs = TransformerUnit(channels, heads, attention[0], sparsity_ratio, expansion, fusion)
        self.dense = TransformerUnit(channels, heads, attention[1], sparsity_ratio, expansion, fusion)

    def forward(self, x, s):
        return self.dense(self.sgs(x, s), s)


DECODER_ATTENTION = {'mixed': ('sgsa', 'dense'), 'sparse': ('sgsa', 'sgsa'), 'dense': ('dense', 'dense')}
ENCODER_ATTENTION = {'light': 'l_sgsa', 'full': 'sgsa'}


class EncoderBlock(Module):
    """depth_caab CAABs followed by depth_t guided transformer units"""

    def __init__(self, channels, heads, depth_caab, depth_t, sparsity_ratio=0.67, expansion=2,
                 reduction=4, attention='light', fusion='multiply'):
        Module.__init__(self)
        self.caab = ModuleList([CAAB(channels, reduction) for _ in range(depth_caab)])
        self.units = ModuleList([TransformerUnit(channels, heads, ENCODER_ATTENTION[attention],
                                                 sparsity_ratio, expansion, fusion) for _ in range(depth_t)])

    def forward(self, x, s):
        _check_guidance('encoder_block', x, s)
        for block in self.caab:
            x = block(x)
        for unit in self.units:
            x = unit(x, s)
        return x


def encoder_block(e_prev, s_i, module):
    return module(e_prev, s_i)


class DecoderBlock(Module):
    def __init__(self, channels, heads, n_modules, sparsity_ratio=0.67, expansion=2, attention='mixed',
                 fusion='multiply'):
        Module.__init__(self)
        self.modules = ModuleList([ReconstructionModule(channels, heads, sparsity_ratio, expansion,
                                                        DECODER_ATTENTION[attention], fusion)
                                   for _ in range(n_modules)])

    def forward(self, x, s):
        _check_guidance('decoder_block', x, s)
        for module in self.modules:
            x = module(x, s)
        return x


def decoder_block(d_in, s_i, module):
    return module(d_in, s_i)


class LatentBlock(Module):
    """n plain (unguided, unmasked) transformer units"""

    def __init__(self, channels, depth, heads, expansion=2):
        Module.__init__(self)
        self.units = ModuleList([TransformerUnit(channels, heads, 'plain', 1.0, expansion) for _ in range(depth)])

    def forward(self, x):
        for unit in self.units:
            x = unit(x)
        return x


def latent_block(x, module):
    return module(x)


class Refine(Module):
    """Fuse the decoder outputs: upsample every scale to full resolution (C1
    channels), concatenate, then conv3 4C1 -> C1, GELU, conv3 C1 -> 3.
    """

    output_projections = ('conv2',)

    def __init__(self, base_width, scales=4):
        Module.__init__(self)
        self.ups = ModuleList([ModuleList([Upsample(base_width * 2 ** (i - j)) for j in range(i)])
                               for i in range(scales)])
        self.conv1 = Conv2d(scales * base_width, base_width, 3)
        self.conv2 = Conv2d(base_width, 3, 3)

    def forward(self, outputs):
        """
        :param outputs: decoder outputs, full resolution first
        :type outputs: list
        :rtype: Tensor
        """
        if len(outputs) != len(self.ups):
            logger.error("refine expects {0} scales, got {1}".format(len(self.ups), len(outputs)))
            raise ValueError("refine expects {0} decoder outputs, got {1}".format(len(self.ups), len(outputs)))
        features = []
        for out, ups in zip(outputs, self.ups):
            for up in ups:
                out = up(out)
            features.append(out)
        return self.conv2(T.gelu(self.conv1(T.concat(features))))


def refine(decoder_outputs, module):
    return module(decoder_outputs)

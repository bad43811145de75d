import numpy as np

from . import tensor as T
from .tensor import Tensor, no_grad
from .errors import GraphError, CheckpointError
from .config import ModelConfig
from .checkpoint import CheckpointFile
from .nn import Module, ModuleList, Conv2d, Downsample, Upsample
from .segment import MaskSet, SegPyramid, SegGuidance, compose_seg_map, build_pyramid
from .blocks import EncoderBlock, DecoderBlock, LatentBlock, Refine
from .logutils import sgsflogger, logfile

__author__ = 'SGSFormerTools developers'
"""Asymmetric U-net restoring under-display-camera images.

Data flow: coloured segmentation map -> guidance pyramid S_1..S_4;
USFE 3x3 conv -> 4 x (encoder block, down-sampling) -> latent block ->
4 x (up-sampling, skip concatenation, 1x1 fusion, decoder block) ->
refine over the four decoder outputs; the result is added to the input.
"""

logger = sgsflogger(__name__, logfile)

MULTIPLE = 16


class SGSFormer(Module):
    """The restoration network
    """

    def __init__(self, cfg=None):
        """
        :param cfg: architecture (tiny preset when None)
        :type cfg: ModelConfig
        """
        Module.__init__(self)
        cfg = ModelConfig.tiny() if cfg is None else cfg
        cfg.validate()
        self.cfg = cfg
        widths = cfg.widths
        if cfg.use_seg_guidance:
            self.guidance = SegPyramid(widths)
        else:
            self.guidance = None
        self.usfe = Conv2d(3, widths[0], 3)
        self.enc = ModuleList([
            EncoderBlock(w, cfg.enc_heads[i], cfg.enc_caab_depths[i] if cfg.use_caab else 0,
                         cfg.enc_transformer_depths[i], cfg.sparsity_ratio, cfg.expansion,
                         cfg.caab_reduction, cfg.encoder_attention, cfg.guidance_fusion)
            for i, w in enumerate(widths)])
        self.down = ModuleList([Downsample(w) for w in widths])
        self.latent = LatentBlock(cfg.latent_width, cfg.latent_depth, cfg.latent_heads, cfg.expansion)
        deepest_first = widths[::-1]
        self.up = ModuleList([Upsample(2 * w) for w in deepest_first])
        self.fuse = ModuleList([Conv2d(2 * w, w, 1) for w in deepest_first])
        self.dec = ModuleList([
            DecoderBlock(w, cfg.dec_heads[j], cfg.dec_module_counts[j], cfg.sparsity_ratio, cfg.expansion,
                         cfg.decoder_attention, cfg.guidance_fusion)
            for j, w in enumerate(deepest_first)])
        self.refine = Refine(widths[0])
        self.reset_parameters(cfg.seed)
        if cfg.zero_init_outputs:
            self.zero_output_projections()
        logger.info("Created SGSFormer with base width {0} and {1} parameters".format(
            cfg.base_width, self.param_count()))

    def seg_guidance(self, i_udc, masks, padding):
        """Guidance pyramid of the (padded) batch; the maps are composed from the
        unpadded degraded images, then padded like them."""
        n, _, height, width = i_udc.shape
        if self.guidance is None:
            return SegGuidance.ones(n, self.cfg.widths, height + padding[0], width + padding[1],
                                    dtype=i_udc.dtype)
        maps = [compose_seg_map(i_udc.data[b], masks[b], self.cfg.alpha).data for b in range(n)]
        i_seg = Tensor(np.stack(maps).astype(i_udc.dtype))
        i_seg = T.pad2d(i_seg, (0, padding[0], 0, padding[1]), 'reflect')
        return build_pyramid(i_seg, self.guidance, self.cfg.alpha)

    def encode(self, x, guidance):
        """Run USFE, the encoder blocks and the down-sampling steps.
        :return: (latent input, encoder outputs keyed by stage index)
        :rtype: tuple
        """
        skips = {}
        e = self.usfe(x)
        for i, (block, down) in enumerate(zip(self.enc, self.down)):
            e = block(e, guidance[i])
            skips[i] = e
            e = down(e)
        return e, skips

    def decode(self, latent, skips, guidance):
        """Latent block, then up-sampling, skip fusion and decoder blocks (deepest first).
        :return: decoder outputs, full resolution first
        :rtype: list
        """
        d = self.latent(latent)
        outputs = []
        for j, (up, fuse, block) in enumerate(zip(self.up, self.fuse, self.dec)):
            stage = len(self.dec) - 1 - j
            if stage not in skips:
                logger.error("Missing encoder output of stage {0}".format(stage))
                raise GraphError("Skip connection of encoder stage {0} is missing".format(stage))
            d = fuse(T.concat([up(d), skips[stage]]))
            d = block(d, guidance[stage])
            outputs.append(d)
        return outputs[::-1]

    def forward(self, i_udc, masks=None):
        """
        :param i_udc: degraded images [N, 3, H, W]
        :type i_udc: Tensor
        :param masks: one MaskSet per image (None: no masks)
        :type masks: list
        :return: restored images [N, 3, H, W] (clamped to [0, 1] in eval mode)
        :rtype: Tensor
        """
        x = T.tensor(i_udc)
        if x.ndim != 4 or x.shape[1] != 3:
            logger.error("forward expects [N, 3, H, W], got {0}".format(x.shape))
            raise ValueError("forward expects images of shape [N, 3, H, W], got {0}".format(x.shape))
        n, _, height, width = x.shape
        if masks is None:
            masks = [MaskSet() for _ in range(n)]
        elif isinstance(masks, MaskSet):
            masks = [masks]
        if len(masks) != n:
            logger.error("{0} mask sets for a batch of {1}".format(len(masks), n))
            raise ValueError("Expected one mask set per image: {0} for a batch of {1}".format(len(masks), n))
        for m in masks:
            m.check_shape(height, width)

        padding = ((-height) % MULTIPLE, (-width) % MULTIPLE)
        if any(padding):
            logger.debug("Reflect-padding input {0} by {1}".format((height, width), padding))
        xp = T.pad2d(x, (0, padding[0], 0, padding[1]), 'reflect') if any(padding) else x
        guidance = self.seg_guidance(x, masks, padding)
        latent, skips = self.encode(xp, guidance)
        outputs = self.decode(latent, skips, guidance)
        out = xp + self.refine(outputs)
        if any(padding):
            out = T.crop(out, 0, 0, height, width)
        if not self.training:
            out = T.clamp(out, 0.0, 1.0)
        return out

    def save(self, filename, optimizer=None, config=None):
        """Write parameters, optimizer state and the config snapshot.
        :param optimizer: name -> array (see training.OptimState.to_tensors)
        :type optimizer: dict
        :param config: run config snapshot; its 'model' section is replaced by this model's
        :type config: dict
        """
        snapshot = dict(config or {})
        snapshot['model'] = self.cfg.to_dict()
        CheckpointFile(filename).save(self.state_dict(), optimizer, snapshot)

    @classmethod
    def load(cls, filename):
        """Rebuild a model from a checkpoint.
        :return: (model, optimizer tensors, config snapshot)
        :rtype: tuple
        """
        tensors, optimizer, config = CheckpointFile(filename).load()
        if not config or 'model' not in config:
            logger.error("Checkpoint {0} has no model config".format(filename))
            raise CheckpointError("Checkpoint {0} carries no model config snapshot".format(filename))
        model = cls(ModelConfig.from_dict(config['model']))
        try:
            model.load_state_dict(tensors)
        except (KeyError, ValueError) as err:
            logger.error("Checkpoint {0} does not match its config: {1}".format(filename, err))
            raise CheckpointError("Checkpoint {0} does not match its model config: {1}".format(filename, err))
        return model, optimizer, config


def restore(model, image, masks=None):
    """Evaluate one image: pad, forward, crop and clamp.
    :param image: degraded image [3, H, W]
    :type image: numpy.ndarray
    :param masks: its instance masks
    :type masks: MaskSet
    :return: restored image [3, H, W]
    :rtype: numpy.ndarray
    """
    model.eval()
    with no_grad():
        out = model(Tensor(np.asarray(image, dtype=np.float32)[None]), [masks if masks is not None else MaskSet()])
    return out.data[0]


def _conv(cin, cout, k=1, groups=1):
    return cout * (cin // groups) * k * k + cout


def _attention(c, heads, mode, fusion='multiply'):
    count = _conv(c, 3 * c) + _conv(3 * c, 3 * c, 3, 3 * c) + heads + _conv(c, c)
    if mode == 'dense':
        count += _conv(c, c, 3)
    if fusion == 'conv1x1':
        count += {'sgsa': 2, 'l_sgsa': 1}.get(mode, 0) * _conv(2 * c, c)
    return count


def _mgfn(c, e):
    h = e * c
    return (3 * (_conv(c, h) + _conv(h, h, 3, h)) + _conv(2 * h, 2 * h, 3, 2 * h) + _conv(2 * h, 2 * h, 5, 2 * h)
            + _conv(4 * h, h) + _conv(h, c))


def _unit(c, heads, mode, e, fusion='multiply'):
    return 4 * c + _attention(c, heads, mode, fusion) + _mgfn(c, e)


def _caab(c, r):
    return _conv(c, c, 3) + _conv(c, c // r) + _conv(c // r, c)


def param_count(cfg):
    """Closed-form number of scalar parameters of SGSFormer(cfg)"""
    widths = cfg.widths
    e = cfg.expansion
    total = _conv(3, widths[0], 3)
    if cfg.use_seg_guidance:
        total += _conv(3, widths[0]) + sum(_conv(4 * w, 2 * w) for w in widths[:-1])
        total += sum(3 * _conv(w, w) for w in widths)
    enc_mode = {'light': 'l_sgsa', 'full': 'sgsa'}[cfg.encoder_attention]
    for i, w in enumerate(widths):
        if cfg.use_caab:
            total += cfg.enc_caab_depths[i] * _caab(w, cfg.caab_reduction)
        total += cfg.enc_transformer_depths[i] * _unit(w, cfg.enc_heads[i], enc_mode, e, cfg.guidance_fusion)
        total += _conv(4 * w, 2 * w)
    total += cfg.latent_depth * _unit(cfg.latent_width, cfg.latent_heads, 'plain', e)
    modes = {'mixed': ('sgsa', 'dense'), 'sparse': ('sgsa', 'sgsa'), 'dense': ('dense', 'dense')}
    for j, w in enumerate(widths[::-1]):
        total += _conv(2 * w, 4 * w) + _conv(2 * w, w)
        total += cfg.dec_module_counts[j] * sum(_unit(w, cfg.dec_heads[j], mode, e, cfg.guidance_fusion)
                                                for mode in modes[cfg.decoder_attention])
    c1 = widths[0]
    total += sum(_conv(c1 * 2 ** (i - j), c1 * 2 ** (i - j + 1)) for i in range(4) for j in range(i))
    total += _conv(4 * c1, c1, 3) + _conv(c1, 3, 3)
    return total

import os
import sys
import json
import dataclasses
from dataclasses import dataclass, field

from .errors import ConfigError
from .checkpoint import atomic_write
from .logutils import sgsflogger, logfile

__author__ = 'SGSFormerTools developers'
"""Run configuration: the `model`, `degrade`, `train` and `paths` sections of the JSON config file.

Example:
========

    cfg = RunConfig().read_from('run.json')
    cfg.describe()
"""

logger = sgsflogger(__name__, logfile)

PSF_KINDS = ('gaussian', 'airy_like', 'two_lobe')
DEGRADE_MODELS = ('simple', 'hdr')
MASK_SOURCES = ('scene', 'naive')
DECODER_ATTENTION = ('mixed', 'sparse', 'dense')
ENCODER_ATTENTION = ('light', 'full')
GUIDANCE_FUSION = ('multiply', 'add', 'conv1x1')


def _fail(message):
    logger.error(message)
    raise ConfigError(message)


def _coerce(key, value, default):
    """Check value against the type of the field default"""
    if isinstance(default, bool):
        if not isinstance(value, bool):
            _fail("{0}: expected true/false, got {1!r}".format(key, value))
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            _fail("{0}: expected an integer, got {1!r}".format(key, value))
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            _fail("{0}: expected a number, got {1!r}".format(key, value))
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, list):
            _fail("{0}: expected a list, got {1!r}".format(key, value))
        return [_coerce(key, v, default[0]) for v in value] if default else list(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            _fail("{0}: expected a string, got {1!r}".format(key, value))
        return value
    return value


class _Section(object):
    """from_dict/to_dict shared by the config sections"""

    section = ''

    @classmethod
    def from_dict(cls, values):
        if not isinstance(values, dict):
            _fail("{0}: expected an object, got {1!r}".format(cls.section, values))
        instance = cls()
        names = {f.name for f in dataclasses.fields(cls)}
        for key, value in values.items():
            dotted = '{0}.{1}'.format(cls.section, key)
            if key not in names:
                _fail("Unknown config key {0}".format(dotted))
            setattr(instance, key, _coerce(dotted, value, getattr(instance, key)))
        instance.validate()
        return instance

    def to_dict(self):
        return dataclasses.asdict(self)

    def validate(self):
        pass

    def describe(self, file=None):
        for key, value in self.to_dict().items():
            print("{0}.{1}: {2}".format(self.section, key, value), file=file)


@dataclass
class ModelConfig(_Section):
    """Architecture hyper-parameters; stage lists run shallowest -> deepest
    except dec_module_counts and dec_heads, which run deepest -> shallowest.
    """
    section = 'model'

    base_width: int = 8
    enc_caab_depths: list = field(default_factory=lambda: [4, 6, 7, 8])
    enc_transformer_depths: list = field(default_factory=lambda: [1, 1, 1, 1])
    enc_heads: list = field(default_factory=lambda: [1, 2, 4, 8])
    latent_depth: int = 8
    latent_heads: int = 16
    dec_module_counts: list = field(default_factory=lambda: [4, 3, 3, 2])
    dec_heads: list = field(default_factory=lambda: [8, 4, 2, 1])
    sparsity_ratio: float = 0.67
    alpha: float = 0.5
    expansion: int = 2
    caab_reduction: int = 4
    use_seg_guidance: bool = True
    decoder_attention: str = 'mixed'
    encoder_attention: str = 'light'
    guidance_fusion: str = 'multiply'
    use_caab: bool = True
    zero_init_outputs: bool = True
    seed: int = 0

    @classmethod
    def tiny(cls):
        return cls(base_width=8)

    @classmethod
    def full(cls):
        return cls(base_width=10)

    @property
    def widths(self):
        """Stage widths C1..C4"""
        return [self.base_width * 2 ** i for i in range(4)]

    @property
    def latent_width(self):
        return self.base_width * 16

    def validate(self):
        for key in ('enc_caab_depths', 'enc_transformer_depths', 'enc_heads', 'dec_module_counts', 'dec_heads'):
            values = getattr(self, key)
            if len(values) != 4:
                _fail("model.{0}: expected 4 stages, got {1}".format(key, len(values)))
            if any(v < 0 for v in values):
                _fail("model.{0}: negative entry in {1}".format(key, values))
        if self.base_width < 1:
            _fail("model.base_width must be positive, got {0}".format(self.base_width))
        for width, heads in zip(self.widths, self.enc_heads):
            if heads < 1 or width % heads:
                _fail("model.enc_heads: {0} heads do not divide width {1}".format(heads, width))
        for width, heads in zip(self.widths[::-1], self.dec_heads):
            if heads < 1 or width % heads:
                _fail("model.dec_heads: {0} heads do not divide width {1}".format(heads, width))
        if self.latent_heads < 1 or self.latent_width % self.latent_heads:
            _fail("model.latent_heads: {0} heads do not divide width {1}".format(self.latent_heads, self.latent_width))
        if not 0.0 < self.sparsity_ratio <= 1.0:
            _fail("model.sparsity_ratio must lie in (0, 1], got {0}".format(self.sparsity_ratio))
        if not 0.0 <= self.alpha <= 1.0:
            _fail("model.alpha must lie in [0, 1], got {0}".format(self.alpha))
        if self.expansion < 1:
            _fail("model.expansion must be >= 1, got {0}".format(self.expansion))
        if self.use_caab and self.caab_reduction > self.base_width:
            _fail("model.caab_reduction {0} exceeds base_width {1}".format(self.caab_reduction, self.base_width))
        if self.decoder_attention not in DECODER_ATTENTION:
            _fail("model.decoder_attention must be one of {0}".format(DECODER_ATTENTION))
        if self.encoder_attention not in ENCODER_ATTENTION:
            _fail("model.encoder_attention must be one of {0}".format(ENCODER_ATTENTION))
        if self.guidance_fusion not in GUIDANCE_FUSION:
            _fail("model.guidance_fusion must be one of {0}".format(GUIDANCE_FUSION))


@dataclass
class DegradeParams(_Section):
    """Parameters of the UDC forward models and of the PSF"""
    section = 'degrade'

    gamma: float = 0.8
    noise_sigma_read: float = 0.01
    noise_sigma_shot: float = 0.02
    model: str = 'simple'
    tone_c: float = 4.0
    clip_max: float = 4.0
    seed: int = 0
    psf_kind: str = 'airy_like'
    psf_size: int = 15
    psf_sigma: float = 1.5
    mask_source: str = 'scene'

    def validate(self):
        if not 0.0 < self.gamma <= 1.0:
            _fail("degrade.gamma must lie in (0, 1], got {0}".format(self.gamma))
        if self.noise_sigma_read < 0 or self.noise_sigma_shot < 0:
            _fail("degrade.noise_sigma_read/noise_sigma_shot must be >= 0")
        if self.model not in DEGRADE_MODELS:
            _fail("degrade.model must be one of {0}, got {1}".format(DEGRADE_MODELS, self.model))
        if self.tone_c <= 0:
            _fail("degrade.tone_c must be positive, got {0}".format(self.tone_c))
        if self.clip_max <= 0:
            _fail("degrade.clip_max must be positive, got {0}".format(self.clip_max))
        if self.psf_kind not in PSF_KINDS:
            _fail("degrade.psf_kind must be one of {0}, got {1}".format(PSF_KINDS, self.psf_kind))
        if self.psf_size < 3 or self.psf_size % 2 == 0:
            _fail("degrade.psf_size must be odd and >= 3, got {0}".format(self.psf_size))
        if self.psf_sigma < 0:
            _fail("degrade.psf_sigma must be >= 0, got {0}".format(self.psf_sigma))
        if self.mask_source not in MASK_SOURCES:
            _fail("degrade.mask_source must be one of {0}, got {1}".format(MASK_SOURCES, self.mask_source))


@dataclass
class TrainConfig(_Section):
    section = 'train'

    steps: int = 300
    batch: int = 4
    patch: int = 64
    seed: int = 0
    stage_switch: float = 0.6
    lr_lo: float = 1e-5
    lr_hi: float = 1e-4
    lr_period: int = 400
    checkpoint_every: int = 100
    augment: bool = True
    workers: int = 1

    def validate(self):
        if self.steps < 0:
            _fail("train.steps must be >= 0, got {0}".format(self.steps))
        if self.batch < 1:
            _fail("train.batch must be >= 1, got {0}".format(self.batch))
        if self.patch < 16 or self.patch % 16:
            _fail("train.patch must be a positive multiple of 16, got {0}".format(self.patch))
        if not 0.0 <= self.stage_switch <= 1.0:
            _fail("train.stage_switch must lie in [0, 1], got {0}".format(self.stage_switch))
        if not 0.0 < self.lr_lo <= self.lr_hi:
            _fail("train.lr_lo/lr_hi must satisfy 0 < lr_lo <= lr_hi")
        if self.lr_period < 2:
            _fail("train.lr_period must be >= 2, got {0}".format(self.lr_period))
        if self.checkpoint_every < 1:
            _fail("train.checkpoint_every must be >= 1, got {0}".format(self.checkpoint_every))
        if self.workers < 1:
            _fail("train.workers must be >= 1, got {0}".format(self.workers))


@dataclass
class PathsConfig(_Section):
    section = 'paths'

    dataset: str = 'data'
    checkpoint: str = 'sgsf.ckpt'
    reports: str = 'reports'


SECTIONS = (('model', ModelConfig), ('degrade', DegradeParams), ('train', TrainConfig), ('paths', PathsConfig))


@dataclass
class RunConfig(object):
    model: ModelConfig = field(default_factory=ModelConfig)
    degrade: DegradeParams = field(default_factory=DegradeParams)
    train: TrainConfig = field(default_factory=TrainConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    @classmethod
    def from_dict(cls, values):
        if not isinstance(values, dict):
            _fail("The config must be a JSON object")
        known = dict(SECTIONS)
        for key in values:
            if key not in known:
                _fail("Unknown config key {0}".format(key))
        return cls(**{name: section.from_dict(values.get(name, {})) for name, section in SECTIONS})

    def to_dict(self):
        return {name: getattr(self, name).to_dict() for name, _ in SECTIONS}

    def read_from(self, filename):
        """Read a JSON config file, replacing every section
        :param filename: name of the config file
        :type filename: str
        """
        if not os.path.exists(filename):
            logger.error("File {0} does not exist".format(filename))
            raise FileNotFoundError('File {0} does not exist'.format(filename))
        with open(filename, 'r') as f:
            try:
                values = json.load(f)
            except json.JSONDecodeError as err:
                _fail("Invalid JSON in {0}: {1}".format(filename, err))
        parsed = RunConfig.from_dict(values)
        for name, _ in SECTIONS:
            setattr(self, name, getattr(parsed, name))
        logger.info("Read config from {0}".format(filename))
        return self

    def write_to(self, filename):
        atomic_write(filename, json.dumps(self.to_dict(), indent=2, sort_keys=True))
        logger.info("Wrote config to {0}".format(filename))

    def describe(self, file=None):
        """Print every effective value, one dotted key per line"""
        for name, _ in SECTIONS:
            getattr(self, name).describe(file=file if file is not None else sys.stdout)

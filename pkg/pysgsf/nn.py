import re
from collections import OrderedDict
import numpy as np

from . import tensor as T
from .tensor import Tensor
from .logutils import sgsflogger, logfile

__author__ = 'SGSFormerTools developers'
"""Parameter registry and the basic layers (convolution, layer norm, resampling)
every block of the network is assembled from.
"""

logger = sgsflogger(__name__, logfile)

NAME_PATTERN = re.compile(r'^[a-z0-9_.]+$')


class Parameter(Tensor):
    """Named trainable tensor.

    The hierarchical name (e.g. 'dec2.mod1.sgsa.qkv.w') is assigned when the
    owning module tree is walked by named_parameters.
    """

    def __init__(self, shape, init='uniform', bound=None, requires_grad=True):
        """
        :param shape: extents of the parameter
        :type shape: tuple
        :param init: 'uniform', 'zeros' or 'ones'
        :type init: str
        :param bound: half-width of the uniform initialisation interval
        :type bound: float
        """
        if init == 'ones':
            data = np.ones(shape, dtype=np.float32)
        else:
            data = np.zeros(shape, dtype=np.float32)
        Tensor.__init__(self, data, requires_grad=requires_grad)
        self.init = init
        self.bound = bound

    def reset(self, rng):
        if self.init == 'uniform':
            values = rng.uniform(-self.bound, self.bound, size=self.shape)
            self.data = values.astype(self.data.dtype)
        elif self.init == 'ones':
            self.data = np.ones(self.shape, dtype=self.data.dtype)
        else:
            self.data = np.zeros(self.shape, dtype=self.data.dtype)
        self.grad = None


class Module(object):
    """Base class of every layer and block.

    Parameters and sub-modules assigned as attributes are registered in
    assignment order; `output_projections` lists the children whose weights are
    zeroed by zero_output_projections (turning residual blocks into identities).
    """

    output_projections = ()

    def __init__(self):
        object.__setattr__(self, '_params', OrderedDict())
        object.__setattr__(self, '_children', OrderedDict())
        object.__setattr__(self, 'training', True)

    def __setattr__(self, name, value):
        if isinstance(value, (Parameter, Module)):
            if not NAME_PATTERN.match(name):
                logger.error("Invalid parameter/module name {0}".format(name))
                raise ValueError("Invalid name {0}: must match [a-z0-9_.]+".format(name))
            registry = self._params if isinstance(value, Parameter) else self._children
            registry[name] = value
        object.__setattr__(self, name, value)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError("forward not implemented for {0}".format(type(self).__name__))

    def named_modules(self, prefix=''):
        yield prefix, self
        for name, child in self._children.items():
            yield from child.named_modules(prefix + '.' + name if prefix else name)

    def named_parameters(self, prefix=''):
        for name, param in self._params.items():
            yield prefix + name, param
        for name, child in self._children.items():
            yield from child.named_parameters(prefix + name + '.')

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self):
        return [(name, p) for name, p in self.named_parameters() if p.requires_grad]

    def param_count(self):
        return int(sum(p.size for p in self.parameters()))

    def apply(self, fn):
        for _, module in self.named_modules():
            fn(module)
        return self

    def train(self):
        return self.apply(lambda m: object.__setattr__(m, 'training', True))

    def eval(self):
        return self.apply(lambda m: object.__setattr__(m, 'training', False))

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def reset_parameters(self, seed=0):
        """Initialise every parameter from (seed, registry index)"""
        for index, (_, param) in enumerate(self.named_parameters()):
            param.reset(np.random.default_rng([seed, index]))
        return self

    def zero_output_projections(self):
        for _, module in self.named_modules():
            for child_name in module.output_projections:
                for param in getattr(module, child_name).parameters():
                    param.data = np.zeros_like(param.data)
        return self

    def astype(self, dtype):
        """Convert the parameter storage in place (float64 is used by grad_check only)"""
        for param in self.parameters():
            param.data = param.data.astype(dtype)
            param.grad = None
        return self

    def state_dict(self):
        return OrderedDict((name, p.data) for name, p in self.named_parameters())

    def load_state_dict(self, state):
        """Copy named arrays into the registry.
        :raise KeyError: unknown or missing parameter name
        :raise ValueError: shape mismatch
        """
        params = OrderedDict(self.named_parameters())
        unknown = [name for name in state if name not in params]
        if unknown:
            logger.error("Unknown parameter names: {0}".format(unknown[:5]))
            raise KeyError("Unknown parameter name {0}".format(unknown[0]))
        missing = [name for name in params if name not in state]
        if missing:
            logger.error("Missing parameter names: {0}".format(missing[:5]))
            raise KeyError("Missing parameter {0}".format(missing[0]))
        for name, param in params.items():
            values = np.asarray(state[name])
            if values.shape != param.shape:
                logger.error("Shape mismatch for {0}: {1} vs {2}".format(name, values.shape, param.shape))
                raise ValueError("Shape mismatch for {0}: stored {1}, expected {2}"
                                 .format(name, values.shape, param.shape))
            param.data = values.astype(param.data.dtype).copy()
            param.grad = None
        return self


class ModuleList(Module):
    """Ordered container registering its items under '0', '1', ..."""

    def __init__(self, modules=()):
        Module.__init__(self)
        for module in modules:
            self.append(module)

    def append(self, module):
        setattr(self, str(len(self._children)), module)

    def __getitem__(self, index):
        return list(self._children.values())[index]

    def __iter__(self):
        return iter(self._children.values())

    def __len__(self):
        return len(self._children)


class Conv2d(Module):
    """'Same' 2-D convolution: f^conv (groups=1) or f^dwc (groups=channels)"""

    def __init__(self, in_channels, out_channels, kernel_size=1, groups=1, bias=True, padding_mode='zeros'):
        Module.__init__(self)
        fan_in = in_channels // groups * kernel_size * kernel_size
        bound = 1.0 / np.sqrt(fan_in)
        self.w = Parameter((out_channels, in_channels // groups, kernel_size, kernel_size), bound=bound)
        if bias:
            self.b = Parameter((out_channels,), bound=bound)
        else:
            self.b = None
        self.groups = groups
        self.padding_mode = padding_mode

    def forward(self, x):
        return T.conv2d(x, self.w, self.b, padding_mode=self.padding_mode, groups=self.groups)


class DepthwiseConv2d(Conv2d):
    def __init__(self, channels, kernel_size=3, bias=True):
        Conv2d.__init__(self, channels, channels, kernel_size, groups=channels, bias=bias)


class LayerNorm2d(Module):
    """Layer normalisation over the channel axis"""

    def __init__(self, channels, eps=1e-5):
        Module.__init__(self)
        self.gamma = Parameter((channels,), init='ones')
        self.beta = Parameter((channels,), init='zeros')
        self.eps = eps

    def forward(self, x):
        return T.layernorm(x, self.gamma, self.beta, self.eps)


class Downsample(Module):
    """[N, C, H, W] -> [N, 2C, H/2, W/2]: pixel-unshuffle then 1x1 conv 4C -> 2C"""

    def __init__(self, channels):
        Module.__init__(self)
        self.conv = Conv2d(4 * channels, 2 * channels, 1)

    def forward(self, x):
        if x.shape[-2] % 2 or x.shape[-1] % 2:
            logger.error("Down-sampling needs even spatial extents, got {0}".format(x.shape[-2:]))
            raise ValueError("resample(down): odd spatial dimension in {0}".format(x.shape[-2:]))
        return self.conv(T.pixel_unshuffle(x, 2))


class Upsample(Module):
    """[N, C, H, W] -> [N, C/2, 2H, 2W]: 1x1 conv C -> 2C then pixel-shuffle"""

    def __init__(self, channels):
        Module.__init__(self)
        self.conv = Conv2d(channels, 2 * channels, 1)

    def forward(self, x):
        return T.pixel_shuffle(self.conv(x), 2)


def resample(x, direction, layer):
    """Apply a Downsample or Upsample layer, checking it matches the direction"""
    expected = {'down': Downsample, 'up': Upsample}
    if direction not in expected or not isinstance(layer, expected[direction]):
        logger.error("resample direction {0} does not match layer {1}".format(direction, type(layer).__name__))
        raise ValueError("resample: direction must be 'down' or 'up' and match the layer")
    return layer(x)

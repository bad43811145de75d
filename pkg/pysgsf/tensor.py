import math
import threading
import numpy as np
from scipy import special
from einops import rearrange

from .errors import GraphError
from .logutils import sgsflogger, logfile

__author__ = 'SGSFormerTools developers'
"""Dense tensor with reverse-mode differentiation.

Every kernel computes its forward result with numpy and records a closure
returning the gradients of its inputs. Storage is float32; float64 data is
kept as such so that the finite-difference checks can run in double precision.
"""

logger = sgsflogger(__name__, logfile)

_gradmode = threading.local()

PADDING_MODES = {'zeros': 'constant', 'reflect': 'reflect', 'circular': 'wrap'}


def is_grad_enabled():
    return getattr(_gradmode, 'enabled', True)


class no_grad(object):
    """Context manager disabling graph recording in the current thread.

    Example:
    ========

        with no_grad():
            restored = model.forward(degraded, masks)
    """

    def __enter__(self):
        self.previous = is_grad_enabled()
        _gradmode.enabled = False
        return self

    def __exit__(self, *exc):
        _gradmode.enabled = self.previous
        return False


class frozen_branches(object):
    """Record the branch decisions of piecewise kernels (ReLU and clamp
    patterns, absolute-value signs, top-k sets) on the first pass and replay
    them on every pass after rewind(), so that the function stays smooth
    under finite-difference perturbations.

    Example:
    ========

        with frozen_branches() as branches:
            loss = fn(x)
            branches.rewind()
            perturbed = fn(x + h)
    """

    def __enter__(self):
        self.decisions = []
        self.replaying = False
        self.cursor = 0
        self.previous = getattr(_gradmode, 'branches', None)
        _gradmode.branches = self
        return self

    def rewind(self):
        self.replaying = True
        self.cursor = 0

    def __exit__(self, *exc):
        _gradmode.branches = self.previous
        return False


def branch_decision(compute):
    """Evaluate compute() unless a recorded decision is being replayed"""
    branches = getattr(_gradmode, 'branches', None)
    if branches is None:
        return compute()
    if not branches.replaying:
        decision = compute()
        branches.decisions.append(decision)
        return decision
    if branches.cursor >= len(branches.decisions):
        logger.error("Replayed pass takes more branch decisions than were recorded")
        raise GraphError("frozen_branches: the replayed computation differs from the recorded one")
    decision = branches.decisions[branches.cursor]
    branches.cursor += 1
    return decision


def _as_array(data):
    if isinstance(data, np.ndarray) and data.dtype == np.float64:
        return data
    return np.asarray(data, dtype=np.float32)


class Tensor(object):
    """Dense n-dimensional array of reals, optionally tracked by the gradient tape
    """

    def __init__(self, data, requires_grad=False, name=None):
        """
        :param data: values (converted to float32 unless already a float64 array)
        :type data: numpy.ndarray, list or float
        :param requires_grad: whether backward should populate the gradient
        :type requires_grad: bool
        :param name: optional label used in error messages
        :type name: str
        """
        self.data = _as_array(data)
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data.copy()

    def item(self):
        if self.data.size != 1:
            logger.error("item() called on a tensor of shape {0}".format(self.shape))
            raise ValueError("item() needs a single-element tensor")
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        backward(self, grad)

    def __repr__(self):
        return "Tensor(shape={0}, dtype={1}, requires_grad={2})".format(
            self.shape, self.dtype, self.requires_grad)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def tensor(value):
    """Wrap constants; tensors pass through unchanged"""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _make(data, parents, backward_fn):
    dtype = np.result_type(*[p.data.dtype for p in parents])
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data, dtype=dtype)
    out.grad = None
    out.name = None
    out.requires_grad = False
    out._parents = ()
    out._backward = None
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _topological(root):
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss, grad=None):
    """Populate the gradients of every leaf reachable from loss.

    Leaf gradients accumulate across calls until zero_grad is used.
    :param loss: scalar tensor (or any tensor when grad is given)
    :type loss: Tensor
    :param grad: seed gradient, same shape as loss
    :type grad: numpy.ndarray
    """
    if grad is None:
        if loss.size != 1:
            logger.error("backward called on a non-scalar tensor of shape {0}".format(loss.shape))
            raise GraphError("backward needs a scalar loss, got shape {0}".format(loss.shape))
        grad = np.ones_like(loss.data)
    if not loss.requires_grad:
        logger.warning("backward called on a tensor that does not require gradients")
        return

    order = _topological(loss)
    grads = {id(loss): np.asarray(grad, dtype=loss.data.dtype)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=parent.data.dtype)
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg
        # release the graph as we go
        node._parents = ()
        node._backward = None
        node.requires_grad = False


def unbroadcast(grad, shape):
    """Sum out the axes that broadcasting expanded so grad matches shape"""
    if grad.shape == tuple(shape):
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(opname, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        logger.error("{0}: shapes {1} and {2} cannot be broadcast".format(opname, a.shape, b.shape))
        raise ValueError("{0}: shapes {1} and {2} cannot be broadcast".format(opname, a.shape, b.shape))


# ----------------------------------------------------------------------------
# Element-wise kernels
# ----------------------------------------------------------------------------

def add(a, b):
    a, b = tensor(a), tensor(b)
    _check_broadcast('add', a, b)

    def _backward(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)
    return _make(a.data + b.data, (a, b), _backward)


def sub(a, b):
    a, b = tensor(a), tensor(b)
    _check_broadcast('sub', a, b)

    def _backward(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)
    return _make(a.data - b.data, (a, b), _backward)


def mul(a, b):
    a, b = tensor(a), tensor(b)
    _check_broadcast('mul', a, b)

    def _backward(g):
        return unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)
    return _make(a.data * b.data, (a, b), _backward)


def div(a, b):
    a, b = tensor(a), tensor(b)
    _check_broadcast('div', a, b)

    def _backward(g):
        return (unbroadcast(g / b.data, a.shape),
                unbroadcast(-g * a.data / (b.data * b.data), b.shape))
    return _make(a.data / b.data, (a, b), _backward)


def neg(x):
    x = tensor(x)
    return _make(-x.data, (x,), lambda g: (-g,))


def exp(x):
    x = tensor(x)
    y = np.exp(x.data)
    return _make(y, (x,), lambda g: (g * y,))


def log(x):
    x = tensor(x)
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


def tabs(x):
    x = tensor(x)
    sign = branch_decision(lambda: np.sign(x.data))
    return _make(x.data * sign, (x,), lambda g: (g * sign,))


def sqrt(x):
    x = tensor(x)
    y = np.sqrt(x.data)
    return _make(y, (x,), lambda g: (0.5 * g / y,))


def power(x, exponent):
    x = tensor(x)
    p = float(exponent)

    def _backward(g):
        return (g * p * np.power(x.data, p - 1.0),)
    return _make(np.power(x.data, p), (x,), _backward)


def clamp(x, lo=None, hi=None):
    """Clip to [lo, hi]; gradient passes only where the input is inside the range"""
    x = tensor(x)
    below = branch_decision(lambda: x.data < lo if lo is not None else np.zeros(x.shape, dtype=bool))
    above = branch_decision(lambda: x.data > hi if hi is not None else np.zeros(x.shape, dtype=bool))
    y = x.data.copy()
    if lo is not None:
        y = np.where(below, np.asarray(lo, dtype=x.dtype), y)
    if hi is not None:
        y = np.where(above, np.asarray(hi, dtype=x.dtype), y)
    inside = ~(below | above)
    return _make(y, (x,), lambda g: (g * inside,))


def sigmoid(x):
    x = tensor(x)
    y = special.expit(x.data)
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),))


def relu(x):
    x = tensor(x)
    positive = branch_decision(lambda: x.data > 0)
    return _make(np.where(positive, x.data, 0), (x,), lambda g: (g * positive,))


def gelu(x):
    """Exact (erf) GELU"""
    x = tensor(x)
    cdf = 0.5 * (1.0 + special.erf(x.data / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * x.data * x.data) / math.sqrt(2.0 * math.pi)
    return _make(x.data * cdf, (x,), lambda g: (g * (cdf + x.data * pdf),))


def elu(x):
    x = tensor(x)
    negative = np.expm1(np.minimum(x.data, 0))
    y = np.where(x.data > 0, x.data, negative)
    return _make(y, (x,), lambda g: (g * np.where(x.data > 0, 1.0, negative + 1.0),))


ELEMENTWISE = {
    'add': add,
    'mul': mul,
    'sigmoid': sigmoid,
    'relu': relu,
    'gelu': gelu,
    'elu': elu,
}


def elementwise(op, *args):
    """Dispatch one of the point-wise kernels by name"""
    try:
        fn = ELEMENTWISE[op]
    except KeyError:
        logger.error("Unknown element-wise operation {0}".format(op))
        raise ValueError("Unknown element-wise operation {0}, try one of {1}".format(op, sorted(ELEMENTWISE)))
    return fn(*args)


# ----------------------------------------------------------------------------
# Reductions and shape manipulation
# ----------------------------------------------------------------------------

def _normalize_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def tsum(x, axis=None, keepdims=False):
    x = tensor(x)
    axes = _normalize_axis(axis, x.ndim)
    y = x.data.sum(axis=axes, keepdims=keepdims)

    def _backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)
    return _make(y, (x,), _backward)


def mean(x, axis=None, keepdims=False):
    x = tensor(x)
    axes = _normalize_axis(axis, x.ndim)
    count = 1
    for a in axes:
        count *= x.shape[a]
    return div(tsum(x, axes, keepdims), float(count))


def reshape(x, shape):
    x = tensor(x)
    y = x.data.reshape(shape)
    return _make(y, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None):
    x = tensor(x)
    if axes is None:
        axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def concat(tensors, axis=1):
    tensors = [tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def _backward(g):
        return tuple(np.split(g, splits, axis=axis))
    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), _backward)


def crop(x, top, left, height, width):
    """Spatial crop of the two trailing axes"""
    x = tensor(x)
    y = x.data[..., top:top + height, left:left + width]

    def _backward(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        full[..., top:top + height, left:left + width] = g
        return (full,)
    return _make(y, (x,), _backward)


def narrow(x, start, length, axis=1):
    """Slice [start, start + length) of one axis (channel axis by default)"""
    x = tensor(x)
    axis = axis % x.ndim
    if start < 0 or length < 0 or start + length > x.shape[axis]:
        logger.error("narrow: [{0}, {1}) outside axis {2} of extent {3}".format(start, start + length, axis,
                                                                            x.shape[axis]))
        raise ValueError("narrow: range [{0}, {1}) outside dimension {2} of extent {3}"
                         .format(start, start + length, axis, x.shape[axis]))
    index = (slice(None),) * axis + (slice(start, start + length),)

    def _backward(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        full[index] = g
        return (full,)
    return _make(x.data[index].copy(), (x,), _backward)


def split(x, parts, axis=1):
    """Split an axis into equal parts"""
    x = tensor(x)
    extent = x.shape[axis]
    if extent % parts:
        logger.error("split: extent {0} not divisible into {1} parts".format(extent, parts))
        raise ValueError("split: dimension of extent {0} is not divisible by {1}".format(extent, parts))
    size = extent // parts
    return [narrow(x, i * size, size, axis) for i in range(parts)]


def _pad_array(arr, pads, mode):
    top, bottom, left, right = pads
    width = ((0, 0),) * (arr.ndim - 2) + ((top, bottom), (left, right))
    return np.pad(arr, width, mode=PADDING_MODES[mode])


def _fold_padding(gp, pads, mode, height, width):
    """Adjoint of _pad_array: accumulate the padded-border gradient back onto its sources"""
    top, bottom, left, right = pads
    if mode == 'zeros':
        return gp[..., top:top + height, left:left + width].copy()
    source = np.arange(height * width).reshape(height, width)
    source = np.pad(source, ((top, bottom), (left, right)), mode=PADDING_MODES[mode])
    lead = gp.shape[:-2]
    flat_gp = gp.reshape(-1, gp.shape[-2] * gp.shape[-1])
    folded = np.zeros((flat_gp.shape[0], height * width), dtype=gp.dtype)
    np.add.at(folded, (slice(None), source.ravel()), flat_gp)
    return folded.reshape(lead + (height, width))


def pad2d(x, pads, mode='zeros'):
    """Pad the two trailing axes.
    :param pads: (top, bottom, left, right)
    :type pads: tuple
    :param mode: 'zeros', 'reflect' or 'circular'
    :type mode: str
    """
    x = tensor(x)
    if mode not in PADDING_MODES:
        logger.error("Unknown padding mode {0}".format(mode))
        raise ValueError("Unknown padding mode {0}, try one of {1}".format(mode, sorted(PADDING_MODES)))
    height, width = x.shape[-2:]
    y = _pad_array(x.data, pads, mode)
    return _make(y, (x,), lambda g: (_fold_padding(g, pads, mode, height, width),))


# ----------------------------------------------------------------------------
# Numeric kernels of the architecture
# ----------------------------------------------------------------------------

def conv2d(x, weight, bias=None, padding_mode='zeros', groups=1):
    """'Same' cross-correlation of a batch of feature maps.

    Output element (n, o, h, w) is the sum over input channels of the group and
    kernel taps, accumulated tap by tap in a fixed order.
    :param x: input, shape [N, C, H, W]
    :type x: Tensor
    :param weight: kernel, shape [Co, C/groups, kh, kw], kh and kw odd
    :type weight: Tensor
    :param bias: optional, shape [Co]
    :type bias: Tensor
    :param padding_mode: 'zeros', 'reflect' or 'circular'
    :type padding_mode: str
    :param groups: number of channel groups (groups=C gives a depth-wise conv)
    :type groups: int
    :return: output, shape [N, Co, H, W]
    """
    x, weight = tensor(x), tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        logger.error("conv2d expects 4-D input and weight, got {0} and {1}".format(x.shape, weight.shape))
        raise ValueError("conv2d expects 4-D input and weight, got {0} and {1}".format(x.shape, weight.shape))
    n, c, h, w = x.shape
    co, ci, kh, kw = weight.shape
    if ci * groups != c:
        logger.error("conv2d channel mismatch: input C={0}, weight Ci={1}, groups={2}".format(c, ci, groups))
        raise ValueError("conv2d: input channel dimension C={0} does not equal weight Ci={1} x groups={2}"
                         .format(c, ci, groups))
    if co % groups:
        logger.error("conv2d: output channels {0} not divisible by groups {1}".format(co, groups))
        raise ValueError("conv2d: output channel dimension Co={0} not divisible by groups={1}".format(co, groups))
    if kh % 2 == 0 or kw % 2 == 0:
        logger.error("conv2d: even kernel size {0}x{1}".format(kh, kw))
        raise ValueError("conv2d: kernel dimensions must be odd, got {0}x{1}".format(kh, kw))
    if bias is not None:
        bias = tensor(bias)
        if bias.shape != (co,):
            logger.error("conv2d: bias shape {0} does not match Co={1}".format(bias.shape, co))
            raise ValueError("conv2d: bias dimension {0} does not match Co={1}".format(bias.shape, co))
    if padding_mode not in PADDING_MODES:
        logger.error("Unknown padding mode {0}".format(padding_mode))
        raise ValueError("Unknown padding mode {0}".format(padding_mode))

    pads = (kh // 2, kh // 2, kw // 2, kw // 2)
    dtype = np.result_type(x.data.dtype, weight.data.dtype)
    xp = _pad_array(x.data.astype(dtype, copy=False), pads, padding_mode)
    wd = weight.data.astype(dtype, copy=False)
    depthwise = (groups == c and co == c)

    if depthwise:
        out = np.zeros((n, c, h, w), dtype=dtype)
        for i in range(kh):
            for j in range(kw):
                out += wd[:, 0, i, j][None, :, None, None] * xp[:, :, i:i + h, j:j + w]
    else:
        cog = co // groups
        xg = xp.reshape(n, groups, ci, xp.shape[-2], xp.shape[-1])
        wg = wd.reshape(groups, cog, ci, kh, kw)
        out = np.zeros((n, groups, cog, h, w), dtype=dtype)
        for i in range(kh):
            for j in range(kw):
                out += np.einsum('goc,ngchw->ngohw', wg[..., i, j], xg[..., i:i + h, j:j + w], optimize=True)
        out = out.reshape(n, co, h, w)
    if bias is not None:
        out += bias.data.astype(dtype, copy=False)[None, :, None, None]

    def _backward(g):
        gx = np.zeros(xp.shape, dtype=dtype)
        gw = np.zeros(wd.shape, dtype=dtype)
        if depthwise:
            for i in range(kh):
                for j in range(kw):
                    gw[:, 0, i, j] = (g * xp[:, :, i:i + h, j:j + w]).sum(axis=(0, 2, 3))
                    gx[:, :, i:i + h, j:j + w] += wd[:, 0, i, j][None, :, None, None] * g
        else:
            cog = co // groups
            gg = g.reshape(n, groups, cog, h, w)
            xg = xp.reshape(n, groups, ci, xp.shape[-2], xp.shape[-1])
            wg = wd.reshape(groups, cog, ci, kh, kw)
            gwg = gw.reshape(groups, cog, ci, kh, kw)
            gxg = gx.reshape(n, groups, ci, xp.shape[-2], xp.shape[-1])
            for i in range(kh):
                for j in range(kw):
                    gwg[..., i, j] = np.einsum('ngohw,ngchw->goc', gg, xg[..., i:i + h, j:j + w], optimize=True)
                    gxg[..., i:i + h, j:j + w] += np.einsum('goc,ngohw->ngchw', wg[..., i, j], gg, optimize=True)
        grads = [_fold_padding(gx, pads, padding_mode, h, w), gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, _backward)


def matmul(a, b):
    """Batched matrix product [..., M, K] x [..., K, N] -> [..., M, N]"""
    a, b = tensor(a), tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        logger.error("matmul needs at least 2-D operands, got {0} and {1}".format(a.shape, b.shape))
        raise ValueError("matmul needs at least 2-D operands, got {0} and {1}".format(a.shape, b.shape))
    if a.shape[-1] != b.shape[-2]:
        logger.error("matmul inner dimension mismatch: {0} vs {1}".format(a.shape, b.shape))
        raise ValueError("matmul: inner dimension K={0} of the left operand does not match K={1} of the right"
                         .format(a.shape[-1], b.shape[-2]))
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        logger.error("matmul batch dimensions {0} and {1} cannot be broadcast".format(a.shape, b.shape))
        raise ValueError("matmul: batch dimensions {0} and {1} cannot be broadcast"
                         .format(a.shape[:-2], b.shape[:-2]))

    def _backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)
    return _make(np.matmul(a.data, b.data), (a, b), _backward)


def softmax_rows(logits):
    """Softmax along the last axis, stabilised by the row maximum.

    Entries equal to -inf get a weight of exactly 0; a row made only of -inf is an error.
    """
    logits = tensor(logits)
    rowmax = logits.data.max(axis=-1, keepdims=True)
    if np.any(np.isneginf(rowmax)):
        logger.error("softmax_rows: a row has no finite entry")
        raise ValueError("softmax_rows: every row needs at least one finite entry (k >= 1)")
    e = np.exp(logits.data - rowmax)
    y = e / e.sum(axis=-1, keepdims=True)

    def _backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)
    return _make(y, (logits,), _backward)


def layernorm(x, gamma, beta, eps=1e-5):
    """Per-pixel normalisation over the channel axis of [N, C, H, W] followed by an affine map"""
    x, gamma, beta = tensor(x), tensor(gamma), tensor(beta)
    if x.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        logger.error("layernorm shape mismatch: x {0}, gamma {1}, beta {2}".format(x.shape, gamma.shape, beta.shape))
        raise ValueError("layernorm: channel dimension {0} does not match gamma {1} / beta {2}"
                         .format(x.shape[1] if x.ndim > 1 else None, gamma.shape, beta.shape))
    if eps <= 0:
        raise ValueError("layernorm: eps must be positive")
    c = x.shape[1]
    mu = x.data.mean(axis=1, keepdims=True)
    centred = x.data - mu
    var = (centred * centred).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centred * inv
    gam = gamma.data[None, :, None, None]
    out = xhat * gam + beta.data[None, :, None, None]

    def _backward(g):
        dxhat = g * gam
        dx = inv / c * (c * dxhat - dxhat.sum(axis=1, keepdims=True)
                        - xhat * (dxhat * xhat).sum(axis=1, keepdims=True))
        return dx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))
    return _make(out, (x, gamma, beta), _backward)


def topk_keep(logits, k):
    """Boolean mask of the k largest entries per row; ties keep the lower column first"""
    m = logits.shape[-1]
    if k < 1 or k > m:
        logger.error("topk: k={0} outside [1, {1}]".format(k, m))
        raise ValueError("topk: k={0} must lie in [1, {1}]".format(k, m))
    order = np.argsort(-logits, axis=-1, kind='stable')
    keep = np.zeros(logits.shape, dtype=bool)
    np.put_along_axis(keep, order[..., :k], True, axis=-1)
    return keep


def topk_mask(logits, k, keep=None):
    """Keep the k largest logits of each row verbatim and set the others to -inf.

    The mask is a constant of the backward pass: gradients flow through the kept
    entries only.
    :param keep: precomputed boolean mask to reuse instead of ranking
    :type keep: numpy.ndarray
    """
    logits = tensor(logits)
    if keep is None:
        keep = branch_decision(lambda: topk_keep(logits.data, k))
    out = np.where(keep, logits.data, -np.inf)
    return _make(out, (logits,), lambda g: (g * keep,))


def normalize(x, axis=-1, eps=1e-12):
    """L2 normalisation along axis, dividing by max(norm, eps)"""
    x = tensor(x)
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    denom = np.maximum(norm, eps)
    y = x.data / denom

    def _backward(g):
        radial = (g * y).sum(axis=axis, keepdims=True)
        return (np.where(norm > eps, (g - y * radial) / denom, g / denom),)
    return _make(y, (x,), _backward)


def pixel_unshuffle(x, factor=2):
    """Space-to-depth: [N, C, H, W] -> [N, C*f*f, H/f, W/f]"""
    x = tensor(x)
    if x.shape[-2] % factor or x.shape[-1] % factor:
        logger.error("pixel_unshuffle: spatial size {0} not divisible by {1}".format(x.shape[-2:], factor))
        raise ValueError("pixel_unshuffle: spatial dimensions {0} must be divisible by {1}"
                         .format(x.shape[-2:], factor))
    y = rearrange(x.data, 'n c (h p) (w q) -> n (c p q) h w', p=factor, q=factor)
    return _make(y, (x,), lambda g: (rearrange(g, 'n (c p q) h w -> n c (h p) (w q)', p=factor, q=factor),))


def pixel_shuffle(x, factor=2):
    """Depth-to-space: [N, C*f*f, H, W] -> [N, C, H*f, W*f]"""
    x = tensor(x)
    if x.shape[1] % (factor * factor):
        logger.error("pixel_shuffle: channels {0} not divisible by {1}".format(x.shape[1], factor * factor))
        raise ValueError("pixel_shuffle: channel dimension {0} must be divisible by {1}"
                         .format(x.shape[1], factor * factor))
    y = rearrange(x.data, 'n (c p q) h w -> n c (h p) (w q)', p=factor, q=factor)
    return _make(y, (x,), lambda g: (rearrange(g, 'n c (h p) (w q) -> n (c p q) h w', p=factor, q=factor),))


def avg_pool2(x):
    """2x2 average pooling built from pixel_unshuffle"""
    x = tensor(x)
    n, c, h, w = x.shape
    blocks = reshape(pixel_unshuffle(x, 2), (n, c, 4, h // 2, w // 2))
    return mean(blocks, axis=2)

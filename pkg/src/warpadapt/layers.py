"""Network building blocks.

The centerpiece is ``DeformableConv2d``: a standard convolution whose
sampling positions are shifted by per-location, per-tap offsets that a
small trainable convolution predicts from the input.  Base weights are
frozen when a convolution is wrapped; the offset predictor starts at
zero so the wrapped layer initially reproduces the original exactly,
and adaptation can only train it away from that identity.

Offset channel layout: for kernel tap t (row-major over the k*k grid),
channel 2t is the column shift du and channel 2t+1 the row shift dv.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from . import tensor as T
from .tensor import Tensor

PLACEMENT_ENCODER = "ENCODER"
PLACEMENT_DECODER = "DECODER"
PLACEMENT_BOTH = "BOTH"
PLACEMENTS = (PLACEMENT_ENCODER, PLACEMENT_DECODER, PLACEMENT_BOTH)


# ---------------------------------------------------------------------------
# standard convolution layer
# ---------------------------------------------------------------------------


class Conv2dLayer:
    """Conv2d with He-initialized weight and zero bias."""

    def __init__(self, in_channels, out_channels, kernel_size,
                 stride=1, dilation=1, padding=0, rng=None):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.dilation = dilation
        self.padding = padding
        if rng is None:
            weight = np.zeros((out_channels, in_channels, kernel_size, kernel_size))
        else:
            scale = np.sqrt(2.0 / (in_channels * kernel_size * kernel_size))
            weight = rng.normal(0.0, scale, (out_channels, in_channels, kernel_size, kernel_size))
        self.weight = Tensor(weight, requires_grad=True)
        self.bias = Tensor(np.zeros(out_channels), requires_grad=True)

    def forward(self, x):
        return T.conv2d(x, self.weight, self.bias,
                        stride=self.stride, dilation=self.dilation, padding=self.padding)

    __call__ = forward

    def named_parameters(self, prefix):
        return [(prefix + ".weight", self.weight), (prefix + ".bias", self.bias)]

    def named_buffers(self, prefix):
        return []


# ---------------------------------------------------------------------------
# batch normalization layer
# ---------------------------------------------------------------------------


@dataclasses.dataclass
class BNState:
    """Running statistics of a batch-norm layer."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    def __post_init__(self):
        self.running_mean = np.asarray(self.running_mean, dtype=np.float64)
        self.running_var = np.asarray(self.running_var, dtype=np.float64)
        if self.running_mean.shape != self.running_var.shape:
            raise ValueError("running mean/var shapes differ")
        if not np.all(self.running_var > 0):
            raise ValueError("running variance must be positive")


def batchnorm2d(x, gamma, beta, state, training):
    """Functional batch norm over a BNState (updates it when training)."""
    return T.batch_norm2d(x, gamma, beta, state.running_mean, state.running_var,
                          momentum=state.momentum, eps=state.eps, training=training)


class BatchNorm2d:
    """Per-channel batch norm with learnable affine and running stats.

    ``stats_frozen`` forces eval-mode statistics even when the forward
    pass is in training mode (used when only offsets are adapted).
    """

    def __init__(self, channels):
        self.channels = channels
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.state = BNState(np.zeros(channels), np.ones(channels))
        self.stats_frozen = False

    def forward(self, x, training):
        return batchnorm2d(x, self.gamma, self.beta, self.state,
                           training=training and not self.stats_frozen)

    __call__ = forward

    def named_parameters(self, prefix):
        return [(prefix + ".gamma", self.gamma), (prefix + ".beta", self.beta)]

    def named_buffers(self, prefix):
        return [(prefix + ".running_mean", self.state.running_mean),
                (prefix + ".running_var", self.state.running_var)]


# ---------------------------------------------------------------------------
# deformable convolution
# ---------------------------------------------------------------------------


def deform_conv2d(x, offsets, weight, bias, stride=1, dilation=1, padding=0):
    """Convolution sampled at offset tap positions (functional form).

    ``offsets`` is [B, 2*k*k, H', W'] with (du, dv) pairs per tap in
    row-major tap order.  Each output value is

        y(p) = sum_t w_t * x(p_base(t) + (du_t, dv_t)) + bias

    where p_base covers the usual strided/dilated/zero-padded grid and
    fractional positions are read bilinearly (zero outside the input).
    With all offsets zero this reproduces ``tensor.conv2d`` bitwise.
    """
    B, C, H, W = x.shape
    O, Cw, k, k2 = weight.shape
    if k != k2 or Cw != C:
        raise ValueError(f"weight shape {weight.shape} incompatible with input {x.shape}")
    Ho = T.conv2d_output_size(H, k, stride, dilation, padding)
    Wo = T.conv2d_output_size(W, k, stride, dilation, padding)
    K = k * k
    if offsets.shape != (B, 2 * K, Ho, Wo):
        raise ValueError(
            f"offsets shape {offsets.shape} does not match expected {(B, 2 * K, Ho, Wo)}")
    L = Ho * Wo

    base_u, base_v = _base_grid(k, Ho, Wo, stride, dilation, padding)
    off = T.reshape(offsets, (B, K, 2, L))
    du = T.index_axis(off, 2, 0)
    dv = T.index_axis(off, 2, 1)
    return T.conv2d_sampled(x, du, dv, weight, bias, base_u, base_v, (Ho, Wo))


_base_grid_cache = {}


def _base_grid(k, Ho, Wo, stride, dilation, padding):
    """Unshifted tap coordinates [k*k, Ho*Wo] in input pixel units."""
    key = (k, Ho, Wo, stride, dilation, padding)
    hit = _base_grid_cache.get(key)
    if hit is not None:
        return hit
    oy, ox = np.meshgrid(np.arange(Ho), np.arange(Wo), indexing="ij")
    ki, kj = np.meshgrid(np.arange(k), np.arange(k), indexing="ij")
    base_v = (oy.reshape(-1)[None, :] * stride - padding
              + ki.reshape(-1)[:, None] * dilation).astype(np.float64)
    base_u = (ox.reshape(-1)[None, :] * stride - padding
              + kj.reshape(-1)[:, None] * dilation).astype(np.float64)
    _base_grid_cache[key] = (base_u, base_v)
    return base_u, base_v


class DeformableConv2d:
    """A frozen convolution plus a trainable offset predictor.

    Built from an existing ``Conv2dLayer`` whose weight and bias are
    reused verbatim (and marked non-trainable).  The offset predictor is
    a same-geometry convolution with 2*k*k output channels, initialized
    to zero so the wrapped layer starts as an exact copy of the original.
    """

    def __init__(self, base_weight, base_bias, stride, dilation, padding,
                 offset_predictor, offsets_enabled=True):
        O, C, k, _ = base_weight.shape
        self.in_channels = C
        self.out_channels = O
        self.kernel_size = k
        self.stride = stride
        self.dilation = dilation
        self.padding = padding
        self.base_weight = base_weight
        self.base_bias = base_bias
        self.offset_predictor = offset_predictor
        if offset_predictor.out_channels != 2 * k * k:
            raise ValueError(
                f"offset predictor must emit {2 * k * k} channels, "
                f"got {offset_predictor.out_channels}")
        self.offsets_enabled = bool(offsets_enabled)

    @classmethod
    def from_conv(cls, conv):
        """Wrap a Conv2dLayer; base parameters are shared and frozen."""
        conv.weight.requires_grad = False
        conv.bias.requires_grad = False
        k = conv.kernel_size
        predictor = Conv2dLayer(conv.in_channels, 2 * k * k, k,
                                stride=conv.stride, dilation=conv.dilation,
                                padding=conv.padding, rng=None)  # zero init
        return cls(conv.weight, conv.bias, conv.stride, conv.dilation,
                   conv.padding, predictor)

    def forward(self, x):
        if not self.offsets_enabled:
            return T.conv2d(x, self.base_weight, self.base_bias,
                            stride=self.stride, dilation=self.dilation,
                            padding=self.padding)
        offsets = self.offset_predictor(x)
        return deform_conv2d(x, offsets, self.base_weight, self.base_bias,
                             stride=self.stride, dilation=self.dilation,
                             padding=self.padding)

    __call__ = forward

    def named_parameters(self, prefix):
        return ([(prefix + ".weight", self.base_weight), (prefix + ".bias", self.base_bias)]
                + self.offset_predictor.named_parameters(prefix + ".offset"))

    def named_buffers(self, prefix):
        return []


def deformable_forward(layer, x):
    """Free-function alias of DeformableConv2d.forward."""
    return layer.forward(x)


def set_offsets_enabled(layer, flag):
    """Toggle deformable behavior; disabling restores the base conv path."""
    layer.offsets_enabled = bool(flag)


# ---------------------------------------------------------------------------
# conv + bn + relu block
# ---------------------------------------------------------------------------


class ConvBlock:
    """conv -> batchnorm -> relu, with either part optional.

    The plain classifier head is a ConvBlock with ``use_bn=False`` and
    ``use_relu=False`` so every convolution in the network lives behind
    a uniform ``.conv`` attribute (which placement conversion rewrites).
    """

    def __init__(self, in_channels, out_channels, kernel_size=3,
                 stride=1, dilation=1, padding=None, rng=None,
                 use_bn=True, use_relu=True):
        if padding is None:
            padding = dilation * (kernel_size - 1) // 2
        self.conv = Conv2dLayer(in_channels, out_channels, kernel_size,
                                stride=stride, dilation=dilation,
                                padding=padding, rng=rng)
        self.bn = BatchNorm2d(out_channels) if use_bn else None
        self.use_relu = use_relu

    def forward(self, x, training=False):
        out = self.conv(x)
        if self.bn is not None:
            out = self.bn(out, training)
        if self.use_relu:
            out = T.relu(out)
        return out

    __call__ = forward

    def named_parameters(self, prefix):
        params = self.conv.named_parameters(prefix + ".conv")
        if self.bn is not None:
            params += self.bn.named_parameters(prefix + ".bn")
        return params

    def named_buffers(self, prefix):
        if self.bn is not None:
            return self.bn.named_buffers(prefix + ".bn")
        return []


def convert_to_deformable(model, placement):
    """Wrap every standard conv in the selected component(s).

    ``placement`` selects ENCODER, DECODER or BOTH.  Wrapped layers keep
    their parameter names for the base weight/bias, freeze them, and add
    a zero-initialized offset predictor; the model's outputs are
    unchanged until the predictor trains away from zero.
    """
    if placement not in PLACEMENTS:
        raise ValueError(f"unknown placement {placement!r}; expected one of {PLACEMENTS}")
    for block in model.blocks_for_placement(placement):
        if isinstance(block.conv, Conv2dLayer):
            block.conv = DeformableConv2d.from_conv(block.conv)
    return model

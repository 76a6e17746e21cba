"""Tests for network building blocks, centered on deformable convolution."""

import numpy as np
import pytest

from warpadapt import layers as L
from warpadapt import tensor as T
from warpadapt.gradcheck import assert_off_lattice, check_gradients, off_lattice_values
from warpadapt.tensor import Tensor

# ---------------------------------------------------------------------------
# deformable convolution: forward semantics
# ---------------------------------------------------------------------------


def make_layer(rng, in_ch=3, out_ch=4, k=3, stride=1, dilation=1, padding=1):
    conv = L.Conv2dLayer(in_ch, out_ch, k, stride=stride, dilation=dilation,
                         padding=padding, rng=rng)
    conv.bias.data[:] = rng.standard_normal(out_ch)
    return L.DeformableConv2d.from_conv(conv), conv


def test_zero_offset_predictor_equals_conv_exactly():
    rng = np.random.default_rng(0)
    layer, conv = make_layer(rng)
    x = Tensor(rng.standard_normal((2, 3, 8, 10)))
    plain = T.conv2d(x, layer.base_weight, layer.base_bias, stride=1, dilation=1, padding=1)
    assert np.array_equal(layer(x).data, plain.data)


@pytest.mark.parametrize("stride,dilation,padding", [(1, 1, 1), (2, 1, 1), (1, 2, 2), (2, 2, 0)])
def test_zero_offset_equivalence_random_configs(stride, dilation, padding):
    rng = np.random.default_rng(stride * 7 + dilation * 3 + padding)
    layer, _ = make_layer(rng, in_ch=2, out_ch=3, k=3,
                          stride=stride, dilation=dilation, padding=padding)
    x = Tensor(rng.standard_normal((1, 2, 9, 11)))
    plain = T.conv2d(x, layer.base_weight, layer.base_bias,
                     stride=stride, dilation=dilation, padding=padding)
    assert np.max(np.abs(layer(x).data - plain.data)) <= 1e-12


def test_forced_half_pixel_right_shift_hand_oracle():
    # 1x1 kernel, weight 1, bias 0, every tap shifted (du, dv) = (0.5, 0)
    # on the map [[0,1],[2,3]]: each output reads half a pixel to the
    # right, with zero padding past the right edge.
    x = Tensor(np.array([[[[0.0, 1.0], [2.0, 3.0]]]]))
    offsets = np.zeros((1, 2, 2, 2))
    offsets[0, 0] = 0.5  # du channel
    out = L.deform_conv2d(x, Tensor(offsets), Tensor(np.ones((1, 1, 1, 1))),
                          Tensor(np.zeros(1)))
    want = [[0.5, 0.5], [2.5, 1.5]]
    assert np.allclose(out.data[0, 0], want, atol=1e-15)


def test_constant_input_in_bounds_offsets_give_constant_output():
    rng = np.random.default_rng(1)
    const = 1.75
    k, H, W = 3, 8, 9
    conv = L.Conv2dLayer(2, 3, k, padding=0, rng=rng)
    conv.bias.data[:] = rng.standard_normal(3)
    Ho, Wo = H - k + 1, W - k + 1
    K = k * k
    base_u, base_v = L._base_grid(k, Ho, Wo, stride=1, dilation=1, padding=0)
    raw_du = rng.uniform(-0.45, 0.45, (1, K, Ho * Wo))
    raw_dv = rng.uniform(-0.45, 0.45, (1, K, Ho * Wo))
    du = np.clip(base_u[None] + raw_du, 0, W - 1) - base_u[None]
    dv = np.clip(base_v[None] + raw_dv, 0, H - 1) - base_v[None]
    offsets = np.empty((1, 2 * K, Ho, Wo))
    offsets[0, 0::2] = du.reshape(K, Ho, Wo)
    offsets[0, 1::2] = dv.reshape(K, Ho, Wo)
    x = Tensor(np.full((1, 2, H, W), const))
    out = L.deform_conv2d(x, Tensor(offsets), conv.weight, conv.bias, padding=0)
    want = const * conv.weight.data.sum(axis=(1, 2, 3)) + conv.bias.data
    assert np.max(np.abs(out.data - want[None, :, None, None])) <= 1e-12


def test_integer_offsets_reproduce_shifted_convolution():
    rng = np.random.default_rng(2)
    conv = L.Conv2dLayer(2, 3, 3, padding=1, rng=rng)
    conv.bias.data[:] = rng.standard_normal(3)
    x = Tensor(rng.standard_normal((1, 2, 6, 10)))
    plain = T.conv2d(x, conv.weight, conv.bias, padding=1)
    offsets = np.zeros((1, 18, 6, 10))
    offsets[0, 0::2] = 1.0  # every tap one full pixel right
    shifted = L.deform_conv2d(x, Tensor(offsets), conv.weight, conv.bias, padding=1)
    # output column j now matches the plain convolution at column j+1
    assert np.array_equal(shifted.data[:, :, :, :-1], plain.data[:, :, :, 1:])


def test_deform_conv_validates_offset_shape():
    rng = np.random.default_rng(3)
    conv = L.Conv2dLayer(2, 3, 3, padding=1, rng=rng)
    x = Tensor(rng.standard_normal((1, 2, 5, 5)))
    with pytest.raises(ValueError):
        L.deform_conv2d(x, Tensor(np.zeros((1, 9, 5, 5))), conv.weight, conv.bias, padding=1)


# ---------------------------------------------------------------------------
# enable / disable switch
# ---------------------------------------------------------------------------


def test_disable_restores_plain_conv_bitwise():
    rng = np.random.default_rng(4)
    layer, _ = make_layer(rng)
    # train the predictor away from zero
    layer.offset_predictor.weight.data[:] = 0.01 * rng.standard_normal(
        layer.offset_predictor.weight.shape)
    layer.offset_predictor.bias.data[:] = 0.3
    x = Tensor(rng.standard_normal((1, 3, 7, 7)))
    adapted = layer(x)
    plain = T.conv2d(x, layer.base_weight, layer.base_bias, stride=1, dilation=1, padding=1)
    assert not np.array_equal(adapted.data, plain.data)
    L.set_offsets_enabled(layer, False)
    assert np.array_equal(layer(x).data, plain.data)
    L.set_offsets_enabled(layer, False)  # idempotent
    assert not layer.offsets_enabled
    L.set_offsets_enabled(layer, True)
    assert np.array_equal(layer(x).data, adapted.data)


def test_enable_with_zero_predictor_changes_nothing():
    rng = np.random.default_rng(5)
    layer, _ = make_layer(rng)
    x = Tensor(rng.standard_normal((1, 3, 6, 6)))
    L.set_offsets_enabled(layer, False)
    off = layer(x).data
    L.set_offsets_enabled(layer, True)
    assert np.array_equal(layer(x).data, off)


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------


def test_deform_conv_gradients_off_lattice():
    rng = np.random.default_rng(6)
    k, K = 3, 9
    x = Tensor(rng.standard_normal((1, 2, 7, 8)), requires_grad=True)
    w = Tensor(0.5 * rng.standard_normal((3, 2, k, k)), requires_grad=True)
    b = Tensor(rng.standard_normal(3), requires_grad=True)
    Ho, Wo = 7, 8
    base_u, base_v = L._base_grid(k, Ho, Wo, 1, 1, 1)
    du = off_lattice_values(rng, (K, Ho * Wo), low=-2, high=2) - base_u
    dv = off_lattice_values(rng, (K, Ho * Wo), low=-2, high=2) - base_v
    assert_off_lattice(base_u + du)
    assert_off_lattice(base_v + dv)
    offsets = np.empty((1, 2 * K, Ho, Wo))
    offsets[0, 0::2] = du.reshape(K, Ho, Wo)
    offsets[0, 1::2] = dv.reshape(K, Ho, Wo)
    off_t = Tensor(offsets, requires_grad=True)
    probe = rng.standard_normal((1, 3, Ho, Wo))

    def loss():
        return (L.deform_conv2d(x, off_t, w, b, padding=1) * Tensor(probe)).sum()

    assert check_gradients(loss, [x, off_t, w, b], rng=np.random.default_rng(0)) <= 1e-3


def test_offset_predictor_weight_gradients():
    rng = np.random.default_rng(7)
    layer, _ = make_layer(rng, in_ch=2, out_ch=2)
    # bias pushes sample positions off the integer lattice; tiny weights
    # keep the finite-difference probes inside one bilinear cell
    layer.offset_predictor.bias.data[:] = off_lattice_values(rng, (18,), low=-1, high=1)
    layer.offset_predictor.weight.data[:] = 1e-3 * rng.standard_normal(
        layer.offset_predictor.weight.shape)
    x = Tensor(rng.standard_normal((1, 2, 6, 7)))
    with T.no_grad():
        off = layer.offset_predictor(x).data[0]
    base_u, base_v = L._base_grid(3, 6, 7, 1, 1, 1)
    pos_u = base_u + off[0::2].reshape(9, -1)
    pos_v = base_v + off[1::2].reshape(9, -1)
    assert_off_lattice(pos_u, margin=1e-4)
    assert_off_lattice(pos_v, margin=1e-4)
    probe = rng.standard_normal((1, 2, 6, 7))

    def loss():
        return (layer(x) * Tensor(probe)).sum()

    params = [layer.offset_predictor.weight, layer.offset_predictor.bias]
    assert check_gradients(loss, params, rng=np.random.default_rng(1)) <= 1e-3


def test_frozen_base_records_no_gradient():
    rng = np.random.default_rng(8)
    layer, _ = make_layer(rng)
    x = Tensor(rng.standard_normal((1, 3, 5, 5)))
    out = layer(x)
    out.sum().backward()
    assert layer.base_weight.grad is None
    assert layer.base_bias.grad is None
    assert layer.offset_predictor.weight.grad is not None


# ---------------------------------------------------------------------------
# construction / bookkeeping
# ---------------------------------------------------------------------------


def test_from_conv_shares_and_freezes_base_parameters():
    rng = np.random.default_rng(9)
    conv = L.Conv2dLayer(3, 4, 3, padding=1, rng=rng)
    layer = L.DeformableConv2d.from_conv(conv)
    assert layer.base_weight is conv.weight
    assert layer.base_bias is conv.bias
    assert not layer.base_weight.requires_grad
    assert not layer.base_bias.requires_grad
    assert layer.offset_predictor.out_channels == 18
    assert np.all(layer.offset_predictor.weight.data == 0)
    assert np.all(layer.offset_predictor.bias.data == 0)
    assert layer.offset_predictor.weight.requires_grad


def test_wrapped_layer_keeps_base_parameter_names():
    rng = np.random.default_rng(10)
    conv = L.Conv2dLayer(3, 4, 3, padding=1, rng=rng)
    before = dict(conv.named_parameters("enc1.conv"))
    layer = L.DeformableConv2d.from_conv(conv)
    after = dict(layer.named_parameters("enc1.conv"))
    assert set(before) <= set(after)
    assert set(after) - set(before) == {"enc1.conv.offset.weight", "enc1.conv.offset.bias"}
    assert after["enc1.conv.weight"] is before["enc1.conv.weight"]


def test_predictor_channel_count_is_validated():
    rng = np.random.default_rng(11)
    conv = L.Conv2dLayer(3, 4, 3, padding=1, rng=rng)
    bad = L.Conv2dLayer(3, 9, 3, padding=1)
    with pytest.raises(ValueError):
        L.DeformableConv2d(conv.weight, conv.bias, 1, 1, 1, bad)


def test_convert_rejects_unknown_placement():
    with pytest.raises(ValueError):
        L.convert_to_deformable(None, "EVERYWHERE")


# ---------------------------------------------------------------------------
# batch norm / conv block plumbing
# ---------------------------------------------------------------------------


def test_bnstate_rejects_non_positive_variance():
    with pytest.raises(ValueError):
        L.BNState(np.zeros(3), np.array([1.0, 0.0, 1.0]))
    with pytest.raises(ValueError):
        L.BNState(np.zeros(3), np.ones(2))


def test_batchnorm_stats_frozen_uses_eval_statistics():
    rng = np.random.default_rng(12)
    bn = L.BatchNorm2d(2)
    bn.state.running_mean[:] = [1.0, -1.0]
    bn.state.running_var[:] = [4.0, 0.25]
    x = Tensor(rng.standard_normal((4, 2, 3, 3)) + 7.0)
    bn.stats_frozen = True
    frozen_out = bn(x, training=True)
    want = (x.data - bn.state.running_mean[None, :, None, None]) / np.sqrt(
        bn.state.running_var[None, :, None, None] + 1e-5)
    assert np.allclose(frozen_out.data, want, atol=1e-12)
    assert np.array_equal(bn.state.running_mean, [1.0, -1.0])  # untouched
    bn.stats_frozen = False
    bn(x, training=True)
    assert not np.array_equal(bn.state.running_mean, [1.0, -1.0])


def test_conv_block_shapes_and_parameter_names():
    rng = np.random.default_rng(13)
    block = L.ConvBlock(3, 8, stride=2, rng=rng)
    x = Tensor(rng.standard_normal((2, 3, 16, 16)))
    out = block(x, training=True)
    assert out.shape == (2, 8, 8, 8)
    assert np.all(out.data >= 0)  # relu applied
    names = [n for n, _ in block.named_parameters("enc1")]
    assert names == ["enc1.conv.weight", "enc1.conv.bias", "enc1.bn.gamma", "enc1.bn.beta"]
    buffers = [n for n, _ in block.named_buffers("enc1")]
    assert buffers == ["enc1.bn.running_mean", "enc1.bn.running_var"]


def test_head_style_block_has_no_bn_or_relu():
    rng = np.random.default_rng(14)
    head = L.ConvBlock(8, 5, kernel_size=1, rng=rng, use_bn=False, use_relu=False)
    x = Tensor(rng.standard_normal((1, 8, 4, 4)))
    out = head(x)
    assert out.shape == (1, 5, 4, 4)
    assert np.any(out.data < 0)  # no relu
    assert head.named_buffers("head") == []


def test_dilated_block_same_padding_preserves_size():
    rng = np.random.default_rng(15)
    block = L.ConvBlock(4, 4, dilation=2, rng=rng)
    x = Tensor(rng.standard_normal((1, 4, 10, 12)))
    assert block(x).shape == (1, 4, 10, 12)

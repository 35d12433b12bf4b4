import copy

import numpy as np
import pytest

from rainstream import tensor as tn
from rainstream.layers import (
    BidirConvLstm,
    ConvLayer,
    ConvLstmLayer,
    ConvLstmState,
    DenseUnit,
    PlainConvUnit,
    ReconstructionHead,
    bidir_stack_forward,
    convlstm_step,
)
from rainstream.model import TwoStreamNet
from rainstream.tensor import ShapeError, Tensor


def conv_params(c_in, c_out, k=3, act=True):
    return c_out * c_in * k * k + c_out + (c_out if act else 0)


def dense_params(c_in):
    return sum(conv_params(c_in + 12 * j, 12) for j in range(4))


def lstm_params(c_in, h=48):
    return 4 * (h * c_in * 9 + h * h * 9 + h)


def bidir_params(c_in):
    return 2 * lstm_params(c_in) + 2 * lstm_params(96)


def head_params(c_out):
    return conv_params(96, 48) + conv_params(48, 48) + conv_params(48, c_out, act=False)


@pytest.mark.parametrize("channels", [1, 3])
def test_parameter_count_closed_form(channels):
    expected = dense_params(channels) + 2 * (dense_params(channels + 48) + bidir_params(channels + 96)) \
        + 2 * head_params(channels)
    assert TwoStreamNet(channels=channels).n_parameters() == expected


def test_rgb_parameter_count_value():
    assert TwoStreamNet(channels=3).n_parameters() == 2_209_302


def test_dense_unit_widths_and_connections(rng):
    unit = DenseUnit(5, rng)
    assert unit.out_channels == 53
    assert unit.connections == 10
    assert [l.in_channels for l in unit.layers] == [5, 17, 29, 41]
    x = Tensor(rng.standard_normal((5, 6, 6)).astype(np.float32))
    y = unit(x)
    assert y.shape == (53, 6, 6)
    np.testing.assert_array_equal(y.data[:5], x.data)  # input passes through as the first block


def test_dense_unit_later_layers_see_earlier_outputs(rng):
    unit = DenseUnit(2, rng)
    x = Tensor(rng.standard_normal((2, 5, 5)).astype(np.float32))
    y = unit(x).data
    # recompute layer 3 by hand from the concatenated earlier features
    feats = tn.concat_channels([Tensor(y[:2]), Tensor(y[2:14]), Tensor(y[14:26])])
    np.testing.assert_allclose(unit.layers[2](feats).data, y[26:38], rtol=1e-6)


def test_plain_unit_is_a_chain(rng):
    unit = PlainConvUnit(3, rng)
    assert unit.out_channels == 12 and unit.connections == 4
    assert unit(Tensor(np.zeros((3, 4, 4), np.float32))).shape == (12, 4, 4)


def test_glorot_bounds_and_zero_bias(rng):
    layer = ConvLayer(10, 20, rng)
    limit = np.sqrt(6.0 / (10 * 9 + 20 * 9))
    w = layer.params["weight"].data
    assert np.abs(w).max() <= limit
    assert np.abs(w).max() > 0.9 * limit
    assert np.all(layer.params["bias"].data == 0)
    assert np.all(layer.params["slope"].data == 0.25)


def test_zero_parameter_convlstm_closed_form(rng):
    layer = ConvLstmLayer(4, rng, hidden=3)
    for p in layer.params.values():
        p.data[...] = 0.0
    z = Tensor(rng.standard_normal((4, 5, 5)).astype(np.float32))
    prev = ConvLstmState(Tensor(rng.standard_normal((3, 5, 5)).astype(np.float32)),
                         Tensor(rng.standard_normal((3, 5, 5)).astype(np.float32)))
    state, g = convlstm_step(z, prev, layer, return_gates=True)
    for gate in (g.i, g.f, g.o):
        assert np.all(gate.data == 0.5)
    assert np.all(g.g.data == 0.0)
    np.testing.assert_allclose(state.m.data, 0.5 * prev.m.data, rtol=1e-7)
    np.testing.assert_allclose(state.h.data, 0.5 * np.tanh(0.5 * prev.m.data), rtol=1e-6)


def test_convlstm_matches_scalar_lstm_on_a_single_pixel(rng):
    """1x1 image: a ConvLSTM with 3x3 kernels sees only the centre taps, i.e. a scalar LSTM."""
    layer = ConvLstmLayer(2, rng, hidden=3).astype(np.float64)
    for g in "ifog":
        layer.params[f"b_{g}"].data = rng.standard_normal(3)
    z = rng.standard_normal(2)
    h0, m0 = rng.standard_normal(3), rng.standard_normal(3)
    state = convlstm_step(Tensor(z.reshape(2, 1, 1)),
                          ConvLstmState(Tensor(h0.reshape(3, 1, 1)), Tensor(m0.reshape(3, 1, 1))), layer)

    p = {k: v.data for k, v in layer.params.items()}
    sig = lambda a: 1 / (1 + np.exp(-a))
    pre = {g: p[f"W_z{g}"][:, :, 1, 1] @ z + p[f"W_h{g}"][:, :, 1, 1] @ h0 + p[f"b_{g}"] for g in "ifog"}
    i, f, o, gg = sig(pre["i"]), sig(pre["f"]), sig(pre["o"]), np.tanh(pre["g"])
    m = f * m0 + i * gg
    h = o * np.tanh(m)
    np.testing.assert_allclose(state.m.data.ravel(), m, rtol=1e-12)
    np.testing.assert_allclose(state.h.data.ravel(), h, rtol=1e-12)


def test_fused_kernel_equals_separate_convolutions(rng):
    layer = ConvLstmLayer(3, rng, hidden=2).astype(np.float64)
    z = Tensor(rng.standard_normal((3, 4, 4)))
    h = Tensor(rng.standard_normal((2, 4, 4)))
    m = Tensor(np.zeros((2, 4, 4)))
    _, g = convlstm_step(z, ConvLstmState(h, m), layer, return_gates=True)
    p = layer.params
    a_i = tn.conv2d(z, p["W_zi"], p["b_i"]).data + tn.conv2d(h, p["W_hi"]).data
    np.testing.assert_allclose(g.i.data, 1 / (1 + np.exp(-a_i)), rtol=1e-12)


def test_bidirectional_stack_reverses_under_mirrored_weights(rng):
    """Reversing time and swapping forward/backward weights reverses the outputs and swaps halves."""
    stack = BidirConvLstm(2, rng, hidden=3).astype(np.float64)
    seq = [Tensor(rng.standard_normal((2, 4, 4))) for _ in range(4)]
    out = bidir_stack_forward(seq, stack)

    mirrored = copy.deepcopy(stack)
    mirrored.forward_layers, mirrored.backward_layers = mirrored.backward_layers, mirrored.forward_layers
    # deeper layers read [fwd, bwd]; after the swap their input halves trade places
    for layer in mirrored.forward_layers[1:] + mirrored.backward_layers[1:]:
        for g in "ifog":
            w = layer.params[f"W_z{g}"].data
            layer.params[f"W_z{g}"].data = np.concatenate([w[:, 3:], w[:, :3]], axis=1)
    rev = bidir_stack_forward(seq[::-1], mirrored)[::-1]
    for a, b in zip(out, rev):
        np.testing.assert_allclose(a.data[:3], b.data[3:], rtol=1e-10, atol=1e-12)
        np.testing.assert_allclose(a.data[3:], b.data[:3], rtol=1e-10, atol=1e-12)


def test_bidirectional_output_depends_on_future_frames(rng):
    stack = BidirConvLstm(2, rng, hidden=3).astype(np.float64)
    seq = [Tensor(rng.standard_normal((2, 4, 4))) for _ in range(3)]
    first = bidir_stack_forward(seq, stack)[0].data
    seq[2] = Tensor(seq[2].data + 1.0)
    changed = bidir_stack_forward(seq, stack)[0].data
    assert stack.out_channels == 6
    assert not np.allclose(first[3:], changed[3:])  # backward half sees frame 2


def test_bidirectional_errors(rng):
    stack = BidirConvLstm(2, rng, hidden=3)
    with pytest.raises(ShapeError):
        bidir_stack_forward([], stack)
    with pytest.raises(ShapeError):
        bidir_stack_forward([Tensor(np.zeros((2, 4, 4))), Tensor(np.zeros((2, 5, 4)))], stack)


def test_reconstruction_head_shape_and_linear_last_layer(rng):
    head = ReconstructionHead(96, 3, rng)
    assert [l.activation for l in head.layers] == [True, True, False]
    assert head(Tensor(np.zeros((96, 5, 5), np.float32))).shape == (3, 5, 5)
    with pytest.raises(ShapeError):
        head(Tensor(np.zeros((48, 5, 5), np.float32)))

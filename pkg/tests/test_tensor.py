import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from hetsim import tensor as T
from hetsim.tensor import Q8, REAL, BoundingBox, QuantParams, ShapeError, Tensor


def q8(values, shape, scale=1.0, zp=0):
    return Tensor.from_flat(values, shape, Q8, QuantParams(scale, zp))


def real(values, shape):
    return Tensor.from_flat(values, shape, REAL)


# -- types -----------------------------------------------------------------------

def test_tensor_rejects_out_of_range_codes():
    with pytest.raises(ValueError):
        q8([200], (1, 1, 1, 1))


def test_tensor_requires_quant_iff_q8():
    with pytest.raises(ValueError):
        Tensor(np.zeros((1, 1, 1, 1)), Q8)
    with pytest.raises(ValueError):
        Tensor(np.zeros((1, 1, 1, 1)), REAL, QuantParams(1.0))


def test_tensor_shape_and_flat_order():
    t = q8(range(12), (1, 2, 3, 2))
    assert t.shape == (1, 2, 3, 2)
    assert t.data[0, 1, 2, 1] == 11
    assert list(t.flat()) == list(range(12))
    with pytest.raises(ShapeError):
        Tensor.from_flat([1, 2, 3], (1, 2, 2, 1), REAL)


def test_tensor_is_immutable():
    t = q8([1, 2], (1, 1, 2, 1))
    with pytest.raises(ValueError):
        t.data[0, 0, 0, 0] = 5


def test_quant_params_validation():
    with pytest.raises(ValueError):
        QuantParams(0.0)
    with pytest.raises(ValueError):
        QuantParams(1.0, 200)


def test_bounding_box_invariants():
    with pytest.raises(ValueError):
        BoundingBox(2, 0, 1, 1)
    with pytest.raises(ValueError):
        BoundingBox(0, 0, 1, 1, score=1.5)


# -- quantization ------------------------------------------------------------------

def test_quantize_examples():
    q = QuantParams(0.5, 0)
    assert int(T.quantize(1.0, q)) == 2
    assert int(T.quantize(1000.0, q)) == 127
    assert int(T.quantize(-1000.0, q)) == -128


def test_round_half_away_from_zero():
    q = QuantParams(1.0, 0)
    assert list(T.quantize([0.5, -0.5, 1.5, -2.5], q)) == [1, -1, 2, -3]


def test_round_trip_half_step_bound():
    q = QuantParams(0.5, 0)
    x = np.linspace(-64.0, 63.5, 2001)
    assert np.max(np.abs(x - T.dequantize(T.quantize(x, q), q))) <= 0.25


@given(
    st.floats(min_value=1e-3, max_value=10.0),
    st.integers(min_value=-128, max_value=127),
    st.floats(min_value=0.0, max_value=1.0),
)
def test_round_trip_bounded_by_half_scale(scale, zp, frac):
    q = QuantParams(scale, zp)
    lo, hi = (-128 - zp) * scale, (127 - zp) * scale
    x = lo + frac * (hi - lo)
    err = abs(x - float(T.dequantize(T.quantize(x, q), q)))
    assert err <= scale / 2 + 1e-9 * max(1.0, abs(x))


# -- conv2d ----------------------------------------------------------------------

def test_conv_identity_1x1():
    x = q8(list(range(-8, 8)), (1, 2, 2, 4), 0.1, 3)
    w = Tensor(np.eye(4, dtype=np.int64).reshape(4, 1, 1, 4), Q8, QuantParams(1.0))
    y = T.conv2d(x, w, [0, 0, 0, 0])
    assert y == x


def test_conv_zero_weights_gives_requantized_bias():
    x = q8([5] * 18, (1, 3, 3, 2), 0.5)
    w = Tensor(np.zeros((2, 3, 3, 2), dtype=np.int8), Q8, QuantParams(0.25))
    oq = QuantParams(0.5)
    y = T.conv2d(x, w, [40, -7], padding="same", out_quant=oq)
    mult = 0.5 * 0.25 / 0.5
    expect = T.requantize(np.array([40, -7]), mult, 0)
    assert np.all(y.data[..., 0] == expect[0]) and np.all(y.data[..., 1] == expect[1])


def test_conv_accumulator_3x3_ones():
    x = q8(range(1, 10), (1, 3, 3, 1))
    w = q8([1] * 9, (1, 3, 3, 1))
    acc, geo = T.conv_accumulate(x, w, [0], 1, "valid")
    assert acc.tolist() == [[45]]
    assert (geo.out_h, geo.out_w) == (1, 1)
    assert T.conv2d(x, w, [0]).data.item() == 45


def test_conv_real_matches_q8_structure():
    x = real(range(1, 10), (1, 3, 3, 1))
    w = real([1.0] * 9, (1, 3, 3, 1))
    assert T.conv2d(x, w, [0.5]).data.item() == 45.5


def test_conv_shape_error_names_dimensions():
    x = q8([0] * 8, (1, 2, 2, 2))
    w = q8([0] * 3, (1, 1, 1, 3))
    with pytest.raises(ShapeError) as exc:
        T.conv2d(x, w, [0, 0])
    assert set(exc.value.mismatches) == {"input_channels", "output_channels"}


def test_conv_valid_kernel_larger_than_input():
    x = q8([0] * 4, (1, 2, 2, 1))
    w = q8([0] * 9, (1, 3, 3, 1))
    with pytest.raises(ShapeError):
        T.conv2d(x, w, [0])


def test_same_padding_output_size():
    geo = T.conv_geometry(7, 5, 3, 3, 2, "same")
    assert (geo.out_h, geo.out_w) == (4, 3)
    assert (geo.pad_top, geo.pad_bottom) == (1, 1)


def test_accumulator_overflow_detected():
    x = q8([-128] * 9 * 400, (1, 3, 3, 400))
    w = q8([-128] * 9 * 400, (1, 3, 3, 400))
    with pytest.raises(OverflowError):
        T.conv2d(x, w, [2**31 - 100])


def test_conv_matches_naive_oracle_random_shapes():
    rng = random.Random(7)
    for _ in range(150):
        n, h, w, c = rng.randint(1, 2), rng.randint(1, 6), rng.randint(1, 6), rng.randint(1, 4)
        oc, kh, kw = rng.randint(1, 4), rng.randint(1, 3), rng.randint(1, 3)
        padding = rng.choice(["valid", "same"])
        if padding == "valid":
            h, w = max(h, kh), max(w, kw)
        stride = rng.randint(1, 3)
        x = oracles.random_q8(rng, (n, h, w, c))
        wt = oracles.random_q8(rng, (oc, kh, kw, c), zp=rng.randint(-3, 3))
        bias = [rng.randint(-300, 300) for _ in range(oc)]
        oq = QuantParams(rng.choice([0.01, 0.1, 1.0]), rng.randint(-5, 5))
        got = T.conv2d(x, wt, bias, stride, padding, oq)
        assert got == oracles.conv_q8(x, wt, bias, stride, padding, oq)


# -- pooling / upsampling / activation ----------------------------------------------

def test_maxpool_examples():
    x = q8([1, 2, 3, 4], (1, 2, 2, 1), 0.5, 1)
    y = T.maxpool2d(x, 2, 2)
    assert y.data.item() == 4 and y.quant == x.quant
    assert T.maxpool2d(x, 1, 1) == x
    const = q8([7] * 16, (1, 4, 4, 1))
    assert np.all(T.maxpool2d(const, 2, 2).data == 7)
    assert T.maxpool2d(const, 2, 2).shape == (1, 2, 2, 1)


def test_maxpool_window_too_large():
    with pytest.raises(ShapeError):
        T.maxpool2d(q8([0] * 4, (1, 2, 2, 1)), 3, 1)


def test_upsample_examples():
    x = q8([1, 2, 3, 4], (1, 2, 2, 1))
    assert T.upsample2d_nearest(x, 1) == x
    assert T.upsample2d_nearest(q8([9], (1, 1, 1, 1)), 2).data.reshape(-1).tolist() == [9] * 4
    y = T.upsample2d_nearest(x, 2).data[0, :, :, 0]
    assert y.tolist() == [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]]


def test_pool_and_upsample_match_oracle_random_shapes():
    rng = random.Random(11)
    for _ in range(120):
        shape = (rng.randint(1, 2), rng.randint(1, 7), rng.randint(1, 7), rng.randint(1, 4))
        x = oracles.random_q8(rng, shape)
        window = rng.randint(1, min(shape[1], shape[2]))
        stride = rng.randint(1, 3)
        assert T.maxpool2d(x, window, stride) == oracles.maxpool(x, window, stride)
        f = rng.randint(1, 3)
        assert T.upsample2d_nearest(x, f) == oracles.upsample(x, f)


def test_relu_real_and_q8():
    assert T.activation(real([-5.0], (1, 1, 1, 1)), "relu").data.item() == 0.0
    assert T.activation(real([7.0], (1, 1, 1, 1)), "relu").data.item() == 7.0
    y = T.activation(q8([-5, 2, 9], (1, 1, 3, 1), 0.1, 3), "relu")
    assert y.flat().tolist() == [3, 3, 9]


def test_sigmoid_of_zero_is_half():
    y = T.activation(q8([0], (1, 1, 1, 1), 0.1, 0), "sigmoid")
    assert y.quant == QuantParams(1 / 256, -128)
    assert y.data.item() == 0  # 0.5 * 256 - 128
    assert y.dequantize().item() == 0.5


def test_sigmoid_table_matches_oracle():
    for q in (QuantParams(0.1, 0), QuantParams(1 / 16, -5), QuantParams(0.5, 20)):
        x = q8(range(-128, 128), (1, 16, 16, 1), q.scale, q.zero_point)
        assert T.activation(x, "sigmoid") == oracles.sigmoid_q8(x)


def test_unknown_activation():
    with pytest.raises(ValueError):
        T.activation(real([0.0], (1, 1, 1, 1)), "tanh")


# -- metrics --------------------------------------------------------------------------

def test_cloud_coverage_examples():
    assert T.cloud_coverage(real([1.0] * 16, (1, 4, 4, 1))) == 100.0
    assert T.cloud_coverage(real([0.0] * 16, (1, 4, 4, 1))) == 0.0
    mask = np.zeros(1024)
    mask[:256] = 1
    assert T.cloud_coverage(real(mask, (1, 32, 32, 1))) == 25.0


def test_cloud_coverage_errors():
    with pytest.raises(ValueError):
        T.cloud_coverage(np.array([]))
    with pytest.raises(ValueError):
        T.cloud_coverage(real([0.5], (1, 1, 1, 1)))


@given(st.lists(st.sampled_from([0.0, 1.0]), min_size=1, max_size=64))
def test_cloud_coverage_in_range(bits):
    assert 0.0 <= T.cloud_coverage(real(bits, (1, 1, len(bits), 1))) <= 100.0


def test_binarize_threshold_inclusive():
    m = T.binarize(real([0.49, 0.5, 0.9], (1, 1, 3, 1)))
    assert m.flat().tolist() == [0.0, 1.0, 1.0]


def test_iou_examples():
    a = BoundingBox(0, 0, 2, 2)
    assert T.iou(a, a) == 1.0
    assert T.iou(a, BoundingBox(5, 5, 6, 6)) == 0.0
    assert T.iou(a, BoundingBox(1, 0, 3, 2)) == 1 / 3
    with pytest.raises(ValueError):
        T.iou(BoundingBox(1, 1, 1, 1), BoundingBox(2, 2, 2, 2))


boxes = st.builds(
    lambda x, y, w, h, s: BoundingBox(x, y, x + w, y + h, s),
    st.floats(0, 50), st.floats(0, 50), st.floats(0.1, 30), st.floats(0.1, 30), st.floats(0, 1),
)


@given(boxes, boxes)
def test_iou_symmetric_and_bounded(a, b):
    assert T.iou(a, b) == T.iou(b, a)
    assert 0.0 <= T.iou(a, b) <= 1.0


# -- detection decode --------------------------------------------------------------

def head_with(cells, gh=2, gw=2):
    """Real-valued head with objectness -10 everywhere except ``cells``."""
    vals = np.zeros((1, gh, gw, 5))
    vals[..., 4] = -10.0
    for (gy, gx), v in cells.items():
        vals[0, gy, gx] = v
    return Tensor(vals, REAL)


def test_decode_single_cell():
    head = head_with({(1, 0): (0.0, 0.0, 1.0, 0.5, 3.0)})
    out = T.decode_and_nms(head, 0.5, 0.5, cell_size=16.0)
    assert len(out) == 1
    b = out[0]
    assert (b.x_min, b.y_min, b.x_max, b.y_max) == (0.0, 20.0, 16.0, 28.0)
    assert b.score == pytest.approx(1 / (1 + np.exp(-3.0)))


def test_decode_nothing_above_threshold():
    assert T.decode_and_nms(head_with({}), 0.5, 0.5) == []


def test_decode_clamps_to_image():
    head = head_with({(0, 0): (0.0, 0.0, 10.0, 10.0, 5.0)}, 1, 1)
    b = T.decode_boxes(head, 0.5, 16.0)[0]
    assert (b.x_min, b.y_min, b.x_max, b.y_max) == (0.0, 0.0, 16.0, 16.0)


def test_decode_bad_channel_count():
    with pytest.raises(ShapeError):
        T.decode_and_nms(Tensor(np.zeros((1, 2, 2, 4)), REAL), 0.5, 0.5)


def test_nms_identical_boxes_keeps_best():
    a = BoundingBox(0, 0, 4, 4, 0.8)
    b = BoundingBox(0, 0, 4, 4, 0.9)
    assert T.nms([a, b], 0.5) == [b]


def test_nms_keeps_disjoint_and_orders_by_score():
    a = BoundingBox(0, 0, 4, 4, 0.6)
    b = BoundingBox(10, 10, 14, 14, 0.9)
    assert T.nms([a, b], 0.5) == [b, a]


@settings(max_examples=60)
@given(st.lists(boxes, max_size=12), st.floats(0.05, 0.95))
def test_nms_sorted_and_pairwise_below_threshold(bs, thr):
    kept = T.nms(bs, thr)
    assert [k.score for k in kept] == sorted((k.score for k in kept), reverse=True)
    for i, a in enumerate(kept):
        for b in kept[i + 1:]:
            assert T.iou(a, b) <= thr


@settings(max_examples=40)
@given(st.integers(0, 2**32 - 1), st.floats(0.1, 0.9), st.floats(0.1, 0.9))
def test_decode_and_nms_properties_on_random_heads(seed, score_thr, iou_thr):
    rng = np.random.default_rng(seed)
    head = Tensor(rng.integers(-128, 128, size=(1, 4, 4, 5)), Q8, QuantParams(1 / 16))
    kept = T.decode_and_nms(head, score_thr, iou_thr)
    assert all(k.score > score_thr for k in kept)
    assert [k.score for k in kept] == sorted((k.score for k in kept), reverse=True)
    for i, a in enumerate(kept):
        for b in kept[i + 1:]:
            if a.area + b.area > 0:
                assert T.iou(a, b) <= iou_thr

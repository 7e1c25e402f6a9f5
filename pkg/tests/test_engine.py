import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import reference
from nsexplain.engine import (
    FilterOverlay,
    activations_at,
    build_model,
    conv2d,
    forward,
    forward_batch,
    hadamard,
    layer_forward,
    minmax_norm,
    predict_prob,
    probabilities,
    upsample_bilinear,
)
from nsexplain.errors import ShapeError, UnknownLayerError
from nsexplain.fixtures import planted_image

finite = st.floats(-1e3, 1e3, allow_nan=False, width=32)


# --- conv2d -----------------------------------------------------------------


def test_conv2d_hand_example():
    x = np.array([[[1, 2], [3, 4]]], dtype=np.float32)
    k = np.array([[[[1, 0], [0, 1]]]], dtype=np.float32)
    out = conv2d(x, k, np.zeros(1), stride=1, pad=0)
    assert out.shape == (1, 1, 1)
    assert out[0, 0, 0] == reference.conv2d(x, k, [0.0], 1, 0)[0, 0, 0] == 5.0


def test_conv2d_zero_weights_gives_bias(rng):
    x = rng.normal(size=(3, 7, 6)).astype(np.float32)
    out = conv2d(x, np.zeros((4, 3, 3, 3)), np.array([1.5, -2.0, 0.0, 3.25]), stride=2, pad=1)
    for o, b in enumerate([1.5, -2.0, 0.0, 3.25]):
        assert np.all(out[o] == np.float32(b))


def test_conv2d_identity_kernel(rng):
    x = rng.normal(size=(1, 5, 4)).astype(np.float32)
    np.testing.assert_array_equal(conv2d(x, np.ones((1, 1, 1, 1)), np.zeros(1)), x)


@pytest.mark.parametrize("stride,pad,kh,kw", [(1, 0, 3, 3), (2, 1, 3, 2), (3, 2, 2, 4), (1, 1, 1, 1)])
def test_conv2d_matches_naive(rng, stride, pad, kh, kw):
    x = rng.normal(size=(2, 7, 9)).astype(np.float32)
    w = rng.normal(size=(3, 2, kh, kw)).astype(np.float32)
    b = rng.normal(size=3).astype(np.float32)
    got = conv2d(x, w, b, stride, pad)
    want = reference.conv2d(x, w, b, stride, pad)
    assert got.shape == want.shape == (3, (7 + 2 * pad - kh) // stride + 1, (9 + 2 * pad - kw) // stride + 1)
    np.testing.assert_allclose(got, want, atol=1e-5)


def test_conv2d_shape_errors():
    x = np.zeros((2, 4, 4), dtype=np.float32)
    with pytest.raises(ShapeError, match="in_channels"):
        conv2d(x, np.zeros((1, 3, 2, 2)), np.zeros(1))
    with pytest.raises(ShapeError, match="bias"):
        conv2d(x, np.zeros((1, 2, 2, 2)), np.zeros(2))
    with pytest.raises(ShapeError, match="kernel_h"):
        conv2d(x, np.zeros((1, 2, 5, 2)), np.zeros(1))


# --- other layers -------------------------------------------------------------


def test_relu():
    np.testing.assert_array_equal(layer_forward("relu", [-1.0, 0.0, 2.0]), [0, 0, 2])


def test_maxpool():
    out = layer_forward("maxpool2d", [[[1.0, 2.0], [3.0, 4.0]]], {"window": 2, "stride": 2})
    np.testing.assert_array_equal(out, [[[4.0]]])


def test_softmax_symmetric():
    np.testing.assert_allclose(layer_forward("softmax", [0.0, 0.0]), [0.5, 0.5])


def test_softmax_empty_rejected():
    with pytest.raises(ShapeError):
        layer_forward("softmax", np.zeros(0))


def test_layer_dimension_mismatch():
    with pytest.raises(ShapeError):
        layer_forward("maxpool2d", [1.0, 2.0], {"window": 2})
    with pytest.raises(ShapeError, match="in_features"):
        layer_forward("dense", np.ones(3), {"in_features": 4, "out_features": 2}, {"weight": np.ones((2, 4)), "bias": np.zeros(2)})


@settings(max_examples=60, deadline=None)
@given(arrays(np.float32, st.integers(1, 12), elements=st.floats(-1e4, 1e4, width=32)))
def test_softmax_is_probability_vector(z):
    p = layer_forward("softmax", z)
    assert np.all(p >= 0)
    assert abs(float(np.sum(p, dtype=np.float64)) - 1.0) <= 1e-6


# --- whole-model forward ------------------------------------------------------


def _fixture_inputs(model, n, seed=0):
    r = np.random.default_rng(seed)
    return [r.uniform(0, 1, size=model.input_dims).astype(np.float32) for _ in range(n)]


def test_forward_matches_naive_tiny(tiny):
    for x in _fixture_inputs(tiny, 3):
        want = reference.run(tiny, x)
        np.testing.assert_allclose(forward(tiny, x), want[-1], atol=1e-5)
        for spec, ref_out in zip(tiny.layers, want):
            np.testing.assert_allclose(activations_at(tiny, x, spec.id), ref_out, atol=1e-5)


def test_forward_matches_naive_planted(planted, planted_img):
    want = reference.run(planted, planted_img)
    np.testing.assert_allclose(forward(planted, planted_img), want[-1], atol=1e-5)
    np.testing.assert_allclose(activations_at(planted, planted_img, "relu2"), want[4], atol=1e-5)


def test_activations_last_layer_is_forward(tiny):
    x = _fixture_inputs(tiny, 1)[0]
    np.testing.assert_array_equal(activations_at(tiny, x, tiny.layers[-1].id), forward(tiny, x))


def test_forward_is_deterministic(planted, planted_img):
    a = activations_at(planted, planted_img, "conv2")
    b = activations_at(planted, planted_img, "conv2")
    assert a.tobytes() == b.tobytes()


def test_forward_rejects_bad_input(tiny):
    with pytest.raises(ShapeError, match="input dims"):
        forward(tiny, np.zeros((1, 9, 8)))
    with pytest.raises(UnknownLayerError):
        activations_at(tiny, np.zeros(tiny.input_dims), "nope")


def test_forward_batch_matches_single(tiny):
    xs = np.stack(_fixture_inputs(tiny, 5))
    batched = forward_batch(tiny, xs, chunk=2)
    for x, row in zip(xs, batched):
        np.testing.assert_allclose(row, forward(tiny, x), atol=1e-6)


# --- overlays -----------------------------------------------------------------


def test_empty_overlay_bit_exact(planted, planted_img):
    plain = forward(planted, planted_img)
    assert forward(planted, planted_img, FilterOverlay("conv2")).tobytes() == plain.tobytes()


@pytest.mark.parametrize("layer,channels", [("conv2", {0}), ("conv2", {1, 4, 5}), ("conv1", {0, 3}), ("conv2", set(range(6)))])
def test_overlay_equals_literal_zeroing(planted, planted_img, layer, channels):
    overlay = FilterOverlay(layer, frozenset(channels))
    np.testing.assert_array_equal(forward(planted, planted_img, overlay), forward(planted.zeroed(overlay), planted_img))


def test_overlay_all_channels_matches_zero_activations(planted, planted_img):
    # build the "activations are all zero at conv2" case by hand
    from nsexplain.engine import run_layers

    idx = planted.layer_index("conv2")
    zeros = np.zeros((1,) + planted.output_dims("conv2"), dtype=np.float32)
    want = run_layers(planted, zeros, start=idx + 1)[0]
    got = forward(planted, planted_img, FilterOverlay("conv2", frozenset(range(6))))
    np.testing.assert_array_equal(got, want)


def test_overlay_errors(planted, planted_img):
    with pytest.raises(UnknownLayerError):
        forward(planted, planted_img, FilterOverlay("conv9", frozenset({0})))
    with pytest.raises(UnknownLayerError, match="not conv2d"):
        forward(planted, planted_img, FilterOverlay("relu2", frozenset({0})))
    with pytest.raises(ShapeError, match="out of range"):
        forward(planted, planted_img, FilterOverlay("conv2", frozenset({6})))


# --- predict_prob -------------------------------------------------------------


def test_predict_prob_equal_logits():
    model = build_model(
        [("flat", "flatten", {}), ("d", "dense", {"in_features": 4, "out_features": 2})],
        {"d": {"weight": np.zeros((2, 4)), "bias": np.zeros(2)}},
        (1, 2, 2),
        2,
    )
    x = np.ones((1, 2, 2), dtype=np.float32)
    assert predict_prob(model, x, 0) == predict_prob(model, x, 1) == 0.5


def test_predict_prob_matches_reference(tiny):
    x = _fixture_inputs(tiny, 1)[0]
    ref = reference.softmax(list(reference.run(tiny, x)[-1]))
    probs = [predict_prob(tiny, x, c) for c in range(tiny.class_count)]
    np.testing.assert_allclose(probs, ref, atol=1e-6)
    assert abs(sum(probs) - 1.0) <= 1e-6


def test_predict_prob_class_range(tiny):
    with pytest.raises(ShapeError, match="out of range"):
        predict_prob(tiny, np.zeros(tiny.input_dims), 3)


def test_model_ending_in_softmax_not_double_applied():
    model = build_model(
        [("flat", "flatten", {}), ("d", "dense", {"in_features": 1, "out_features": 2}), ("sm", "softmax", {})],
        {"d": {"weight": [[2.0], [0.0]], "bias": [0.0, 0.0]}},
        (1, 1, 1),
        2,
    )
    x = np.ones((1, 1, 1), dtype=np.float32)
    expected = reference.softmax([2.0, 0.0])[0]
    assert predict_prob(model, x, 0) == pytest.approx(expected, abs=1e-6)
    np.testing.assert_allclose(probabilities(model, forward(model, x)), reference.softmax([2.0, 0.0]), atol=1e-6)


def test_model_weights_are_immutable(planted):
    with pytest.raises(ValueError):
        planted.weights["conv1"]["weight"][0, 0, 0, 0] = 1.0
    with pytest.raises(TypeError):
        planted.weights["conv1"] = {}


def test_model_shape_validation():
    with pytest.raises(ShapeError, match="class_count"):
        build_model([("flat", "flatten", {})], {}, (1, 2, 2), 3)
    with pytest.raises(ShapeError, match="weight dims"):
        build_model(
            [("c", "conv2d", dict(out_channels=1, in_channels=1, kernel_h=1, kernel_w=1)), ("f", "flatten", {})],
            {"c": {"weight": np.ones((1, 1, 2, 2)), "bias": np.zeros(1)}},
            (1, 1, 1),
            1,
        )
    with pytest.raises(ShapeError, match="unsupported"):
        build_model([("c", "conv3d", {})], {}, (1, 1, 1), 1)


# --- map primitives -----------------------------------------------------------


def test_upsample_hand_example():
    out = upsample_bilinear(np.array([[0.0, 1.0], [0.0, 1.0]]), 2, 4)
    np.testing.assert_allclose(out, [[0, 1 / 3, 2 / 3, 1]] * 2, atol=1e-7)


def test_upsample_constant_and_identity(rng):
    np.testing.assert_array_equal(upsample_bilinear(np.full((3, 5), 0.7, np.float32), 9, 11), np.full((9, 11), 0.7, np.float32))
    src = rng.normal(size=(6, 7)).astype(np.float32)
    np.testing.assert_array_equal(upsample_bilinear(src, 6, 7), src)


def test_upsample_corners_align(rng):
    src = rng.normal(size=(4, 5))
    out = upsample_bilinear(src, 13, 17)
    for (i, j), (u, v) in zip([(0, 0), (0, -1), (-1, 0), (-1, -1)], [(0, 0), (0, -1), (-1, 0), (-1, -1)]):
        assert out[i, j] == src[u, v]


@settings(max_examples=60, deadline=None)
@given(
    arrays(np.float32, st.tuples(st.integers(1, 6), st.integers(1, 6)), elements=finite),
    st.integers(1, 20),
    st.integers(1, 20),
)
def test_upsample_bounded_by_source(src, th, tw):
    out = upsample_bilinear(src, th, tw)
    assert out.shape == (th, tw)
    assert out.min() >= src.min() and out.max() <= src.max()


def test_minmax_norm_examples():
    np.testing.assert_allclose(minmax_norm(np.array([2.0, 4.0, 6.0])), [0, 0.5, 1])
    np.testing.assert_array_equal(minmax_norm(np.full((3, 3), 5.0)), np.zeros((3, 3)))


@settings(max_examples=80, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 8), st.integers(1, 8)), elements=finite))
def test_minmax_norm_range_and_idempotence(x):
    y = minmax_norm(x)
    assert y.min() >= 0 and y.max() <= 1
    if x.max() > x.min():
        np.testing.assert_array_equal(minmax_norm(y), y)


def test_hadamard(rng):
    a = rng.normal(size=(3, 4, 5)).astype(np.float32)
    np.testing.assert_array_equal(hadamard(a, np.ones((4, 5), np.float32)), a)
    np.testing.assert_array_equal(hadamard(a, np.zeros_like(a)), np.zeros_like(a))
    with pytest.raises(ShapeError):
        hadamard(a, np.ones((5, 4)))


@settings(max_examples=60, deadline=None)
@given(arrays(np.float32, (8, 8), elements=st.floats(0, 1, width=32)))
def test_hadamard_partition_of_unity(mask):
    img = planted_image(3)[:, :8, :8]
    np.testing.assert_array_equal(mask + (np.float32(1) - mask), np.ones_like(mask))
    np.testing.assert_allclose(hadamard(img, mask) + hadamard(img, np.float32(1) - mask), img, atol=1e-7)

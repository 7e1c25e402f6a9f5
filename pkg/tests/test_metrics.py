import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from nsexplain.engine import build_model, predict_prob
from nsexplain.errors import ConfigError, ShapeError
from nsexplain.fixtures import PATCH_BBOX, planted_image
from nsexplain.metrics import (
    BBox,
    Curve,
    EvalReport,
    ImageRecord,
    attack_flip,
    attack_score,
    attack_summary,
    auc,
    deletion_insertion,
    energy_pointing,
    gaussian_blur,
    map_size,
    ns_quantification,
    ns_scores,
    pixel_order,
    randomize_layer,
    rank_similarity,
    sanity_check,
)


def constant_model(shape=(3, 6, 6)):
    n = int(np.prod(shape))
    return build_model(
        [("flat", "flatten", {}), ("fc", "dense", {"in_features": n, "out_features": 2})],
        {"fc": {"weight": np.zeros((2, n)), "bias": [0.0, math.log(3.0)]}},
        shape,
        2,
    )


def threshold_model():
    """One pixel; class 1 wins iff the pixel exceeds 0.5."""
    return build_model(
        [("flat", "flatten", {}), ("fc", "dense", {"in_features": 1, "out_features": 2})],
        {"fc": {"weight": [[-10.0], [10.0]], "bias": [5.0, -5.0]}},
        (1, 1, 1),
        2,
    )


# --- AUC ------------------------------------------------------------------------


def test_auc_closed_forms():
    f = np.linspace(0, 1, 101)
    assert abs(auc(Curve(f, np.full(101, 0.5))) - 0.5) <= 1e-9
    assert abs(auc(Curve(f, f)) - 0.5) <= 1e-9
    assert auc(Curve([0.0, 1.0], [1.0, 0.0])) == 0.5


def test_curve_validation():
    with pytest.raises(ShapeError):
        Curve([0.0, 0.5], [1.0, 1.0])
    with pytest.raises(ShapeError):
        Curve([0.0, 0.5, 0.5, 1.0], [1.0] * 4)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(2, 30), elements=st.floats(0, 1)))
def test_auc_bounded_by_curve(probs):
    f = np.linspace(0, 1, probs.size)
    assert probs.min() - 1e-12 <= auc(Curve(f, probs)) <= probs.max() + 1e-12


# --- deletion / insertion -------------------------------------------------------


def test_deletion_insertion_constant_model():
    model = constant_model()
    img = np.random.default_rng(0).uniform(size=(3, 6, 6)).astype(np.float32)
    d, i = deletion_insertion(model, img, 1, np.random.default_rng(1).uniform(size=(6, 6)), steps=10)
    assert d.fractions[0] == 0 and d.fractions[-1] == 1
    assert auc(d) == pytest.approx(0.75, abs=1e-6) and auc(i) == pytest.approx(0.75, abs=1e-6)


def test_deletion_step_count_and_endpoints(planted, planted_img):
    grid = np.random.default_rng(0).uniform(size=(32, 32))
    d, i = deletion_insertion(planted, planted_img, 1, grid, steps=100)
    # 1024 pixels, 11 per step -> 94 steps
    assert d.fractions.size == math.ceil(1024 / 11) + 1
    assert d.probs[0] == pytest.approx(predict_prob(planted, planted_img, 1), abs=1e-6)
    assert i.probs[-1] == pytest.approx(predict_prob(planted, planted_img, 1), abs=1e-6)
    assert d.probs[-1] == pytest.approx(predict_prob(planted, np.zeros_like(planted_img), 1), abs=1e-6)


def test_true_region_deletes_fast(planted, planted_img):
    x0, y0, x1, y1 = PATCH_BBOX
    grid = np.zeros((32, 32))
    grid[y0:y1, x0:x1] = 1.0
    d, i = deletion_insertion(planted, planted_img, 1, grid)
    assert auc(d) < 0.2 < 0.8 < auc(i)


def test_pixel_order_ties_row_major():
    np.testing.assert_array_equal(pixel_order(np.zeros((2, 3))), np.arange(6))
    np.testing.assert_array_equal(pixel_order([[0.0, 1.0], [1.0, 0.5]]), [1, 2, 3, 0])


def test_tied_map_has_no_nan(planted, planted_img):
    d, i = deletion_insertion(planted, planted_img, 1, np.full((32, 32), 0.3))
    assert np.all(np.isfinite(d.probs)) and np.all(np.isfinite(i.probs))


def test_blur_preserves_constant_and_shape():
    img = np.full((2, 9, 7), 0.4, dtype=np.float32)
    np.testing.assert_allclose(gaussian_blur(img), img, atol=1e-6)


def test_deletion_rejects_bad_inputs(planted, planted_img):
    with pytest.raises(ShapeError):
        deletion_insertion(planted, planted_img, 1, np.zeros((16, 16)))
    with pytest.raises(ConfigError):
        deletion_insertion(planted, planted_img, 1, np.zeros((32, 32)), steps=0)


# --- N/S quantification ---------------------------------------------------------


def test_ns_scores_hand_example():
    assert ns_scores(0.8, 0.2, 0.4, 0.5) == (1.5, 1.0)


def test_ns_quantification_all_ones_map(planted, planted_img):
    n, s, size, warns = ns_quantification(planted, planted_img, 1, np.ones((32, 32)))
    p = predict_prob(planted, planted_img, 1)
    p0 = predict_prob(planted, np.zeros_like(planted_img), 1)
    assert size == 1.0 and warns == []
    assert s == pytest.approx(1.0, abs=1e-6)
    assert n == pytest.approx((p - p0) / p, abs=1e-6)


def test_ns_quantification_zero_map_warns(planted, planted_img):
    n, s, size, warns = ns_quantification(planted, planted_img, 1, np.zeros((32, 32)))
    assert (n, s, size) == (None, None, 0.0) and warns


def test_map_size():
    assert map_size(np.array([[0.0, 0.2], [0.0, 1.0]])) == 0.5


# --- attack ---------------------------------------------------------------------


def test_attack_summary_closed_form():
    assert attack_summary([1, 1], [0.5, 0.5]) == (1.0, 0.5, 2.0)


def test_attack_flip_hand_example():
    model = threshold_model()
    img = np.full((1, 1, 1), 0.49, dtype=np.float32)
    noise = np.full((1, 1, 1), 0.1)
    assert attack_flip(model, img, np.ones((1, 1)), noise) == 1
    assert attack_flip(model, img, np.zeros((1, 1)), noise) == 0
    assert attack_flip(model, img, np.ones((1, 1)), -noise) == 0


def test_attack_score_seeded(planted):
    imgs = [planted_image(s) for s in range(3)]
    maps = [np.ones((32, 32))] * 3
    a = attack_score(planted, imgs, maps, sigma=0.1, seed=4)
    assert a == attack_score(planted, imgs, maps, sigma=0.1, seed=4)
    assert a[1] == 1.0
    with pytest.raises(ConfigError):
        attack_score(planted, [], [])


# --- pointing -------------------------------------------------------------------


def test_energy_pointing_examples():
    box = BBox(0, 0, 2, 2)
    grid = np.zeros((4, 4))
    grid[:2, :2] = 1.0
    assert energy_pointing(grid, box) == (1.0, [])
    assert energy_pointing(np.ones((4, 4)), box)[0] == 0.25
    prop, warns = energy_pointing(np.zeros((4, 4)), box)
    assert prop is None and warns
    with pytest.raises(ShapeError):
        energy_pointing(grid, BBox(0, 0, 5, 2))


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (5, 5), elements=st.floats(0, 1)), st.floats(0.1, 10))
def test_energy_pointing_scale_invariant(grid, scale):
    box = BBox(1, 1, 4, 3)
    a, _ = energy_pointing(grid, box)
    b, _ = energy_pointing(grid * scale, box)
    if a is None:
        assert b is None
    else:
        assert 0 <= a <= 1 + 1e-12 and b == pytest.approx(a, abs=1e-9)


# --- sanity ---------------------------------------------------------------------


def test_rank_similarity():
    a = np.arange(9.0).reshape(3, 3)
    assert rank_similarity(a, a) == pytest.approx(1.0)
    assert rank_similarity(a, -a) == pytest.approx(-1.0)
    assert rank_similarity(a, np.ones((3, 3))) is None


def test_randomize_layer_touches_one_layer(planted):
    out = randomize_layer(planted, "conv2", np.random.default_rng(0), 0.05)
    np.testing.assert_array_equal(out.weights["conv1"]["weight"], planted.weights["conv1"]["weight"])
    assert not np.array_equal(out.weights["conv2"]["weight"], planted.weights["conv2"]["weight"])
    assert not np.array_equal(out.weights["conv2"]["bias"], planted.weights["conv2"]["bias"])
    assert abs(float(out.weights["conv2"]["weight"].std()) - 0.05) < 0.01


def test_sanity_trace_order(planted, planted_img):
    seen = []

    def explain_fn(model, img):
        seen.append(model)
        g = np.resize(model.weights["fc"]["weight"][1].astype(np.float64), (32, 32))
        return g, g

    trace = sanity_check(planted, explain_fn, planted_img, seed=0)
    assert [t.stage for t in trace] == ["original", "fc", "conv2", "conv1"]
    assert trace[0].mean_similarity == 1.0
    assert len(seen) == 4


# --- report aggregation ---------------------------------------------------------


def test_eval_report_aggregates():
    recs = [
        ImageRecord("a", deletion_auc=0.2, insertion_auc=0.6, overall=0.4, attack_flip=1, map_size=0.5),
        ImageRecord("b", deletion_auc=0.4, insertion_auc=0.8, overall=0.4, attack_flip=1, map_size=0.5),
        ImageRecord("c", error="broken"),
    ]
    agg = EvalReport(recs).aggregates()
    assert agg["mean_deletion_auc"] == pytest.approx(0.3)
    assert agg["attack_score"] == 2.0
    assert agg["failed"] == 1 and agg["images"] == 3
    assert agg["mean_proportion"] is None

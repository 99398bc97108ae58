import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from adele.grid import (
    ShapeMismatchError, argmax_labels, average_probmaps, check_probmap, output_size,
    renormalize, resample, resize,
)


def random_probmap(rng, h, w, k):
    p = rng.random((h, w, k)) + 1e-3
    return p / p.sum(axis=-1, keepdims=True)


def test_average_of_identical_maps_is_the_map():
    p = random_probmap(np.random.default_rng(0), 5, 4, 3)
    np.testing.assert_allclose(average_probmaps([p, p, p]), p, rtol=1e-15, atol=0)


def test_average_of_opposite_one_hots():
    a = np.zeros((1, 1, 2)); a[..., 0] = 1
    b = np.zeros((1, 1, 2)); b[..., 1] = 1
    np.testing.assert_allclose(average_probmaps([a, b])[0, 0], [0.5, 0.5])


def test_average_matches_scalar_mean_and_keeps_simplex():
    rng = np.random.default_rng(1)
    maps = [random_probmap(rng, 6, 5, 4) for _ in range(3)]
    out = average_probmaps(maps)
    for y in range(6):
        for x in range(5):
            for c in range(4):
                assert out[y, x, c] == pytest.approx(sum(m[y, x, c] for m in maps) / 3, abs=1e-15)
    np.testing.assert_allclose(out.sum(-1), 1.0, atol=1e-6)
    check_probmap(out)


def test_average_shape_mismatch_names_index():
    a = np.full((2, 2, 2), 0.5)
    with pytest.raises(ShapeMismatchError, match="map 2"):
        average_probmaps([a, a, np.full((2, 3, 2), 0.5)])


def test_argmax_basic_and_ties():
    p = np.array([[[0.1, 0.9], [0.5, 0.5]]])
    np.testing.assert_array_equal(argmax_labels(p), [[1, 0]])


def test_argmax_matches_exhaustive_scan():
    p = random_probmap(np.random.default_rng(2), 8, 8, 3)
    out = argmax_labels(p)
    for y in range(8):
        for x in range(8):
            best = 0
            for c in range(1, 3):
                if p[y, x, c] > p[y, x, best]:
                    best = c
            assert out[y, x] == best


def test_argmax_of_single_average_unchanged():
    p = random_probmap(np.random.default_rng(3), 4, 4, 5)
    np.testing.assert_array_equal(argmax_labels(average_probmaps([p])), argmax_labels(p))


@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=3, max_dims=3, max_side=6),
                  elements=st.floats(-5, 5)))
def test_resample_identity_is_bit_exact(g):
    out = resample(g, 1.0)
    assert out.dtype == g.dtype
    np.testing.assert_array_equal(out, g)


@given(st.floats(0.1, 3.0), st.floats(-3, 3), st.integers(1, 9), st.integers(1, 9))
def test_resample_constant_grid_stays_constant(scale, value, h, w):
    g = np.full((h, w, 2), value)
    out = resample(g, scale)
    assert out.shape == (output_size(h, scale), output_size(w, scale), 2)
    np.testing.assert_allclose(out, value, rtol=1e-12, atol=1e-12)
    np.testing.assert_array_equal(resample(g, scale, "nearest"), np.full(out.shape, value))


def _bilinear_reference(g, scale):
    # edge-clamped bilinear written out per output pixel
    h, w = g.shape[:2]
    ho, wo = output_size(h, scale), output_size(w, scale)
    out = np.zeros((ho, wo) + g.shape[2:])
    for oy in range(ho):
        sy = min(max((oy + 0.5) / scale - 0.5, 0.0), h - 1)
        y0 = int(np.floor(sy)); y1 = min(y0 + 1, h - 1); wy = sy - y0
        for ox in range(wo):
            sx = min(max((ox + 0.5) / scale - 0.5, 0.0), w - 1)
            x0 = int(np.floor(sx)); x1 = min(x0 + 1, w - 1); wx = sx - x0
            out[oy, ox] = ((1 - wy) * (1 - wx) * g[y0, x0] + (1 - wy) * wx * g[y0, x1]
                           + wy * (1 - wx) * g[y1, x0] + wy * wx * g[y1, x1])
    return out


def test_bilinear_upscale_2x2_by_two():
    g = np.array([[0.0, 1.0], [0.0, 1.0]])[:, :, None]
    out = resample(g, 2.0)[:, :, 0]
    # source columns for outputs 0..3: clamp(-0.25)=0, 0.25, 0.75, clamp(1.25)=1
    expected_row = [0.0, 0.25, 0.75, 1.0]
    np.testing.assert_allclose(out, [expected_row] * 4, atol=1e-15)
    np.testing.assert_allclose(out, _bilinear_reference(g, 2.0)[:, :, 0], atol=1e-15)


@pytest.mark.parametrize("scale", [0.5, 0.7, 1.3, 1.5, 2.5])
def test_bilinear_matches_reference_formula(scale):
    g = np.random.default_rng(4).standard_normal((7, 5, 3))
    np.testing.assert_allclose(resample(g, scale), _bilinear_reference(g, scale), atol=1e-12)


def test_output_dimensions_round_half_up():
    assert output_size(64, 0.7) == 45
    assert output_size(64, 1.5) == 96
    assert output_size(5, 0.5) == 3     # 2.5 rounds up
    assert output_size(1, 0.1) == 1


@pytest.mark.parametrize("bad", [0.0, -1.0])
def test_resample_rejects_non_positive_scale(bad):
    with pytest.raises(ValueError):
        resample(np.zeros((2, 2, 1)), bad)


def test_nearest_resample_of_labels_keeps_ids():
    lab = np.random.default_rng(5).integers(0, 4, (9, 9))
    out = resample(lab, 1.7, "nearest")
    assert set(np.unique(out)) <= set(np.unique(lab))
    assert out.shape == (15, 15)


def test_renormalize():
    p = random_probmap(np.random.default_rng(6), 3, 3, 4)
    np.testing.assert_allclose(renormalize(p), p, atol=1e-6)
    np.testing.assert_allclose(renormalize(np.full((1, 1, 2), 2.0))[0, 0], [0.5, 0.5])
    with pytest.raises(ValueError, match="all-zero"):
        renormalize(np.zeros((2, 2, 3)))


@settings(max_examples=30)
@given(st.integers(0, 2**31), st.floats(0.3, 2.5))
def test_resampled_probmap_renormalizes_exactly(seed, scale):
    p = random_probmap(np.random.default_rng(seed), 6, 7, 3)
    out = renormalize(resample(p, scale))
    np.testing.assert_allclose(out.sum(-1), 1.0, atol=1e-9)
    check_probmap(out)


def test_resize_hits_exact_target():
    g = np.random.default_rng(7).random((45, 45, 2))
    assert resize(g, (64, 64)).shape == (64, 64, 2)

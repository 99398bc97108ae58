import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from adele.consistency import (
    ConsistencyConfig, ScaledView, check_scales, consistency_grad, consistency_grad_probs,
    consistency_loss, gate_mask, multiscale_forward, softmax, softmax_backward,
)


def kl_oracle(ps, q, rho):
    """Plain loops with the 0 ln 0 = 0 convention and the 1e-8 log floor."""
    total, gated = 0.0, 0
    h, w, k = q.shape
    for y in range(h):
        for x in range(w):
            if max(q[y, x]) < rho:
                continue
            gated += 1
            for p in ps:
                for c in range(k):
                    if p[y, x, c] > 0:
                        total += p[y, x, c] * (math.log(max(p[y, x, c], 1e-8)) - math.log(max(q[y, x, c], 1e-8)))
    return 0.0 if gated == 0 else total / (len(ps) * gated)


def random_logits(rng, shape, spread=3.0):
    return rng.standard_normal(shape) * spread


def test_hand_derived_instance():
    ps = [np.array([[[1.0, 0.0]]]), np.array([[[0.0, 1.0]]]), np.array([[[0.5, 0.5]]])]
    loss, mask = consistency_loss(ps, None, rho=0.5)
    assert mask.sum() == 1
    assert abs(loss - 2 * math.log(2) / 3) <= 1e-9


def test_identical_predictions_give_zero_loss_and_gradient():
    p = softmax(random_logits(np.random.default_rng(0), (3, 3, 4)))
    loss, _ = consistency_loss([p, p, p], None, 0.0)
    assert abs(loss) < 1e-15
    for g in consistency_grad([np.log(p)] * 3, 0.0):
        assert np.max(np.abs(g)) < 1e-12


def test_nothing_gated_gives_zero():
    p = np.full((2, 2, 2), 0.5)
    loss, mask = consistency_loss([p, p], None, rho=0.8)
    assert loss == 0.0 and not mask.any()


@settings(max_examples=500, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 3), st.floats(0.0, 1.0))
def test_loss_non_negative_and_matches_oracle(seed, s, rho):
    rng = np.random.default_rng(seed)
    ps = [softmax(random_logits(rng, (3, 2, 3))) for _ in range(s)]
    q = sum(ps) / s
    loss, _ = consistency_loss(ps, None, rho)
    assert loss >= 0.0
    assert loss == pytest.approx(kl_oracle(ps, q, rho), rel=1e-9, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_zero_iff_agreement_on_gated_pixels(seed):
    rng = np.random.default_rng(seed)
    base = softmax(random_logits(rng, (2, 2, 3), 4.0))
    other = base.copy()
    # disagreement only on a pixel that is not gated
    other[0, 0] = base[0, 0][::-1]
    q = (base + other) / 2
    rho = float(q[0, 0].max()) + 1e-6
    gated = gate_mask(q, rho)
    loss, _ = consistency_loss([base, other], None, rho)
    if not gated[0, 0]:
        assert loss == pytest.approx(0.0, abs=1e-12)
    if not np.allclose(base[0, 0], other[0, 0]):
        loss_all, _ = consistency_loss([base, other], None, 0.0)
        assert loss_all > 0.0


def test_scale_order_does_not_matter():
    rng = np.random.default_rng(4)
    ps = [softmax(random_logits(rng, (3, 3, 4))) for _ in range(3)]
    a, _ = consistency_loss(ps, None, 0.3)
    b, _ = consistency_loss(ps[::-1], None, 0.3)
    assert a == pytest.approx(b, rel=1e-14)


@given(st.integers(0, 2**32 - 1), st.floats(0, 1), st.floats(0, 1))
def test_gate_monotone_in_rho(seed, r1, r2):
    q = softmax(random_logits(np.random.default_rng(seed), (4, 4, 3)))
    lo, hi = sorted((r1, r2))
    assert np.all(gate_mask(q, hi) <= gate_mask(q, lo))
    assert np.all(gate_mask(q, hi, "image") <= gate_mask(q, lo, "image"))


def _loss_of_logits(zs, rho, gate="pixel", mask=None):
    ps = [softmax(z) for z in zs]
    q = sum(ps) / len(ps)
    if mask is None:
        return consistency_loss(ps, q, rho, gate)[0]
    # frozen gate: evaluate the same formula on a fixed pixel set
    n = mask.sum()
    lq = np.log(np.maximum(q, 1e-8))
    tot = sum((p * (np.log(np.maximum(p, 1e-8)) - lq)).sum(-1)[mask].sum() for p in ps)
    return tot / (len(ps) * n)


def _fd_check(zs, rho, gate="pixel", h=1e-6, rtol=1e-4):
    grads = consistency_grad(zs, rho, gate)
    ps = [softmax(z) for z in zs]
    mask = gate_mask(sum(ps) / len(ps), rho, gate)
    if not mask.any():
        for g in grads:
            assert np.all(g == 0)
        return
    for k, z in enumerate(zs):
        for idx in np.ndindex(z.shape):
            zp = [v.copy() for v in zs]
            zm = [v.copy() for v in zs]
            zp[k][idx] += h
            zm[k][idx] -= h
            fd = (_loss_of_logits(zp, rho, gate, mask) - _loss_of_logits(zm, rho, gate, mask)) / (2 * h)
            an = grads[k][idx]
            assert abs(an - fd) <= rtol * max(abs(fd), abs(an), 1e-4), (k, idx, an, fd)


def test_gradient_two_pixel_k3_instance():
    rng = np.random.default_rng(7)
    _fd_check([random_logits(rng, (1, 2, 3), 1.0) for _ in range(3)], 0.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 3), st.integers(1, 4), st.integers(1, 4),
       st.integers(2, 4), st.sampled_from(["pixel", "image"]))
def test_gradient_matches_finite_differences(seed, s, h, w, k, gate):
    rng = np.random.default_rng(seed)
    zs = [random_logits(rng, (h, w, k), 2.0) for _ in range(s)]
    q = sum(softmax(z) for z in zs) / s
    # put rho between two pixel confidences so the gate splits the grid,
    # keeping clear of the boundary so finite steps never flip it
    conf = np.sort(q.max(-1).ravel())
    gaps = np.diff(conf)
    if len(conf) > 1 and gaps.max() > 1e-3:
        i = int(np.argmax(gaps))
        rho = float((conf[i] + conf[i + 1]) / 2)
    else:
        rho = 0.0
    _fd_check(zs, rho, gate)


def test_ungated_pixels_get_exactly_zero_gradient():
    rng = np.random.default_rng(9)
    zs = [random_logits(rng, (3, 3, 3)) for _ in range(3)]
    q = sum(softmax(z) for z in zs) / 3
    rho = float(np.median(q.max(-1)))
    mask = gate_mask(q, rho)
    for g in consistency_grad(zs, rho):
        assert np.all(g[~mask] == 0.0)


def test_stop_gradient_variant_drops_the_q_path():
    rng = np.random.default_rng(10)
    ps = [softmax(random_logits(rng, (2, 2, 3))) for _ in range(2)]
    full = consistency_grad_probs(ps, 0.0)
    stop = consistency_grad_probs(ps, 0.0, stop_grad_q=True)
    n, s = 4, 2
    for f, g in zip(full, stop):
        np.testing.assert_allclose(f - g, -1.0 / (s * n), rtol=1e-12)


def test_softmax_backward_matches_finite_differences():
    rng = np.random.default_rng(11)
    z = rng.standard_normal((2, 3, 4))
    g = rng.standard_normal((2, 3, 4))
    an = softmax_backward(softmax(z), g)
    h = 1e-6
    for idx in np.ndindex(z.shape):
        zp, zm = z.copy(), z.copy()
        zp[idx] += h
        zm[idx] -= h
        fd = ((softmax(zp) - softmax(zm)) * g).sum() / (2 * h)
        assert an[idx] == pytest.approx(fd, rel=1e-5, abs=1e-9)


def test_single_scale_forward_is_the_model():
    rng = np.random.default_rng(12)
    x = rng.standard_normal((2, 5, 5, 3))
    W = rng.standard_normal((3, 4))
    model = lambda b: softmax(b @ W)  # noqa: E731
    ps, q = multiscale_forward(model, x, (1.0,))
    np.testing.assert_array_equal(ps[0], model(x))
    np.testing.assert_array_equal(q, ps[0])


def test_constant_model_gives_equal_maps():
    x = np.random.default_rng(13).standard_normal((1, 8, 8, 3))
    const = np.array([0.2, 0.5, 0.3])
    model = lambda b: np.broadcast_to(const, b.shape[:3] + (3,)).copy()  # noqa: E731
    ps, q = multiscale_forward(model, x, (0.7, 1.0, 1.5))
    for p in ps:
        np.testing.assert_allclose(p, q, atol=1e-12)
    assert consistency_loss(ps, q, 0.0)[0] == pytest.approx(0.0, abs=1e-12)


def test_scaled_view_backward_is_adjoint():
    rng = np.random.default_rng(14)
    view = ScaledView((9, 7), 1.5)
    pt = softmax(rng.standard_normal((1,) + view.scaled_hw + (3,)))
    p, sums = view.to_common(pt)
    g = rng.standard_normal(p.shape)
    an = view.to_common_backward(p, sums, g)
    h = 1e-6
    for idx in list(np.ndindex(pt.shape))[::7]:
        a, b = pt.copy(), pt.copy()
        a[idx] += h
        b[idx] -= h
        fd = ((view.to_common(a)[0] - view.to_common(b)[0]) * g).sum() / (2 * h)
        assert an[idx] == pytest.approx(fd, rel=1e-5, abs=1e-8)


def test_scale_validation():
    with pytest.raises(ValueError):
        check_scales([0.7, 1.5])
    with pytest.raises(ValueError):
        check_scales([])
    with pytest.raises(ValueError):
        ConsistencyConfig(rho=1.5)
    with pytest.raises(ValueError):
        ConsistencyConfig(gate="region")

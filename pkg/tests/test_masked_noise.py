import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from maskdiff.errors import ContractError
from maskdiff.masked_noise import approx_static, blend, diffusion_loss, exact_decompose
from maskdiff.schedule import build_linear_schedule, forward_sample
from maskdiff.tensor import Tensor


@pytest.fixture(scope="module")
def s():
    return build_linear_schedule()


def test_decompose_reference_equal_to_scaled_clean(s):
    rs = np.random.default_rng(0)
    y0, eps = rs.standard_normal((2, 3, 4))
    pair = exact_decompose(y0, s.sigma[250] * y0, eps, 250, s)
    np.testing.assert_allclose(pair.static, 0.0, atol=1e-12)
    np.testing.assert_allclose(pair.dynamic, eps, atol=1e-12)


def test_decompose_scalar_example(s):
    pair = exact_decompose(1.0, 1.0, 0.0, 500, s)
    expected = (1 - s.sigma[500]) / s.lam[500]
    assert float(pair.static) == pytest.approx(expected)
    assert float(pair.dynamic) == pytest.approx(-expected)
    # frozen from the cumulative-product oracle: sigma_500 = 0.40225880..., lam_500 = 0.91552599...
    assert float(pair.static) == pytest.approx((1 - 0.4022588046437295) / 0.9155259985858392, rel=1e-9)


def test_decompose_rejects_t0(s):
    with pytest.raises(ContractError):
        exact_decompose(1.0, 1.0, 0.0, 0, s)


@settings(max_examples=100, deadline=None)
@given(t=st.sampled_from([1, 250, 500, 750, 1000]), seed=st.integers(0, 2**31))
def test_decompose_identity_property(s, t, seed):
    rs = np.random.default_rng(seed)
    y0, y_ref, eps = rs.standard_normal((3, 1, 16, 16)) * rs.uniform(0.1, 3.0, size=(3, 1, 1, 1))
    pair = exact_decompose(y0, y_ref, eps, t, s)
    assert np.abs(pair.static + pair.dynamic - eps).max() < 1e-5


def test_approx_static_examples(s):
    rs = np.random.default_rng(1)
    a = rs.standard_normal((1, 4, 4)).astype(np.float32)
    np.testing.assert_array_equal(approx_static(a, a), np.zeros_like(a))
    y0 = rs.standard_normal((1, 4, 4)).astype(np.float32)
    y_t = forward_sample(y0, 300, np.zeros_like(y0), s)
    np.testing.assert_array_equal(approx_static(y_t.copy(), y_t), 0.0)
    b = rs.standard_normal((1, 4, 4)).astype(np.float32)
    out = approx_static(a, b)
    for idx in np.ndindex(a.shape):
        assert out[idx] == np.float32(a[idx] - b[idx])
    with pytest.raises(ContractError):
        approx_static(a, b[:, :2])


def test_approx_static_scaled_variant():
    a = np.full((2, 1, 2, 2), 3.0, np.float32)
    b = np.ones_like(a)
    lam = np.array([2.0, 4.0], np.float32).reshape(2, 1, 1, 1)
    out = approx_static(a, b, lam)
    assert out[0].max() == 1.0 and out[1].max() == 0.5


def test_blend_endpoints():
    rs = np.random.default_rng(2)
    st_, dy = rs.standard_normal((2, 3, 5, 5))
    zeros, ones = np.zeros((1, 5, 5)), np.ones((1, 5, 5))
    np.testing.assert_array_equal(blend(zeros, st_, dy), dy)
    np.testing.assert_array_equal(blend(ones, st_, dy), st_)
    np.testing.assert_allclose(blend(0.5 * ones, st_, dy), (st_ + dy) / 2)


@settings(max_examples=50, deadline=None)
@given(m=arrays(np.float64, (1, 4, 4), elements=st.floats(0, 1)), seed=st.integers(0, 1000))
def test_blend_linear_in_mask(m, seed):
    rs = np.random.default_rng(seed)
    st_, dy = rs.standard_normal((2, 2, 4, 4))
    lhs = blend(m, st_, dy) - blend(np.zeros_like(m), st_, dy)
    np.testing.assert_allclose(lhs, m * (st_ - dy), atol=1e-12)


def test_blend_rejects_bad_mask():
    st_ = np.zeros((1, 4, 4))
    with pytest.raises(ContractError):
        blend(np.full((1, 4, 4), 1.5), st_, st_)
    with pytest.raises(ContractError):
        blend(np.full((1, 3, 4), 0.5), st_, st_)


def test_loss_examples():
    rs = np.random.default_rng(3)
    e = rs.standard_normal((2, 1, 4, 4)).astype(np.float32)
    assert diffusion_loss(e, e).item() == 0.0
    assert diffusion_loss(e + 1.0, e).item() == pytest.approx(1.0, abs=1e-6)
    a = rs.standard_normal((3, 5)).astype(np.float32)
    b = rs.standard_normal((3, 5)).astype(np.float32)
    oracle = sum(float(a[i, j] - b[i, j]) ** 2 for i in range(3) for j in range(5)) / 15
    assert diffusion_loss(Tensor(a), b).item() == pytest.approx(oracle, abs=1e-7)
    with pytest.raises(ContractError):
        diffusion_loss(a, b[:, :2])

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from maskdiff.denoiser import ConditionSet, render
from maskdiff.errors import ContractError, DivergenceError
from maskdiff.rng import Rng
from maskdiff.sampler import GuidanceScales, cfg_compose, sample_frame
from maskdiff.schedule import build_linear_schedule

S = build_linear_schedule()


def test_default_scales():
    g = GuidanceScales()
    assert (g.w_ref, g.w_anc, g.w_txt) == (0.25, 0.25, 6.5)
    with pytest.raises(ContractError):
        GuidanceScales(np.nan, 0, 0)


def test_compose_zero_scales_is_bitwise_full():
    rs = np.random.default_rng(0)
    full, a, b, c = rs.standard_normal((4, 2, 1, 8, 8)).astype(np.float32)
    full[0, 0, 0, 0] = -0.0
    out = cfg_compose(full, a, b, c, GuidanceScales(0.0, 0.0, 0.0))
    assert out.tobytes() == full.tobytes()


def test_compose_equal_branches_returns_full():
    x = np.random.default_rng(1).standard_normal((3, 4)).astype(np.float32)
    np.testing.assert_array_equal(cfg_compose(x, x, x, x, GuidanceScales(0.3, 2.0, 7.0)), x)


def test_compose_scalar_example():
    out = cfg_compose(np.array(1.0), np.array(0.0), np.array(1.0), np.array(1.0), GuidanceScales(0.25, 0.0, 0.0))
    assert float(out) == 1.25
    out = cfg_compose(np.array(1.0), np.array(0.0), np.array(1.0), np.array(1.0), GuidanceScales())
    assert float(out) == 1.25


def test_compose_shape_mismatch():
    with pytest.raises(ContractError):
        cfg_compose(np.zeros(3), np.zeros(3), np.zeros(3), np.zeros(4), GuidanceScales())


@settings(max_examples=100, deadline=None)
@given(c=st.floats(-10, 10), w=st.floats(-5, 5), seed=st.integers(0, 1000))
def test_compose_affine_in_text_term(c, w, seed):
    rs = np.random.default_rng(seed)
    full, a, b, t = rs.standard_normal((4, 6))
    base = cfg_compose(full, a, b, full, GuidanceScales(0.25, 0.25, w))  # text term contributes nothing
    contrib = cfg_compose(full, a, b, t, GuidanceScales(0.25, 0.25, w)) - base
    scaled = cfg_compose(full, a, b, full - c * (full - t), GuidanceScales(0.25, 0.25, w)) - base
    np.testing.assert_allclose(scaled, c * contrib, atol=1e-9)


def _cb(cfg, conds):
    return render(conds, cfg.latent_shape)


def test_sample_frame_deterministic_and_traced(tiny_cfg, tiny_model):
    cb = _cb(tiny_cfg, [ConditionSet(prompt="left slow")])
    a, ta = sample_frame(tiny_model, cb, S, 50, GuidanceScales(), Rng(3))
    b, tb = sample_frame(tiny_model, cb, S, 50, GuidanceScales(), Rng(3))
    assert a.tobytes() == b.tobytes()
    assert len(ta[0]) == 50 and ta[0].mean == tb[0].mean
    assert all(0.0 <= m <= 1.0 for m in ta[0].mean)
    assert ta[0].steps[0] == 1000 and ta[0].steps[-1] == 20
    assert np.isfinite(a).all() and a.shape == (1,) + tiny_cfg.latent_shape


def test_four_evaluations_per_step_per_head(tiny_cfg, tiny_model):
    cb = _cb(tiny_cfg, [ConditionSet(prompt="up fast")])
    tiny_model.calls.update(dynamic=0, mask=0)
    sample_frame(tiny_model, cb, S, 7, GuidanceScales(), Rng(0))
    assert tiny_model.calls == {"dynamic": 28, "mask": 28}


def test_zero_guidance_equals_full_condition_path(tiny_cfg, tiny_model):
    rs = np.random.default_rng(4)
    f = rs.uniform(-1, 1, (3,) + tiny_cfg.latent_shape)
    cb = _cb(tiny_cfg, [ConditionSet(f[0], f[1], f[2], "left fast"), ConditionSet()])
    tiny_model.calls.update(dynamic=0, mask=0)
    guided, tg = sample_frame(tiny_model, cb, S, 20, GuidanceScales(0.0, 0.0, 0.0), Rng(4))
    assert tiny_model.calls == {"dynamic": 40, "mask": 40}
    plain, tp = sample_frame(tiny_model, cb, S, 20, None, Rng(4))
    assert guided.tobytes() == plain.tobytes()
    assert tg[0].mean == tp[0].mean


class _Exploding:
    latent_shape = (1, 4, 4)

    def eps_hat(self, cb, y, t, s):
        from maskdiff.tensor import Tensor

        return Tensor(np.full(y.shape, -1e7, np.float32)), None


def test_divergence_aborts_with_partial_state():
    cb = render([ConditionSet()], (1, 4, 4))
    with pytest.raises(DivergenceError) as info:
        sample_frame(_Exploding(), cb, S, 10, None, Rng(0), clip_x0=None)
    assert info.value.partial["t"] == 1000
    assert info.value.category == "divergence"


def test_sample_frame_preconditions(tiny_cfg, tiny_model):
    cb = _cb(tiny_cfg, [ConditionSet()])
    with pytest.raises(ContractError):
        sample_frame(None, cb, S, 10, None, Rng(0))
    with pytest.raises(ContractError):
        sample_frame(tiny_model, cb, S, 1001, None, Rng(0))

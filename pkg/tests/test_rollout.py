import numpy as np
import pytest

from maskdiff import rollout as ro
from maskdiff.denoiser import ConditionSet
from maskdiff.errors import ContractError
from maskdiff.rng import Rng
from maskdiff.rollout import (
    SamplerSettings,
    SegmentPlan,
    bootstrap_first_frame,
    generate_multi_prompt,
    generate_video,
    save_rollout,
    select_train_anchor,
)
from maskdiff.sampler import GuidanceScales

CHI2_99_DF9 = 21.666  # upper 1% point of chi-square with 9 degrees of freedom


def settings_for(cfg, **kw):
    base = dict(n_steps=3)
    base.update(kw)
    return SamplerSettings.from_config(cfg, **base)


@pytest.fixture
def recorder(monkeypatch):
    """Wrap the sampler used by the rollout module and keep every condition batch it sees."""
    seen = []
    real = ro.sample_frame

    def spy(model, cb, *args, **kw):
        seen.append(cb)
        return real(model, cb, *args, **kw)

    monkeypatch.setattr(ro, "sample_frame", spy)
    return seen


def test_train_anchor_window_default(tiny_cfg):
    assert tiny_cfg.anchor_window == 10


def test_train_anchor_first_target_is_always_zero():
    rng = Rng(0)
    assert {select_train_anchor(1, 10, rng) for _ in range(200)} == {0}


def test_train_anchor_uniform_on_window():
    rng = Rng(1)
    draws = np.array([select_train_anchor(20, 10, rng) for _ in range(10_000)])
    assert draws.min() >= 10 and draws.max() <= 19
    counts = np.bincount(draws - 10, minlength=10)
    chi2 = ((counts - 1000.0) ** 2 / 1000.0).sum()
    assert chi2 < CHI2_99_DF9


def test_train_anchor_rejects_target_zero():
    with pytest.raises(ContractError):
        select_train_anchor(0, 10, Rng(0))


def test_bootstrap_provided_frame_returned_unchanged(tiny_cfg, tiny_model, recorder):
    f = np.ones(tiny_cfg.latent_shape, np.float32)
    out, trace = bootstrap_first_frame("left fast", tiny_model, settings_for(tiny_cfg), Rng(0), provided=f)
    assert out is f and trace is None and recorder == []


def test_bootstrap_samples_once_with_blank_conditions(tiny_cfg, tiny_model, recorder):
    st = settings_for(tiny_cfg)
    a, _ = bootstrap_first_frame("left fast", tiny_model, st, Rng(5))
    b, _ = bootstrap_first_frame("left fast", tiny_model, st, Rng(5))
    assert len(recorder) == 2 and a.tobytes() == b.tobytes()
    cb = recorder[0]
    assert cb.ref_null.all() and cb.anchor_null.all() and not cb.prompt_null.any()


def test_single_frame_video_is_bootstrap_only(tiny_cfg, tiny_model, recorder):
    state = generate_video("up slow", 1, tiny_model, settings_for(tiny_cfg), Rng(2))
    assert len(state.frames) == 1 and len(recorder) == 1


def test_reference_duplication_and_fixed_anchor(tiny_cfg, tiny_model, recorder):
    state = generate_video("right fast", 4, tiny_model, settings_for(tiny_cfg, t_test=0), Rng(3))
    f = state.frames
    c = tiny_cfg.channels
    assert len(recorder) == 4  # bootstrap + 3 AR steps
    expect = [(f[0], f[0]), (f[1], f[0]), (f[2], f[1])]
    for cb, (prev, prev2) in zip(recorder[1:], expect):
        np.testing.assert_array_equal(cb.refs[0, :c], prev)
        np.testing.assert_array_equal(cb.refs[0, c:], prev2)
        assert cb.anchor.tobytes() == recorder[1].anchor.tobytes()
        np.testing.assert_array_equal(cb.anchor[0], f[0])
    assert state.anchor is f[0]
    assert len(state.traces) == 4 and all(len(t) == 3 for t in state.traces)


def test_references_noised_at_t_test_anchor_clean(tiny_cfg, tiny_model, recorder):
    first = np.zeros(tiny_cfg.latent_shape, np.float32) + 0.5
    generate_video("down fast", 2, tiny_model, settings_for(tiny_cfg), Rng(4), first=first)
    cb = recorder[0]
    assert cb.aug_level[0] == 200
    assert np.abs(cb.refs[0, 0] - first).max() > 0
    np.testing.assert_array_equal(cb.anchor[0], first)
    generate_video("down fast", 2, tiny_model, settings_for(tiny_cfg, augment_anchor=True), Rng(4), first=first)
    assert np.abs(recorder[1].anchor[0] - first).max() > 0


def test_zero_anchor_changes_only_the_anchor(tiny_cfg, tiny_model, recorder):
    first = np.random.default_rng(0).uniform(-1, 1, tiny_cfg.latent_shape).astype(np.float32)
    st = settings_for(tiny_cfg)
    generate_video("left slow", 2, tiny_model, st, Rng(6), first=first)
    z = generate_video("left slow", 2, tiny_model, st, Rng(6), first=first, zero_anchor=True)
    a, b = recorder
    assert np.all(b.anchor == 0) and not b.anchor_null.any()
    for f in ("refs", "prompt_ids", "ref_null", "prompt_null", "aug_level"):
        np.testing.assert_array_equal(getattr(a, f), getattr(b, f))
    assert np.all(z.anchor == 0)


def test_single_segment_plan_equals_generate_video(tiny_cfg, tiny_model):
    st = settings_for(tiny_cfg)
    a = generate_multi_prompt(SegmentPlan([("up fast", 3)]), tiny_model, st, Rng(7))
    b = generate_video("up fast", 3, tiny_model, st, Rng(7))
    assert a.video().tobytes() == b.video().tobytes()


def test_two_segments_chain_on_last_frames(tiny_cfg, tiny_model, recorder):
    st = settings_for(tiny_cfg, n_steps=1, t_test=0)
    state = generate_multi_prompt(SegmentPlan([("right fast", 16), ("left slow", 16)]), tiny_model, st, Rng(8))
    f = state.frames
    c = tiny_cfg.channels
    assert len(f) == 32
    assert state.prompts[:16] == ["right fast"] * 16 and state.prompts[16:] == ["left slow"] * 16
    cb16 = recorder[16]  # bootstrap, 15 AR steps of segment 0, then frame 16
    np.testing.assert_array_equal(cb16.refs[0, :c], f[15])
    np.testing.assert_array_equal(cb16.refs[0, c:], f[14])
    assert state.anchor is f[15]
    for cb in recorder[16:]:
        assert cb.anchor[0].tobytes() == f[15].tobytes()


def test_segment_plan_parsing(tmp_path):
    p = tmp_path / "plan.txt"
    p.write_text("# two prompts\n16\tright fast\n\n8\tup slow\n")
    assert SegmentPlan.from_file(p).segments == [("right fast", 16), ("up slow", 8)]
    for bad in ("16 right fast\n", "0\tup slow\n", ""):
        with pytest.raises(ContractError):
            SegmentPlan.parse(bad)


def test_rollout_files_byte_identical(tiny_cfg, tiny_model, tmp_path):
    st = settings_for(tiny_cfg)
    for name in ("a", "b"):
        save_rollout(generate_video("down slow", 3, tiny_model, st, Rng(9)), tmp_path / name)
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert names == ["frame_stats.csv", "frames.npy", "mask_trace.csv", "rollout.gif"]
    for n in names:
        assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()


def test_frame_statistics_recorded(tiny_cfg, tiny_model):
    state = generate_video("down slow", 3, tiny_model, settings_for(tiny_cfg), Rng(10))
    rows = state.frame_stats()
    assert [r["frame"] for r in rows] == [0, 1, 2]
    assert all(np.isfinite(r["std"]) and r["absmax"] >= 0 for r in rows)


def test_no_guidance_setting_is_respected(tiny_cfg, tiny_model):
    tiny_model.calls.update(dynamic=0, mask=0)
    generate_video("down slow", 2, tiny_model, settings_for(tiny_cfg, guidance=None), Rng(11))
    assert tiny_model.calls["dynamic"] == 2 * 3

import numpy as np
import pytest

from maskdiff.config import Config
from maskdiff.errors import ContractError
from maskdiff.optim import AdamW, ema_update, warmup_decay
from maskdiff.rng import Rng, randn
from maskdiff.tensor import Tensor


def test_adamw_default_lr_matches_published_value():
    assert AdamW([]).lr == 1e-5


def test_zero_grad_zero_decay_leaves_params():
    p = Tensor(np.arange(4.0), requires_grad=True)
    before = p.data.copy()
    opt = AdamW([p], lr=0.1, weight_decay=0.0)
    for _ in range(3):
        opt.step([np.zeros(4, np.float32)])
    np.testing.assert_array_equal(p.data, before)
    assert opt.step_count == 3


def test_one_step_decreases_quadratic():
    w = Tensor(1.0, requires_grad=True)
    opt = AdamW([w], lr=0.1)
    before = float(w.data) ** 2
    (w * w).backward()
    opt.step()
    assert float(w.data) ** 2 < before


def test_adamw_matches_reference_formula():
    # hand-rolled decoupled-decay Adam in float64 as the oracle
    rs = np.random.default_rng(0)
    w0 = rs.standard_normal(5)
    grads = rs.standard_normal((4, 5))
    p = Tensor(w0, requires_grad=True)
    opt = AdamW([p], lr=0.01, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.1)
    w, m, v = w0.copy(), np.zeros(5), np.zeros(5)
    for k, g in enumerate(grads, 1):
        opt.step([g.astype(np.float32)])
        w *= 1 - 0.01 * 0.1
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w -= 0.01 * (m / (1 - 0.9**k)) / (np.sqrt(v / (1 - 0.999**k)) + 1e-8)
    np.testing.assert_allclose(p.data, w, rtol=1e-5, atol=1e-6)


def test_adamw_shape_mismatch():
    p = Tensor(np.zeros(3), requires_grad=True)
    with pytest.raises(ContractError):
        AdamW([p]).step([np.zeros(4, np.float32)])


def test_ema_examples():
    ema = [np.array([1.0], np.float32)]
    ema_update(ema, [np.array([0.0], np.float32)], 0.9999)
    assert ema[0][0] == pytest.approx(0.9999)
    ema = [np.array([1.0, 2.0], np.float32)]
    ema_update(ema, [np.array([5.0, 6.0], np.float32)], 1.0)
    np.testing.assert_array_equal(ema[0], [1.0, 2.0])
    ema_update(ema, [np.array([5.0, 6.0], np.float32)], 0.0)
    np.testing.assert_array_equal(ema[0], [5.0, 6.0])
    with pytest.raises(ContractError):
        ema_update(ema, [np.zeros(2, np.float32)], 1.5)
    with pytest.raises(ContractError):
        ema_update(ema, [np.zeros(3, np.float32)], 0.5)


def test_ema_converges_on_frozen_weights():
    ema = [np.zeros(3, np.float32)]
    target = [np.array([1.0, -2.0, 0.5], np.float32)]
    for n in range(3000):
        ema_update(ema, target, warmup_decay(0.9999, n))
    np.testing.assert_allclose(ema[0], target[0], atol=1e-3)


def test_warmup_decay_caps_at_configured_value():
    assert warmup_decay(0.9999, 0) == pytest.approx(0.1)
    assert warmup_decay(0.9999, 10**7) == 0.9999
    assert Config().ema_decay == 0.9999


def test_randn_deterministic_and_stream_independent():
    a = randn((3, 4), Rng(7)).data
    b = randn((3, 4), Rng(7)).data
    np.testing.assert_array_equal(a, b)
    parent = Rng(7)
    parent.normal((1000,))  # consuming the parent does not move its children
    np.testing.assert_array_equal(parent.split("x").normal((5,)), Rng(7).split("x").normal((5,)))
    assert not np.array_equal(Rng(7).split("x").normal((5,)), Rng(7).split("y").normal((5,)))


def test_randn_moments():
    n = 100_000
    x = randn((n,), Rng(123)).data.astype(np.float64)
    assert abs(x.mean()) < 3 / np.sqrt(n)
    assert abs(x.var() - 1) < 0.02


def test_rng_state_round_trip():
    r = Rng(3).split("noise")
    r.normal((17,))
    r.integers(0, 9, size=3)
    clone = Rng.from_state(r.get_state())
    np.testing.assert_array_equal(r.normal((11,)), clone.normal((11,)))
    assert r.integers(0, 100) == clone.integers(0, 100)

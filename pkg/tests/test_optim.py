import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from progfreeze import nnet
from progfreeze.optim import (AdamWState, OneCycleSchedule, adamw_step, check_multipliers,
                              discriminative_multipliers)

from conftest import TINY


def _reference_adamw(p, grads, lr, b1=0.9, b2=0.999, eps=1e-8, wd=0.0):
    """Textbook AdamW for a single tensor, written independently of the library."""
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    p = p.copy()
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        p = p * (1 - lr * wd)
        p = p - lr * mhat / (np.sqrt(vhat) + eps)
    return p


def test_adamw_matches_reference_update():
    net = nnet.init_network(TINY, 0)
    net.set_trainable(["head"])
    w0 = net.group("head").params["w"].copy()
    b0 = net.group("head").params["b"].copy()
    rng = np.random.default_rng(1)
    gw = [rng.normal(size=w0.shape) for _ in range(5)]
    gb = [rng.normal(size=b0.shape) for _ in range(5)]
    st_ = AdamWState(weight_decay=0.1)
    for a, b in zip(gw, gb):
        adamw_step(st_, net, {"head": {"w": a, "b": b}}, 0.01)
    np.testing.assert_allclose(net.group("head").params["w"], _reference_adamw(w0, gw, 0.01, wd=0.1),
                               rtol=1e-12, atol=1e-14)
    # biases are not decayed
    np.testing.assert_allclose(net.group("head").params["b"], _reference_adamw(b0, gb, 0.01, wd=0.0),
                               rtol=1e-12, atol=1e-14)


def test_newly_unfrozen_group_starts_with_fresh_moments():
    net = nnet.init_network(TINY, 0)
    net.set_trainable(["head"])
    state = AdamWState()
    g = {"head": {"w": np.ones(4), "b": np.ones(1)}}
    for _ in range(3):
        adamw_step(state, net, g, 1e-3)
    net.set_trainable(["head", "layer4"])
    grads = {"head": g["head"],
             "layer4": {k: np.ones_like(v) for k, v in net.group("layer4").params.items()}}
    adamw_step(state, net, grads, 1e-3)
    assert state.t == {"head": 4, "layer4": 1}


def test_gradient_groups_must_match_trainable_set():
    net = nnet.init_network(TINY, 0)
    net.set_trainable(["head"])
    with pytest.raises(RuntimeError):
        adamw_step(AdamWState(), net, {}, 1e-3)


def test_discriminative_multipliers():
    m = discriminative_multipliers(0.3)
    assert m["head"] == 1.0
    assert m["layer4"] == pytest.approx(0.3)
    assert m["layer3"] == pytest.approx(0.09)
    check_multipliers(m)
    with pytest.raises(ValueError):
        check_multipliers({**m, "layer1": 5.0})


def test_onecycle_endpoints():
    s = OneCycleSchedule(100, max_lr=1e-3)
    assert s.lr(0) == pytest.approx(1e-3 / 25)
    assert s.lr(s.peak_step) == pytest.approx(1e-3)
    assert s.lr(99) == pytest.approx(1e-3 / 1e4)
    with pytest.raises(ValueError):
        s.lr(100)


@given(st.integers(2, 500), st.floats(0.05, 0.95))
@settings(max_examples=60, deadline=None)
def test_onecycle_is_unimodal(total, pct):
    s = OneCycleSchedule(total, max_lr=1.0, pct_start=pct)
    lrs = np.array([s.lr(i) for i in range(total)])
    k = s.peak_step
    assert np.all(np.diff(lrs[:k + 1]) >= -1e-15)
    assert np.all(np.diff(lrs[k:]) <= 1e-15)
    assert lrs.max() == pytest.approx(1.0)
    assert np.all(lrs > 0)
    assert math.isclose(lrs[-1], 1e-4, rel_tol=1e-9) or k == total - 1

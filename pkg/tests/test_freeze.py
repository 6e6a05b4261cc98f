import pytest
from hypothesis import given, settings, strategies as st

from progfreeze import nnet
from progfreeze.freeze import FreezePlan, Mode, apply, in_probe, make_plan

from conftest import TINY


def test_progfreeze_default_spacing():
    plan = make_plan(Mode.PROG_FREEZE, 10, 30)
    assert plan.unfreeze_epochs() == {"layer4": 10, "layer3": 15, "layer2": 20}
    assert plan.trainable_at(9) == {"head"}
    assert plan.trainable_at(29) == {"head", "layer4", "layer3", "layer2"}


def test_fullift_unfreezes_everything_after_probe():
    plan = make_plan(Mode.FULL_IFT, 10, 40)
    assert plan.trainable_at(9) == {"head"}
    assert plan.trainable_at(10) == set(nnet.GROUP_NAMES)


def test_no_probe_progfreeze_starts_with_layer4():
    plan = make_plan("ProgFreeze", 0, 30)
    assert plan.trainable_at(0) == {"head", "layer4"}


def test_invalid_plans():
    with pytest.raises(ValueError):
        make_plan(Mode.PROG_FREEZE, 30, 30)
    with pytest.raises(ValueError):
        make_plan(Mode.PROG_FREEZE, 5, 30, [(2, "layer4")])
    with pytest.raises(ValueError):
        make_plan(Mode.PROG_FREEZE, 0, 30, [(2, "bogus")])


@given(st.integers(0, 20), st.integers(1, 40), st.sampled_from(list(Mode)))
@settings(max_examples=200, deadline=None)
def test_trainable_sets_grow_monotonically(probe, extra, mode):
    total = probe + extra
    plan = make_plan(mode, probe, total)
    prev = frozenset()
    for e in range(total):
        cur = plan.trainable_at(e)
        assert prev <= cur
        assert "head" in cur
        assert in_probe(plan, e) == (e < probe)
        if e < probe:
            assert cur == {"head"}
        if mode is Mode.PROG_FREEZE:
            assert not cur & {"stem", "layer1"}
        prev = cur


def test_plan_round_trip():
    plan = make_plan(Mode.PROG_FREEZE, 10, 40)
    assert FreezePlan.from_dict(plan.to_dict()) == plan


def test_apply_sets_flags():
    net = nnet.init_network(TINY, 0)
    plan = make_plan(Mode.PROG_FREEZE, 2, 10)
    assert apply(plan, 0, net) == {"head"}
    assert net.trainable_groups() == ["head"]
    apply(plan, 9, net)
    assert set(net.trainable_groups()) == {"head", "layer2", "layer3", "layer4"}
    with pytest.raises(ValueError):
        apply(plan, 10, net)

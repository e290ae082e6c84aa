import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ssplab.ops import OpKind, Origin
from ssplab.search_space import (
    PoisonSetId,
    build_original,
    build_space,
    poison,
    poison_ops,
    slot_to_layer,
    uniform_sampling_prob,
)

ORIGINAL_KINDS_ORDER = [OpKind.IDENTITY, OpKind.SEP_CONV_3X3, OpKind.SEP_CONV_5X5, OpKind.MAX_POOL_3X3, OpKind.AVG_POOL_3X3]


def test_original_space():
    space = build_original()
    assert space.num_slots == 5
    assert [op.kind for op in space.slots] == ORIGINAL_KINDS_ORDER
    assert all(op.origin is Origin.ORIGINAL for op in space.slots)


def test_poison_set_contents():
    assert [o.kind for o in poison_ops("P1")] == [OpKind.IDENTITY]
    assert [o.kind for o in poison_ops("P2")] == [OpKind.TRANS_CONV_3X3, OpKind.TRANS_CONV_5X5]
    (drop,) = poison_ops("P3")
    assert drop.kind is OpKind.DROPOUT and drop.dropout_p == 0.9
    assert poison_ops("P4") == poison_ops("P1") + poison_ops("P2") + poison_ops("P3")


@pytest.mark.parametrize("set_id,q,expected", [("P1", 36, 41), ("P2", 50, 105), ("P4", 1, 9)])
def test_poisoned_slot_counts(set_id, q, expected):
    assert poison(build_original(), set_id, q).num_slots == expected
    assert len(poison(build_original(), set_id, q).slots) == expected


@pytest.mark.parametrize("set_id", list(PoisonSetId))
def test_slot_count_exhaustive(set_id):
    n_p = len(poison_ops(set_id))
    for q in range(1, 301):
        space = poison(build_original(), set_id, q)
        assert space.num_slots == len(space.slots) == 5 + q * n_p
        assert all(op.origin is Origin.ORIGINAL for op in space.slots[:5])
        assert all(op.origin is Origin.POISON for op in space.slots[5:])


def test_poison_rejects_bad_q():
    with pytest.raises(ValueError):
        poison(build_original(), "P1", 0)


def test_poison_is_pure_and_deterministic():
    base = build_original()
    before = base.slots
    a = poison(base, "P4", 3)
    b = poison(base, "P4", 3)
    assert base.slots == before and base.num_slots == 5
    assert a.slots == b.slots


def test_poisons_grouped_by_type():
    kinds = [op.kind for op in poison(build_original(), "P2", 2).slots[5:]]
    assert kinds == [OpKind.TRANS_CONV_3X3] * 2 + [OpKind.TRANS_CONV_5X5] * 2


def test_sampling_prob_examples():
    p_orig, p_poison = uniform_sampling_prob(poison(build_original(), "P1", 300))
    assert p_orig == pytest.approx(1 / 305) and p_orig == pytest.approx(0.00328, abs=1e-5)
    assert p_poison == pytest.approx(300 / 305) and p_poison == pytest.approx(0.98361, abs=1e-5)
    p_orig, p_poison = uniform_sampling_prob(poison(build_original(), "P4", 20))
    assert p_orig == pytest.approx(1 / 85)
    assert p_poison == pytest.approx(0.23529, abs=1e-5)
    assert uniform_sampling_prob(build_original()) == (pytest.approx(0.2), None)


@given(st.sampled_from(list(PoisonSetId)), st.integers(1, 300))
def test_sampling_probs_sum_to_one(set_id, q):
    space = poison(build_original(), set_id, q)
    p_orig, p_poison = uniform_sampling_prob(space)
    total = p_orig * 5 + p_poison * len(space.poison_ops)
    assert abs(total - 1.0) < 1e-12
    assert abs(sum(1.0 / space.num_slots for _ in space.slots) - 1.0) < 1e-9
    if q > 1:
        assert p_poison > p_orig
    else:
        assert p_poison == p_orig


def test_slot_to_layer():
    rng = np.random.default_rng(0)
    assert slot_to_layer(build_original(), 0, 4, 4, rng).spec.kind is OpKind.IDENTITY
    layer = slot_to_layer(poison(build_original(), "P1", 3), 5, 4, 4, rng)
    assert layer.spec.kind is OpKind.IDENTITY and layer.spec.origin is Origin.POISON
    assert slot_to_layer(poison(build_original(), "P2", 1), 6, 4, 4, rng).spec.kind is OpKind.TRANS_CONV_5X5
    with pytest.raises(IndexError):
        slot_to_layer(build_original(), 5, 4, 4, rng)


def test_build_space_from_config_values():
    assert build_space("none", 7).num_slots == 5
    assert build_space("P3", 120).num_slots == 125

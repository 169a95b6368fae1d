import random

import pytest

from dynamite.clicks import (
    NEGATIVE,
    POSITIVE,
    ClickError,
    ClickState,
    DuplicateClickError,
    UnknownObjectError,
)


def make_state():
    return ClickState(32, 32)


def check_invariants(state):
    # timesteps contiguous from 1
    assert [c.timestep for c in state.clicks] == list(range(1, len(state.clicks) + 1))
    # partition: no click in two places, positives reference registered objects
    keys = [c.key() for c in state.clicks]
    assert len(keys) == len(set(keys))
    for c in state.clicks:
        if c.kind == POSITIVE:
            assert c.object_id in state.objects
        else:
            assert c.object_id is None
    per_object = [set((p.row, p.col, p.timestep) for p in state.positives(o)) for o in state.objects]
    for i in range(len(per_object)):
        for j in range(i + 1, len(per_object)):
            assert not (per_object[i] & per_object[j])
    n = sum(len(p) for p in per_object) + len(state.negatives())
    assert n == len(state.clicks)


def test_first_click_and_ordering():
    s = make_state()
    o1 = s.register_object()
    assert s.add_click(3, 4, POSITIVE, o1) == 1
    assert len(s.positives(o1)) == 1
    assert s.add_click(0, 0, NEGATIVE) == 2
    assert len(s.negatives()) == 1
    check_invariants(s)


def test_positive_needs_registered_object():
    s = make_state()
    with pytest.raises(UnknownObjectError):
        s.add_click(1, 1, POSITIVE, 99)
    with pytest.raises(ClickError):
        s.add_click(1, 1, POSITIVE)


def test_out_of_bounds_rejected():
    s = make_state()
    s.register_object()
    with pytest.raises(ClickError):
        s.add_click(32, 0, NEGATIVE)
    with pytest.raises(ClickError):
        s.add_click(-1, 0, NEGATIVE)


def test_duplicate_rejected():
    s = make_state()
    o = s.register_object()
    s.add_click(5, 5, POSITIVE, o)
    with pytest.raises(DuplicateClickError):
        s.add_click(5, 5, POSITIVE, o)
    # same pixel, different kind is a different click
    s.add_click(5, 5, NEGATIVE)
    check_invariants(s)


def test_undo_is_inverse():
    s = make_state()
    o = s.register_object()
    before = s.to_json()
    s.add_click(2, 2, POSITIVE, o)
    s.undo()
    assert s.to_json() == before


def test_two_adds_one_undo():
    s = make_state()
    o = s.register_object()
    s.add_click(1, 1, POSITIVE, o)
    s.add_click(2, 2, NEGATIVE)
    removed = s.undo()
    assert removed.kind == NEGATIVE
    assert len(s) == 1
    assert s.clicks[0].row == 1


def test_undo_empty_errors():
    with pytest.raises(ClickError):
        make_state().undo()


def test_register_ids_sequential():
    s = make_state()
    assert s.register_object() == 1
    assert s.register_object() == 2


def test_remove_object_renumbers():
    s = make_state()
    o1, o2 = s.register_object(), s.register_object()
    s.add_click(0, 0, POSITIVE, o1)
    s.add_click(1, 1, POSITIVE, o2)
    s.add_click(2, 2, NEGATIVE)
    s.add_click(3, 3, POSITIVE, o1)
    s.add_click(4, 4, POSITIVE, o2)
    s.remove_object(o1)
    assert len(s) == 3
    assert [c.timestep for c in s.clicks] == [1, 2, 3]
    assert o1 not in s.objects
    check_invariants(s)


def test_remove_unknown_object():
    with pytest.raises(UnknownObjectError):
        make_state().remove_object(7)


def test_json_round_trip():
    s = make_state()
    o = s.register_object()
    s.register_object()
    s.add_click(3, 7, POSITIVE, o)
    s.add_click(8, 8, NEGATIVE)
    restored = ClickState.from_json(s.to_json(), 32, 32)
    assert restored.to_json() == s.to_json()


def test_partition_invariant_under_fuzzing():
    rng = random.Random(1234)
    for _ in range(200):
        s = make_state()
        for _ in range(rng.randint(1, 60)):
            op = rng.random()
            try:
                if op < 0.15:
                    s.register_object()
                elif op < 0.55 and s.objects:
                    s.add_click(
                        rng.randrange(32), rng.randrange(32), POSITIVE, rng.choice(s.objects)
                    )
                elif op < 0.75:
                    s.add_click(rng.randrange(32), rng.randrange(32), NEGATIVE)
                elif op < 0.9 and len(s):
                    s.undo()
                elif s.objects:
                    s.remove_object(rng.choice(s.objects))
            except DuplicateClickError:
                pass
        check_invariants(s)

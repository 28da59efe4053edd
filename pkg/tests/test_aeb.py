import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fnas import aeb
from fnas import nn_core as nn
from fnas import search_space as ss
from fnas.errors import CompositionError, EmptyBufferError, InsufficientEntries, ValidationError


def _entry(schema, reward, step=0, tokens=None):
    toks = tokens if tokens is not None else (step % 4,) + (0,) * (schema.length - 1)
    return aeb.BufferEntry(ss.ArchitectureTokens(toks, schema), float(reward), -1.0, step)


def _filled(schema, rewards, capacity=None):
    buf = aeb.BufferState(capacity or max(1, len(rewards)))
    for i, r in enumerate(rewards):
        aeb.push(buf, _entry(schema, r, i))
    return buf


def test_entry_validation(small_schema):
    with pytest.raises(ValidationError):
        _entry(small_schema, math.inf)
    with pytest.raises(ValidationError):
        aeb.BufferEntry(ss.ArchitectureTokens((0,) * 8, small_schema), 0.5, 0.1, 0)
    with pytest.raises(ValidationError):
        aeb.BufferState(0)


def test_push_into_empty(small_schema):
    assert len(aeb.push(aeb.BufferState(10), _entry(small_schema, 0.3))) == 1


def test_eleventh_push_evicts_minimum(small_schema):
    buf = _filled(small_schema, [0.1 * i for i in range(1, 11)], 10)
    aeb.push(buf, _entry(small_schema, 0.5, 11))
    rewards = sorted(e.reward for e in buf.entries)
    assert len(buf) == 10 and min(rewards) == pytest.approx(0.2) and rewards.count(0.5) == 2


def test_push_worse_than_all_is_dropped(small_schema):
    buf = _filled(small_schema, [0.1 * i for i in range(1, 11)], 10)
    before = list(buf.entries)
    aeb.push(buf, _entry(small_schema, 0.01, 99))
    assert buf.entries == before


def test_eviction_ties_drop_oldest(small_schema):
    buf = _filled(small_schema, [0.4, 0.2, 0.2], 3)
    aeb.push(buf, _entry(small_schema, 0.9, 3))
    assert [e.step for e in buf.entries] == [0, 2, 3]


def test_priorities_equal_rewards(small_schema):
    assert np.allclose(aeb.priorities(_filled(small_schema, [0.7] * 5)), 0.2)


def test_priorities_log_two():
    schema = ss.enumerable_schema()
    assert np.allclose(aeb.priorities(_filled(schema, [0.0, math.log(2)])), [1 / 3, 2 / 3], atol=1e-15)


def test_priorities_shift_invariant(small_schema):
    a = aeb.priorities(_filled(small_schema, [0.1, 0.5, 0.9]))
    b = aeb.priorities(_filled(small_schema, [3.1, 3.5, 3.9]))
    assert np.allclose(a, b, atol=1e-15)


def test_priorities_empty():
    with pytest.raises(EmptyBufferError):
        aeb.priorities(aeb.BufferState(3))


@pytest.mark.parametrize("p, n, beta, expected", [(0.2, 10, 1.0, 0.5), (0.37, 4, 0.0, 1.0), (0.1, 10, 0.6, 1.0)])
def test_importance_weight(p, n, beta, expected):
    assert aeb.importance_weight(p, n, beta) == pytest.approx(expected, abs=1e-15)


def test_anneal_beta_endpoints():
    assert aeb.anneal_beta(0, 200) == 0.0
    assert aeb.anneal_beta(200, 200) == 1.0
    assert aeb.anneal_beta(100, 200) == 0.5
    assert aeb.anneal_beta(500, 200) == 1.0
    with pytest.raises(ValidationError):
        aeb.anneal_beta(0, 0)


def test_draw_everything(small_schema, rng):
    buf = _filled(small_schema, [0.1, 0.4, 0.3])
    draws = aeb.draw_exploited(buf, 3, rng)
    assert sorted(d.entry.step for d in draws) == [0, 1, 2]


def test_draw_too_many(small_schema, rng):
    with pytest.raises(InsufficientEntries):
        aeb.draw_exploited(_filled(small_schema, [0.1, 0.4]), 3, rng)


def test_draw_frequencies_follow_priorities(small_schema):
    rng = nn.make_rng(0, "draws")
    buf = _filled(small_schema, [0.0, math.log(2)])
    n = 30_000
    hits = sum(aeb.draw_exploited(buf, 1, rng)[0].entry.step == 1 for _ in range(n))
    assert abs(hits / n - 2 / 3) < 3 * math.sqrt((2 / 9) / n)


def test_draw_uniform_when_rewards_equal(small_schema):
    rng = nn.make_rng(1, "draws")
    buf = _filled(small_schema, [0.5] * 4)
    n = 8000
    counts = np.bincount([aeb.draw_exploited(buf, 1, rng)[0].entry.step for _ in range(n)], minlength=4)
    assert np.all(np.abs(counts / n - 0.25) < 3 * math.sqrt(0.25 * 0.75 / n))


def test_draw_weights_max_normalized(small_schema, rng):
    buf = _filled(small_schema, [0.1, 0.5, 0.9, 1.4])
    buf.beta = 0.7
    draws = aeb.draw_exploited(buf, 3, rng)
    raw = [aeb.importance_weight(d.priority, 4, 0.7) for d in draws]
    assert max(d.weight for d in draws) == 1.0
    assert np.allclose([d.weight for d in draws], np.array(raw) / max(raw))
    assert all(0 < d.priority <= 1 and d.weight > 0 for d in draws)


def test_compose_empty_buffer(small_schema, rng):
    explore, draws = aeb.compose_batch(list(range(64)), aeb.BufferState(10), 64, rng)
    assert len(explore) == 64 and draws == []


def test_compose_min_rule(small_schema, rng):
    buf = _filled(small_schema, np.linspace(0, 1, 10), 10)
    explore, draws = aeb.compose_batch(list(range(64)), buf, 64, rng)
    assert (len(draws), len(explore)) == (10, 54)


def test_compose_half_cap(small_schema, rng):
    buf = _filled(small_schema, np.linspace(0, 1, 40), 40)
    explore, draws = aeb.compose_batch(list(range(64)), buf, 64, rng)
    assert (len(draws), len(explore)) == (32, 32)


def test_compose_needs_exploring(small_schema, rng):
    buf = _filled(small_schema, np.linspace(0, 1, 10), 10)
    with pytest.raises(CompositionError):
        aeb.compose_batch(list(range(20)), buf, 64, rng)


def test_state_round_trip(small_schema):
    buf = _filled(small_schema, [0.2, 0.6], 5)
    buf.beta = 0.25
    back = aeb.BufferState.from_dict(buf.to_dict(), small_schema)
    assert back.entries == buf.entries and (back.capacity, back.beta) == (5, 0.25)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=1, max_size=40), st.integers(1, 12))
def test_priorities_sum_to_one_after_every_push(rewards, capacity):
    schema = ss.enumerable_schema()
    buf = aeb.BufferState(capacity)
    for i, r in enumerate(rewards):
        aeb.push(buf, _entry(schema, r, i))
        assert len(buf) <= capacity
        assert abs(aeb.priorities(buf).sum() - 1) < 1e-9


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 60), st.integers(2, 128))
def test_exploited_never_exceeds_half(size, batch):
    assert aeb.exploited_count(aeb.BufferState(size, entries=[None] * size), batch) <= batch / 2


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 50), st.floats(0, 1))
def test_uniform_priorities_give_unit_raw_weight(n, beta):
    assert aeb.importance_weight(np.full(n, 1 / n), n, beta) == pytest.approx(np.ones(n), abs=1e-12)

import itertools
import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from procache.errors import ConfigError
from procache.pattern import (
    MAX_ENUM_STEPS,
    CachingPattern,
    ConstraintSet,
    SearchConfig,
    activation_profile,
    check_constraints,
    count_patterns,
    enumerate_patterns,
    sample_patterns,
    select_best_pattern,
)


def brute_force(cs):
    """Scan all 2^(T-1) suffixes and apply the constraint definitions directly."""
    out = set()
    for tail in itertools.product((0, 1), repeat=cs.steps - 1):
        bits = (1,) + tail
        ts = [i + 1 for i, b in enumerate(bits) if b]
        gaps = [b - a - 1 for a, b in zip(ts, ts[1:])]
        if len(ts) > cs.budget:
            continue
        if any(g < cs.v_min or g > cs.v_max for g in gaps):
            continue
        if cs.steps - ts[-1] > cs.tail_limit:
            continue
        if cs.require_monotonic and any(b > a for a, b in zip(gaps, gaps[1:])):
            continue
        out.add(bits)
    return out


constraint_sets = st.builds(
    lambda T, B, lo, span, mono: ConstraintSet(T, min(B, T), min(lo, T - 1), min(lo + span, T - 1), mono),
    st.integers(2, 12),
    st.integers(1, 12),
    st.integers(0, 4),
    st.integers(0, 4),
    st.booleans(),
)


# -- profile ------------------------------------------------------------------


@pytest.mark.parametrize(
    "bits,timestamps,intervals",
    [
        ([1, 0, 0, 1, 0, 0, 0, 1, 0, 0], (1, 4, 8), (2, 3)),
        ([1, 1, 1], (1, 2, 3), (0, 0)),
        ([1, 0, 0, 0, 0], (1,), ()),
    ],
)
def test_activation_profile(bits, timestamps, intervals):
    prof = activation_profile(CachingPattern(bits))
    assert prof.timestamps == timestamps
    assert prof.intervals == intervals
    assert prof.count == sum(bits)


@given(st.lists(st.integers(0, 1), min_size=0, max_size=40))
def test_profile_round_trip(tail):
    p = CachingPattern([1] + tail)
    prof = activation_profile(p)
    ts = [prof.timestamps[0]]
    for v in prof.intervals:
        ts.append(ts[-1] + v + 1)
    assert tuple(ts) == tuple(t for t, b in enumerate(p.bits, 1) if b)


@pytest.mark.parametrize("bits", [[], [0, 1], [1, 2], [1, -1]])
def test_invalid_patterns_rejected(bits):
    with pytest.raises(ConfigError):
        CachingPattern(bits)


def test_code_round_trip_and_json(tmp_path):
    p = CachingPattern([1, 0, 1, 1, 0])
    assert CachingPattern.from_code(p.code, 5) == p
    path = tmp_path / "p.json"
    p.save(path, {"budget": 3})
    obj = json.loads(path.read_text())
    assert obj == {"steps": 5, "bits": [1, 0, 1, 1, 0], "meta": {"budget": 3}}
    assert CachingPattern.load(path) == p


def test_uniform_pattern_is_fora_style():
    assert str(CachingPattern.uniform(10, 3)) == "1001001001"
    assert CachingPattern.uniform(50, 3).activations == 17


# -- constraints ----------------------------------------------------------------


@pytest.mark.parametrize(
    "bits,cs,expected",
    [
        ([1, 0, 0, 0, 0, 1, 0, 0, 0, 1, 0, 1], ConstraintSet(12, 4, 1, 4, True), []),
        ([1, 0, 1, 0, 0, 0, 1], ConstraintSet(7, 3, 1, 3, True), ["monotonic"]),
        ([1, 1, 1, 1, 1], ConstraintSet(5, 5, 0, 2, True), []),
        ([1, 0, 1, 0, 0, 0, 1], ConstraintSet(7, 3, 1, 3, False), []),
        ([1, 1, 1, 1, 1], ConstraintSet(5, 3, 0, 2), ["budget"]),
        ([1, 0, 0, 0, 1], ConstraintSet(5, 3, 0, 2), ["bounded"]),
        ([1, 1, 0, 0, 0], ConstraintSet(5, 3, 0, 2), ["bounded"]),  # tail of 3 > v_max
        ([1, 1, 1, 0, 0, 0, 1], ConstraintSet(7, 2, 1, 2, True), ["budget", "bounded", "monotonic"]),
    ],
)
def test_check_constraints(bits, cs, expected):
    assert check_constraints(CachingPattern(bits), cs) == expected


def test_check_constraints_length_mismatch():
    with pytest.raises(ConfigError):
        check_constraints(CachingPattern([1, 0]), ConstraintSet(3, 2, 0, 1))


@pytest.mark.parametrize(
    "kw",
    [
        dict(steps=5, budget=0, v_min=0, v_max=1),
        dict(steps=5, budget=6, v_min=0, v_max=1),
        dict(steps=5, budget=2, v_min=3, v_max=2),
        dict(steps=5, budget=2, v_min=0, v_max=5),
        dict(steps=0, budget=1, v_min=0, v_max=0),
    ],
)
def test_constraint_set_invariants(kw):
    with pytest.raises(ConfigError):
        ConstraintSet(**kw)


# -- enumeration ----------------------------------------------------------------


def test_enumerate_unconstrained_small():
    pats = enumerate_patterns(ConstraintSet(4, 4, 0, 3))
    assert len(pats) == 8
    assert {p.bits[0] for p in pats} == {1}


def test_enumerate_t6_b2():
    got = {str(p) for p in enumerate_patterns(ConstraintSet(6, 2, 2, 3))}
    assert got == {"100100", "100010"}


def test_single_activation_space():
    pats = enumerate_patterns(ConstraintSet(5, 1, 0, 4))
    assert [str(p) for p in pats] == ["10000"]


def test_infeasible_space_is_empty():
    cs = ConstraintSet(50, 2, 0, 3)
    assert count_patterns(cs) == 0
    assert enumerate_patterns(cs) == []


def test_enumeration_guard():
    cs = ConstraintSet(MAX_ENUM_STEPS + 1, 3, 0, 3)
    with pytest.raises(ConfigError, match=str(MAX_ENUM_STEPS)):
        enumerate_patterns(cs)
    with pytest.raises(ConfigError):
        count_patterns(cs)


@given(constraint_sets)
@settings(max_examples=150, deadline=None)
def test_enumeration_matches_brute_force(cs):
    pats = enumerate_patterns(cs)
    assert len(pats) == len({p.bits for p in pats})
    assert {p.bits for p in pats} == brute_force(cs)
    assert count_patterns(cs) == len(pats)


def test_t50_monotonic_reference_count(golden):
    cs = ConstraintSet(50, 17, 2, 5, require_monotonic=True)
    assert count_patterns(cs) == golden["t50_mono_count"] == 473
    pats = enumerate_patterns(cs)
    assert len(pats) == 473
    for p in pats[::37]:
        assert check_constraints(p, cs) == []


@pytest.mark.parametrize(
    "tail,count", [(0, 88), (2, 255), (5, 473)]
)
def test_t50_tail_convention_sensitivity(tail, count):
    cs = ConstraintSet(50, 17, 2, 5, require_monotonic=True, max_tail=tail)
    assert count_patterns(cs) == count


# -- sampling -------------------------------------------------------------------


def test_sampler_returns_full_set_at_saturation():
    cs = ConstraintSet(10, 3, 2, 4)
    rep = sample_patterns(cs, SearchConfig(quota=50, max_attempts=10**6, seed=0))
    expected = {p.bits for p in enumerate_patterns(cs)}
    assert len(expected) == 9
    assert {p.bits for p in rep.patterns} == expected
    assert rep.attempts == 10**6


def test_sampler_quota_one():
    cs = ConstraintSet(5, 5, 0, 4)
    rep = sample_patterns(cs, SearchConfig(quota=1, max_attempts=100))
    assert len(rep.patterns) == 1
    assert check_constraints(rep.patterns[0], cs) == []


@pytest.mark.parametrize("proposal", ["bits", "intervals"])
def test_sampler_deterministic(proposal):
    cs = ConstraintSet(20, 7, 2, 4)
    sc = SearchConfig(quota=5, seed=11, proposal=proposal)
    a = sample_patterns(cs, sc)
    b = sample_patterns(cs, sc)
    assert a.patterns == b.patterns
    assert a.to_json() == b.to_json()
    assert a.patterns != sample_patterns(cs, SearchConfig(quota=5, seed=12, proposal=proposal)).patterns


@pytest.mark.parametrize("proposal", ["bits", "intervals"])
@given(cs=constraint_sets, seed=st.integers(0, 2**64 - 1))
@settings(max_examples=40, deadline=None)
def test_sampler_soundness(proposal, cs, seed):
    sc = SearchConfig(quota=10, max_attempts=2000, seed=seed, proposal=proposal)
    rep = sample_patterns(cs, sc)
    assert rep.attempts <= sc.max_attempts
    assert len(rep.patterns) <= sc.quota
    assert len({p.bits for p in rep.patterns}) == len(rep.patterns)
    for p in rep.patterns:
        assert check_constraints(p, cs.with_monotonic(False)) == []


@given(cs=constraint_sets, seed=st.integers(0, 2**32))
@settings(max_examples=40, deadline=None)
def test_monotonic_filter(cs, seed):
    cs = cs.with_monotonic(True)
    rep = sample_patterns(cs, SearchConfig(quota=10, max_attempts=3000, seed=seed), enforce_monotonic=True)
    for p in rep.patterns:
        v = activation_profile(p).intervals
        assert all(b <= a for a, b in zip(v, v[1:]))


def test_sampler_ignores_monotonic_unless_asked():
    cs = ConstraintSet(12, 5, 0, 3, require_monotonic=True)
    found = sample_patterns(cs, SearchConfig(quota=10**4, max_attempts=10**5, seed=1)).patterns
    assert {p.bits for p in found} == brute_force(cs.with_monotonic(False))


def test_saturation_report_when_infeasible():
    cs = ConstraintSet(12, 2, 0, 3)
    rep = sample_patterns(cs, SearchConfig(quota=5, max_attempts=5000, seed=0))
    assert rep.empty
    assert rep.attempts == 5000
    assert sum(rep.rejections.values()) == 5000
    assert rep.rejections["budget"] > 0 and rep.rejections["bounded"] > 0
    assert rep.to_json()["count"] == 0


def test_found_at_checkpoints_monotone():
    cs = ConstraintSet(16, 6, 1, 3)
    rep = sample_patterns(cs, SearchConfig(quota=20000, max_attempts=20000, seed=3), checkpoints=(10, 100, 1000, 20000))
    counts = [rep.found_at[c] for c in (10, 100, 1000, 20000)]
    assert counts == sorted(counts)
    assert counts[-1] == len(rep.patterns)


@pytest.mark.parametrize("kw", [dict(quota=0), dict(quota=5, max_attempts=4), dict(eval_seeds=()), dict(proposal="x")])
def test_search_config_invariants(kw):
    with pytest.raises(ConfigError):
        SearchConfig(**kw)


# -- selection ------------------------------------------------------------------


class TableSim:
    """Stand-in simulator with fixed scores, to test the reduction alone."""

    def __init__(self, scores):
        self.scores = scores

    def evaluate(self, p, seeds, batch):
        return self.scores[str(p)], p.activations / p.length


def test_select_best_minimises_score():
    sim = TableSim({"1111": 0.0, "1010": 0.2, "1001": 0.1})
    cands = [CachingPattern(b) for b in ([1, 0, 1, 0], [1, 1, 1, 1], [1, 0, 0, 1])]
    win, evals = select_best_pattern(cands, sim, SearchConfig())
    assert str(win.pattern) == "1111" and win.proxy_score == 0.0
    assert [str(e.pattern) for e in evals] == ["1010", "1111", "1001"]


def test_select_best_tie_breaks():
    sim = TableSim({"1100": 0.5, "1010": 0.5, "1110": 0.5, "1001": 0.5})
    cands = [CachingPattern(b) for b in ([1, 1, 1, 0], [1, 1, 0, 0], [1, 0, 1, 0])]
    win, _ = select_best_pattern(cands, sim, SearchConfig())
    # fewer activations first, then the smaller bit string
    assert str(win.pattern) == "1010"


def test_select_best_single_and_empty():
    p = CachingPattern([1, 0])
    win, _ = select_best_pattern([p], TableSim({"10": 0.3}), SearchConfig())
    assert win.pattern == p
    with pytest.raises(ConfigError):
        select_best_pattern([], TableSim({}), SearchConfig())


def test_select_best_with_ordered_executor():
    from concurrent.futures import ThreadPoolExecutor

    sim = TableSim({"1100": 0.3, "1010": 0.1, "1001": 0.2})
    cands = [CachingPattern(b) for b in ([1, 1, 0, 0], [1, 0, 1, 0], [1, 0, 0, 1])]
    with ThreadPoolExecutor(3) as ex:
        par = select_best_pattern(cands, sim, SearchConfig(), map_fn=ex.map)
    assert par == select_best_pattern(cands, sim, SearchConfig())


def test_search_winner_golden(ref_sim, golden):
    g = golden["search_t20_b7_v2_4"]
    cs = ConstraintSet(20, 7, 2, 4)
    sc = SearchConfig(quota=5, seed=0)
    rep = sample_patterns(cs, sc)
    assert [str(p) for p in rep.patterns] == g["candidates"]
    win, evals = select_best_pattern(rep.patterns, ref_sim, sc)
    assert str(win.pattern) == g["winner"]
    assert [e.proxy_score for e in evals] == pytest.approx(g["scores"], rel=1e-12)


def test_all_ones_candidate_wins(ref_sim):
    cands = [CachingPattern.uniform(20, 3), CachingPattern.all_ones(20)]
    win, _ = select_best_pattern(cands, ref_sim, SearchConfig())
    assert win.pattern == CachingPattern.all_ones(20)
    assert win.proxy_score == 0.0

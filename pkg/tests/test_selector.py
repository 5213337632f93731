"""The trace chooser: adversarial in choice, constrained in what it can see."""

import random

import pytest

from tpsim.core import AddressMap, CacheGeometry, DomainPolicy, DomainSpec
from tpsim.microarch import (
    MicroArchState,
    OffCoreFlush,
    OnCoreFlush,
    PadTo,
    Read,
    Write,
    adheres,
    visible_projection,
)
from tpsim.selector import perturb_invisible, select_trace, select_trace_peeking

G = CacheGeometry(line_size=64, num_sets=64, num_ways=2, page_size=1024)
POL = DomainPolicy(
    domains=(
        DomainSpec(0, frozenset({0, 1}), frozenset(), frozenset()),
        DomainSpec(1, frozenset({2, 3}), frozenset(), frozenset()),
    ),
    kernel_globals=frozenset({0xC80}),
    switch_deadline=320,
    slice_length=8192,
)
AMAP = AddressMap(1024, {
    0x10000: 0x1400, 0x10400: 0x2400, 0x10800: 0x1000,
    0x20000: 0x3C00, 0x20400: 0x4C00,
})
UNIVERSE = [p + off for p in (0x0, 0x400, 0xC00, 0x1000, 0x1400, 0x2400,
                              0x3C00, 0x4C00)
            for off in range(0, 1024, 64)]


def _vis(state, observer=0):
    return visible_projection(state, observer, POL, "executing", G)


def test_selection_is_deterministic():
    s = MicroArchState.initial(G, 8)
    ta = {0x10000, 0x10400}
    for seed in range(50):
        a = select_trace(ta, _vis(s), AMAP, 64, seed)
        b = select_trace(ta, _vis(s), AMAP, 64, seed)
        assert a == b
        assert a != select_trace(ta, _vis(s), AMAP, 64, f"other:{seed}")


def test_selected_traces_adhere():
    rng = random.Random("adh")
    pages = sorted(AMAP.pages)
    for trial in range(300):
        ta = set(rng.sample(pages, rng.randint(1, 3)))
        s = MicroArchState.initial(G, 8)
        tr = select_trace(ta, _vis(s), AMAP, rng.randint(1, 64), trial,
                          allow_flushes=bool(trial % 2), pad_to=10_000)
        ok, idx = adheres(tr, ta, AMAP, POL.kernel_globals)
        assert ok, (trial, idx, tr[idx] if idx is not None else None)


def test_budget_is_respected_and_empty_ta_is_empty():
    s = MicroArchState.initial(G, 8)
    for budget in (1, 3, 17, 64):
        tr = select_trace({0x10000, 0x10400, 0x20000}, _vis(s), AMAP, budget, 9)
        assert 1 <= len(tr) <= budget
    assert select_trace(set(), _vis(s), AMAP, 8, 0) == ()
    with pytest.raises(ValueError):
        select_trace({0x10000}, _vis(s), AMAP, 0, 0)


def test_operation_mix_over_many_seeds():
    """Reads dominate, writes land near a quarter, flush decoration shows up
    only when asked for."""
    s = MicroArchState.initial(G, 8)
    ta = {0x10000, 0x10400}
    reads = writes = 0
    saw_oncore = saw_offcore = saw_pad = False
    for seed in range(400):
        plain = select_trace(ta, _vis(s), AMAP, 32, seed)
        assert all(isinstance(op, (Read, Write)) for op in plain)
        reads += sum(isinstance(op, Read) for op in plain)
        writes += sum(isinstance(op, Write) for op in plain)
        rich = select_trace(ta, _vis(s), AMAP, 32, seed,
                            allow_flushes=True, pad_to=99_999)
        saw_oncore = saw_oncore or any(isinstance(op, OnCoreFlush) for op in rich)
        saw_offcore = saw_offcore or any(isinstance(op, OffCoreFlush) for op in rich)
        saw_pad = saw_pad or any(isinstance(op, PadTo) for op in rich)
    frac = writes / (reads + writes)
    assert 0.15 < frac < 0.35
    assert saw_oncore and saw_offcore and saw_pad


def test_visible_projection_is_the_whole_story():
    """Re-rolling the sets the chooser cannot see must not change its pick."""
    rng = random.Random("dep")
    ta = {0x10000, 0x10400, 0x10800}
    for trial in range(300):
        s = MicroArchState.initial(G, 8)
        # run a couple of ops so the state is not pristine
        flushable = tuple(rng.getrandbits(64) for _ in range(8))
        s = MicroArchState(flushable, s.sets, clock=rng.randrange(5000))
        p = perturb_invisible(s, 0, POL, G, UNIVERSE, seed=trial)
        assert _vis(s) == _vis(p)
        assert p.flushable == s.flushable and p.clock == s.clock
        base = select_trace(ta, _vis(s), AMAP, 48, trial)
        assert select_trace(ta, _vis(p), AMAP, 48, trial) == base


def test_peeking_variant_reacts_to_hidden_state():
    ta = {0x10000, 0x10400, 0x10800}
    hits = 0
    for trial in range(100):
        s = MicroArchState.initial(G, 8)
        p = perturb_invisible(s, 0, POL, G, UNIVERSE, seed=f"peek:{trial}")
        a = select_trace_peeking(ta, s, _vis(s), AMAP, 48, trial)
        b = select_trace_peeking(ta, p, _vis(p), AMAP, 48, trial)
        if a != b:
            hits += 1
    assert hits > 50  # hidden sets were rerolled, the choice should swing


def test_perturb_leaves_single_domain_alone():
    solo = DomainPolicy(
        domains=(DomainSpec(0, frozenset({0, 1, 2, 3}), frozenset(), frozenset()),),
        kernel_globals=frozenset(), switch_deadline=320, slice_length=8192,
    )
    s = MicroArchState.initial(G, 8)
    assert perturb_invisible(s, 0, solo, G, UNIVERSE, seed=1) is s

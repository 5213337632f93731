"""Randomized property suites over the hardware model, selector and kernel.

Each check builds its own inputs from a seeded generator, runs a fixed number
of cases and reports the failures it saw; nothing here depends on global
state.  The CLI surfaces these through `check --suite ...`, and the test suite
drives the same functions at larger case counts.

The locality checks all follow one scheme: construct two states that agree
exactly on the slice of state an operation is allowed to depend on, hand both
the same nondeterminism, and require identical costs (and, where it applies,
identical effects on that slice).
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable

from .config import RunConfig
from .core import (
    CacheGeometry,
    ConfigError,
    set_index_of,
    universe_lines,
)
from .kernel import (
    INPUT_KINDS,
    Input,
    KERNEL_CALLS,
    NOOP,
    RAW_ACCESS,
    RunOptions,
    StepRecord,
    SYS_ALLOC,
    SystemRunner,
    partition_subset_invariant,
)
from .microarch import (
    CacheSet,
    CostModel,
    MicroArchState,
    NondetOracle,
    OffCoreFlush,
    OnCoreFlush,
    Read,
    Write,
    _adv_update,
    _adv_victim,
    _plru_touch,
    _plru_victim,
    adheres,
    apply_op,
    flushable_reset,
    offcore_flush_cost,
    oncore_flush_cost,
    visible_projection,
)
from .selector import perturb_invisible, select_trace, select_trace_peeking

PROPERTY_CHECKS = (
    "access-cost-locality",
    "offcore-flush-locality",
    "oncore-flush-dependence",
    "wcet-bounds",
    "replacement-sanity",
    "selector-dependency",
)
INVARIANT_CHECKS = (
    "run-invariants",
    "ta-adherence",
)
SUITES = ("properties", "invariants", "all")


@dataclass
class CheckResult:
    name: str
    cases: int
    failures: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures

    def fail(self, case: int, msg: str) -> None:
        self.failures.append(f"case {case}: {msg}")

    def format(self) -> str:
        if self.ok:
            return f"PASS {self.name} ({self.cases} cases)"
        head = f"FAIL {self.name} ({len(self.failures)}/{self.cases} cases)"
        return head + "".join("\n  " + f for f in self.failures[:5])


# --- random state construction ---------------------------------------------------

def _set_pools(cfg: RunConfig) -> dict[int, list[int]]:
    pools: dict[int, list[int]] = {i: [] for i in range(cfg.geometry.num_sets)}
    for line in sorted(universe_lines(cfg.universe_pages, cfg.geometry)):
        pools[set_index_of(line, cfg.geometry)].append(line)
    return pools


def _random_set(rng: random.Random, g: CacheGeometry, cm: CostModel,
                pool: list[int], adversarial: bool) -> CacheSet:
    n = rng.randint(0, g.num_ways)
    lines = rng.sample(pool, min(n, len(pool)))
    ways = [(g.line_of(p), rng.randint(1, cm.max_level)) for p in lines]
    ways += [None] * (g.num_ways - len(ways))
    rng.shuffle(ways)
    if adversarial:
        meta = rng.getrandbits(64)
    else:
        meta = rng.getrandbits(max(g.num_ways - 1, 1))
    return CacheSet(ways=tuple(ways), meta=meta)


def _random_state(rng: random.Random, cfg: RunConfig,
                  pools: dict[int, list[int]]) -> MicroArchState:
    g, cm = cfg.geometry, cfg.cost_model
    adversarial = cfg.policy.replacement == "adversarial"
    sets = tuple(
        _random_set(rng, g, cm, pools[i], adversarial) for i in range(g.num_sets)
    )
    flushable = tuple(rng.getrandbits(64) for _ in range(cm.flushable_words))
    return MicroArchState(flushable=flushable, sets=sets,
                          clock=rng.randrange(1 << 20))


def _paired_oracles(key: str) -> tuple[NondetOracle, NondetOracle]:
    return NondetOracle(key=key), NondetOracle(key=key)


# --- cost locality ---------------------------------------------------------------

def check_access_cost_locality(cfg: RunConfig, trials: int, seed: object) -> CheckResult:
    """Perturbing any set other than the accessed line's own leaves the access
    cost and the accessed set's new content unchanged."""
    res = CheckResult("access-cost-locality", trials)
    g, cm = cfg.geometry, cfg.cost_model
    pools = _set_pools(cfg)
    rng = random.Random(f"{seed}:access-locality")
    lines = sorted(universe_lines(cfg.universe_pages, g))
    adversarial = cfg.policy.replacement == "adversarial"
    for t in range(trials):
        s1 = _random_state(rng, cfg, pools)
        p = rng.choice(lines)
        idx = set_index_of(p, g)
        others = [i for i in range(g.num_sets) if i != idx and pools[i]]
        j = rng.choice(others)
        s2 = replace(s1, sets=s1.sets[:j] + (
            _random_set(rng, g, cm, pools[j], adversarial),
        ) + s1.sets[j + 1:])
        op = Read(rng.getrandbits(32), p) if rng.random() < 0.75 else Write(rng.getrandbits(32), p)
        o1, o2 = _paired_oracles(f"{seed}:al:{t}")
        r1 = apply_op(s1, op, o1, g, cm, cfg.policy)
        r2 = apply_op(s2, op, o2, g, cm, cfg.policy)
        if r1.clock - s1.clock != r2.clock - s2.clock:
            res.fail(t, f"access cost changed with set {j} while touching set {idx}")
        elif r1.sets[idx] != r2.sets[idx]:
            res.fail(t, f"set {idx} post-state depends on unrelated set {j}")
        elif r1.flushable != r2.flushable:
            res.fail(t, "flushable mix depends on an unrelated cache set")
    return res


def check_offcore_flush_locality(cfg: RunConfig, trials: int, seed: object) -> CheckResult:
    """An off-core flush is local to the sets its targets collide with: cost
    ignores other sets, and other sets come through untouched."""
    res = CheckResult("offcore-flush-locality", trials)
    g, cm = cfg.geometry, cfg.cost_model
    pools = _set_pools(cfg)
    rng = random.Random(f"{seed}:offcore-locality")
    lines = sorted(universe_lines(cfg.universe_pages, g))
    adversarial = cfg.policy.replacement == "adversarial"
    for t in range(trials):
        s1 = _random_state(rng, cfg, pools)
        targets = frozenset(rng.sample(lines, rng.randint(1, 3)))
        indices = {set_index_of(a, g) for a in targets}
        others = [i for i in range(g.num_sets) if i not in indices and pools[i]]
        j = rng.choice(others)
        s2 = replace(s1, sets=s1.sets[:j] + (
            _random_set(rng, g, cm, pools[j], adversarial),
        ) + s1.sets[j + 1:])
        if offcore_flush_cost(s1, targets, g, cm) != offcore_flush_cost(s2, targets, g, cm):
            res.fail(t, f"flush cost depends on non-target set {j}")
            continue
        op = OffCoreFlush(targets)
        o1, o2 = _paired_oracles(f"{seed}:ol:{t}")
        r1 = apply_op(s1, op, o1, g, cm, cfg.policy)
        r2 = apply_op(s2, op, o2, g, cm, cfg.policy)
        bad = None
        for i in range(g.num_sets):
            want1 = s1.sets[i] if i not in indices else None
            if i in indices:
                if not r1.sets[i].is_empty() or r1.sets[i].meta != 0:
                    bad = f"target set {i} not scrubbed"
                    break
            elif r1.sets[i] != want1 or r2.sets[i] != s2.sets[i]:
                bad = f"non-target set {i} modified"
                break
        if bad:
            res.fail(t, bad)
        elif r1.clock - s1.clock != r2.clock - s2.clock:
            res.fail(t, "applied flush cost differs between the state pair")
    return res


def check_oncore_flush_dependence(cfg: RunConfig, trials: int, seed: object) -> CheckResult:
    """The on-core flush cost is a function of the flushable words alone, and
    its effect resets them regardless of everything else."""
    res = CheckResult("oncore-flush-dependence", trials)
    g, cm = cfg.geometry, cfg.cost_model
    pools = _set_pools(cfg)
    rng = random.Random(f"{seed}:oncore-dependence")
    for t in range(trials):
        s1 = _random_state(rng, cfg, pools)
        s2 = replace(_random_state(rng, cfg, pools), flushable=s1.flushable)
        if oncore_flush_cost(s1, cm) != oncore_flush_cost(s2, cm):
            res.fail(t, "cost differs between states with equal flushable words")
            continue
        o1, o2 = _paired_oracles(f"{seed}:on:{t}")
        r1 = apply_op(s1, OnCoreFlush(), o1, g, cm, cfg.policy)
        r2 = apply_op(s2, OnCoreFlush(), o2, g, cm, cfg.policy)
        if r1.clock - s1.clock != r2.clock - s2.clock:
            res.fail(t, "applied flush cost differs between the state pair")
        elif r1.flushable != flushable_reset(cm.flushable_words):
            res.fail(t, "flushable words not reset")
        elif r1.sets != s1.sets:
            res.fail(t, "on-core flush touched the cache sets")
    return res


def check_wcet_bounds(cfg: RunConfig, trials: int, seed: object) -> CheckResult:
    """Every operation's cost observes the configured bounds on every state."""
    res = CheckResult("wcet-bounds", trials)
    g, cm = cfg.geometry, cfg.cost_model
    pools = _set_pools(cfg)
    rng = random.Random(f"{seed}:wcet")
    lines = sorted(universe_lines(cfg.universe_pages, g))
    for t in range(trials):
        s = _random_state(rng, cfg, pools)
        oracle = NondetOracle(key=f"{seed}:wc:{t}")
        pick = rng.randrange(4)
        if pick == 0:
            op = Read(rng.getrandbits(32), rng.choice(lines))
            lo, hi = cm.cost_min, cm.cost_max + cm.jitter
        elif pick == 1:
            op = Write(rng.getrandbits(32), rng.choice(lines))
            lo, hi = cm.cost_min, cm.cost_max + cm.jitter
        elif pick == 2:
            op = OnCoreFlush()
            lo, hi = cm.oncore_flush_base, cm.oncore_flush_wcet
        else:
            op = OffCoreFlush(frozenset(rng.sample(lines, rng.randint(1, 3))))
            lo, hi = cm.offcore_flush_base, cm.offcore_flush_wcet
        r = apply_op(s, op, oracle, g, cm, cfg.policy)
        cost = r.clock - s.clock
        if not lo <= cost <= hi:
            res.fail(t, f"{type(op).__name__} cost {cost} outside [{lo}, {hi}]")
    return res


def check_replacement_sanity(cfg: RunConfig, trials: int, seed: object) -> CheckResult:
    """Victim choices stay in range; tree-PLRU never victimises the way it
    just touched; the adversarial update is injective in the old metadata."""
    res = CheckResult("replacement-sanity", trials)
    g = cfg.geometry
    rng = random.Random(f"{seed}:replacement")
    for t in range(trials):
        meta = rng.getrandbits(64)
        way = rng.randrange(g.num_ways)
        touched = _plru_touch(meta, way, g.num_ways)
        v = _plru_victim(touched, g.num_ways)
        if not 0 <= v < g.num_ways:
            res.fail(t, f"plru victim {v} out of range")
        elif g.num_ways > 1 and v == way:
            res.fail(t, f"plru victimised way {way} right after touching it")
            continue
        tag = rng.getrandbits(16)
        m1, m2 = rng.getrandbits(64), rng.getrandbits(64)
        if m1 != m2 and _adv_update(m1, tag) == _adv_update(m2, tag):
            res.fail(t, "adversarial update collapsed two metadata values")
        av = _adv_victim(rng.getrandbits(64), g.num_ways)
        if not 0 <= av < g.num_ways:
            res.fail(t, f"adversarial victim {av} out of range")
    return res


# --- selector dependency -----------------------------------------------------------

def check_selector_dependency(cfg: RunConfig, trials: int, seed: object,
                              peeking: bool = False) -> CheckResult:
    """Perturbing invisible sets must not change the selected trace.

    With peeking=True the same experiment drives the deliberately broken
    selector variant, which this suite is expected to flag.
    """
    name = "selector-dependency" + ("-peeking" if peeking else "")
    res = CheckResult(name, trials)
    g = cfg.geometry
    pools = _set_pools(cfg)
    rng = random.Random(f"{seed}:selector")
    vpages = sorted(cfg.amap.mapped_pages())
    ulines = universe_lines(cfg.universe_pages, g)
    budget = cfg.analysis.trace_budget
    for t in range(trials):
        s1 = _random_state(rng, cfg, pools)
        observer = rng.choice(cfg.policy.domain_ids())
        s2 = perturb_invisible(s1, observer, cfg.policy, g, ulines,
                               f"{seed}:perturb:{t}", max_level=cfg.cost_model.max_level)
        ta = rng.sample(vpages, rng.randint(1, min(3, len(vpages))))
        v1 = visible_projection(s1, observer, cfg.policy, "executing", g)
        v2 = visible_projection(s2, observer, cfg.policy, "executing", g)
        if v1 != v2:
            res.fail(t, "perturbation leaked into the visible projection")
            continue
        key = f"{seed}:trace:{t}"
        if peeking:
            t1 = select_trace_peeking(ta, s1, v1, cfg.amap, budget, key,
                                      line_size=g.line_size)
            t2 = select_trace_peeking(ta, s2, v2, cfg.amap, budget, key,
                                      line_size=g.line_size)
        else:
            t1 = select_trace(ta, v1, cfg.amap, budget, key, line_size=g.line_size)
            t2 = select_trace(ta, v2, cfg.amap, budget, key, line_size=g.line_size)
        if t1 != t2:
            res.fail(t, "trace changed under an invisible perturbation")
    return res


# --- whole-run audits ----------------------------------------------------------------

def _owned_objects(cfg: RunConfig, domain: int) -> list[str]:
    return sorted(o.ident for o in cfg.scenario.objects if o.owner == domain)


def _random_benign_input(cfg: RunConfig, domain: int, rng: random.Random) -> Input:
    kinds = [k for k in INPUT_KINDS if k != RAW_ACCESS]
    kind = rng.choice(kinds)
    if kind == NOOP:
        return Input(kind=NOOP)
    if kind == SYS_ALLOC:
        return Input(kind=SYS_ALLOC)
    objs = _owned_objects(cfg, domain)
    return Input(kind=kind, obj=rng.choice(objs),
                 offset=rng.randrange(4096), byte=rng.randrange(256))


def _random_fuzz_input(cfg: RunConfig, domain: int, rng: random.Random) -> Input:
    """Like the benign generator but occasionally hostile: raw accesses to
    arbitrary addresses, unknown objects, other domains' objects."""
    roll = rng.random()
    if roll < 0.15:
        if rng.random() < 0.5:
            base = rng.choice([o.base for o in cfg.scenario.objects])
            v = base + rng.randrange(cfg.amap.page_size)
        else:
            v = rng.randrange(1 << 28)
        return Input(kind=RAW_ACCESS, vaddr=v)
    obj_calls = sorted(set(KERNEL_CALLS) - {SYS_ALLOC})
    if roll < 0.20:
        return Input(kind=rng.choice(obj_calls), obj="no-such-object")
    if roll < 0.30:
        foreign = sorted(o.ident for o in cfg.scenario.objects if o.owner != domain)
        if foreign:
            return Input(kind=rng.choice(obj_calls),
                         obj=rng.choice(foreign), offset=rng.randrange(4096))
    return _random_benign_input(cfg, domain, rng)


def _random_schedule(cfg: RunConfig, slices: int, rng: random.Random,
                     gen: Callable[[RunConfig, int, random.Random], Input],
                     max_steps: int) -> dict[int, list[list[Input]]]:
    ids = cfg.policy.domain_ids()
    rotations = (slices + len(ids) - 1) // len(ids)
    return {
        d: [
            [gen(cfg, d, rng) for _ in range(rng.randint(1, max_steps))]
            for _ in range(rotations)
        ]
        for d in ids
    }


def audit_records(cfg: RunConfig, records: Iterable[StepRecord]) -> list[str]:
    """Offline re-check of a run's records, independent of the inline checks.

    Verifies trace adherence to the post-step touched set, the hard-failure
    discipline (no trace on a failed step), the partition invariant, and the
    switch postconditions including clock placement on the padded deadline.
    """
    problems = []
    policy, g = cfg.policy, cfg.geometry
    hard = {"ta-violation", "invariant", "bad-input"}
    for n, rec in enumerate(records):
        where = f"record {n} (slice {rec.slice_index}, {rec.kind})"
        ok, at = adheres(rec.trace, rec.ta_after, cfg.amap, policy.kernel_globals)
        if not ok:
            problems.append(f"{where}: trace op {at} does not adhere to the touched set")
        if any(f.kind in hard for f in rec.failures) and rec.trace != ():
            problems.append(f"{where}: hard failure yet a trace was applied")
        if rec.kind == "switch":
            mu = rec.s_mu_after
            if mu.flushable != flushable_reset(cfg.cost_model.flushable_words):
                problems.append(f"{where}: flushable state survived the switch")
            for idx in sorted(policy.global_set_indices(g)):
                if not mu.sets[idx].is_empty() or mu.sets[idx].meta != 0:
                    problems.append(f"{where}: kernel-global set {idx} not scrubbed")
            want = rec.s_mu_before.clock + policy.switch_deadline
            if mu.clock != want:
                problems.append(f"{where}: post-switch clock {mu.clock}, expected {want}")
            tick = (rec.slice_index + 1) * policy.slice_length \
                + rec.slice_index * policy.switch_deadline
            if rec.s_mu_before.clock != tick:
                problems.append(f"{where}: switch began at {rec.s_mu_before.clock}, "
                                f"not on the tick {tick}")
        else:
            ok, wit = partition_subset_invariant(
                rec.ta_after, rec.domain, policy, cfg.amap, g
            )
            flagged = any(f.kind == "invariant" for f in rec.failures)
            if ok is flagged:
                problems.append(f"{where}: invariant audit disagrees with the record")
    return problems


def check_run_invariants(cfg: RunConfig, trials: int, seed: object,
                         slices: int | None = None) -> CheckResult:
    """Benign random runs finish with zero failures and a clean audit."""
    res = CheckResult("run-invariants", trials)
    nslices = slices if slices is not None else 2 * len(cfg.policy.domains)
    for t in range(trials):
        rng = random.Random(f"{seed}:run:{t}")
        schedule = _random_schedule(cfg, nslices, rng, _random_benign_input, 3)
        runner = SystemRunner(cfg, f"{seed}:run:{t}", RunOptions())
        try:
            result = runner.run(slices=nslices, schedule=schedule)
        except Exception as e:
            res.fail(t, f"run raised {e!r}")
            continue
        if result.failures:
            res.fail(t, f"failures on a benign run: {result.failures[:2]}")
            continue
        for p in audit_records(cfg, result.records)[:2]:
            res.fail(t, p)
    return res


def check_ta_adherence(cfg: RunConfig, trials: int, seed: object,
                       slices: int | None = None) -> CheckResult:
    """Hostile fuzzing: every recorded trace still adheres to the touched set,
    and untracked accesses surface as TA violations rather than traces."""
    res = CheckResult("ta-adherence", trials)
    nslices = slices if slices is not None else 2 * len(cfg.policy.domains)
    for t in range(trials):
        rng = random.Random(f"{seed}:fuzz:{t}")
        schedule = _random_schedule(cfg, nslices, rng, _random_fuzz_input, 3)
        runner = SystemRunner(cfg, f"{seed}:fuzz:{t}", RunOptions(collect=True))
        result = runner.run(slices=nslices, schedule=schedule)
        for p in audit_records(cfg, result.records)[:2]:
            res.fail(t, p)
        for rec in result.records:
            if rec.kind == "switch" or rec.input is None:
                continue
            if rec.input.kind == RAW_ACCESS:
                tracked = any(f.kind == "ta-violation" for f in rec.failures) \
                    or (rec.input.vaddr or 0) - ((rec.input.vaddr or 0) % cfg.amap.page_size) \
                    in rec.ta_before
                if not tracked:
                    res.fail(t, f"raw access {rec.input.vaddr:#x} neither tracked "
                                f"nor flagged")
    return res


# --- suite driver -------------------------------------------------------------------

_PROPERTY_FNS: dict[str, Callable[[RunConfig, int, object], CheckResult]] = {
    "access-cost-locality": check_access_cost_locality,
    "offcore-flush-locality": check_offcore_flush_locality,
    "oncore-flush-dependence": check_oncore_flush_dependence,
    "wcet-bounds": check_wcet_bounds,
    "replacement-sanity": check_replacement_sanity,
    "selector-dependency": check_selector_dependency,
}
_INVARIANT_FNS: dict[str, Callable[[RunConfig, int, object], CheckResult]] = {
    "run-invariants": check_run_invariants,
    "ta-adherence": check_ta_adherence,
}


def run_suite(cfg: RunConfig, suite: str, trials: int, seed: object) -> list[CheckResult]:
    if suite not in SUITES:
        raise ConfigError(f"suite: unknown suite {suite!r}; know {', '.join(SUITES)}")
    results = []
    if suite in ("properties", "all"):
        for name in PROPERTY_CHECKS:
            results.append(_PROPERTY_FNS[name](cfg, trials, seed))
    if suite in ("invariants", "all"):
        # Whole runs cost more per case than the pointwise properties.
        for name in INVARIANT_CHECKS:
            results.append(_INVARIANT_FNS[name](cfg, max(1, trials // 20), seed))
    return results

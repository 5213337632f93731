"""Two-run checking of observer confidentiality, with plantable defects.

The property under test: take two system runs that agree on everything the
observer domain legitimately influences or sees (its own inputs, the slice
schedule, the nondeterminism consumed while its state is in play) and differ
arbitrarily in some other domain's secrets.  After every transition, the
observer's view must be identical across the pair.  The view has an abstract
part (the observer's objects, plus the touched set while it is the one
executing) and a microarchitectural part (its visible projection).  Variant
"u" compares only the abstract part; variant "u-mu" compares both.

Nondeterminism is aligned the only way that makes the property checkable:
oracle words consumed during the observer's own phases and during the shared
mechanism phase are identical across the pair, while words consumed during
other domains' phases are independent per run.  Schedules share their shape
(which step kinds happen where), so the runs stay in lockstep; only the other
domains' chosen values differ.

A checker that can only say yes is worthless, so mutations() lists six
deliberate defects, each of which the checker must catch: dropping either
flush, dropping the pad, a colouring that overlaps domains, an abstract
information flow, and a trace selector that keys on hidden state.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field, replace

from .config import RunConfig
from .core import (
    CacheGeometry,
    ConfigError,
    DomainPolicy,
    KERNEL_DOMAIN,
    colour_of,
    physical_universe,
    validate_policy,
)
from .kernel import (
    AbstractState,
    Input,
    NOOP,
    RunError,
    RunOptions,
    StepRecord,
    SystemRunner,
    SYS_ALLOC,
    SYS_READ,
    SYS_WRITE,
    USER_READ,
    USER_WRITE,
)
from .microarch import (
    MicroArchState,
    NondetOracle,
    OffCoreFlush,
    OnCoreFlush,
    PadTo,
    VisibleProjection,
    visible_projection,
)

MUTATIONS = (
    "no-oncore-flush",
    "no-offcore-global-flush",
    "no-pad",
    "bad-colouring",
    "ta-leak",
    "selector-peek",
)


def mutations() -> tuple[str, ...]:
    """Identifiers of the plantable defects, exactly six of them."""
    return MUTATIONS


@dataclass(frozen=True)
class ObserverView:
    """Everything one domain can see at a checkpoint."""

    observer: int
    role: str                                   # executing | suspended
    objects: tuple[tuple[str, bool, tuple[tuple[int, int], ...]], ...]
    ta: frozenset[int] | None                   # own touched set, executing only
    micro: VisibleProjection


def observer_view(abstract: AbstractState, micro: MicroArchState, observer: int,
                  policy: DomainPolicy, g: CacheGeometry) -> ObserverView:
    role = "executing" if abstract.current == observer else "suspended"
    objs = tuple(
        (o.ident, o.allocated, tuple(sorted(o.payload.items())))
        for o in sorted(abstract.objects.values(), key=lambda o: o.ident)
        if o.owner == observer
    )
    ta = frozenset(abstract.ta) if role == "executing" else None
    return ObserverView(
        observer=observer,
        role=role,
        objects=objs,
        ta=ta,
        micro=visible_projection(micro, observer, policy, role, g),
    )


def _diff_views(a: ObserverView, b: ObserverView, include_micro: bool) -> str | None:
    """Name of the first differing field, or None when equal."""
    if a.role != b.role:
        return "role"
    if a.ta != b.ta:
        return "ta"
    ids_a = [o[0] for o in a.objects]
    ids_b = [o[0] for o in b.objects]
    if ids_a != ids_b:
        return "objects"
    for (ident, alloc_a, pay_a), (_, alloc_b, pay_b) in zip(a.objects, b.objects):
        if alloc_a != alloc_b:
            return f"objects[{ident}].allocated"
        if pay_a != pay_b:
            return f"objects[{ident}].payload"
    if not include_micro:
        return None
    ma, mb = a.micro, b.micro
    if ma.flushable != mb.flushable:
        return "micro.flushable"
    if ma.clock != mb.clock:
        return "micro.clock"
    if tuple(i for i, _ in ma.visible_sets) != tuple(i for i, _ in mb.visible_sets):
        return "micro.visible_sets"
    for (idx, sa), (_, sb) in zip(ma.visible_sets, mb.visible_sets):
        if sa != sb:
            return f"micro.sets[{idx}]"
    return None


def low_equiv(s1: AbstractState, s2: AbstractState,
              s_mu1: MicroArchState, s_mu2: MicroArchState,
              observer: int, policy: DomainPolicy, g: CacheGeometry,
              role: str | None = None,
              include_micro: bool = True) -> tuple[bool, str | None]:
    """Observer equivalence of two state pairs; names the first odd field out.

    The role is normally derived from who is current; passing it explicitly
    pins the projection for single-state-pair comparisons in tests.
    """
    va = observer_view(s1, s_mu1, observer, policy, g)
    vb = observer_view(s2, s_mu2, observer, policy, g)
    if role is not None:
        va = replace(va, role=role, ta=va.ta if role == "executing" else None,
                     micro=visible_projection(s_mu1, observer, policy, role, g))
        vb = replace(vb, role=role, ta=vb.ta if role == "executing" else None,
                     micro=visible_projection(s_mu2, observer, policy, role, g))
    diff = _diff_views(va, vb, include_micro)
    return (diff is None, diff)


# --- schedule construction ------------------------------------------------------

_KIND_CHOICES = (
    (USER_READ, 0.22),
    (USER_WRITE, 0.20),
    (SYS_READ, 0.20),
    (SYS_WRITE, 0.20),
    (SYS_ALLOC, 0.08),
    (NOOP, 0.10),
)


def _pick_kind(rng: random.Random) -> str:
    x = rng.random()
    acc = 0.0
    for kind, w in _KIND_CHOICES:
        acc += w
        if x < acc:
            return kind
    return NOOP


def build_schedule(cfg: RunConfig, observer: int, trial_key: str, run_tag: str,
                   steps_per_slice: int = 3) -> dict[int, list[list[Input]]]:
    """One run's inputs.  Shape (step kinds, counts) is shared across a pair;
    values are shared for the observer and tagged per run for everyone else."""
    policy = cfg.policy
    ids = policy.domain_ids()
    slices = cfg.scenario.slices
    objects_of = {
        d: sorted(o.ident for o in cfg.scenario.objects if o.owner == d)
        for d in ids
    }
    sizes = {o.ident: o.size for o in cfg.scenario.objects}

    schedule: dict[int, list[list[Input]]] = {}
    for pos, dom in enumerate(ids):
        rotations = len(range(pos, slices, len(ids)))
        tag = "" if dom == observer else f":{run_tag}"
        batches = []
        for rot in range(rotations):
            shape_rng = random.Random(f"{trial_key}:shape:{dom}:{rot}")
            value_rng = random.Random(f"{trial_key}:value:{dom}:{rot}{tag}")
            batch = []
            for _ in range(shape_rng.randint(1, steps_per_slice)):
                kind = _pick_kind(shape_rng)
                if kind in (NOOP, SYS_ALLOC):
                    batch.append(Input(kind=kind))
                    continue
                pool = objects_of[dom]
                if not pool:
                    batch.append(Input(kind=NOOP))
                    continue
                obj = value_rng.choice(pool)
                batch.append(Input(
                    kind=kind,
                    obj=obj,
                    offset=value_rng.randrange(max(sizes[obj], 1)),
                    byte=value_rng.randrange(256),
                ))
            batches.append(batch)
        schedule[dom] = batches
    return schedule


def _pair_oracle_factory(pair_key: str, observer: int, run_tag: str):
    def factory(slice_index: int, domain: int, phase: str) -> NondetOracle:
        key = f"{pair_key}:oracle:{slice_index}:{domain}:{phase}"
        if domain != observer and domain != KERNEL_DOMAIN:
            key += f":{run_tag}"
        return NondetOracle(key=key)
    return factory


# --- mutations ------------------------------------------------------------------

def apply_mutation(cfg: RunConfig, options: RunOptions, mutation: str | None,
                   observer: int) -> tuple[RunConfig, RunOptions]:
    """Translate a mutation id into a config or option transform."""
    if mutation in (None, "none"):
        return cfg, options
    if mutation == "no-oncore-flush":
        return cfg, replace(options, skip_oncore_flush=True)
    if mutation == "no-offcore-global-flush":
        return cfg, replace(options, skip_offcore_flush=True)
    if mutation == "no-pad":
        return cfg, replace(options, skip_pad=True)
    if mutation == "ta-leak":
        return cfg, replace(options, ta_leak=True)
    if mutation == "selector-peek":
        return cfg, replace(options, selector_peek=True)
    if mutation == "bad-colouring":
        return _bad_colouring(cfg, observer), options
    raise ConfigError(f"unknown mutation {mutation!r}; know {', '.join(MUTATIONS)}")


def _bad_colouring(cfg: RunConfig, observer: int) -> RunConfig:
    """Remap one foreign object into the observer's colour.

    The foreign domain is also granted that colour, so the kernel's own
    runtime invariant stays green; only the static policy validation (which
    this mutated system pointedly skips) would object.  The effect is two
    domains sharing cache sets, which is the defect being planted.
    """
    g = cfg.geometry
    policy = cfg.policy
    high = next(d for d in policy.domain_ids() if d != observer)
    low_colour = min(policy.domain(observer).colours)

    victims = sorted(
        (o for o in cfg.scenario.objects if o.owner == high),
        key=lambda o: o.ident,
    )
    if not victims:
        raise ConfigError(f"bad-colouring: domain {high} owns no objects to remap")
    victim = victims[0]
    first = g.page_of(victim.base)
    last = g.page_of(victim.base + victim.size - 1)
    vpages = list(range(first, last + 1, g.page_size))

    used = set(cfg.universe_pages) | set(cfg.amap.pages.values())
    candidate = (max(used) + g.page_size) if used else 0
    pages = dict(cfg.amap.pages)
    for vpage in vpages:
        while colour_of(candidate, g) != low_colour or candidate in used:
            candidate += g.page_size
        pages[vpage] = candidate
        used.add(candidate)
        candidate += g.page_size

    amap = replace(cfg.amap, pages=pages)
    domains = tuple(
        replace(d, colours=d.colours | {low_colour}) if d.ident == high else d
        for d in policy.domains
    )
    new_policy = replace(policy, domains=domains)
    universe = physical_universe(new_policy, amap, g)
    return replace(cfg, policy=new_policy, amap=amap, universe_pages=universe)


# --- the checker ------------------------------------------------------------------

@dataclass(frozen=True)
class Violation:
    trial: int
    transition: int
    kind: str
    slice_index: int
    domain: int
    field: str
    a: str
    b: str

    def __str__(self):
        return (
            f"trial {self.trial} transition {self.transition} "
            f"({self.kind}, slice {self.slice_index}, domain {self.domain}): "
            f"{self.field} differs: {self.a} vs {self.b}"
        )


@dataclass
class ConfidentialityReport:
    variant: str
    observer: int
    trials: int
    seed: object
    mutation: str
    violations: list[Violation]
    transitions: int
    hypothesis_ok: bool
    hypothesis_notes: list[str] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    @property
    def first_witness(self) -> Violation | None:
        return self.violations[0] if self.violations else None

    def format(self) -> str:
        lines = [
            f"confidentiality-{self.variant} report",
            f"seed {self.seed} observer {self.observer} trials {self.trials} "
            f"mutation {self.mutation}",
            f"transitions compared: {self.transitions}",
            "hypothesis: " + ("ok" if self.hypothesis_ok else
                              "NOT SATISFIED (" + "; ".join(self.hypothesis_notes) + ")"),
            f"violations: {len(self.violations)}",
        ]
        if self.violations:
            lines.append("first witness: " + str(self.first_witness))
        lines.extend(self.notes)
        return "\n".join(lines)


def _field_values(va: ObserverView, vb: ObserverView, fieldname: str) -> tuple[str, str]:
    def pick(v: ObserverView):
        if fieldname == "role":
            return v.role
        if fieldname == "ta":
            return sorted(v.ta) if v.ta is not None else None
        if fieldname.startswith("objects"):
            return v.objects
        if fieldname == "micro.flushable":
            return v.micro.flushable
        if fieldname == "micro.clock":
            return v.micro.clock
        return v.micro.visible_sets
    ra, rb = repr(pick(va)), repr(pick(vb))
    clip = 160
    return ra[:clip], rb[:clip]


_HONEST_MECHANISM_SHAPE = (OffCoreFlush, OnCoreFlush, PadTo)


def _run_once(cfg: RunConfig, options: RunOptions, runner_seed: str,
              observer: int, oracle_factory, trace_seed_fn):
    opts = replace(
        options,
        retain_records=False,
        oracle_factory=oracle_factory,
        trace_seed_fn=trace_seed_fn,
    )
    views: list[tuple[tuple[str, int, int], ObserverView]] = []
    hypothesis: list[str] = []

    def cb(record: StepRecord, runner: SystemRunner):
        for f in record.failures:
            hypothesis.append(f"{record.kind} slice {record.slice_index}: {f}")
        if record.kind == "switch":
            shapes = tuple(type(op) for op in record.mechanism_trace)
            if shapes != _HONEST_MECHANISM_SHAPE:
                hypothesis.append(
                    f"switch slice {record.slice_index}: mechanism trace is "
                    f"{[t.__name__ for t in shapes]}, not the exact flush/flush/pad sequence"
                )
        views.append((
            (record.kind, record.slice_index, record.domain),
            observer_view(runner.abstract, runner.micro, observer,
                          runner.policy, runner.g),
        ))

    opts.record_cb = cb
    runner = SystemRunner(cfg, runner_seed, opts)
    return runner, views, hypothesis


def check_confidentiality(
    cfg: RunConfig,
    observer: int,
    trials: int,
    seed: object,
    variant: str = "u-mu",
    mutation: str | None = None,
    steps_per_slice: int = 3,
    stop_on_violation: bool = True,
) -> ConfidentialityReport:
    """Run the two-run checker for either property variant."""
    if variant not in ("u", "u-mu"):
        raise ConfigError(f"unknown variant {variant!r}; know u, u-mu")
    if trials < 1:
        raise ConfigError("trials: must be >= 1")
    if observer not in cfg.policy.domain_ids():
        raise ConfigError(f"observer: unknown domain {observer}")
    include_micro = variant == "u-mu"

    base_options = RunOptions(collect=False)
    cfg, options = apply_mutation(cfg, base_options, mutation, observer)

    report = ConfidentialityReport(
        variant=variant, observer=observer, trials=trials, seed=seed,
        mutation=mutation or "none", violations=[], transitions=0,
        hypothesis_ok=True,
    )

    if len(cfg.policy.domains) < 2:
        report.notes.append("single domain: nothing to vary, property holds vacuously")
        return report

    policy_problems = validate_policy(cfg.policy, cfg.amap, cfg.geometry)
    if policy_problems:
        report.hypothesis_ok = False
        report.hypothesis_notes.append(
            "policy validation failed: " + policy_problems[0]
        )

    for trial in range(trials):
        trial_key = f"{seed}:t{trial}"
        trace_seed_fn = lambda sl, st, _k=trial_key: f"{_k}:trace:{sl}:{st}"
        sides = {}
        aborted = False
        for tag in ("A", "B"):
            runner, views, hypothesis = _run_once(
                cfg, options, runner_seed=f"{trial_key}:{tag}", observer=observer,
                oracle_factory=_pair_oracle_factory(trial_key, observer, tag),
                trace_seed_fn=trace_seed_fn,
            )
            schedule = build_schedule(cfg, observer, trial_key, tag,
                                      steps_per_slice=steps_per_slice)
            try:
                runner.run(schedule=schedule)
            except RunError as e:
                report.hypothesis_ok = False
                report.hypothesis_notes.append(
                    f"trial {trial} run {tag} aborted: {e.failure}"
                )
                aborted = True
            if hypothesis:
                report.hypothesis_ok = False
                report.hypothesis_notes.extend(
                    f"trial {trial} run {tag}: {h}" for h in hypothesis[:3]
                )
            sides[tag] = views
            if aborted:
                break
        if aborted:
            if stop_on_violation:
                break
            continue

        va, vb = sides["A"], sides["B"]
        if len(va) != len(vb):
            report.violations.append(Violation(
                trial=trial, transition=min(len(va), len(vb)), kind="run",
                slice_index=-1, domain=-1, field="transition-count",
                a=str(len(va)), b=str(len(vb)),
            ))
        else:
            for i, ((ctx, view_a), (_, view_b)) in enumerate(zip(va, vb)):
                report.transitions += 1
                diff = _diff_views(view_a, view_b, include_micro)
                if diff is not None:
                    a_repr, b_repr = _field_values(view_a, view_b, diff)
                    report.violations.append(Violation(
                        trial=trial, transition=i, kind=ctx[0],
                        slice_index=ctx[1], domain=ctx[2], field=diff,
                        a=a_repr, b=b_repr,
                    ))
                    break
        if report.violations and stop_on_violation:
            break

    return report


def check_confidentiality_u(cfg: RunConfig, observer: int, trials: int,
                            seed: object, **kw) -> ConfidentialityReport:
    return check_confidentiality(cfg, observer, trials, seed, variant="u", **kw)


def check_confidentiality_u_mu(cfg: RunConfig, observer: int, trials: int,
                               seed: object, **kw) -> ConfidentialityReport:
    return check_confidentiality(cfg, observer, trials, seed, variant="u-mu", **kw)

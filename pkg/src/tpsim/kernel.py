"""A toy multi-domain kernel with touched-set ghost tracking.

Domains run round-robin in fixed timeslices.  Every transition a domain makes
is either a user step (direct access to its own mapped objects) or a kernel
call (a small syscall repertoire: read an object, write an object, allocate
from a pre-mapped pool, or do nothing).  Retrieving an object records all of
its virtual pages into the touched set; any memory access whose page was never
retrieved is rejected as a touched-set violation rather than silently
performed.  The touched set is a ghost over-approximation: the hardware trace
a step performs may visit any line of any retrieved page, in any order the
trace selector picks.

A domain switch runs in four phases.  old_clean does the outgoing scheduler
bookkeeping (a deterministic walk of the kernel globals).  An optional dirty
phase, off by default, may touch both domains' kernel images.  The mechanism
phase performs exactly an off-core flush of the kernel globals, the on-core
microreset, and a pad to the switch deadline; the touched set is emptied here
and nowhere else.  new_clean installs the next domain and resets its slot.

Kernel-global and kernel-image accesses never enter the touched set.  They
are not user-controlled, so the partitioning invariant handles them by a
static exception, and their trace segments are recorded separately and must
follow a fixed order.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Any, Callable, Iterable, Optional

from .config import RunConfig
from .core import (
    AddressMap,
    CacheGeometry,
    ConfigError,
    DomainPolicy,
    KERNEL_DOMAIN,
    ModelError,
    PolicyError,
    TranslationFault,
    colour_of,
    set_index_of,
)
from .microarch import (
    CostModel,
    MicroArchState,
    NondetOracle,
    OffCoreFlush,
    OnCoreFlush,
    PadTo,
    PadViolation,
    Read,
    Trace,
    TraceError,
    apply_trace,
    flushable_reset,
    visible_projection,
)
from .selector import select_trace, select_trace_peeking

# Input kinds a schedule can contain.
USER_READ = "user_read"
USER_WRITE = "user_write"
SYS_READ = "sys_read"
SYS_WRITE = "sys_write"
SYS_ALLOC = "sys_alloc"
NOOP = "noop"
RAW_ACCESS = "raw_access"

KERNEL_CALLS = (SYS_READ, SYS_WRITE, SYS_ALLOC)
INPUT_KINDS = (USER_READ, USER_WRITE, SYS_READ, SYS_WRITE, SYS_ALLOC, NOOP, RAW_ACCESS)


class RunError(ModelError):
    """A hard failure aborted a strict-mode run."""

    def __init__(self, failure: "Failure"):
        super().__init__(str(failure))
        self.failure = failure


@dataclass(frozen=True)
class Input:
    kind: str
    obj: str | None = None
    offset: int = 0
    byte: int = 0
    vaddr: int | None = None   # raw_access only

    def __post_init__(self):
        if self.kind not in INPUT_KINDS:
            raise ValueError(f"unknown input kind {self.kind!r}")


@dataclass(frozen=True)
class Failure:
    kind: str                 # ta-violation | invariant | pad-violation | slot-overrun | ...
    detail: str
    vaddr: int | None = None
    witnesses: tuple[int, ...] = ()

    def __str__(self):
        return f"{self.kind}: {self.detail}"


@dataclass
class KernelObject:
    ident: str
    owner: int
    base: int
    size: int
    allocated: bool = True
    payload: dict[int, int] = field(default_factory=dict)   # sparse offset -> byte

    def pages(self, page_size: int) -> frozenset[int]:
        first = self.base - (self.base % page_size)
        last = (self.base + self.size - 1) - ((self.base + self.size - 1) % page_size)
        return frozenset(range(first, last + 1, page_size))


@dataclass
class AbstractState:
    objects: dict[str, KernelObject]
    current: int
    slot_remaining: int
    ta: set[int]                 # virtual pages retrieved since the last switch
    amap: AddressMap
    policy: DomainPolicy


@dataclass
class StepRecord:
    kind: str                    # user | kernel-call | switch
    slice_index: int
    domain: int
    input: Input | None
    ta_before: frozenset[int]
    ta_after: frozenset[int]
    kernel_trace: Trace          # fixed kernel accesses, exempt from touched-set adherence
    trace: Trace                 # selector-chosen (steps) or mechanism (switches)
    mechanism_trace: Trace       # switches only
    s_mu_before: MicroArchState
    s_mu_after: MicroArchState
    failures: tuple[Failure, ...] = ()

    @property
    def clock_before(self) -> int:
        return self.s_mu_before.clock

    @property
    def clock_after(self) -> int:
        return self.s_mu_after.clock

    @property
    def clock_delta(self) -> int:
        return self.clock_after - self.clock_before


def get_object(state: AbstractState, ident: str) -> KernelObject:
    """Retrieve an object, recording all of its pages into the touched set."""
    obj = state.objects[ident]
    state.ta.update(obj.pages(state.amap.page_size))
    return obj


def access_mem(state: AbstractState, v: int, pending: list[tuple[int, bool]],
               write: bool = False) -> Failure | None:
    """Access one virtual address; fails unless its page was retrieved."""
    vpage = v - (v % state.amap.page_size)
    if vpage not in state.ta:
        return Failure(
            kind="ta-violation",
            detail=f"access to {v:#x} whose page was never retrieved",
            vaddr=v,
        )
    pending.append((v, write))
    return None


def partition_subset_invariant(
    ta: "Iterable[int] | AbstractState", current=None, policy=None, amap=None, g=None,
) -> tuple[bool, tuple[int, ...]]:
    """Every touched page must translate into the current domain's colours.

    Kernel-global pages are the one static exception.  A page with no
    translation at all is also a violation.  Returns (ok, witness vaddrs).
    Callable as (state, geometry) or with the parts spelled out as
    (ta, current, policy, amap, geometry).
    """
    if isinstance(ta, AbstractState):
        state, g = ta, current if g is None else g
        ta, current, policy, amap = state.ta, state.current, state.policy, state.amap
        if not isinstance(g, CacheGeometry):
            raise TypeError("partition_subset_invariant(state, g) needs the geometry")
    colours = policy.domain(current).colours
    global_pages = policy.global_pages(g)
    witnesses = []
    for vpage in sorted(set(ta)):
        try:
            ppage = amap.translate_page(vpage)
        except TranslationFault:
            witnesses.append(vpage)
            continue
        if ppage in global_pages:
            continue
        if colour_of(ppage, g) not in colours:
            witnesses.append(vpage)
    return (not witnesses, tuple(witnesses))


# --- run options ---------------------------------------------------------------

TraceChooser = Callable[..., Trace]


@dataclass
class RunOptions:
    """Behavioural switches for a run.

    collect keeps a run going past hard failures (they are still recorded).
    The mechanism and skip_* fields exist for the mutation harness and the
    flush-versus-prefetch experiment; default values give the honest kernel.
    """

    collect: bool = False
    mechanism: str = "flush"            # flush | prefetch
    skip_oncore_flush: bool = False
    skip_offcore_flush: bool = False
    skip_pad: bool = False
    selector_peek: bool = False
    ta_leak: bool = False
    budget: int | None = None
    record_cb: Optional[Callable[["StepRecord", "SystemRunner"], None]] = None
    retain_records: bool = True
    oracle_factory: Optional[Callable[[int, int, str], NondetOracle]] = None
    trace_seed_fn: Optional[Callable[[int, int], object]] = None


@dataclass
class RunResult:
    records: list[StepRecord]
    failures: list[Failure]
    switches: int
    steps: int
    final_clock: int

    @property
    def ok(self) -> bool:
        return not self.failures


class SystemRunner:
    """Drives one system run: alternating timeslices and domain switches."""

    def __init__(self, cfg: RunConfig, seed: object, options: RunOptions | None = None):
        self.cfg = cfg
        self.seed = str(seed)
        self.options = options or RunOptions()
        self.g = cfg.geometry
        self.cm = cfg.cost_model
        self.policy = cfg.policy
        self.amap = cfg.amap

        objects = {
            o.ident: KernelObject(o.ident, o.owner, o.base, o.size, o.allocated)
            for o in cfg.scenario.objects
        }
        first = self.policy.domains[0].ident
        self.abstract = AbstractState(
            objects=objects,
            current=first,
            slot_remaining=self.policy.slice_length,
            ta=set(),
            amap=self.amap,
            policy=self.policy,
        )
        self.micro = self._initial_micro()
        self.slice_index = 0
        self.records: list[StepRecord] = []
        self.failures: list[Failure] = []
        self.switch_count = 0
        self.step_count = 0
        self._deferred: dict[int, list[Input]] = {d: [] for d in self.policy.domain_ids()}
        self._step_in_slice = 0

    # -- construction helpers --

    def _initial_micro(self) -> MicroArchState:
        state = MicroArchState.initial(self.g, self.cm.flushable_words)
        if not self.cfg.scenario.initial_cache:
            return state
        sets = list(state.sets)
        for addr, level in self.cfg.scenario.initial_cache:
            idx = set_index_of(addr, self.g)
            ways = list(sets[idx].ways)
            tag = self.g.line_of(addr)
            for i, e in enumerate(ways):
                if e is None or e[0] == tag:
                    ways[i] = (tag, max(1, min(level, self.cm.max_level)))
                    break
            sets[idx] = replace(sets[idx], ways=tuple(ways))
        return MicroArchState(state.flushable, tuple(sets), state.clock)

    def _oracle(self, domain: int, phase: str) -> NondetOracle:
        if self.options.oracle_factory is not None:
            return self.options.oracle_factory(self.slice_index, domain, phase)
        return NondetOracle(key=f"{self.seed}:oracle:{self.slice_index}:{domain}:{phase}")

    def _trace_seed(self) -> object:
        if self.options.trace_seed_fn is not None:
            return self.options.trace_seed_fn(self.slice_index, self._step_in_slice)
        return f"{self.seed}:trace:{self.slice_index}:{self._step_in_slice}"

    @property
    def budget(self) -> int:
        return self.options.budget or self.cfg.analysis.trace_budget

    # -- fixed kernel walks --

    def globals_walk(self) -> Trace:
        kvb = self.policy.kernel_vbase
        return tuple(Read(kvb + a, a) for a in sorted(self.policy.kernel_globals))

    def image_walk(self, domain: int) -> Trace:
        kvb = self.policy.kernel_vbase
        ops = []
        for page in sorted(self.policy.domain(domain).kernel_image):
            for line in self.g.page_lines(page):
                ops.append(Read(kvb + line, line))
        return tuple(ops)

    def _kernel_walk(self, input: Input, domain: int) -> Trace:
        if input.kind in KERNEL_CALLS:
            return self.globals_walk() + self.image_walk(domain)
        return ()

    # -- failure plumbing --

    def _register(self, failure: Failure) -> None:
        self.failures.append(failure)
        if not self.options.collect:
            raise RunError(failure)

    def _emit(self, record: StepRecord) -> None:
        if self.options.retain_records:
            self.records.append(record)
        if self.options.record_cb is not None:
            self.options.record_cb(record, self)

    # -- abstract semantics --

    def _resolve_alloc(self, domain: int) -> KernelObject | None:
        pool = [
            o for o in self.abstract.objects.values()
            if o.owner == domain and not o.allocated
        ]
        pool.sort(key=lambda o: o.ident)
        return pool[0] if pool else None

    def _run_abstract(self, input: Input, domain: int,
                      pending: list[tuple[int, bool]]) -> tuple[list[Failure], bool, set[int]]:
        """Execute the abstract semantics of one input.

        Returns (failures, kernel_entry, footprint pages).  The touched set
        grows as a side effect; pending collects the individual accesses.
        """
        failures: list[Failure] = []
        footprint: set[int] = set()
        st = self.abstract
        psz = self.amap.page_size

        if input.kind == NOOP:
            return failures, False, footprint

        if input.kind == RAW_ACCESS:
            v = input.vaddr if input.vaddr is not None else 0
            f = access_mem(st, v, pending)
            if f:
                failures.append(f)
            else:
                footprint.add(v - (v % psz))
            return failures, False, footprint

        if input.kind == SYS_ALLOC:
            obj = self._resolve_alloc(domain)
            if obj is None:
                return failures, True, footprint   # pool exhausted; still a kernel entry
            get_object(st, obj.ident)
            footprint |= obj.pages(psz)
            obj.allocated = True
            obj.payload.clear()
            f = access_mem(st, obj.base, pending, write=True)
            if f:
                failures.append(f)
            return failures, True, footprint

        obj = st.objects.get(input.obj or "")
        if obj is None:
            failures.append(Failure("bad-input", f"unknown object {input.obj!r}"))
            return failures, input.kind in KERNEL_CALLS, footprint

        get_object(st, obj.ident)
        footprint |= obj.pages(psz)
        offset = input.offset % max(obj.size, 1)
        write = input.kind in (USER_WRITE, SYS_WRITE)
        f = access_mem(st, obj.base + offset, pending, write=write)
        if f:
            failures.append(f)
        elif write:
            obj.payload[offset] = input.byte & 0xFF
            if self.options.ta_leak:
                self._leak_byte(domain, input.byte & 0xFF)
        return failures, input.kind in KERNEL_CALLS, footprint

    def _leak_byte(self, domain: int, byte: int) -> None:
        # Deliberate confidentiality bug: copy a byte written by one domain
        # into the first object owned by some other domain, without tracking.
        for o in sorted(self.abstract.objects.values(), key=lambda o: o.ident):
            if o.owner != domain:
                o.payload[0] = byte
                return

    # -- cost bounds for the deferral rule --

    def worst_case_cost(self, input: Input) -> int:
        per_op = self.cm.miss_evict_cost + self.cm.jitter
        kernel_ops = len(self._kernel_walk(input, self.abstract.current))
        if input.kind == NOOP:
            user_ops = 0
        elif input.kind == RAW_ACCESS:
            user_ops = self.g.lines_per_page
        else:
            user_ops = self.budget
        return (kernel_ops + user_ops) * per_op

    # -- one step -------------------------------------------------------------

    def step(self, input: Input) -> StepRecord:
        st = self.abstract
        domain = st.current
        ta_before = frozenset(st.ta)
        mu_before = self.micro
        slot_before = st.slot_remaining
        pending: list[tuple[int, bool]] = []

        failures, kernel_entry, footprint = self._run_abstract(input, domain, pending)
        kind = "kernel-call" if kernel_entry else "user"

        ok, witnesses = partition_subset_invariant(
            st.ta, domain, self.policy, self.amap, self.g
        )
        if not ok:
            failures.append(Failure(
                kind="invariant",
                detail="touched pages outside the current domain's colours: "
                       + ", ".join(f"{w:#x}" for w in witnesses),
                witnesses=witnesses,
            ))

        hard = [f for f in failures if f.kind in ("ta-violation", "invariant", "bad-input")]
        if hard:
            record = StepRecord(
                kind=kind, slice_index=self.slice_index, domain=domain, input=input,
                ta_before=ta_before, ta_after=frozenset(st.ta),
                kernel_trace=(), trace=(), mechanism_trace=(),
                s_mu_before=mu_before, s_mu_after=mu_before,
                failures=tuple(failures),
            )
            self._emit(record)
            self.step_count += 1
            self._step_in_slice += 1
            for f in hard:
                self._register(f)
            return record

        kernel_trace = self._kernel_walk(input, domain)
        trace: Trace = ()
        if footprint:
            vis = visible_projection(self.micro, domain, self.policy, "executing", self.g)
            if self.options.selector_peek:
                trace = select_trace_peeking(
                    footprint, self.micro, vis, self.amap, self.budget,
                    self._trace_seed(), line_size=self.g.line_size,
                )
            else:
                trace = select_trace(
                    footprint, vis, self.amap, self.budget,
                    self._trace_seed(), line_size=self.g.line_size,
                )

        oracle = self._oracle(domain, f"step:{self._step_in_slice}")
        try:
            self.micro = apply_trace(
                self.micro, kernel_trace + trace, oracle, self.g, self.cm, self.policy
            )
        except TraceError as e:
            failures.append(Failure("trace-error", str(e)))

        delta = self.micro.clock - mu_before.clock
        if delta > slot_before:
            failures.append(Failure(
                kind="slot-overrun",
                detail=f"step cost {delta} exceeded remaining slot {slot_before}",
            ))
        st.slot_remaining = slot_before - delta

        record = StepRecord(
            kind=kind, slice_index=self.slice_index, domain=domain, input=input,
            ta_before=ta_before, ta_after=frozenset(st.ta),
            kernel_trace=kernel_trace, trace=trace, mechanism_trace=(),
            s_mu_before=mu_before, s_mu_after=self.micro,
            failures=tuple(failures),
        )
        self._emit(record)
        self.step_count += 1
        self._step_in_slice += 1
        for f in failures:
            if f.kind in ("slot-overrun", "trace-error"):
                self._register(f)
        return record

    # -- the four-phase switch --------------------------------------------------

    def _next_domain(self, old: int) -> int:
        ids = self.policy.domain_ids()
        return ids[(ids.index(old) + 1) % len(ids)]

    def domain_switch(self, tick: int) -> StepRecord:
        """Switch away from the current domain at the given timer tick."""
        st = self.abstract
        if st.slot_remaining > 0:
            raise PolicyError(
                f"domain switch before the timer tick: {st.slot_remaining} cycles left"
            )
        old = st.current
        ta_before = frozenset(st.ta)
        mu_before = self.micro
        failures: list[Failure] = []
        deadline = tick + self.policy.switch_deadline

        # Phase 1, old_clean: deterministic scheduler bookkeeping over the
        # kernel globals, same discipline as any step but outside the
        # touched set (static exception).
        kernel_trace: Trace = self.globals_walk()

        # Phase 2, dirty: optional, off by default.  Touches both images in a
        # fixed order, so it reveals nothing either domain does not know.
        if self.policy.use_dirty_phase:
            new = self._next_domain(old)
            kernel_trace = kernel_trace + tuple(sorted(
                self.image_walk(old) + self.image_walk(new), key=lambda op: op.p,
            ))

        oracle = self._oracle(old, "old_clean")
        try:
            self.micro = apply_trace(self.micro, kernel_trace, oracle, self.g, self.cm, self.policy)
        except TraceError as e:
            failures.append(Failure("trace-error", str(e)))

        # Phase 3, mechanism: scrub and pad.  The touched set is emptied here
        # and only here.
        st.ta.clear()
        moracle = self._oracle(KERNEL_DOMAIN, "mechanism")
        mech: list = []
        if self.options.mechanism == "prefetch":
            # Replace the targeted flush by sequential reads of the globals.
            prefetch = self.globals_walk()
            kernel_trace = kernel_trace + prefetch
            try:
                self.micro = apply_trace(self.micro, prefetch, moracle, self.g, self.cm, self.policy)
            except TraceError as e:
                failures.append(Failure("trace-error", str(e)))
        elif not self.options.skip_offcore_flush:
            mech.append(OffCoreFlush(self.policy.kernel_globals))
        if not self.options.skip_oncore_flush:
            mech.append(OnCoreFlush())
        if not self.options.skip_pad:
            mech.append(PadTo(deadline))
        mechanism_trace = tuple(mech)

        try:
            self.micro = apply_trace(self.micro, mechanism_trace, moracle,
                                     self.g, self.cm, self.policy)
        except TraceError as e:
            if isinstance(e.cause, PadViolation):
                failures.append(Failure(
                    kind="pad-violation",
                    detail=f"switch work ran past the deadline "
                           f"(clock {e.cause.now}, deadline {e.cause.target})",
                ))
            else:
                failures.append(Failure("trace-error", str(e)))

        # Phase 4, new_clean: install the next domain.  Pure bookkeeping, no
        # timed accesses, so the post-switch clock stays at the deadline.
        new = self._next_domain(old)
        st.current = new
        st.slot_remaining = self.policy.slice_length

        failures.extend(self._switch_postcondition_failures(deadline))

        record = StepRecord(
            kind="switch", slice_index=self.slice_index, domain=old, input=None,
            ta_before=ta_before, ta_after=frozenset(),
            kernel_trace=kernel_trace, trace=mechanism_trace,
            mechanism_trace=mechanism_trace,
            s_mu_before=mu_before, s_mu_after=self.micro,
            failures=tuple(failures),
        )
        self._emit(record)
        self.switch_count += 1
        for f in failures:
            self._register(f)
        return record

    def _switch_postcondition_failures(self, deadline: int) -> list[Failure]:
        out = []
        opts = self.options
        if not opts.skip_oncore_flush:
            if self.micro.flushable != flushable_reset(self.cm.flushable_words):
                out.append(Failure("switch-postcondition", "flushable state not reset"))
        if opts.mechanism == "flush" and not opts.skip_offcore_flush:
            for idx in self.policy.global_set_indices(self.g):
                cset = self.micro.sets[idx]
                if not cset.is_empty() or cset.meta != 0:
                    out.append(Failure(
                        "switch-postcondition",
                        f"kernel-global set {idx} not scrubbed",
                    ))
        if not opts.skip_pad and self.micro.clock != deadline:
            out.append(Failure(
                "switch-postcondition",
                f"clock {self.micro.clock} does not sit on the deadline {deadline}",
            ))
        return out

    # -- whole runs ---------------------------------------------------------------

    def inputs_for(self, domain: int, slice_index: int) -> list[Input]:
        per_slice = self.cfg.scenario.inputs.get(domain, [])
        rotation = slice_index // len(self.policy.domains)
        if rotation < len(per_slice):
            return [_input_from_dict(d) for d in per_slice[rotation]]
        return []

    def run(self, slices: int | None = None,
            schedule: dict[int, list[list[Input]]] | None = None) -> RunResult:
        """Alternate slices and switches; a switch follows every slice."""
        total = slices if slices is not None else self.cfg.scenario.slices
        for k in range(total):
            domain = self.policy.domain_ids()[k % len(self.policy.domains)]
            # The round-robin successor was installed by the previous switch;
            # trust but verify, since schedules are defined positionally.
            assert domain == self.abstract.current, "schedule out of sync with rotation"
            self._step_in_slice = 0
            slice_start = self.micro.clock
            tick = slice_start + self.policy.slice_length

            if schedule is not None:
                incoming = list(schedule.get(domain, []))
                batch = incoming[k // len(self.policy.domains)] if k // len(self.policy.domains) < len(incoming) else []
            else:
                batch = self.inputs_for(domain, k)
            queue = self._deferred[domain] + list(batch)
            self._deferred[domain] = []

            for i, inp in enumerate(queue):
                if self.worst_case_cost(inp) > self.abstract.slot_remaining:
                    # Near-tick operation: defer it (and program order behind
                    # it) to this domain's next slice.
                    self._deferred[domain] = queue[i:]
                    break
                self.step(inp)

            # Idle to the timer tick; slices end on exact boundaries.
            if self.micro.clock > tick:
                self._register(Failure(
                    kind="tick-overrun",
                    detail=f"slice work ran to {self.micro.clock}, past the tick {tick}",
                ))
            else:
                self.micro = MicroArchState(self.micro.flushable, self.micro.sets, tick)
            self.abstract.slot_remaining = 0

            self.domain_switch(tick)
            self.slice_index += 1

        return RunResult(
            records=self.records,
            failures=self.failures,
            switches=self.switch_count,
            steps=self.step_count,
            final_clock=self.micro.clock,
        )


def _input_from_dict(d: dict[str, Any]) -> Input:
    kind = d.get("kind", d.get("op"))
    if kind not in INPUT_KINDS:
        raise ConfigError(f"scenario input: unknown kind {kind!r}")
    return Input(
        kind=kind,
        obj=d.get("obj"),
        offset=int(d.get("offset", 0)),
        byte=int(d.get("byte", 0)),
        vaddr=int(d["vaddr"], 16) if isinstance(d.get("vaddr"), str) else d.get("vaddr"),
    )


def run_system(cfg: RunConfig, seed: object, options: RunOptions | None = None,
               slices: int | None = None,
               schedule: dict[int, list[list[Input]]] | None = None) -> RunResult:
    runner = SystemRunner(cfg, seed, options)
    return runner.run(slices=slices, schedule=schedule)


def record_to_dict(r: StepRecord) -> dict[str, Any]:
    """Line-oriented structured form of a record, for JSONL logs."""
    from .microarch import format_trace
    return {
        "kind": r.kind,
        "slice": r.slice_index,
        "domain": r.domain,
        "input": None if r.input is None else {
            "op": r.input.kind, "obj": r.input.obj, "offset": r.input.offset,
        },
        "ta_before": [f"{v:#x}" for v in sorted(r.ta_before)],
        "ta_after": [f"{v:#x}" for v in sorted(r.ta_after)],
        "kernel_trace": format_trace(r.kernel_trace),
        "trace": format_trace(r.trace),
        "clock_before": r.clock_before,
        "clock_after": r.clock_after,
        "failures": [str(f) for f in r.failures],
    }

"""Evaluation harness: trace alignment, collision counting, overhead.

Original and hardened runs are paired through the marker instructions the
rewriter places around every instrumented access.  Each execution of an
instrumented original instruction corresponds to exactly one marker span
of the hardened run, in order.
"""

from __future__ import annotations

import json
import logging
import math
import random
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path

from . import isa
from .attack import BLOCK, CiphertextTrace, EncryptionOracle, Observer
from .isa import Op
from .program import HardenedProgram, Program
from .taint import Access, TaintSources, TaintTracker
from .vm import DEFAULT_FUEL, Machine, execute

log = logging.getLogger(__name__)


class AlignmentError(ValueError):
    pass


class ConsistencyError(AssertionError):
    pass


# --------------------------------------------------------------------------
# original side

@dataclass
class OriginalWrite:
    step: int
    pc: int
    addr: int
    data: bytes
    tmask: int

    @property
    def secret(self) -> bool:
        return self.tmask != 0


@dataclass
class OriginalRun:
    """Instrumented-site executions of an uninstrumented run."""

    steps: list[tuple[int, int]]                    # (step, pc)
    writes: dict[int, list[OriginalWrite]]          # step -> writes
    output: bytes
    cost: int


class _WriteRecorder:
    def __init__(self, sites: set[int]):
        self.sites = sites
        self.steps: list[tuple[int, int]] = []
        self.data: dict[int, list[tuple[int, bytes]]] = defaultdict(list)

    def on_write(self, machine, pc, addr, n):
        if pc in self.sites:
            self.data[machine.instret - 1].append((addr, machine.mem.read(addr, n)))

    def step(self, machine, pc, ins, ea, aux, sp_before):
        if pc in self.sites:
            self.steps.append((machine.instret - 1, pc))


def run_original(prog: Program, inputs, sources: TaintSources | None, sites: set[int],
                 fuel: int = DEFAULT_FUEL) -> OriginalRun:
    tracker = TaintTracker(sources)
    rec = _WriteRecorder(sites)
    m = Machine(prog, inputs, hooks=[tracker, rec], write_listeners=[rec.on_write], fuel=fuel,
                record=False)
    state, _ = m.run()
    masks: dict[int, list[Access]] = defaultdict(list)
    for acc in tracker.accesses:
        if acc.kind == "w" and acc.pc in sites:
            masks[acc.step].append(acc)
    writes: dict[int, list[OriginalWrite]] = {}
    for step, items in rec.data.items():
        accs = masks.get(step, [])
        out = []
        for addr, data in items:
            tm = 0
            for a in accs:
                # project the access's byte mask onto this write
                for i in range(len(data)):
                    j = addr + i - a.addr
                    if 0 <= j < a.width and a.tmask >> j & 1:
                        tm |= 1 << i
            pc = next((p for s, p in rec.steps if s == step), None)
            out.append(OriginalWrite(step, pc, addr, data, tm))
        writes[step] = out
    return OriginalRun(rec.steps, writes, state.output, state.cost)


# --------------------------------------------------------------------------
# hardened side

def decode_bytes(machine: Machine, variant: str, addr: int, n: int) -> bytes:
    data = machine.mem.read(addr, n)
    mask = machine.mem.read(addr + isa.MASK_DISTANCE, n)
    if variant == "fast":
        return bytes(d ^ m for d, m in zip(data, mask))
    sec = machine.mem.read(addr + isa.SECRECY_DISTANCE, n)
    return bytes(d ^ (m & s) for d, m, s in zip(data, mask, sec))


class _ConsistencyCheck:
    """At every closing marker, decode the bytes the matching original
    instruction wrote and compare."""

    def __init__(self, orig: OriginalRun, sites: dict[int, int], variant: str):
        self.queue = list(orig.steps)
        self.writes = orig.writes
        self.sites = sites
        self.variant = variant
        self.i = 0
        self.failures: list[str] = []

    def step(self, machine, pc, ins, ea, aux, sp_before):
        if ins.op is not Op.MARKE:
            return
        if self.i >= len(self.queue):
            self.failures.append(f"extra marker span {ins.imm}")
            return
        step, opc = self.queue[self.i]
        self.i += 1
        if self.sites.get(ins.imm) != opc:
            self.failures.append(f"span {self.i - 1}: marker {ins.imm} vs site {opc:#x}")
            return
        for w in self.writes.get(step, []):
            got = decode_bytes(machine, self.variant, w.addr, len(w.data))
            if got != w.data:
                self.failures.append(
                    f"site {opc:#x} step {step}: decoded {got.hex()} != {w.data.hex()} at {w.addr:#x}")


@dataclass
class HardenedRun:
    trace: CiphertextTrace
    output: bytes
    cost: int
    consistency_failures: list[str]
    truth: list[bytes] | None = None
    pcs: list[int] = field(default_factory=list)
    # per observation: did the block hold any secret byte right after the write
    live_secret: list[bool] | None = None


def run_hardened(hp: HardenedProgram, inputs, oracle: EncryptionOracle, seed: int,
                 orig: OriginalRun | None = None, keep_contents: bool = False,
                 fuel: int = DEFAULT_FUEL) -> HardenedRun:
    variant = hp.meta.get("variant", "base")
    obs = Observer(oracle, keep_contents=False)
    hooks = [obs]
    check = None
    if orig is not None:
        check = _ConsistencyCheck(orig, hp.site_offsets(), variant)
        hooks.append(check)
    truth: list[bytes] | None = [] if keep_contents else None
    live: list[bool] | None = [] if keep_contents else None
    listeners = [obs.on_write]
    if keep_contents:
        def decode_obs(machine, pc, addr, n):
            first, last = addr & ~(BLOCK - 1), (addr + n - 1) & ~(BLOCK - 1)
            for b in range(first, last + BLOCK, BLOCK):
                truth.append(_logical_block(machine, variant, b))
                live.append(block_is_secret(machine, variant, b))
        listeners.append(decode_obs)
    m = Machine(hp, inputs, hooks=hooks, write_listeners=listeners, seed=seed, fuel=fuel,
                record=False)
    state, _ = m.run()
    obs.trace.program_hash = hp.program_hash()
    fails = list(check.failures) if check else []
    if check and check.i != len(check.queue):
        fails.append(f"{len(check.queue) - check.i} original site executions without a span")
    return HardenedRun(obs.trace, state.output, state.cost, fails, truth, obs.pcs, live)


def block_is_secret(machine: Machine, variant: str, block: int) -> bool:
    """Whether any byte of the block is currently marked secret.  Fast has
    no secrecy plane; its secret bytes are exactly those with a nonzero mask."""
    if not isa.STATIC_BASE <= block < isa.SECRECY_DISTANCE:
        return False
    plane = isa.MASK_DISTANCE if variant == "fast" else isa.SECRECY_DISTANCE
    return any(machine.mem.read(block + plane, BLOCK))


def _logical_block(machine: Machine, variant: str, block: int) -> bytes:
    if isa.STATIC_BASE <= block < isa.SECRECY_DISTANCE:
        try:
            return decode_bytes(machine, variant, block, BLOCK)
        except Exception:
            pass
    return machine.mem.read(block, BLOCK)


# --------------------------------------------------------------------------
# alignment and collisions

@dataclass
class AlignedWrite:
    original: OriginalWrite | None    # None for spans of read-only sites
    site: int
    span: tuple[int, int, int]        # (marker id, begin step, end step)
    hardened: list[int]               # observation indices inside the span


@dataclass
class AlignedTracePair:
    entries: list[AlignedWrite]
    trace: CiphertextTrace

    def secret_writes(self) -> list[AlignedWrite]:
        return [e for e in self.entries if e.original is not None and e.original.secret]


def marker_spans(trace: CiphertextTrace) -> list[tuple[int, int, int]]:
    spans = []
    open_: tuple[int, int] | None = None
    for ev in trace.control:
        if ev.kind == "markb":
            if open_ is not None:
                raise AlignmentError(f"nested marker {ev.value} inside span {open_[0]}")
            open_ = (ev.value, ev.step)
        elif ev.kind == "marke":
            if open_ is None or open_[0] != ev.value:
                raise AlignmentError(f"unbalanced end marker {ev.value} at step {ev.step}")
            spans.append((ev.value, open_[1], ev.step))
            open_ = None
    return spans


def align_traces(orig: OriginalRun, trace: CiphertextTrace, sites: dict[int, int]) -> AlignedTracePair:
    spans = marker_spans(trace)
    if len(spans) != len(orig.steps):
        for i, ((step, pc), sp) in enumerate(zip(orig.steps, spans)):
            if sites.get(sp[0]) != pc:
                break
        else:
            i = min(len(spans), len(orig.steps))
        raise AlignmentError(f"{len(orig.steps)} site executions vs {len(spans)} marker spans; "
                             f"first divergence at position {i}")
    entries = []
    obs = trace.observations
    j = 0
    for i, ((step, pc), span) in enumerate(zip(orig.steps, spans)):
        if sites.get(span[0]) != pc:
            raise AlignmentError(f"position {i}: marker {span[0]} belongs to "
                                 f"{sites.get(span[0], -1):#x}, original ran {pc:#x}")
        while j < len(obs) and obs[j].step < span[1]:
            j += 1
        inside = []
        while j < len(obs) and obs[j].step <= span[2]:
            inside.append(j)
            j += 1
        ws = orig.writes.get(step) or [None]
        for w in ws:
            entries.append(AlignedWrite(w, pc, span, inside))
    return AlignedTracePair(entries, trace)


@dataclass
class CollisionReport:
    by_address: Counter = field(default_factory=Counter)
    by_width: Counter = field(default_factory=Counter)
    by_site: Counter = field(default_factory=Counter)
    # per written address: 1-based index (among secret writes to that
    # address) of the first write that collided
    first_index: dict[int, int] = field(default_factory=dict)

    @property
    def total(self) -> int:
        return sum(self.by_address.values())

    def merge(self, other: "CollisionReport") -> "CollisionReport":
        first = dict(self.first_index)
        for addr, i in other.first_index.items():
            first[addr] = min(first.get(addr, i), i)
        return CollisionReport(self.by_address + other.by_address, self.by_width + other.by_width,
                               self.by_site + other.by_site, first)


def _blocks_of(addr: int, n: int) -> list[int]:
    first, last = addr & ~(BLOCK - 1), (addr + n - 1) & ~(BLOCK - 1)
    return list(range(first, last + BLOCK, BLOCK))


def count_collisions(pair: AlignedTracePair) -> CollisionReport:
    """Secret-write observations whose tag repeats an earlier tag at the
    same block, in the data plane or the mask plane."""
    obs = pair.trace.observations
    owner: dict[int, AlignedWrite] = {}
    for e in pair.secret_writes():
        for k in e.hardened:
            owner.setdefault(k, e)
    history: dict[int, set[bytes]] = defaultdict(set)
    rep = CollisionReport()
    for k, o in enumerate(obs):
        e = owner.get(k)
        seen = history[o.addr]
        if e is not None:
            w = e.original
            targets = set(_blocks_of(w.addr, len(w.data)))
            targets |= {b + isa.MASK_DISTANCE for b in targets}
            if o.addr in targets:
                if o.tag in seen:
                    rep.by_address[o.addr] += 1
                    rep.by_width[len(w.data)] += 1
                    rep.by_site[e.site] += 1
                    if w.addr not in rep.first_index:
                        rep.first_index[w.addr] = _write_index(pair, e)
        seen.add(o.tag)
    return rep


def _write_index(pair: AlignedTracePair, entry: AlignedWrite) -> int:
    n = 0
    for e in pair.secret_writes():
        if e.original.addr == entry.original.addr:
            n += 1
        if e is entry:
            return n
    return n


# --------------------------------------------------------------------------
# overhead

@dataclass
class OverheadRecord:
    target: str
    variant: str
    prng: str
    original: int
    hardened: int

    @property
    def factor(self) -> float:
        return self.hardened / self.original if self.original else 1.0


def geometric_mean(values) -> float:
    values = list(values)
    if not values:
        return float("nan")
    return math.exp(sum(math.log(v) for v in values) / len(values))


def measure_overhead(targets, variants, prngs, trials: int = 10, seed: int = 0,
                     analysis_runs: int = 3):
    """Executed-instruction-count factors; returns (records, geometric
    means keyed by (variant, prng))."""
    from .analysis import analyze
    from .rewriter import instrument

    records = []
    for t in targets:
        report = analyze(t.program, [t.inputs(s) for s in range(analysis_runs)], t.sources)
        rng = random.Random(f"overhead:{seed}:{t.name}")
        inputs = [t.inputs(rng.randrange(1 << 30)) for _ in range(trials)]
        base = sum(execute(t.program, x)[0].cost for x in inputs)
        for v in variants:
            for p in prngs:
                hp = instrument(t.program, report, v, p)
                cost = sum(execute(hp, x, seed=i)[0].cost for i, x in enumerate(inputs))
                records.append(OverheadRecord(t.name, str(getattr(v, "value", v)),
                                              str(getattr(p, "value", p)), base, cost))
    means = {}
    for r in records:
        means.setdefault((r.variant, r.prng), []).append(r.factor)
    return records, {k: geometric_mean(v) for k, v in means.items()}


__all__ = ["AlignmentError", "ConsistencyError", "OriginalRun", "OriginalWrite", "run_original",
           "run_hardened", "HardenedRun", "decode_bytes", "align_traces", "AlignedTracePair",
           "AlignedWrite", "marker_spans", "count_collisions", "CollisionReport", "OverheadRecord",
           "measure_overhead", "geometric_mean"]

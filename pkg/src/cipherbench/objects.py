"""Turn tainted addresses into memory objects.

Three kinds of object come out of the analysis runs: contiguous static
blocks, heap allocation sites keyed by their call stack, and per-function
stack frames with the offsets that held secrets.
"""

from __future__ import annotations

import bisect
import logging
from dataclasses import dataclass, field

from . import isa
from .isa import HEAP_BASE, SP, STACK_LO, STACK_TOP, STATIC_BASE, Op
from .program import Program

log = logging.getLogger(__name__)

MAX_TRACKER_DEPTH = 63


class AnalysisError(RuntimeError):
    def __init__(self, msg: str, offset: int | None = None):
        super().__init__(msg)
        self.offset = offset


@dataclass
class StaticObject:
    base: int
    length: int
    secret: bool

    def contains(self, addr: int) -> bool:
        return self.base <= addr < self.base + self.length

    def to_json(self):
        return {"base": self.base, "length": self.length, "secret": self.secret}


@dataclass
class AllocationSite:
    call_stack: tuple[int, ...]
    secret: bool = False
    sizes: set[int] = field(default_factory=set)

    def to_json(self):
        return {"call_stack": list(self.call_stack), "secret": self.secret,
                "sizes": sorted(self.sizes)}


@dataclass
class FrameLayout:
    """``secret_rel`` holds byte offsets relative to the entry stack pointer
    (all negative); :attr:`secret_offsets` reports them as maximal runs
    normalised into ``[0, frame_size)``."""

    entry: int
    frame_size: int = 0
    secret_rel: set[int] = field(default_factory=set)
    is_tail_target: bool = False
    # instruction offsets whose accesses landed in this frame
    accessors: set[int] = field(default_factory=set)

    @property
    def secret_offsets(self) -> list[tuple[int, int]]:
        return _runs(sorted(self.frame_size + r for r in self.secret_rel))

    def merge(self, other: "FrameLayout") -> "FrameLayout":
        return FrameLayout(self.entry, max(self.frame_size, other.frame_size),
                           self.secret_rel | other.secret_rel,
                           self.is_tail_target or other.is_tail_target,
                           self.accessors | other.accessors)

    def to_json(self):
        return {"entry": self.entry, "frame_size": self.frame_size,
                "secret_rel": sorted(self.secret_rel), "is_tail_target": self.is_tail_target,
                "accessors": sorted(self.accessors)}


def _runs(sorted_vals) -> list[tuple[int, int]]:
    out: list[tuple[int, int]] = []
    for v in sorted_vals:
        if out and out[-1][0] + out[-1][1] == v:
            out[-1] = (out[-1][0], out[-1][1] + 1)
        else:
            out.append((v, 1))
    return out


def _byte_set(mask: int, addr: int):
    i = 0
    while mask:
        if mask & 1:
            yield addr + i
        mask >>= 1
        i += 1


def _classify_events(run):
    """(step, addr, n) for every classify event, located by exec count."""
    out = []
    step = -1
    for ev in run.trace.events:
        if ev[0] == "exec":
            step += 1
        elif ev[0] == "classify":
            out.append((step, ev[2], ev[3]))
    return out


# --------------------------------------------------------------------------
# statics

def identify_static_objects(runs, prog: Program) -> list[StaticObject]:
    lo, hi = prog.static_range()
    touched: set[int] = set()
    tainted: set[int] = set()
    for run in runs:
        for acc in run.accesses:
            if lo <= acc.addr < hi:
                touched.update(range(acc.addr, acc.addr + acc.width))
                tainted.update(_byte_set(acc.tmask, acc.addr))
        tainted.update(a for a in run.tainted if lo <= a < hi)
    touched |= tainted
    objs = []
    for start, n in _runs(sorted(a for a in touched if lo <= a < hi)):
        secret = any(a in tainted for a in range(start, start + n))
        objs.append(StaticObject(start, n, secret))
    return objs


# --------------------------------------------------------------------------
# heap

@dataclass
class HeapInstance:
    ptr: int
    cap: int
    site: tuple[int, ...]
    start: int          # step of the allocating instruction
    end: int | None = None
    tainted: bool = False
    size: int = 0
    realloc_from: "HeapInstance | None" = None


@dataclass
class HeapTable:
    sites: dict[tuple[int, ...], AllocationSite]
    tracked_calls: dict[int, bool]
    instances: list[list[HeapInstance]]
    warnings: list[str]

    def site_secret(self, key) -> bool:
        return self.sites[key].secret


def _heap_instances(run) -> list[HeapInstance]:
    stack: list[int] = []
    step = -1
    live: dict[int, HeapInstance] = {}
    out: list[HeapInstance] = []

    def cap_of(size):
        return max(16, (size + 15) & ~15)

    for ev in run.trace.events:
        kind = ev[0]
        if kind == "exec":
            step += 1
        elif kind == "call":
            stack.append(ev[1])
        elif kind == "ret":
            if stack:
                stack.pop()
        elif kind == "alloc":
            _, pc, size, ptr = ev
            inst = HeapInstance(ptr, cap_of(size), tuple(stack) + (pc,), step, size=size)
            live[ptr] = inst
            out.append(inst)
        elif kind == "free":
            inst = live.pop(ev[2], None)
            if inst is not None:
                inst.end = step
        elif kind == "realloc":
            _, pc, old, new, size = ev
            prev = live.pop(old, None)
            if prev is not None:
                prev.end = step
            inst = HeapInstance(new, cap_of(size), tuple(stack) + (pc,), step, size=size,
                                realloc_from=prev)
            live[new] = inst
            out.append(inst)
    return out


class _HeapIndex:
    """addr/step -> live instance.  Allocator blocks never overlap in
    address, so a bisect on the block start finds the only candidate."""

    def __init__(self, instances: list[HeapInstance]):
        self.by_ptr: dict[int, list[HeapInstance]] = {}
        for inst in instances:
            self.by_ptr.setdefault(inst.ptr, []).append(inst)
        self.ptrs = sorted(self.by_ptr)

    def find(self, addr: int, step: int) -> HeapInstance | None:
        i = bisect.bisect_right(self.ptrs, addr) - 1
        if i < 0:
            return None
        for inst in self.by_ptr[self.ptrs[i]]:
            if addr < inst.ptr + inst.cap and inst.start <= step and (inst.end is None or step < inst.end):
                return inst
            # An instance is also live for accesses made by the instruction
            # that frees or reallocates it.
            if addr < inst.ptr + inst.cap and inst.end == step:
                return inst
        return None


def track_heap(runs) -> HeapTable:
    instances = [_heap_instances(r) for r in runs]
    warnings = []
    for run, insts in zip(runs, instances):
        idx = _HeapIndex(insts)
        for acc in run.accesses:
            if acc.tmask and acc.addr >= HEAP_BASE and acc.addr < STACK_LO:
                inst = idx.find(acc.addr, acc.step)
                if inst is not None:
                    inst.tainted = True
        for step, addr, n in _classify_events(run):
            if n and HEAP_BASE <= addr < STACK_LO:
                inst = idx.find(addr, step)
                if inst is not None:
                    inst.tainted = True
    sites: dict[tuple[int, ...], AllocationSite] = {}
    seen: dict[tuple[int, ...], set[bool]] = {}
    for insts in instances:
        for inst in insts:
            site = sites.setdefault(inst.site, AllocationSite(inst.site))
            site.sizes.add(inst.size)
            seen.setdefault(inst.site, set()).add(inst.tainted)
    for key, vals in seen.items():
        sites[key].secret = True in vals
        if len(vals) == 2:
            msg = (f"allocation site {_fmt_stack(key)} produced secret and public objects; "
                   "merged as secret")
            warnings.append(msg)
            log.warning(msg)
    for key in sites:
        if len(key) > MAX_TRACKER_DEPTH:
            raise AnalysisError(f"allocation call stack deeper than {MAX_TRACKER_DEPTH}", key[-1])
    tracked = _settle_tracker(sites, warnings)
    return HeapTable(sites, tracked, instances, warnings)


def _fmt_stack(key) -> str:
    return "[" + " ".join(f"{k:#x}" for k in key) + "]"


def tracker_value(stack: tuple[int, ...], tracked: dict[int, bool]) -> int:
    """Runtime tracker value at the allocation of ``stack``."""
    t = 0
    for call in stack:
        if call in tracked:
            t = (t << 1) | int(tracked[call])
    return t


def tracker_says_secret(t: int) -> bool:
    return t != 0 and (t & (t + 1)) == 0


def _settle_tracker(sites, warnings) -> dict[int, bool]:
    """Flag calls leading to secret sites; promote public sites the
    all-ones test would misreport until both agree."""
    while True:
        tracked = {c: False for key in sites for c in key}
        for key, site in sites.items():
            if site.secret:
                for c in key:
                    tracked[c] = True
        changed = False
        for key, site in sites.items():
            if not site.secret and tracker_says_secret(tracker_value(key, tracked)):
                site.secret = True
                changed = True
                msg = f"public allocation site {_fmt_stack(key)} aliases a secret tracker path; treated as secret"
                warnings.append(msg)
                log.warning(msg)
        if not changed:
            return tracked


# --------------------------------------------------------------------------
# stack frames

_CANONICAL_SP = {Op.PUSH, Op.POP, Op.CALL, Op.RET, Op.ADDI, Op.SUBI, Op.ADD, Op.SUB,
                 Op.LEA, Op.MOV, Op.MOVI}


@dataclass
class FrameTable:
    layouts: dict[int, FrameLayout]
    # per run, per access index: (entry, rel) or None
    attribution: list[list[tuple[int, int] | None]]


def _frames_of_run(run, prog: Program, entries: set[int], layouts: dict[int, FrameLayout]):
    insns = prog.instructions()
    init_sp = STACK_TOP - 64
    # frame = [entry, entry_sp, lowest byte address used]
    frames: list[list[int]] = [[prog.entry, init_sp, init_sp]]
    layouts.setdefault(prog.entry, FrameLayout(prog.entry))
    attribution: list[tuple[int, int] | None] = [None] * len(run.accesses)
    ai = 0
    accs = run.accesses
    classify = _classify_events(run)
    ci = 0
    n = len(run.execs)
    for i in range(n):
        pc = run.execs[i]
        ins = insns.get(pc)
        sp_before = run.sps[i - 1] if i else init_sp
        sp_after = run.sps[i]
        while ai < len(accs) and accs[ai].step == i:
            acc = accs[ai]
            if STACK_LO <= acc.addr < STACK_TOP:
                for f in reversed(frames):
                    if acc.addr < f[1]:
                        f[2] = min(f[2], acc.addr)
                        attribution[ai] = (f[0], acc.addr - f[1])
                        lay = layouts[f[0]]
                        lay.accessors.add(acc.pc)
                        for b in _byte_set(acc.tmask, acc.addr - f[1]):
                            if b < 0:
                                lay.secret_rel.add(b)
                        break
            ai += 1
        while ci < len(classify) and classify[ci][0] == i:
            _, addr, cnt = classify[ci]
            for a in range(addr, addr + cnt):
                if STACK_LO <= a < STACK_TOP:
                    for f in reversed(frames):
                        if a < f[1]:
                            f[2] = min(f[2], a)
                            layouts[f[0]].secret_rel.add(a - f[1])
                            break
            ci += 1
        if ins is None:
            continue
        op = ins.op
        if SP in isa.regs_written(ins) and op not in _CANONICAL_SP:
            raise AnalysisError(f"non-canonical stack pointer update ({op.name.lower()}) at {pc:#x}", pc)
        if op is Op.MOVI and ins.a == SP:
            raise AnalysisError(f"stack pointer loaded with a constant at {pc:#x}", pc)
        if op is Op.CALL:
            target = run.execs[i + 1] if i + 1 < n else None
            if target is not None:
                entries.add(target)
                frames.append([target, sp_after, sp_after])
                layouts.setdefault(target, FrameLayout(target))
            continue
        if op is Op.RET:
            if len(frames) > 1:
                _close(frames.pop(), layouts)
            continue
        if op in (Op.JMP, Op.JMPS) and i + 1 < n:
            target = run.execs[i + 1]
            if (target in entries and target != frames[-1][0]
                    and sp_before == frames[-1][1] and len(frames) > 1):
                _close(frames.pop(), layouts)
                frames.append([target, sp_before, sp_before])
                lay = layouts.setdefault(target, FrameLayout(target))
                lay.is_tail_target = True
                continue
        if sp_after < frames[-1][2]:
            frames[-1][2] = sp_after
    for f in frames:
        _close(f, layouts)
    return attribution


def _close(f, layouts):
    lay = layouts[f[0]]
    lay.frame_size = max(lay.frame_size, f[1] - f[2])


def track_stack_frames(runs, prog: Program) -> FrameTable:
    entries = set(prog.function_entries())
    # Call targets seen anywhere count as function entries for the tail-call
    # test, so collect them first.
    for run in runs:
        for ev in run.trace.events:
            if ev[0] == "call":
                entries.add(ev[2])
    layouts: dict[int, FrameLayout] = {}
    attribution = [_frames_of_run(r, prog, entries, layouts) for r in runs]
    return FrameTable(layouts, attribution)


# --------------------------------------------------------------------------
# combined view

@dataclass
class ObjectTables:
    statics: list[StaticObject]
    heap: HeapTable
    frames: FrameTable
    unattributed: set[int]

    def object_masks(self, runs) -> list[list[int]]:
        """Per run and access: bytes that fall in secret objects."""
        secret_statics = [o for o in self.statics if o.secret]
        starts = [o.base for o in secret_statics]
        out = []
        for ri, run in enumerate(runs):
            idx = _HeapIndex(self.heap.instances[ri])
            attr = self.frames.attribution[ri]
            masks = []
            for k, acc in enumerate(run.accesses):
                m = 0
                a = acc.addr
                if STATIC_BASE <= a < HEAP_BASE:
                    for i in range(acc.width):
                        j = bisect.bisect_right(starts, a + i) - 1
                        if j >= 0 and secret_statics[j].contains(a + i):
                            m |= 1 << i
                elif HEAP_BASE <= a < STACK_LO:
                    inst = idx.find(a, acc.step)
                    if inst is not None and self.heap.sites[inst.site].secret:
                        m = (1 << acc.width) - 1
                elif attr[k] is not None:
                    entry, rel = attr[k]
                    sec = self.frames.layouts[entry].secret_rel
                    for i in range(acc.width):
                        if rel + i in sec:
                            m |= 1 << i
                masks.append(m)
            out.append(masks)
        return out


def track_objects(runs, prog: Program) -> ObjectTables:
    statics = identify_static_objects(runs, prog)
    heap = track_heap(runs)
    frames = track_stack_frames(runs, prog)
    unattributed = _unattributed(runs, statics, heap, frames)
    return ObjectTables(statics, heap, frames, unattributed)


def _unattributed(runs, statics, heap, frames) -> set[int]:
    """Tainted bytes that none of the three object kinds claims."""
    out = set()
    for ri, run in enumerate(runs):
        idx = _HeapIndex(heap.instances[ri])
        attr = frames.attribution[ri]
        for k, acc in enumerate(run.accesses):
            if not acc.tmask:
                continue
            for a in _byte_set(acc.tmask, acc.addr):
                if any(o.contains(a) for o in statics):
                    continue
                if HEAP_BASE <= a < STACK_LO and idx.find(a, acc.step) is not None:
                    continue
                if attr[k] is not None:
                    continue
                out.add(a)
    return out


__all__ = [
    "StaticObject", "AllocationSite", "FrameLayout", "HeapTable", "FrameTable",
    "ObjectTables", "AnalysisError", "identify_static_objects", "track_heap",
    "track_stack_frames", "track_objects", "tracker_value", "tracker_says_secret",
    "MAX_TRACKER_DEPTH",
]

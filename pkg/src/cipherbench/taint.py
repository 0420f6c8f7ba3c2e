"""Byte-level dynamic taint tracking over interpreter hooks.

Labels are booleans: a memory byte is either in :attr:`ShadowState.mem` or
clean, a register carries an 8-bit mask with one bit per byte, and the three
flags share a single bit.  The rules overtaint rather than undertaint; for
instance ``xor r1, r1`` keeps whatever label ``r1`` had.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field

from . import isa
from .isa import SP, Op
from .program import Program
from .vm import DEFAULT_FUEL, ExecutionTrace, Machine

log = logging.getLogger(__name__)

FULL = 0xFF


class TaintedAddressError(RuntimeError):
    """A memory operand's address depends on secret data."""

    def __init__(self, pc: int, reg: int):
        super().__init__(f"tainted address register r{reg} at {pc:#x}")
        self.pc = pc
        self.reg = reg


class SourceSpecError(ValueError):
    pass


@dataclass
class TaintSources:
    """Which inputs enter as secret.

    Parsed from lines ``input <index> secret|public`` and
    ``file <name> secret``; ``file`` lines match the name the input was
    loaded from.
    """

    secret_inputs: set[int] = field(default_factory=set)
    public_inputs: set[int] = field(default_factory=set)
    secret_files: set[str] = field(default_factory=set)

    @classmethod
    def parse(cls, text: str) -> "TaintSources":
        src = cls()
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if parts[0] == "input" and len(parts) == 3 and parts[2] in ("secret", "public"):
                try:
                    idx = int(parts[1], 0)
                except ValueError:
                    raise SourceSpecError(f"line {lineno}: bad input index {parts[1]!r}") from None
                (src.secret_inputs if parts[2] == "secret" else src.public_inputs).add(idx)
            elif parts[0] == "file" and len(parts) == 3 and parts[2] == "secret":
                src.secret_files.add(parts[1])
            else:
                raise SourceSpecError(f"line {lineno}: cannot parse {line!r}")
        return src

    def is_secret(self, index: int, name: str | None = None) -> bool:
        if index in self.secret_inputs:
            return True
        return name is not None and name in self.secret_files


@dataclass
class ShadowState:
    mem: set[int] = field(default_factory=set)
    regs: list[int] = field(default_factory=lambda: [0] * isa.NUM_REGS)
    flag: bool = False

    def mem_mask(self, addr: int, n: int) -> int:
        mem = self.mem
        if not mem:
            return 0
        out = 0
        for i in range(n):
            if addr + i in mem:
                out |= 1 << i
        return out

    def set_mem(self, addr: int, n: int, mask: int):
        mem = self.mem
        for i in range(n):
            if (mask >> i) & 1:
                mem.add(addr + i)
            else:
                mem.discard(addr + i)

    def tainted_bytes(self) -> set[int]:
        return set(self.mem)


def _low(mask: int, width: int) -> int:
    return mask & ((1 << width) - 1)


def _spread(any_tainted: bool, width: int) -> int:
    return (1 << width) - 1 if any_tainted else 0


@dataclass
class Access:
    """One data access seen during a taint run.

    ``tmask`` has a bit per byte whose data was tainted (read data for reads,
    written data for writes); ``premask`` holds the labels a write
    overwrote.
    """

    step: int
    pc: int
    kind: str  # "r" | "w"
    addr: int
    width: int
    tmask: int
    premask: int = 0

    @property
    def tainted(self) -> bool:
        return bool(self.tmask or self.premask)


class TaintTracker:
    """Interpreter hook that maintains a :class:`ShadowState`."""

    def __init__(self, sources: TaintSources | None = None, input_names=None):
        self.shadow = ShadowState()
        self.sources = sources or TaintSources()
        self.input_names = list(input_names or [])
        self.accesses: list[Access] = []
        self.execs: list[int] = []
        self.sps: list[int] = []
        self.warnings: list[str] = []
        self.ever_tainted: set[int] = set()
        # pc -> bitmask of registers carrying taint just before the pc ran
        self.reg_taint: dict[int, int] = {}

    # -- access logging -------------------------------------------------
    def _read(self, pc, addr, n) -> int:
        m = self.shadow.mem_mask(addr, n)
        self.accesses.append(Access(len(self.execs) - 1, pc, "r", addr, n, m))
        return m

    def _write(self, pc, addr, n, mask):
        pre = self.shadow.mem_mask(addr, n)
        self.accesses.append(Access(len(self.execs) - 1, pc, "w", addr, n, mask, pre))
        self.shadow.set_mem(addr, n, mask)
        if mask:
            for i in range(n):
                if (mask >> i) & 1:
                    self.ever_tainted.add(addr + i)

    def _check_addr(self, pc, ins):
        m = ins.mem
        if m is not None and m.base is not None and self.shadow.regs[m.base]:
            if ins.op is not Op.LEA:
                raise TaintedAddressError(pc, m.base)

    # -- propagation ----------------------------------------------------
    def step(self, machine, pc, ins, ea, aux, sp_before):
        self.execs.append(pc)
        self.sps.append(machine.regs[SP])
        live = 0
        for r, lab in enumerate(self.shadow.regs):
            if lab:
                live |= 1 << r
        if live:
            self.reg_taint[pc] = self.reg_taint.get(pc, 0) | live
        self._check_addr(pc, ins)
        propagate(self, pc, ins, ea, aux, sp_before, machine)


def propagate(t: TaintTracker, pc: int, ins: isa.Instruction, ea, aux, sp_before, machine=None):
    """Apply the data-flow rule of ``ins`` to ``t.shadow``.

    ``ea``/``aux`` are the concrete effective address and intrinsic data the
    interpreter reports for the instruction just executed.
    """
    sh = t.shadow
    regs = sh.regs
    op = ins.op
    if op is Op.LOAD:
        regs[ins.a] = t._read(pc, ea, ins.mem.width)
    elif op is Op.STORE:
        t._write(pc, ea, ins.mem.width, _low(regs[ins.a], ins.mem.width))
    elif op in isa.ALU_RR:
        w = ins.width
        tainted = bool(_low(regs[ins.a], w) or _low(regs[ins.b], w))
        regs[ins.a] = _spread(tainted, w)
        sh.flag = tainted
    elif op in isa.ALU_RI:
        w = ins.width
        tainted = bool(_low(regs[ins.a], w))
        regs[ins.a] = _spread(tainted, w)
        sh.flag = tainted
    elif op is Op.MOV:
        regs[ins.a] = _low(regs[ins.b], ins.width)
    elif op in (Op.MOVI, Op.RDRAND, Op.MSIZE, Op.SBRK, Op.ILEN):
        regs[ins.a] = 0
    elif op is Op.LEA:
        base = ins.mem.base
        regs[ins.a] = FULL if base is not None and regs[base] else 0
    elif op in isa.RMW:
        w = ins.mem.width
        old = t._read(pc, ea, w)
        src = _low(regs[ins.a], w) if op in isa.RMW_REG else 0
        tainted = bool(old or src)
        t._write(pc, ea, w, _spread(tainted, w))
        sh.flag = tainted
    elif op is Op.CMP:
        w = ins.width
        sh.flag = bool(_low(regs[ins.a], w) or _low(regs[ins.b], w))
    elif op is Op.CMPI:
        sh.flag = bool(_low(regs[ins.a], ins.width))
    elif op in isa.COND_BRANCHES:
        if sh.flag:
            t.warnings.append(f"branch on tainted flags at {pc:#x}")
    elif op is Op.CMOVZ or op is Op.CMOVNZ:
        f = FULL if sh.flag else 0
        regs[ins.a] = regs[ins.a] | regs[ins.b] | f
    elif op is Op.CALL:
        t._write(pc, ea, 8, 0)
    elif op is Op.RET:
        t._read(pc, ea, 8)
    elif op is Op.PUSH:
        t._write(pc, ea, 8, regs[ins.a])
    elif op is Op.POP:
        regs[ins.a] = t._read(pc, ea, 8)
    elif op is Op.NZMASK:
        w = ins.width
        src = _low(regs[ins.b], w)
        regs[ins.a] = src
        sh.flag = bool(src)
    elif op is Op.LAHF:
        regs[ins.a] = 1 if sh.flag else 0
    elif op is Op.SAHF:
        sh.flag = bool(regs[ins.a] & 1)
    elif op is Op.AESR:
        m = t._read(pc, ea, 32)
        tainted = bool(m)
        t._write(pc, ea, 16, _spread(tainted, 16))
        regs[ins.a] = _spread(tainted, 8)
    elif op is Op.COPYN:
        dst, src, n = aux
        for r in (1, 2):
            if regs[r]:
                raise TaintedAddressError(pc, r)
        for i in range(n):
            m = t._read(pc, src + 8 * i, 8)
            t._write(pc, dst + 8 * i, 8, m)
    elif op is Op.ALLOC:
        # Fresh allocations carry no labels, whatever a previous owner of
        # the block left behind.
        ptr, size = aux
        sh.set_mem(ptr, max(16, (size + 15) & ~15), 0)
        regs[ins.a] = 0
    elif op is Op.REALLOC:
        old, new, size, copied = aux
        if copied:
            m = t._read(pc, old, copied)
            sh.set_mem(new, max(16, (size + 15) & ~15), 0)
            t._write(pc, new, copied, m)
        regs[ins.a] = 0
    elif op is Op.CLASSIFY or op is Op.DECLASSIFY:
        addr, n = aux
        if n == 0:
            t.warnings.append(f"zero-length {op.name.lower()} at {pc:#x}")
            log.warning("zero-length %s at %#x", op.name.lower(), pc)
        if op is Op.CLASSIFY:
            sh.set_mem(addr, n, (1 << n) - 1)
            t.ever_tainted.update(range(addr, addr + n))
        else:
            sh.set_mem(addr, n, 0)
    elif op is Op.INPUT:
        idx, n = aux
        name = t.input_names[idx] if idx < len(t.input_names) else None
        secret = t.sources.is_secret(idx, name)
        if n:
            t._write(pc, ea, n, (1 << n) - 1 if secret else 0)
    elif op is Op.OUTPUT:
        n = aux
        if n:
            t._read(pc, ea, n)
            # The output intrinsic is a sink: it declassifies what it emits.
            sh.set_mem(ea, n, 0)
    # Remaining opcodes (jumps, markers, free, shmap, halt, brk) move no data.


class SecrecyClass(str, enum.Enum):
    PUBLIC_ONLY = "PUBLIC_ONLY"
    SECRET_ONLY = "SECRET_ONLY"
    MIXED = "MIXED"

    def join(self, other: "SecrecyClass") -> "SecrecyClass":
        if self is other:
            return self
        return SecrecyClass.MIXED


@dataclass
class InstructionSecrecy:
    """Per-instruction aggregate over all observed accesses."""

    offset: int
    secret: int = 0
    public: int = 0
    reads_secret: bool = False
    writes_secret: bool = False
    # Every byte of every secret access was secret (enables Fast's
    # unconditional nonzero-mask path).
    fully_secret: bool = True

    @property
    def cls(self) -> SecrecyClass:
        if self.secret and not self.public:
            return SecrecyClass.SECRET_ONLY
        if self.secret:
            return SecrecyClass.MIXED
        return SecrecyClass.PUBLIC_ONLY

    def add(self, secret: bool, kind: str, full: bool):
        if secret:
            self.secret += 1
            if kind == "r":
                self.reads_secret = True
            else:
                self.writes_secret = True
            self.fully_secret = self.fully_secret and full
        else:
            self.public += 1

    def merge(self, other: "InstructionSecrecy") -> "InstructionSecrecy":
        return InstructionSecrecy(
            self.offset, self.secret + other.secret, self.public + other.public,
            self.reads_secret or other.reads_secret,
            self.writes_secret or other.writes_secret,
            self.fully_secret and other.fully_secret,
        )

    def to_json(self) -> dict:
        return {"offset": self.offset, "class": self.cls.value, "secret": self.secret,
                "public": self.public, "reads_secret": self.reads_secret,
                "writes_secret": self.writes_secret, "fully_secret": self.fully_secret}

    @classmethod
    def from_json(cls, d: dict) -> "InstructionSecrecy":
        return cls(d["offset"], d["secret"], d["public"], d["reads_secret"],
                   d["writes_secret"], d["fully_secret"])


# Instructions whose accesses are not rewritten (control transfers touching
# the return-address slot).
UNMASKED_ACCESSORS = {Op.CALL, Op.RET}


@dataclass
class TaintRun:
    """Everything one analysis execution produced."""

    inputs: list[bytes]
    execs: list[int]
    sps: list[int]
    accesses: list[Access]
    trace: ExecutionTrace
    tainted: set[int]
    warnings: list[str]
    output: bytes
    ops: dict[int, Op] = field(default_factory=dict, repr=False)
    reg_taint: dict[int, int] = field(default_factory=dict)


def run_once(prog: Program, inputs, sources: TaintSources | None = None, *,
             input_names=None, fuel: int = DEFAULT_FUEL, seed: int = 0) -> TaintRun:
    tracker = TaintTracker(sources, input_names)
    m = Machine(prog, inputs, hooks=[tracker], fuel=fuel, seed=seed)
    state, trace = m.run()
    ops = {a: i.op for a, i in prog.instructions().items()}
    return TaintRun([bytes(x) for x in inputs], tracker.execs, tracker.sps, tracker.accesses,
                    trace, tracker.ever_tainted, tracker.warnings, state.output, ops,
                    tracker.reg_taint)


def classify_accesses(runs, object_masks=None) -> dict[int, InstructionSecrecy]:
    """Aggregate per-instruction classes.

    An access counts as secret when its data or the bytes it overwrote were
    tainted.  ``object_masks[run][k]``, when given, adds a byte mask of the
    bytes of access ``k`` that belong to secret memory objects.
    """
    table: dict[int, InstructionSecrecy] = {}
    for ri, run in enumerate(runs):
        extra = object_masks[ri] if object_masks is not None else None
        for k, acc in enumerate(run.accesses):
            if run.ops.get(acc.pc) in UNMASKED_ACCESSORS:
                continue
            smask = acc.tmask | acc.premask
            if extra is not None:
                smask |= extra[k]
            ent = table.get(acc.pc)
            if ent is None:
                ent = table[acc.pc] = InstructionSecrecy(acc.pc)
            ent.add(bool(smask), acc.kind, smask == (1 << acc.width) - 1)
    return table


def run_taint(prog: Program, input_sets, sources: TaintSources | None = None, *,
              input_names=None, fuel: int = DEFAULT_FUEL):
    """Execute ``prog`` once per input set; returns (runs, class table)."""
    if not input_sets:
        raise ValueError("run_taint needs at least one input set")
    runs = [run_once(prog, inp, sources, input_names=input_names, fuel=fuel, seed=i)
            for i, inp in enumerate(input_sets)]
    return runs, classify_accesses(runs)


def merge_classes(*tables: dict[int, InstructionSecrecy]) -> dict[int, InstructionSecrecy]:
    out: dict[int, InstructionSecrecy] = {}
    for tbl in tables:
        for off, ent in tbl.items():
            out[off] = out[off].merge(ent) if off in out else ent
    return out


class HashMismatch(ValueError):
    pass


def merge_runs(reports):
    """Join per-run reports from the same program (associative, commutative)."""
    if not reports:
        raise ValueError("nothing to merge")
    hashes = {r.program_hash for r in reports}
    if len(hashes) != 1:
        raise HashMismatch("reports come from different programs")
    out = reports[0]
    for r in reports[1:]:
        out = out.merge(r)
    return out


__all__ = [
    "TaintSources", "ShadowState", "TaintTracker", "Access", "TaintRun", "SecrecyClass",
    "InstructionSecrecy", "TaintedAddressError", "SourceSpecError", "HashMismatch",
    "propagate", "run_once", "run_taint", "classify_accesses", "merge_classes", "merge_runs",
]

"""Basic blocks and dynamic register/flag liveness from executed traces."""

from __future__ import annotations

from dataclasses import dataclass, field

from . import isa
from .isa import SP, Op
from .program import Program

ALL_REGS = frozenset(range(isa.NUM_REGS)) - {SP}


@dataclass
class BasicBlock:
    start: int
    end: int  # exclusive
    successors: set[int] = field(default_factory=set)

    @property
    def size(self) -> int:
        return self.end - self.start


@dataclass
class BasicBlockTable:
    blocks: list[BasicBlock]
    coverage_gaps: list[tuple[int, int]]

    def starts(self) -> list[int]:
        return [b.start for b in self.blocks]

    def block_of(self, addr: int) -> BasicBlock | None:
        for b in self.blocks:
            if b.start <= addr < b.end:
                return b
        return None

    def to_json(self):
        return {"blocks": [[b.start, b.end, sorted(b.successors)] for b in self.blocks],
                "coverage_gaps": [list(g) for g in self.coverage_gaps]}

    @classmethod
    def from_json(cls, d):
        return cls([BasicBlock(s, e, set(succ)) for s, e, succ in d["blocks"]],
                   [tuple(g) for g in d["coverage_gaps"]])


def _ends_block(op: Op) -> bool:
    return op in isa.TERMINATORS or op is Op.CALL


def find_basic_blocks(runs, prog: Program) -> BasicBlockTable:
    insns = prog.instructions()
    executed: set[int] = set()
    starts = {prog.entry}
    edges: dict[int, set[int]] = {}
    for run in runs:
        ex = run.execs
        executed.update(ex)
        for i in range(len(ex) - 1):
            pc, nxt = ex[i], ex[i + 1]
            ins = insns.get(pc)
            if ins is None:
                continue
            if _ends_block(ins.op) or nxt != pc + ins.length:
                starts.add(nxt)
                edges.setdefault(pc, set()).add(nxt)
            if _ends_block(ins.op):
                starts.add(pc + ins.length)
    # A fallthrough after a terminator is only a start if it ran.
    starts = {s for s in starts if s in executed}
    blocks = []
    for s in sorted(starts):
        pc = s
        while True:
            ins = insns[pc]
            nxt = pc + ins.length
            if _ends_block(ins.op) or nxt in starts or nxt not in executed:
                break
            pc = nxt
        succ = set(edges.get(pc, ()))
        ins = insns[pc]
        if not _ends_block(ins.op) and nxt in executed:
            succ.add(nxt)
        blocks.append(BasicBlock(s, nxt, succ))
    gaps: list[tuple[int, int]] = []
    for addr, ins in insns.items():
        if addr not in executed:
            if gaps and gaps[-1][1] == addr:
                gaps[-1] = (gaps[-1][0], addr + ins.length)
            else:
                gaps.append((addr, addr + ins.length))
    return BasicBlockTable(blocks, gaps)


@dataclass
class LivenessTable:
    """``scratch_after[k]``: registers dead right after instruction ``k``
    in every run that executed it.  ``flags_live_after[k]``: some run read a
    flag after ``k`` before all flags were rewritten."""

    scratch_after: dict[int, frozenset[int]]
    flags_live_after: dict[int, bool]

    def scratch_regs(self, offset: int) -> frozenset[int]:
        return self.scratch_after.get(offset, frozenset())

    def flags_live(self, offset: int) -> bool:
        return self.flags_live_after.get(offset, True)

    def scratch_before(self, ins_addr: int, ins: isa.Instruction) -> frozenset[int]:
        """Registers that may be clobbered in place of ``ins``, excluding its
        own operands and the stack pointer."""
        if ins_addr not in self.scratch_after:
            return frozenset()
        dead = (self.scratch_after[ins_addr] | isa.regs_written(ins)) - isa.regs_read(ins)
        return frozenset(dead - _operands(ins) - {SP})

    def merge(self, other: "LivenessTable") -> "LivenessTable":
        sa = dict(self.scratch_after)
        for k, v in other.scratch_after.items():
            sa[k] = sa[k] & v if k in sa else v
        fl = dict(self.flags_live_after)
        for k, v in other.flags_live_after.items():
            fl[k] = fl.get(k, False) or v
        return LivenessTable(sa, fl)

    def to_json(self):
        return {"scratch_after": {str(k): sorted(v) for k, v in sorted(self.scratch_after.items())},
                "flags_live_after": {str(k): v for k, v in sorted(self.flags_live_after.items())}}

    @classmethod
    def from_json(cls, d):
        return cls({int(k): frozenset(v) for k, v in d["scratch_after"].items()},
                   {int(k): v for k, v in d["flags_live_after"].items()})


def _operands(ins: isa.Instruction) -> set[int]:
    s = isa.regs_read(ins) | isa.regs_written(ins)
    if ins.a is not None and ins.fmt not in (isa.Fmt.REL8, isa.Fmt.REL32, isa.Fmt.ID):
        if not (ins.op in isa.RMW_IMM):
            s.add(ins.a)
    return s


def _liveness_of_run(run, insns) -> LivenessTable:
    dead = [True] * isa.NUM_REGS
    live_flags = False
    sa: dict[int, frozenset[int]] = {}
    fl: dict[int, bool] = {}
    for pc in reversed(run.execs):
        ins = insns[pc]
        cur = frozenset(r for r in ALL_REGS if dead[r])
        sa[pc] = sa[pc] & cur if pc in sa else cur
        fl[pc] = fl.get(pc, False) or live_flags
        for r in isa.regs_written(ins):
            dead[r] = True
        for r in isa.regs_read(ins):
            dead[r] = False
        if ins.op in isa.FLAG_WRITERS:
            live_flags = False
        if ins.op in isa.FLAG_READERS:
            live_flags = True
    return LivenessTable(sa, fl)


def compute_liveness(runs, prog: Program) -> LivenessTable:
    insns = prog.instructions()
    out = LivenessTable({}, {})
    for run in runs:
        out = out.merge(_liveness_of_run(run, insns))
    return out


__all__ = ["BasicBlock", "BasicBlockTable", "LivenessTable", "find_basic_blocks",
           "compute_liveness"]

"""Binary rewriter: relocate every discovered block into an instrument
section, mask secret memory accesses there and redirect the originals.

>>> hp = instrument(prog, report, Variant.FAST)            # doctest: +SKIP
>>> execute(hp, inputs).output == execute(prog, inputs).output   # doctest: +SKIP
True
"""

from __future__ import annotations

import logging

from . import isa
from .analysis import AnalysisReport
from .emitter import Emitter, RewriteError, claim, release
from .expand import Config, Site, Variant, expand_access
from .handlers import (
    emit_alloc, emit_frame_gadget, emit_init, emit_input, emit_output, emit_realloc, emit_sbrk,
    emit_tracker_pop, emit_tracker_push,
)
from .isa import SP, Instruction, Op
from .objects import MAX_TRACKER_DEPTH
from .prng import PrngKind
from .program import HardenedProgram, Program
from .taint import HashMismatch, SecrecyClass
from .trampoline import apply_patches, function_lookup, plan_trampolines

log = logging.getLogger(__name__)

MAX_MARKERS = 256
_RESERVED = {Op.SHMAP, Op.MARKB, Op.MARKE, Op.BRK, Op.AESR}
_NO_FALLTHROUGH = {Op.JMP, Op.JMPS, Op.RET, Op.HALT}
_EXPANDED = {Op.LOAD, Op.STORE, Op.PUSH, Op.POP, Op.COPYN} | isa.RMW


def _operand_regs(ins: Instruction) -> set[int]:
    regs = isa.regs_read(ins) | isa.regs_written(ins) | {SP}
    f = ins.fmt
    if f in (isa.Fmt.R, isa.Fmt.RR, isa.Fmt.RI, isa.Fmt.IMM64) or (
            f is isa.Fmt.MEM and ins.op not in isa.RMW_IMM):
        regs.add(ins.a)
    if f is isa.Fmt.RR:
        regs.add(ins.b)
    if ins.mem is not None and ins.mem.base is not None:
        regs.add(ins.mem.base)
    return regs


class _Builder:
    def __init__(self, prog: Program, report: AnalysisReport, cfg: Config):
        self.prog = prog
        self.report = report
        self.cfg = cfg
        self.insns = prog.instructions()
        self.blocks = report.blocks.blocks
        self.starts = {b.start for b in self.blocks}
        self.em = Emitter("R")
        self.sites: dict[int, int] = {}
        self.instrumented = set(report.instrumented_offsets())
        self.alloc_flags: dict[int, bool] = {}
        for key, s in report.sites.items():
            if len(key) > MAX_TRACKER_DEPTH:
                raise RewriteError(f"allocation call stack deeper than {MAX_TRACKER_DEPTH}", key[-1])
            self.alloc_flags[key[-1]] = self.alloc_flags.get(key[-1], False) or s.secret

    # -- helpers --------------------------------------------------------
    def site(self, offset: int, ins: Instruction | None = None, flags_live: bool | None = None) -> Site:
        rep = self.report
        ins = ins if ins is not None else self.insns.get(offset, Instruction(Op.HALT))
        ent = rep.secrecy.get(offset)
        dead = sorted(rep.liveness.scratch_before(offset, ins))
        ops = _operand_regs(ins)
        taint = rep.reg_taint.get(offset, 0)
        rest = [r for r in range(isa.NUM_REGS) if r not in ops and r not in dead and r != SP]
        return Site(
            offset, ins, ent.cls if ent else SecrecyClass.PUBLIC_ONLY,
            bool(ent and ent.fully_secret), dead,
            [r for r in rest if not taint >> r & 1], [r for r in rest if taint >> r & 1],
            rep.liveness.flags_live(offset) if flags_live is None else flags_live, self.cfg,
        )

    def flags_live_before(self, offset: int) -> bool:
        ins = self.insns.get(offset)
        if ins is None or offset not in self.report.liveness.flags_live_after:
            return True
        if ins.op in isa.FLAG_READERS:
            return True
        if ins.op in isa.FLAG_WRITERS:
            return False
        return self.report.liveness.flags_live(offset)

    def target(self, addr: int):
        return f"b{addr:x}" if addr in self.starts else addr

    # -- per instruction ------------------------------------------------
    def instruction(self, pc: int, ins: Instruction) -> None:
        em = self.em
        op = ins.op
        nxt = pc + ins.length
        if op in _RESERVED:
            raise RewriteError(f"reserved instruction {op.name.lower()} at {pc:#x}", pc)
        if op in isa.BRANCHES:
            em.jump(op, self.target(nxt + ins.imm))
            return
        if op is Op.CALL:
            self.call(pc, ins, nxt)
            return
        handled = _EXPANDED | {Op.INPUT, Op.OUTPUT, Op.REALLOC}
        marked = pc in self.instrumented
        if marked and op not in handled:
            raise RewriteError(f"cannot instrument {op.name.lower()} at {pc:#x}", pc)
        heap_on = bool(self.instrumented)
        if marked:
            if len(self.sites) >= MAX_MARKERS:
                raise RewriteError(f"more than {MAX_MARKERS} instrumented sites", pc)
            mid = len(self.sites)
            self.sites[mid] = pc
            em.emit(Op.MARKB, imm=mid)
        s = self.site(pc, ins)
        if marked and op in _EXPANDED:
            expand_access(em, s)
        elif marked and op is Op.INPUT:
            emit_input(em, s)
        elif marked and op is Op.OUTPUT:
            emit_output(em, s)
        elif op is Op.REALLOC and heap_on:
            emit_realloc(em, s, self.alloc_flags.get(pc, False))
        elif op is Op.ALLOC and heap_on:
            emit_alloc(em, s, self.alloc_flags.get(pc, False))
        elif op is Op.SBRK and heap_on:
            emit_sbrk(em, s)
        else:
            em.copy(ins)
        if marked:
            em.emit(Op.MARKE, imm=mid)

    def call(self, pc: int, ins: Instruction, nxt: int) -> None:
        em = self.em
        dest = nxt + ins.imm
        tracked = pc in self.report.tracked_calls
        if tracked:
            s = self.site(pc, ins)
            c = claim(em, 0, s.dead, s.public, s.secret, "entry" if s.flags_live else None)
            emit_tracker_push(em, self.report.tracked_calls[pc])
            release(em, c)
        # Calls keep targeting the original entry, whose trampoline leads
        # here again; return addresses stay inside the instrument section.
        em.jump(Op.CALL, dest)
        if tracked:
            after = self.insns.get(nxt)
            s = self.site(nxt, after, self.flags_live_before(nxt))
            c = claim(em, 0, s.dead, s.public, s.secret, "entry" if s.flags_live else None)
            emit_tracker_pop(em)
            release(em, c)

    # -- whole program --------------------------------------------------
    def gadget_frames(self) -> dict[int, object]:
        out = {}
        if not self.instrumented:
            return out
        for entry, lay in self.report.frames.items():
            if entry not in self.starts:
                continue
            if lay.secret_rel or (lay.accessors & self.instrumented):
                out[entry] = lay
        return out

    def check_entries(self, gadgets) -> None:
        for b in self.blocks:
            last = max(a for a in self.insns if b.start <= a < b.end)
            ins = self.insns[last]
            if ins.op in isa.BRANCHES:
                dest = last + ins.length + ins.imm
                lay = gadgets.get(dest)
                if lay is None:
                    continue
                if ins.op in (Op.JMP, Op.JMPS) and lay.is_tail_target:
                    continue
                raise RewriteError(f"branch at {last:#x} re-enters function entry {dest:#x}", last)

    def build(self) -> tuple[bytes, dict[str, int]]:
        em = self.em
        init = self.site(self.prog.entry, flags_live=False)
        emit_init(em, init, self.prog.static_size, self.report.secret_statics(), self.prog.entry)
        gadgets = self.gadget_frames()
        self.check_entries(gadgets)
        for i, b in enumerate(self.blocks):
            em.label(f"b{b.start:x}")
            if b.start in gadgets:
                lay = gadgets[b.start]
                s = self.site(b.start, self.insns[b.start], self.flags_live_before(b.start))
                emit_frame_gadget(em, s, lay.frame_size, lay.secret_rel)
            pc = b.start
            ins = None
            while pc < b.end:
                ins = self.insns[pc]
                self.instruction(pc, ins)
                pc += ins.length
            if ins.op not in _NO_FALLTHROUGH:
                following = self.blocks[i + 1].start if i + 1 < len(self.blocks) else None
                if following != b.end:
                    em.jump(Op.JMP, self.target(b.end))
        return em.assemble(isa.INSTRUMENT_BASE)


def instrument(prog: Program, report: AnalysisReport, variant: Variant | str = Variant.BASE,
               prng: PrngKind | str = PrngKind.XS128P, **options) -> HardenedProgram:
    """Harden ``prog`` according to ``report``.

    ``options`` feed :class:`~cipherbench.expand.Config`'s test hooks
    (``fixed_mask``, ``mask_is_data``).
    """
    if report.program_hash != prog.program_hash():
        raise HashMismatch("analysis report does not belong to this program")
    cfg = Config(Variant(variant), PrngKind(prng), **options)
    if report.coverage_gaps:
        log.warning("%d code ranges never ran during analysis and stay uninstrumented",
                    len(report.coverage_gaps))
    b = _Builder(prog, report, cfg)
    code, labels = b.build()
    if len(code) > isa.DATA_AREA_BASE - isa.INSTRUMENT_BASE:
        raise RewriteError("instrument section overflows into the data area")
    relocated = {blk.start: labels[f"b{blk.start:x}"] for blk in b.blocks}
    patches = plan_trampolines(b.blocks, function_lookup(prog.function_entries()))
    patched = bytearray(prog.code)
    dispatch = apply_patches(patched, prog.code_base, b.blocks, patches, relocated)
    new_prog = Program(bytes(patched), prog.entry, prog.code_base, list(prog.static_data),
                       prog.static_size, dict(prog.functions), dict(prog.labels))
    kinds = {k: sum(p.kind == k for p in patches) for k in ("jmp", "hop", "brk")}
    meta = {
        "program_hash": prog.program_hash(),
        "variant": cfg.variant.value,
        "prng": cfg.prng.value,
        "sites": {str(k): v for k, v in b.sites.items()},
        "relocated": {str(k): v for k, v in relocated.items()},
        "trampolines": kinds,
    }
    return HardenedProgram(
        new_prog, code, isa.INSTRUMENT_BASE, isa.INSTRUMENT_BASE, dispatch,
        [(o.base, o.length) for o in report.secret_statics()],
        (isa.DATA_AREA_BASE, isa.DATA_AREA_SIZE), meta,
    )


__all__ = ["instrument", "RewriteError", "Variant", "MAX_MARKERS"]

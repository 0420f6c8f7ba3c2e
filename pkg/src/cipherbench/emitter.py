"""Small assembler back end used by the rewriter.

Instructions are appended to an :class:`Emitter` with symbolic branch
targets; :meth:`Emitter.assemble` lays them out at a base address and
resolves every target.  Targets are either local labels (strings) or
absolute addresses (ints).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

from . import isa
from .isa import Instruction, Mem, Op
from .prng import PrngKind

# data-area layout
TRACKER = isa.DATA_AREA_BASE
PRNG_STATE = isa.DATA_AREA_BASE + 0x10      # 32 bytes
SLAB = isa.DATA_AREA_BASE + 0x40            # plain spill slots
MASKED_SLAB = SLAB + 0x80                   # (data, mask) pairs

_NEAR = {Op.JMP, Op.JZ, Op.JNZ, Op.CALL}


class RewriteError(Exception):
    """The rewriter refuses to harden a program."""

    def __init__(self, msg: str, offset: int | None = None):
        super().__init__(msg)
        self.offset = offset


def shifted(m: Mem, delta: int, width: int | None = None) -> Mem:
    disp = m.disp + delta
    if not -(1 << 31) <= disp < (1 << 31):
        raise RewriteError(f"displacement {disp:#x} does not fit in 32 bits")
    return Mem(m.base, disp, m.width if width is None else width)


def absolute(addr: int, width: int = 8) -> Mem:
    return Mem(None, addr, width)


class Emitter:
    def __init__(self, prefix: str = "L"):
        self.items: list[Instruction | str] = []
        self._ids = itertools.count()
        self.prefix = prefix

    def new_label(self, hint: str = "") -> str:
        return f".{self.prefix}{next(self._ids)}{hint}"

    def label(self, name: str) -> None:
        self.items.append(name)

    def emit(self, op: Op, a=None, b=None, imm=None, mem=None, width: int = 8, target=None):
        self.items.append(Instruction(op, a, b, imm, mem, width, target))

    # shorthands
    def rr(self, op: Op, a: int, b: int, width: int = 8):
        self.emit(op, a, b, width=width)

    def ri(self, op: Op, a: int, imm: int, width: int = 8):
        self.emit(op, a, imm=imm, width=width)

    def movi(self, a: int, imm: int):
        self.emit(Op.MOVI, a, imm=imm & isa.MASK64)

    def load(self, a: int, m: Mem):
        self.emit(Op.LOAD, a, mem=m)

    def store(self, m: Mem, a: int):
        self.emit(Op.STORE, a, mem=m)

    def lea(self, a: int, m: Mem):
        self.emit(Op.LEA, a, mem=Mem(m.base, m.disp, 8))

    def jump(self, op: Op, target):
        self.emit(isa.SHORT_BRANCHES.get(op, op), target=target)

    def copy(self, ins: Instruction):
        self.items.append(ins)

    def assemble(self, base: int) -> tuple[bytes, dict[str, int]]:
        labels: dict[str, int] = {}
        pc = base
        for it in self.items:
            if isinstance(it, str):
                if it in labels:
                    raise RewriteError(f"label {it} defined twice")
                labels[it] = pc
            else:
                pc += it.length
        out = bytearray()
        pc = base
        for it in self.items:
            if isinstance(it, str):
                continue
            ins = it
            if ins.target is not None:
                dest = labels[ins.target] if isinstance(ins.target, str) else ins.target
                ins = Instruction(ins.op, ins.a, ins.b, dest - (pc + ins.length), ins.mem, ins.width)
            out += isa.encode(ins)
            pc += ins.length
        return bytes(out), labels


# --------------------------------------------------------------------------
# mask generation

def draw_temps(kind: PrngKind) -> int:
    """Extra scratch registers a mask draw needs beyond its output."""
    return 2 if kind is PrngKind.XS128P else 0


def emit_draw(em: Emitter, kind: PrngKind, out: int, temps: list[int]) -> None:
    """Leave 64 fresh mask bits in ``out``; clobbers flags and ``temps``."""
    if kind is PrngKind.SECURE:
        em.emit(Op.RDRAND, out)
    elif kind is PrngKind.AESROUND:
        em.emit(Op.AESR, out, mem=absolute(PRNG_STATE, 8))
    else:
        b, x = temps[:2]
        s0, s1 = absolute(PRNG_STATE), absolute(PRNG_STATE + 8)
        em.load(out, s0)
        em.load(b, s1)
        em.store(s0, b)
        em.rr(Op.MOV, x, out)
        em.ri(Op.SHLI, x, 23)
        em.rr(Op.XOR, out, x)
        em.rr(Op.MOV, x, out)
        em.ri(Op.SHRI, x, 17)
        em.rr(Op.XOR, out, x)
        em.rr(Op.XOR, out, b)
        em.rr(Op.MOV, x, b)
        em.ri(Op.SHRI, x, 26)
        em.rr(Op.XOR, out, x)
        em.store(s1, out)
        em.rr(Op.ADD, out, b)


def emit_seed(em: Emitter, kind: PrngKind, regs: list[int]) -> None:
    """Seed the guest generator state from hardware entropy."""
    a, b = regs[:2]
    if kind is PrngKind.XS128P:
        again = em.new_label("seed")
        em.label(again)
        em.emit(Op.RDRAND, a)
        em.emit(Op.RDRAND, b)
        em.store(absolute(PRNG_STATE), a)
        em.store(absolute(PRNG_STATE + 8), b)
        em.rr(Op.OR, a, b)
        em.jump(Op.JZ, again)
    elif kind is PrngKind.AESROUND:
        for i in range(4):
            em.emit(Op.RDRAND, a)
            em.store(absolute(PRNG_STATE + 8 * i), a)


def emit_nonzero_draw(em: Emitter, kind: PrngKind, out: int, t: int, temps: list[int],
                      width: int, keep: int | None = None) -> None:
    """Draw a mask whose bytes are all nonzero.

    With ``keep`` (a register holding a byte mask such as the output of
    ``nzmask``) only the selected bytes must be nonzero and the others are
    cleared.  ``t`` is an extra scratch register; ``temps`` may include it.
    """
    again = em.new_label("nz")
    em.label(again)
    emit_draw(em, kind, out, temps)
    if keep is None:
        em.rr(Op.NZMASK, t, out, width)
        em.ri(Op.ADDI, t, 1, width)
    else:
        em.rr(Op.AND, out, keep)
        em.rr(Op.NZMASK, t, out, width)
        em.rr(Op.CMP, t, keep, width)
    em.jump(Op.JNZ, again)


# --------------------------------------------------------------------------
# scratch registers

@dataclass
class Claim:
    regs: list[int]
    flags: int | None = None
    plain: list[int] = field(default_factory=list)
    masked: list[int] = field(default_factory=list)
    helper: int | None = None


def claim(em: Emitter, n: int, dead, public, secret, save_flags: str | None = None) -> Claim:
    """Find ``n`` working registers (plus one for flags if ``save_flags``).

    Dead registers come first, then registers that never held taint at the
    site (spilled in the clear), then tainted ones, whose spill slots are
    masked with a fresh hardware-random word.  ``save_flags`` is ``"entry"``
    to capture the flags in the prologue or ``"late"`` when the caller does
    it itself; either way the epilogue restores them.
    """
    need = n + (1 if save_flags else 0)
    cheap = [r for r in dead] + [r for r in public if r not in dead]
    pool = cheap + [r for r in secret if r not in cheap]
    if len(pool) < need:
        raise RewriteError(f"needs {need} scratch registers, only {len(pool)} available")
    taken = pool[:need]
    if save_flags and taken[0] not in cheap:
        raise RewriteError("no register available to hold the saved flags")
    deadset = set(dead)
    c = Claim([], None)
    c.plain = [r for r in taken if r not in deadset and r in public]
    c.masked = [r for r in taken if r not in deadset and r not in public]
    if save_flags:
        c.flags = taken[0]
    rest = taken[1:] if save_flags else taken
    c.regs = rest
    if c.masked:
        helpers = [r for r in rest if r not in c.masked]
        if not helpers:
            raise RewriteError("no clean register left to mask a spilled secret")
        c.helper = helpers[0]
    for i, r in enumerate(c.plain):
        em.store(absolute(SLAB + 8 * i), r)
    if save_flags == "entry":
        em.emit(Op.LAHF, c.flags)
    for j, r in enumerate(c.masked):
        h = c.helper
        em.emit(Op.RDRAND, h)
        em.store(absolute(MASKED_SLAB + 16 * j + 8), h)
        em.rr(Op.XOR, r, h)
        em.store(absolute(MASKED_SLAB + 16 * j), r)
    return c


def release(em: Emitter, c: Claim) -> None:
    for j, r in enumerate(c.masked):
        h = c.helper
        em.load(r, absolute(MASKED_SLAB + 16 * j))
        em.load(h, absolute(MASKED_SLAB + 16 * j + 8))
        em.rr(Op.XOR, r, h)
    if c.flags is not None:
        em.emit(Op.SAHF, c.flags)
    for i, r in enumerate(c.plain):
        em.load(r, absolute(SLAB + 8 * i))


__all__ = ["Emitter", "RewriteError", "Claim", "claim", "release", "emit_draw", "emit_seed",
           "emit_nonzero_draw", "draw_temps", "shifted", "absolute", "TRACKER", "PRNG_STATE",
           "SLAB", "MASKED_SLAB"]

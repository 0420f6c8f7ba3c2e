"""Masked replacements for individual memory-accessing instructions.

Every expansion is emitted between the claim prologue and epilogue of a
:class:`Site`; it may use only the registers the claim handed out.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

from . import isa
from .emitter import Claim, Emitter, RewriteError, claim, draw_temps, emit_draw, release, shifted
from .isa import SP, Instruction, Mem, Op
from .prng import PrngKind
from .taint import SecrecyClass

D_MASK = isa.MASK_DISTANCE
D_SEC = isa.SECRECY_DISTANCE


class Variant(str, Enum):
    BASE = "base"
    FAST = "fast"
    ENHANCED = "enhanced"


@dataclass
class Config:
    variant: Variant = Variant.BASE
    prng: PrngKind = PrngKind.XS128P
    # Test hooks: force a constant mask, or the stored value itself, at the
    # given original offsets.  Both deliberately break the scheme.
    fixed_mask: dict[int, int] = field(default_factory=dict)
    mask_is_data: set[int] = field(default_factory=set)
    reseed: bool = False


@dataclass
class Site:
    offset: int
    ins: Instruction
    cls: SecrecyClass
    fully_secret: bool
    dead: list[int]
    public: list[int]
    secret: list[int]
    flags_live: bool
    cfg: Config

    @property
    def variant(self) -> Variant:
        return self.cfg.variant

    def claim(self, em: Emitter, n: int, late: bool = False) -> Claim:
        return claim(em, n, self.dead, self.public, self.secret,
                     ("late" if late else "entry") if self.flags_live else None)

    def draw(self, em: Emitter, out: int, temps: list[int], value: int | None = None) -> None:
        if self.offset in self.cfg.fixed_mask:
            em.movi(out, self.cfg.fixed_mask[self.offset])
        elif self.offset in self.cfg.mask_is_data and value is not None:
            em.rr(Op.MOV, out, value)
        else:
            emit_draw(em, self.cfg.prng, out, temps)

    def nonzero_draw(self, em: Emitter, out: int, t: int, temps: list[int], width: int,
                     keep: int | None = None, value: int | None = None) -> None:
        again = em.new_label("nz")
        em.label(again)
        self.draw(em, out, temps, value)
        if keep is None:
            em.rr(Op.NZMASK, t, out, width)
            em.ri(Op.ADDI, t, 1, width)
        else:
            em.rr(Op.AND, out, keep)
            em.rr(Op.NZMASK, t, out, width)
            em.rr(Op.CMP, t, keep, width)
        em.jump(Op.JNZ, again)

    @property
    def xs(self) -> int:
        return draw_temps(self.cfg.prng)


def _mask(m: Mem, width: int | None = None) -> Mem:
    return shifted(m, D_MASK, width)


def _sec(m: Mem, width: int | None = None) -> Mem:
    return shifted(m, D_SEC, width)


# --------------------------------------------------------------------------
# plain-width building blocks

def decode(em: Emitter, site: Site, v: int, m: Mem, t: int, u: int | None) -> None:
    """``v`` <- plaintext at ``m``.  Under Base rules ``u`` keeps the
    secrecy bytes afterwards."""
    em.load(t, _mask(m))
    if site.variant is not Variant.FAST:
        em.load(u, _sec(m))
        em.rr(Op.AND, t, u)
    em.load(v, m)
    em.rr(Op.XOR, v, t)


def encode_base(em: Emitter, site: Site, m: Mem, src: int, mreg: int, u: int, x: int) -> None:
    """Store ``src`` at ``m`` with a fresh mask; ``u`` and ``x`` are free."""
    site.draw(em, mreg, [u, x], src)
    em.store(_mask(m), mreg)
    em.load(u, _sec(m))
    em.rr(Op.AND, mreg, u)
    em.rr(Op.XOR, mreg, src)
    em.store(m, mreg)


def encode_fast(em: Emitter, site: Site, m: Mem, src: int, mreg: int, k: int, t: int, x: int,
                old: int | None = None) -> None:
    """Fast-rule store.  ``old`` may already hold the previous mask."""
    w = m.width
    if site.cls is SecrecyClass.SECRET_ONLY and site.fully_secret:
        site.nonzero_draw(em, mreg, t, [t, x], w, value=src)
        em.store(_mask(m), mreg)
        em.rr(Op.XOR, mreg, src)
        em.store(m, mreg)
        return
    plain, done = em.new_label("pub"), em.new_label("done")
    if old is None:
        em.load(t, _mask(m))
        old = t
    em.rr(Op.NZMASK, k, old, w)
    em.jump(Op.JZ, plain)
    site.nonzero_draw(em, mreg, t, [t, x], w, keep=k, value=src)
    em.store(_mask(m), mreg)
    em.rr(Op.XOR, mreg, src)
    em.store(m, mreg)
    em.jump(Op.JMP, done)
    em.label(plain)
    em.store(m, src)
    em.label(done)


# --------------------------------------------------------------------------
# narrow writes under Enhanced: whole aligned 4-byte windows

def _window_open(em: Emitter, site: Site, m: Mem, a: int, o: int, u: int, v: int, t: int) -> None:
    em.lea(a, m)
    em.rr(Op.MOV, o, a)
    em.ri(Op.ANDI, o, 3)
    em.rr(Op.SUB, a, o)
    em.ri(Op.SHLI, o, 3)
    win = Mem(a, 0, 4)
    em.load(t, _mask(win))
    em.load(u, _sec(win))
    em.rr(Op.AND, t, u)
    em.load(v, win)
    em.rr(Op.XOR, v, t)


def _window_splice(em: Emitter, o: int, v: int, t: int, w: int) -> None:
    """Replace byte ``o/8`` of ``v`` with the low byte of ``w``."""
    em.movi(t, 0xFF)
    em.rr(Op.SHL, t, o)
    em.rr(Op.AND, t, v)
    em.rr(Op.XOR, v, t)
    em.rr(Op.SHL, w, o)
    em.rr(Op.OR, v, w)


def _window_close(em: Emitter, site: Site, a: int, u: int, v: int, t: int, temps: list[int],
                  value: int | None) -> None:
    win = Mem(a, 0, 4)
    site.draw(em, t, temps, value)
    em.store(_mask(win), t)
    em.rr(Op.AND, t, u)
    em.rr(Op.XOR, t, v)
    em.store(win, t)


def _narrow_store(em: Emitter, site: Site, m: Mem, src: int, regs: list[int]) -> None:
    a, o, u, v, t, w = regs[:6]
    for k in range(m.width):
        byte = Mem(m.base, m.disp + k, 1)
        _window_open(em, site, byte, a, o, u, v, t)
        em.rr(Op.MOV, w, src)
        if k:
            em.ri(Op.SHRI, w, 8 * k)
        em.rr(Op.MOV, w, w, 1)
        _window_splice(em, o, v, t, w)
        _window_close(em, site, a, u, v, t, [w, o], src)


# --------------------------------------------------------------------------
# instruction kinds

def _alu(em: Emitter, ins: Instruction, v: int, width: int) -> None:
    kind = isa.ALU_KIND[ins.op]
    if ins.op in isa.RMW_IMM:
        em.ri(isa.RI_OF_KIND[kind], v, ins.imm, width)
    else:
        em.rr(isa.RR_OF_KIND[kind], v, ins.a, width)


def expand_load(em: Emitter, site: Site, rd: int, m: Mem) -> None:
    if site.variant is Variant.FAST:
        c = site.claim(em, 1)
        t = c.regs[0]
        em.load(t, _mask(m))
        em.load(rd, m)
        em.rr(Op.XOR, rd, t)
    else:
        c = site.claim(em, 2)
        t, u = c.regs
        decode(em, site, rd, m, t, u)
    release(em, c)


def expand_store(em: Emitter, site: Site, m: Mem, src: int) -> None:
    if site.variant is Variant.ENHANCED and m.width < 4:
        c = site.claim(em, 6)
        _narrow_store(em, site, m, src, c.regs)
    elif site.variant is Variant.FAST:
        c = site.claim(em, 4)
        mreg, k, t, x = c.regs
        encode_fast(em, site, m, src, mreg, k, t, x)
    else:
        c = site.claim(em, 3)
        mreg, u, x = c.regs
        encode_base(em, site, m, src, mreg, u, x)
    release(em, c)


def expand_rmw(em: Emitter, site: Site, ins: Instruction) -> None:
    m = ins.mem
    w = m.width
    if site.variant is Variant.ENHANCED and w < 4:
        if w != 1:
            raise RewriteError(f"2-byte read-modify-write at {site.offset:#x} is not supported "
                               "by the enhanced variant", site.offset)
        c = site.claim(em, 6, late=True)
        a, o, u, v, t, x = c.regs
        _window_open(em, site, m, a, o, u, v, t)
        em.rr(Op.MOV, x, v)
        em.rr(Op.SHR, x, o)
        em.rr(Op.MOV, x, x, 1)
        _alu(em, ins, x, 1)
        if c.flags is not None:
            em.emit(Op.LAHF, c.flags)
        _window_splice(em, o, v, t, x)
        _window_close(em, site, a, u, v, t, [x, o], None)
        release(em, c)
        return
    if site.variant is Variant.FAST:
        c = site.claim(em, 5, late=True)
        t, v, k, mreg, x = c.regs
        em.load(t, _mask(m))
        em.load(v, m)
        em.rr(Op.XOR, v, t)
        _alu(em, ins, v, w)
        if c.flags is not None:
            em.emit(Op.LAHF, c.flags)
        encode_fast(em, site, m, v, mreg, k, t, x, old=t)
    else:
        c = site.claim(em, 5, late=True)
        t, u, v, mreg, x = c.regs
        decode(em, site, v, m, t, u)
        _alu(em, ins, v, w)
        if c.flags is not None:
            em.emit(Op.LAHF, c.flags)
        site.draw(em, mreg, [t, x], v)
        em.store(_mask(m), mreg)
        em.rr(Op.AND, mreg, u)
        em.rr(Op.XOR, mreg, v)
        em.store(m, mreg)
    release(em, c)


def expand_push(em: Emitter, site: Site, rs: int) -> None:
    if rs == SP:
        raise RewriteError(f"push of the stack pointer at {site.offset:#x}", site.offset)
    em.lea(SP, Mem(SP, -8, 8))
    expand_store(em, site, Mem(SP, 0, 8), rs)


def expand_pop(em: Emitter, site: Site, rd: int) -> None:
    if rd == SP:
        raise RewriteError(f"pop into the stack pointer at {site.offset:#x}", site.offset)
    expand_load(em, site, rd, Mem(SP, 0, 8))
    em.lea(SP, Mem(SP, 8, 8))


def expand_copyn(em: Emitter, site: Site) -> None:
    dst, src = Mem(1, 0, 8), Mem(2, 0, 8)
    loop, done = em.new_label("cp"), em.new_label("cpend")
    fast = site.variant is Variant.FAST
    c = site.claim(em, 5 if fast else 4)
    em.ri(Op.CMPI, 3, 0)
    em.jump(Op.JZ, done)
    em.label(loop)
    if fast:
        t, u, x, mreg, k = c.regs
        em.load(t, _mask(src))
        em.load(x, src)
        em.rr(Op.XOR, x, t)
        encode_fast(em, site, dst, x, mreg, k, t, u)
    else:
        t, u, x, mreg = c.regs
        decode(em, site, x, src, t, u)
        encode_base(em, site, dst, x, mreg, u, t)
    em.ri(Op.ADDI, 1, 8)
    em.ri(Op.ADDI, 2, 8)
    em.ri(Op.SUBI, 3, 1)
    em.jump(Op.JNZ, loop)
    em.label(done)
    release(em, c)


def expand_access(em: Emitter, site: Site) -> None:
    ins = site.ins
    op = ins.op
    if op is Op.LOAD:
        expand_load(em, site, ins.a, ins.mem)
    elif op is Op.STORE:
        expand_store(em, site, ins.mem, ins.a)
    elif op in isa.RMW:
        expand_rmw(em, site, ins)
    elif op is Op.PUSH:
        expand_push(em, site, ins.a)
    elif op is Op.POP:
        expand_pop(em, site, ins.a)
    elif op is Op.COPYN:
        expand_copyn(em, site)
    else:
        raise RewriteError(f"cannot instrument {op.name.lower()} at {site.offset:#x}", site.offset)


__all__ = ["Variant", "Config", "Site", "expand_access", "decode", "encode_base", "encode_fast",
           "D_MASK", "D_SEC"]

"""Runtime support emitted around intrinsics, at function entries and at
program start."""

from __future__ import annotations

from . import isa
from .emitter import TRACKER, Emitter, absolute, emit_seed, release
from .expand import D_MASK, D_SEC, Site, Variant, decode
from .isa import SP, Mem, Op

TR = absolute(TRACKER)


def _plane(reg: int, delta: int, disp: int = 0, width: int = 8) -> Mem:
    return Mem(reg, disp + delta, width)


def map_growth(em: Emitter, variant: Variant, old: int, new: int, t: int) -> None:
    """Map shadow pages for heap growth ``[old, new)``; clobbers ``new``."""
    skip = em.new_label("nomap")
    em.rr(Op.SUB, new, old)
    em.jump(Op.JZ, skip)
    em.lea(t, Mem(old, D_MASK))
    em.rr(Op.SHMAP, t, new)
    if variant is not Variant.FAST:
        em.lea(t, Mem(old, D_SEC))
        em.rr(Op.SHMAP, t, new)
    em.label(skip)


def tracker_test(em: Emitter, flag: bool, t: int, u: int, public: str) -> None:
    """Fall through if the allocation is secret, else jump to ``public``."""
    em.load(t, TR)
    em.ri(Op.SHLI, t, 1)
    if flag:
        em.ri(Op.ORI, t, 1)
    em.ri(Op.CMPI, t, 0)
    em.jump(Op.JZ, public)
    em.rr(Op.MOV, u, t)
    em.ri(Op.ADDI, u, 1)
    em.rr(Op.AND, u, t)
    em.jump(Op.JNZ, public)


def _cap_words(em: Emitter, n: int) -> None:
    """``n`` <- capacity in 8-byte words for a request of ``n`` bytes."""
    ok = em.new_label("cap")
    em.ri(Op.ADDI, n, 15)
    em.ri(Op.ANDI, n, -16)
    em.ri(Op.CMPI, n, 0)
    em.jump(Op.JNZ, ok)
    em.movi(n, 16)
    em.label(ok)
    em.ri(Op.SHRI, n, 3)


def emit_alloc(em: Emitter, site: Site, flag: bool) -> None:
    ins = site.ins
    c = site.claim(em, 7)
    z, b, n, t, u, p, m = c.regs
    em.movi(z, 0)
    em.rr(Op.SBRK, b, z)
    em.rr(Op.MOV, n, ins.b)
    em.copy(ins)
    em.rr(Op.SBRK, t, z)
    map_growth(em, site.variant, b, t, u)
    _cap_words(em, n)
    em.rr(Op.MOV, p, ins.a)
    public, done = em.new_label("apub"), em.new_label("adone")
    tracker_test(em, flag, t, u, public)
    fast = site.variant is Variant.FAST
    if not fast:
        em.movi(b, -1)
    loop = em.new_label("afill")
    em.label(loop)
    if fast:
        site.nonzero_draw(em, m, t, [t, u], 8)
    else:
        site.draw(em, m, [t, u])
    em.store(_plane(p, D_MASK), m)
    if not fast:
        em.store(_plane(p, D_SEC), b)
    em.ri(Op.ADDI, p, 8)
    em.ri(Op.SUBI, n, 1)
    em.jump(Op.JNZ, loop)
    em.jump(Op.JMP, done)
    em.label(public)
    loop = em.new_label("azero")
    em.label(loop)
    em.store(_plane(p, D_MASK), z)
    if not fast:
        em.store(_plane(p, D_SEC), z)
    em.ri(Op.ADDI, p, 8)
    em.ri(Op.SUBI, n, 1)
    em.jump(Op.JNZ, loop)
    em.label(done)
    release(em, c)


def emit_sbrk(em: Emitter, site: Site) -> None:
    ins = site.ins
    c = site.claim(em, 3)
    z, t, u = c.regs
    em.copy(ins)
    em.movi(z, 0)
    em.rr(Op.SBRK, t, z)
    map_growth(em, site.variant, ins.a, t, u)
    release(em, c)


def emit_realloc(em: Emitter, site: Site, flag: bool) -> None:
    """Re-encode a reallocated block window by window.

    Bytes that survive the move are decoded at the old location, so no
    plaintext is written to memory; the 8-byte windows also keep every
    store at least 32 bits wide.
    """
    ins = site.ins
    fast = site.variant is Variant.FAST
    c = site.claim(em, 10)
    o, r, nw, w, v, t, u, x, m, sv = c.regs
    em.rr(Op.MOV, o, ins.a)
    em.rr(Op.MSIZE, r, o)
    em.rr(Op.MOV, w, ins.b)
    keep = em.new_label("rmin")
    em.rr(Op.CMP, r, w)
    em.emit(Op.LAHF, t)
    em.ri(Op.ANDI, t, 2)
    em.jump(Op.JNZ, keep)
    em.rr(Op.MOV, r, w)
    em.label(keep)
    em.movi(x, 0)
    em.rr(Op.SBRK, u, x)
    em.copy(ins)
    em.rr(Op.SBRK, t, x)
    map_growth(em, site.variant, u, t, v)
    _cap_words(em, w)
    em.rr(Op.MOV, nw, ins.a)
    em.movi(sv, 0)
    pub = em.new_label("rpub")
    tracker_test(em, flag, t, u, pub)
    em.movi(sv, -1)
    em.label(pub)
    loop, tail, enc, full = (em.new_label(s) for s in ("rloop", "rtail", "renc", "rfull"))
    em.label(loop)
    em.ri(Op.CMPI, r, 0)
    em.jump(Op.JZ, tail)
    decode(em, site, v, Mem(o, 0, 8), t, u)
    em.rr(Op.MOV, t, r)
    em.ri(Op.SHRI, t, 3)
    em.jump(Op.JNZ, full)
    # partial window: low r bytes from the old block, the rest as found
    em.movi(t, 1)
    em.rr(Op.MOV, x, r)
    em.ri(Op.SHLI, x, 3)
    em.rr(Op.SHL, t, x)
    em.ri(Op.SUBI, t, 1)
    em.rr(Op.AND, v, t)
    em.ri(Op.XORI, t, -1)
    em.load(x, Mem(nw, 0, 8))
    em.rr(Op.AND, x, t)
    em.rr(Op.OR, v, x)
    em.movi(r, 0)
    em.jump(Op.JMP, enc)
    em.label(full)
    em.ri(Op.SUBI, r, 8)
    em.jump(Op.JMP, enc)
    em.label(tail)
    em.load(v, Mem(nw, 0, 8))
    em.label(enc)
    dst = Mem(nw, 0, 8)
    if fast:
        zero, stored = em.new_label("rz"), em.new_label("rst")
        em.ri(Op.CMPI, sv, 0)
        em.jump(Op.JZ, zero)
        site.nonzero_draw(em, m, t, [t, u], 8)
        em.jump(Op.JMP, stored)
        em.label(zero)
        em.movi(m, 0)
        em.label(stored)
    else:
        site.draw(em, m, [t, u])
        em.rr(Op.AND, m, sv)
        em.store(_plane(nw, D_SEC), sv)
    em.store(_plane(nw, D_MASK), m)
    em.rr(Op.XOR, m, v)
    em.store(dst, m)
    em.ri(Op.ADDI, o, 8)
    em.ri(Op.ADDI, nw, 8)
    em.ri(Op.SUBI, w, 1)
    em.jump(Op.JNZ, loop)
    release(em, c)


def emit_input(em: Emitter, site: Site) -> None:
    """Read input in the clear, then encode every touched 8-byte window.

    Partial windows at either edge are decoded in place first so their
    neighbouring bytes come out right after the re-encode.
    """
    ins = site.ins
    fast = site.variant is Variant.FAST
    c = site.claim(em, 9)
    n, p, e, t, v, u, m, x, k = c.regs
    plain, end = em.new_label("iplain"), em.new_label("iend")
    em.rr(Op.ILEN, n, ins.b)
    em.ri(Op.CMPI, n, 0)
    em.jump(Op.JZ, plain)
    em.rr(Op.MOV, p, ins.a)
    em.ri(Op.ANDI, p, -8)
    em.rr(Op.MOV, e, ins.a)
    em.rr(Op.ADD, e, n)
    em.movi(k, 0)
    for start, edge in ((ins.a, p), (e, None)):
        skip = em.new_label("iedge")
        em.rr(Op.MOV, t, start)
        em.ri(Op.ANDI, t, 7)
        em.jump(Op.JZ, skip)
        if edge is None:
            em.rr(Op.MOV, x, e)
            em.ri(Op.ANDI, x, -8)
            # a region inside one window may already be decoded
            go = em.new_label("itail")
            em.rr(Op.CMP, x, p)
            em.jump(Op.JNZ, go)
            em.ri(Op.CMPI, k, 0)
            em.jump(Op.JNZ, skip)
            em.label(go)
            edge = x
        else:
            em.movi(k, 1)
        decode(em, site, v, Mem(edge, 0, 8), t, u)
        em.store(Mem(edge, 0, 8), v)
        em.label(skip)
    em.copy(ins)
    em.ri(Op.ADDI, e, 7)
    em.ri(Op.ANDI, e, -8)
    em.rr(Op.SUB, e, p)
    em.ri(Op.SHRI, e, 3)
    loop, nxt = em.new_label("iloop"), em.new_label("inext")
    em.label(loop)
    win = Mem(p, 0, 8)
    em.load(v, win)
    if fast:
        em.load(t, _plane(p, D_MASK))
        em.rr(Op.NZMASK, k, t)
        em.jump(Op.JZ, nxt)
        site.nonzero_draw(em, m, t, [t, u], 8, keep=k)
    else:
        em.load(u, _plane(p, D_SEC))
        site.draw(em, m, [t, x])
    em.store(_plane(p, D_MASK), m)
    if not fast:
        em.rr(Op.AND, m, u)
    em.rr(Op.XOR, m, v)
    em.store(win, m)
    em.label(nxt)
    em.ri(Op.ADDI, p, 8)
    em.ri(Op.SUBI, e, 1)
    em.jump(Op.JNZ, loop)
    em.jump(Op.JMP, end)
    em.label(plain)
    em.copy(ins)
    em.label(end)
    release(em, c)


def emit_output(em: Emitter, site: Site) -> None:
    """Decode the region in place and zero its masks, then output it."""
    ins = site.ins
    c = site.claim(em, 5)
    p, n, t, u, v = c.regs
    go, loop = em.new_label("ogo"), em.new_label("oloop")
    em.rr(Op.MOV, p, ins.a)
    em.rr(Op.MOV, n, ins.b)
    em.ri(Op.CMPI, n, 0)
    em.jump(Op.JZ, go)
    em.label(loop)
    decode(em, site, v, Mem(p, 0, 1), t, u)
    em.store(Mem(p, 0, 1), v)
    em.emit(Op.ANDMI, imm=0, mem=_plane(p, D_MASK, width=1))
    em.ri(Op.ADDI, p, 1)
    em.ri(Op.SUBI, n, 1)
    em.jump(Op.JNZ, loop)
    em.label(go)
    release(em, c)
    em.copy(ins)


# --------------------------------------------------------------------------
# frames, statics and start-up

def _chunks(secret_bytes: set[int], lo: int, hi: int) -> list[tuple[int, int]]:
    """(chunk address, byte mask) for the 8-byte chunks covering [lo, hi)."""
    out = []
    for c in range(lo, hi, 8):
        k = 0
        for i in range(8):
            if c + i in secret_bytes:
                k |= 0xFF << (8 * i)
        out.append((c, k))
    return out


def _mask_chunk(em: Emitter, site: Site, target: Mem, kbits: int, regs, encode_data: bool) -> None:
    z, kreg, m, t, x = regs
    fast = site.variant is Variant.FAST
    if kbits == 0:
        em.store(_plane_of(target, D_MASK), z)
        if not fast:
            em.store(_plane_of(target, D_SEC), z)
        return
    em.movi(kreg, kbits)
    full = kbits == (1 << 64) - 1
    if fast:
        site.nonzero_draw(em, m, t, [t, x], 8, keep=None if full else kreg)
    else:
        site.draw(em, m, [t, x])
        if not full:
            em.rr(Op.AND, m, kreg)
        em.store(_plane_of(target, D_SEC), kreg)
    em.store(_plane_of(target, D_MASK), m)
    if encode_data:
        em.load(t, target)
        em.rr(Op.XOR, t, m)
        em.store(target, t)


def _plane_of(m: Mem, delta: int) -> Mem:
    return Mem(m.base, m.disp + delta, m.width)


def emit_frame_gadget(em: Emitter, site: Site, frame_size: int, secret_rel: set[int]) -> None:
    """Fresh masks for the secret slots of a new frame, cleared planes for
    everything else in it."""
    size = (frame_size + 7) & ~7
    if size == 0:
        return
    c = site.claim(em, 5)
    em.movi(c.regs[0], 0)
    for addr, k in _chunks(set(secret_rel), -size, 0):
        _mask_chunk(em, site, Mem(SP, addr, 8), k, c.regs, False)
    release(em, c)


def emit_tracker_push(em: Emitter, flag: bool) -> None:
    em.emit(Op.SHLMI, imm=1, mem=TR)
    if flag:
        em.emit(Op.ORMI, imm=1, mem=TR)


def emit_tracker_pop(em: Emitter) -> None:
    em.emit(Op.SHRMI, imm=1, mem=TR)


def emit_init(em: Emitter, site: Site, static_size: int, secret_statics, entry: int) -> None:
    """Program start: map the shadow planes of stack and statics, seed the
    generator, encode secret statics and hand over to ``entry``."""
    regs = [0, 1, 2, 3, 4]
    a, b = regs[:2]
    planes = (D_MASK,) if site.variant is Variant.FAST else (D_MASK, D_SEC)
    regions = [(isa.STACK_LO, isa.STACK_SIZE)]
    if static_size:
        regions.append((isa.STATIC_BASE, static_size))
    for lo, n in regions:
        em.movi(b, n)
        for d in planes:
            em.movi(a, lo + d)
            em.rr(Op.SHMAP, a, b)
    emit_seed(em, site.cfg.prng, regs)
    secret: set[int] = set()
    for obj in secret_statics:
        secret.update(range(obj.base, obj.base + obj.length))
    touched = sorted({a & ~7 for a in secret})
    em.movi(regs[0], 0)
    for chunk in touched:
        k = _chunks(secret, chunk, chunk + 8)[0][1]
        _mask_chunk(em, site, absolute(chunk), k, regs, True)
    for r in regs:
        em.movi(r, 0)
    em.emit(Op.SAHF, regs[0])
    em.jump(Op.JMP, entry)


__all__ = ["emit_alloc", "emit_sbrk", "emit_realloc", "emit_input", "emit_output",
           "emit_frame_gadget", "emit_tracker_push", "emit_tracker_pop", "emit_init",
           "map_growth", "tracker_test"]

"""Toy constant-time targets written in MiniCT assembly.

Each :class:`Target` bundles its source, the taint-source policy and an
input generator.  Control flow depends only on public inputs.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Callable

from .asm import assemble
from .program import Program
from .taint import TaintSources


@dataclass
class Target:
    name: str
    source: str
    sources: TaintSources
    make_inputs: Callable[[random.Random], list[bytes]]
    description: str = ""
    params: dict = field(default_factory=dict)

    _prog: Program | None = field(default=None, repr=False)

    @property
    def program(self) -> Program:
        if self._prog is None:
            self._prog = assemble(self.source)
        return self._prog

    def inputs(self, seed: int) -> list[bytes]:
        return self.make_inputs(random.Random(seed))


def _u64(v: int) -> bytes:
    return v.to_bytes(8, "little")


def _secret(*idx) -> TaintSources:
    return TaintSources(secret_inputs=set(idx))


# --------------------------------------------------------------------------
# conditional swap

def _cswap_limbs(n: int) -> str:
    out = []
    for i in range(n):
        d = 8 * i
        out += [
            f"  load r5, q[p+{d}]",
            f"  load r6, q[q+{d}]",
            "  mov r7, r5",
            "  xor r7, r6",
            "  and r7, r4",
            "  xor r5, r7",
            f"  store q[p+{d}], r5",
            "  xor r6, r7",
            f"  store q[q+{d}], r6",
        ]
    return "\n".join(out)


CSWAP_FUNC = f"""
.func cswap
cswap:
  load r3, q[bvar]
  mov r4, 0
  sub r4, r3          ; mask = 0 - b
{_cswap_limbs(4)}
  ret
"""

CSWAP = """
.entry main
.static p, 32
.static q, 32
.static bvar, 8
.func main
main:
  mov r1, p
  mov r2, 0
  input r1, r2
  mov r1, q
  mov r2, 1
  input r1, r2
  mov r1, bvar
  mov r2, 2
  input r1, r2
  call cswap
  mov r1, p
  mov r2, 32
  output r1, r2
  mov r1, q
  mov r2, 32
  output r1, r2
  halt
""" + CSWAP_FUNC


def _cswap_inputs(rng: random.Random) -> list[bytes]:
    return [rng.randbytes(32), rng.randbytes(32), _u64(rng.getrandbits(1))]


# One swap per bit of a secret 64-bit word; the bit count is public.
CSWAP_BITS = """
.entry main
.static p, 32
.static q, 32
.static bvar, 8
.static bits, 8
.static nbits, 8
.func main
main:
  mov r1, p
  mov r2, 0
  input r1, r2
  mov r1, q
  mov r2, 1
  input r1, r2
  mov r1, bits
  mov r2, 2
  input r1, r2
  mov r1, nbits
  mov r2, 3
  input r1, r2
  mov r8, 0
next_bit:
  load r9, q[bits]
  shr r9, r8
  and r9, 1
  store q[bvar], r9
  call cswap
  add r8, 1
  load r11, q[nbits]
  cmp r8, r11
  jnz next_bit
  mov r1, p
  mov r2, 32
  output r1, r2
  mov r1, q
  mov r2, 32
  output r1, r2
  halt
""" + CSWAP_FUNC


def cswap_bits_inputs(bits: int, nbits: int, rng: random.Random) -> list[bytes]:
    return [rng.randbytes(32), rng.randbytes(32), _u64(bits), _u64(nbits)]


# --------------------------------------------------------------------------
# bit-serial byte fill: every write changes a single byte of its block

BYTEFILL = """
.entry main
.static buf, 16
.static stream, 64
.static nwrites, 8
.func main
main:
  mov r1, stream
  mov r2, 0
  input r1, r2
  mov r1, nwrites
  mov r2, 1
  input r1, r2
  mov r8, 0           ; global bit index
  mov r12, 0          ; cell index
cell_loop:
  mov r13, 0
write_loop:
  mov r9, r8
  shr r9, 3
  mov r10, stream
  add r10, r9
  load r11, b[r10+0]
  mov r9, r8
  and r9, 7
  shr r11, r9
  and r11, 1
  mov r10, buf
  add r10, r12
  load r14, b[r10+0]
  shl r14, 1
  or r14, r11
  store b[r10+0], r14
  add r8, 1
  add r13, 1
  load r9, q[nwrites]
  cmp r13, r9
  jnz write_loop
  add r12, 1
  cmp r12, 2
  jnz cell_loop
  mov r1, buf
  mov r2, 4           ; whole first word, so the secret object spans a window
  output r1, r2
  halt
"""


def bytefill_inputs(writes: int) -> Callable[[random.Random], list[bytes]]:
    def make(rng: random.Random) -> list[bytes]:
        return [rng.randbytes(64), _u64(writes)]
    return make


# --------------------------------------------------------------------------
# word copy used for public and secret buffers (MIXED store); its four
# blocks are 5, 3, 12 and 4 bytes long.

MEMCPY_FUNC = """
.func memcpy            ; r1 = dst, r2 = src, r3 = chunks, r7 = words per chunk
memcpy:
  cmp r3, 0
  jz.s copy_done
  mov r6, r3
copy_loop:
  mov r3, r7
  copyn
  sub r6, 1
  cmp r6, 0
  jnz.s copy_loop
copy_done:
  mov r0, r1
  ret
"""

MEMCPY = """
.entry main
.static pub_src, 32
.static sec_src, 32
.static pub_dst, 32
.static sec_dst, 32
.static one, 8
.func main
main:
  mov r1, pub_src
  mov r2, 0
  input r1, r2
  mov r1, sec_src
  mov r2, 1
  input r1, r2
  mov r7, 1
  mov r1, pub_dst
  mov r2, pub_src
  mov r3, 4
  call memcpy
  mov r1, sec_dst
  mov r2, sec_src
  mov r3, 4
  call memcpy
  mov r1, pub_dst
  mov r2, 32
  output r1, r2
  halt
""" + MEMCPY_FUNC


def _memcpy_inputs(rng: random.Random) -> list[bytes]:
    return [rng.randbytes(32), rng.randbytes(32)]


# --------------------------------------------------------------------------
# heap sites: the same allocation wrapper reached from secret and public
# paths, plus a site in another subtree and a direct allocation.

HEAP_SITES = """
.entry main
.static order, 8
.static out, 32
.func main
main:
  mov r1, order
  mov r2, 1
  input r1, r2
  load r1, q[order]
  cmp r1, 0
  jz pub_first
  call setup_secret_first
  jmp after
pub_first:
  call setup_public_first
after:
  call other
  mov r4, 16
  alloc r9, r4          ; depth-1 public site
  mov r1, 7
  store q[r9+0], r1
  load r2, q[r9+0]
  store q[out+24], r2
  free r9
  mov r1, out
  mov r2, 32
  output r1, r2
  halt

.func setup_secret_first
setup_secret_first:
  call make_secret
  call make_public
  ret

.func setup_public_first
setup_public_first:
  call make_public
  call make_secret
  ret

.func make_secret
make_secret:
  call wrap
  mov r1, r0
  mov r2, 0
  input r1, r2          ; secret bytes into the object
  load r3, q[r0+0]
  load r4, q[r0+8]
  xor r3, r4
  store q[r0+16], r3
  load r3, q[r0+16]
  store q[out+0], r3
  free r0
  ret

.func make_public
make_public:
  call wrap
  mov r3, 0x1234
  store q[r0+0], r3
  load r3, q[r0+0]
  store q[out+8], r3
  free r0
  ret

.func wrap
wrap:
  mov r4, 24
  alloc r0, r4
  ret

.func other
other:
  mov r4, 40
  alloc r5, r4
  mov r3, 99
  store q[r5+32], r3
  load r3, q[r5+32]
  store q[out+16], r3
  free r5
  ret
"""


def heap_sites_inputs(order: int | None = None) -> Callable[[random.Random], list[bytes]]:
    def make(rng: random.Random) -> list[bytes]:
        o = rng.getrandbits(1) if order is None else order
        return [rng.randbytes(16), _u64(o)]
    return make


# Loop whose single allocation stack sometimes receives secrets.
HEAP_LOOP = """
.entry main
.static pattern, 8
.static acc, 8
.static tmp, 8
.func main
main:
  mov r1, pattern
  mov r2, 1
  input r1, r2
  mov r8, 0
loop:
  mov r4, 16
  alloc r5, r4
  load r9, q[pattern]
  shr r9, r8
  and r9, 1
  cmp r9, 0
  jz public_round
  mov r1, r5
  mov r2, 0
  input r1, r2
  jmp use
public_round:
  mov r3, 5
  store q[r5+0], r3
  store q[r5+8], r3
use:
  load r3, q[r5+0]
  load r4, q[acc]
  add r4, r3
  store q[acc], r4
  free r5
  add r8, 1
  cmp r8, 4
  jnz loop
  mov r1, tmp
  mov r2, 0
  store q[tmp], r2
  output r1, r2
  halt
"""


def _heap_loop_inputs(rng: random.Random) -> list[bytes]:
    return [rng.randbytes(16), _u64(0b1010)]


# --------------------------------------------------------------------------
# ladder on stack slots; frame offsets carry the secrets, finish is
# reached by tail call

LADDER = """
.entry main
.static scalar, 8
.static nbits, 8
.static x0, 8
.static x1, 8
.static result, 8
.func main
main:
  mov r1, scalar
  mov r2, 0
  input r1, r2
  mov r1, nbits
  mov r2, 1
  input r1, r2
  mov r3, 1
  store q[x0], r3
  mov r3, 3
  store q[x1], r3
  load r2, q[nbits]
  call ladder
  mov r1, result
  mov r2, 8
  output r1, r2
  halt

.func ladder
ladder:
  push r12
  sub r15, 32
  load r3, q[x0]
  store q[r15+0], r3
  load r3, q[x1]
  store q[r15+8], r3
  mov r8, 0
ladder_step:
  load r9, q[scalar]
  shr r9, r8
  and r9, 1
  store q[r15+16], r9
  mov r4, 0
  load r9, q[r15+16]
  sub r4, r9
  load r5, q[r15+0]
  load r6, q[r15+8]
  mov r7, r5
  xor r7, r6
  and r7, r4
  xor r5, r7
  xor r6, r7
  mov r10, r5
  add r10, r6
  shl r5, 1
  mov r7, r5
  xor r7, r10
  and r7, r4
  xor r5, r7
  xor r10, r7
  store q[r15+0], r5
  store q[r15+8], r10
  add r8, 1
  cmp r8, r2
  jnz ladder_step
  load r1, q[r15+0]
  add r15, 32
  pop r12
  jmp finish

.func finish
finish:
  sub r15, 16
  store q[r15+8], r1
  load r3, q[r15+8]
  store q[result], r3
  add r15, 16
  ret
"""


def ladder_inputs(nbits: int = 16) -> Callable[[random.Random], list[bytes]]:
    def make(rng: random.Random) -> list[bytes]:
        return [rng.randbytes(8), _u64(nbits)]
    return make


# --------------------------------------------------------------------------
# realloc of a secret buffer and a public buffer

REALLOC = """
.entry main
.static sum, 8
.func main
main:
  mov r4, 32
  alloc r5, r4
  mov r1, r5
  mov r2, 0
  input r1, r2
  mov r4, 64
  realloc r5, r4
  lea r6, [r5+32]
  mov r2, 1
  input r6, r2
  mov r7, 0
  mov r8, 0
sum_loop:
  load r3, q[r5+0]
  add r7, r3
  add r5, 8
  add r8, 1
  cmp r8, 8
  jnz sum_loop
  sub r5, 64
  store q[sum], r7
  free r5
  mov r4, 24
  alloc r9, r4
  mov r3, 0x55
  store q[r9+0], r3
  mov r4, 48
  realloc r9, r4
  load r3, q[r9+0]
  store q[r9+40], r3
  free r9
  mov r1, sum
  mov r2, 8
  output r1, r2
  halt
"""


def _realloc_inputs(rng: random.Random) -> list[bytes]:
    return [rng.randbytes(32), rng.randbytes(32)]


# --------------------------------------------------------------------------
# read-modify-write forms on memory that is public in one call and
# secret in the other

RMW = """
.entry main
.static secbuf, 16
.static pubbuf, 16
.static flagsink, 8
.func main
main:
  mov r1, secbuf
  mov r2, 0
  input r1, r2
  mov r1, pubbuf
  mov r2, 1
  input r1, r2
  mov r1, secbuf
  call mangle
  mov r1, pubbuf
  call mangle
  mov r1, pubbuf
  mov r2, 16
  output r1, r2
  halt

.func mangle
mangle:
  sub r15, 16
  mov r2, 0x0f
  shr q[r1+0], 8
  add q[r1+8], r2
  mov r3, 1
  mov r4, 2
  cmovz r3, r4
  store q[r15+0], r3
  xor d[r1+4], 0x3c
  sub b[r1+9], 1
  load r3, q[r15+0]
  store q[flagsink], r3
  add r15, 16
  ret
"""


def _rmw_inputs(rng: random.Random) -> list[bytes]:
    return [rng.randbytes(16), rng.randbytes(16)]


# --------------------------------------------------------------------------

def _registry() -> dict[str, Target]:
    return {t.name: t for t in [
        Target("cswap", CSWAP, _secret(0, 1, 2), _cswap_inputs,
               "four-limb constant-time conditional swap"),
        Target("cswap_bits", CSWAP_BITS, _secret(0, 1, 2),
               lambda rng: cswap_bits_inputs(rng.getrandbits(64), 16, rng),
               "one conditional swap per secret bit", {"p": 0x100000}),
        Target("bytefill", BYTEFILL, _secret(0), bytefill_inputs(12),
               "bit-serial fill of two byte cells"),
        Target("memcpy", MEMCPY, _secret(1), _memcpy_inputs,
               "word copy shared by public and secret buffers"),
        Target("heap_sites", HEAP_SITES, _secret(0), heap_sites_inputs(),
               "allocation wrapper reached from secret and public paths"),
        Target("ladder", LADDER, _secret(0), ladder_inputs(8),
               "ladder on stack slots with a tail call"),
        Target("realloc", REALLOC, _secret(0, 1), _realloc_inputs,
               "secret buffer grown by realloc"),
        Target("rmw", RMW, _secret(0), _rmw_inputs,
               "read-modify-write forms on public and secret memory"),
    ]}


TARGETS: dict[str, Target] = _registry()
EXTRA_TARGETS: dict[str, Target] = {
    "heap_loop": Target("heap_loop", HEAP_LOOP, _secret(0), _heap_loop_inputs,
                        "allocation loop with mixed secrecy on one call stack"),
}


def get_target(name: str) -> Target:
    if name in TARGETS:
        return TARGETS[name]
    if name in EXTRA_TARGETS:
        return EXTRA_TARGETS[name]
    raise KeyError(f"unknown target {name!r}")


__all__ = ["Target", "TARGETS", "EXTRA_TARGETS", "get_target", "cswap_bits_inputs",
           "bytefill_inputs", "heap_sites_inputs", "ladder_inputs"]

"""Redirect original basic blocks to their relocated copies.

Blocks of five bytes or more receive a near ``jmp``.  Shorter blocks hop
with a 2-byte short jump into spare bytes of a nearby patched block of the
same function, where a near ``jmp`` continues to the destination; if
no host is in reach they get a one-byte ``brk`` and a dispatch entry.
"""

from __future__ import annotations

from bisect import bisect_right
from dataclasses import dataclass

from . import isa
from .isa import Instruction, Op
from .structure import BasicBlock

JMP_LEN = isa.length_of(Op.JMP)
HOP_LEN = isa.length_of(Op.JMPS)


@dataclass
class Patch:
    start: int
    kind: str                 # "jmp", "hop" or "brk"
    slot: int | None = None   # where the hop lands


def function_lookup(entries):
    ordered = sorted(entries)

    def of(addr: int) -> int | None:
        i = bisect_right(ordered, addr)
        return ordered[i - 1] if i else None
    return of


def plan_trampolines(blocks: list[BasicBlock], function_of=lambda a: None) -> list[Patch]:
    patches: dict[int, Patch] = {}
    spare: dict[int, int] = {}        # host block start -> next free slot
    for b in blocks:
        if b.size >= JMP_LEN:
            patches[b.start] = Patch(b.start, "jmp")
            spare[b.start] = b.start + JMP_LEN
    ends = {b.start: b.end for b in blocks}
    for b in sorted(blocks, key=lambda b: b.start):
        if b.size >= JMP_LEN:
            continue
        if b.size >= HOP_LEN:
            best = None
            for h, slot in spare.items():
                if ends[h] - slot < JMP_LEN or function_of(h) != function_of(b.start):
                    continue
                rel = slot - (b.start + HOP_LEN)
                if -128 <= rel <= 127 and (best is None or abs(rel) < abs(best[1])):
                    best = (h, rel)
            if best is not None:
                h = best[0]
                patches[b.start] = Patch(b.start, "hop", spare[h])
                spare[h] += JMP_LEN
                continue
        patches[b.start] = Patch(b.start, "brk")
    return [patches[k] for k in sorted(patches)]


def apply_patches(code: bytearray, code_base: int, blocks: list[BasicBlock],
                  patches: list[Patch], relocated: dict[int, int]) -> dict[int, int]:
    """Write trampolines into ``code``; returns the ``brk`` dispatch table."""
    for b in blocks:
        # Left-over bytes of a redirected block must never run again; a
        # bare brk traps if something jumps there anyway.
        code[b.start - code_base:b.end - code_base] = bytes([Op.BRK]) * b.size
    dispatch = {}

    def put(addr: int, ins: Instruction):
        raw = isa.encode(ins)
        code[addr - code_base:addr - code_base + len(raw)] = raw

    for p in patches:
        dest = relocated[p.start]
        if p.kind == "jmp":
            put(p.start, Instruction(Op.JMP, imm=dest - (p.start + JMP_LEN)))
        elif p.kind == "hop":
            put(p.start, Instruction(Op.JMPS, imm=p.slot - (p.start + HOP_LEN)))
            put(p.slot, Instruction(Op.JMP, imm=dest - (p.slot + JMP_LEN)))
        else:
            dispatch[p.start] = dest
    return dispatch


__all__ = ["Patch", "plan_trampolines", "apply_patches", "function_lookup"]

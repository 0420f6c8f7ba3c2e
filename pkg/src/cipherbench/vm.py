"""MiniCT interpreter with observation hooks.

``execute`` runs a :class:`~cipherbench.program.Program` (or a hardened
program) and returns the final :class:`MachineState` plus an
:class:`ExecutionTrace`.  Hooks receive every executed instruction; write
listeners receive every guest memory write after it happened.
"""

from __future__ import annotations

import os
import random
from dataclasses import dataclass, field

from . import isa
from .isa import (
    DATA_AREA_BASE, GUARD_LO, HEAP_BASE, MASK64, SP, STACK_LO, STACK_TOP,
    STATIC_BASE, Op, decode,
)
from .prng import aes_round
from .program import HardenedProgram, Program

PAGE = 4096
RDRAND_COST = 24
DEFAULT_FUEL = 5_000_000


class VMError(Exception):
    def __init__(self, msg, state=None, trace=None):
        super().__init__(msg)
        self.state = state
        self.trace = trace


class MemoryFault(VMError):
    pass


class StackOverflow(MemoryFault):
    pass


class FuelExhausted(VMError):
    pass


class BreakTrap(VMError):
    pass


class Memory:
    """Sparse page-granular byte store; unmapped access raises."""

    def __init__(self):
        self.pages: dict[int, bytearray] = {}

    def map(self, addr: int, size: int) -> list[int]:
        """Map zero pages over [addr, addr+size); returns newly mapped page numbers."""
        if size <= 0:
            return []
        first, last = addr // PAGE, (addr + size - 1) // PAGE
        new = []
        for p in range(first, last + 1):
            if p not in self.pages:
                self.pages[p] = bytearray(PAGE)
                new.append(p)
        return new

    def is_mapped(self, addr: int) -> bool:
        return addr // PAGE in self.pages

    def _fault(self, addr):
        if GUARD_LO <= addr < STACK_LO:
            raise StackOverflow(f"stack overflow into guard region at {addr:#x}")
        raise MemoryFault(f"unmapped access at {addr:#x}")

    def read(self, addr: int, n: int) -> bytes:
        off = addr % PAGE
        if off + n <= PAGE:
            page = self.pages.get(addr // PAGE)
            if page is None:
                self._fault(addr)
            return bytes(page[off:off + n])
        out = bytearray()
        while n:
            page = self.pages.get(addr // PAGE)
            if page is None:
                self._fault(addr)
            off = addr % PAGE
            k = min(n, PAGE - off)
            out += page[off:off + k]
            addr += k
            n -= k
        return bytes(out)

    def write(self, addr: int, data: bytes):
        n = len(data)
        off = addr % PAGE
        if off + n <= PAGE:
            page = self.pages.get(addr // PAGE)
            if page is None:
                self._fault(addr)
            page[off:off + n] = data
            return
        pos = 0
        while pos < n:
            page = self.pages.get(addr // PAGE)
            if page is None:
                self._fault(addr)
            off = addr % PAGE
            k = min(n - pos, PAGE - off)
            page[off:off + k] = data[pos:pos + k]
            addr += k
            pos += k

    def snapshot(self) -> dict[int, bytes]:
        return {p: bytes(b) for p, b in self.pages.items()}


@dataclass
class MachineState:
    regs: list[int]
    zf: bool
    cf: bool
    sf: bool
    memory: Memory
    heap_break: int
    pc: int
    halted: bool
    output: bytes
    instret: int
    cost: int
    allocations: dict[int, int] = field(default_factory=dict)

    def read(self, addr: int, n: int) -> bytes:
        return self.memory.read(addr, n)


@dataclass
class ExecutionTrace:
    """Totally ordered event list.

    Event tuples::

        ("exec", pc)
        ("read", pc, addr, width)
        ("write", pc, addr, width, data)
        ("call", site, target)  ("ret", site)
        ("alloc", site, size, ptr)  ("free", site, ptr)
        ("realloc", site, old, new, size)
        ("classify", site, addr, n)  ("declassify", site, addr, n)
        ("marker", marker_id, "begin" | "end")
        ("brk", old_break, new_break)
    """

    events: list[tuple] = field(default_factory=list)

    def writes(self):
        return [e for e in self.events if e[0] == "write"]

    def of_kind(self, kind: str):
        return [e for e in self.events if e[0] == kind]


def alu(kind: str, a: int, b: int, width: int) -> tuple[int, bool, bool, bool]:
    """Width-``width`` ALU; returns (result, ZF, CF, SF)."""
    bits = 8 * width
    mask = (1 << bits) - 1
    a &= mask
    b &= mask
    cf = False
    if kind == "add":
        r = a + b
        cf = r > mask
        r &= mask
    elif kind == "sub":
        cf = a < b
        r = (a - b) & mask
    elif kind == "xor":
        r = a ^ b
    elif kind == "and":
        r = a & b
    elif kind == "or":
        r = a | b
    elif kind == "shl":
        c = b & 63
        r = (a << c) & mask
        cf = 0 < c <= bits and bool((a >> (bits - c)) & 1)
    elif kind == "shr":
        c = b & 63
        r = a >> c
        cf = c > 0 and bool((a >> (c - 1)) & 1)
    else:  # pragma: no cover
        raise ValueError(kind)
    return r, r == 0, bool(cf), bool(r >> (bits - 1))


def nzmask(v: int, width: int) -> int:
    out = 0
    for i in range(width):
        if (v >> (8 * i)) & 0xFF:
            out |= 0xFF << (8 * i)
    return out


class _Allocator:
    def __init__(self, mem: Memory, machine):
        self.mem = mem
        self.m = machine
        self.brk = HEAP_BASE
        self.bump = HEAP_BASE
        self.sizes: dict[int, int] = {}
        self.caps: dict[int, int] = {}
        self.free_list: dict[int, list[int]] = {}

    def _grow_to(self, end: int):
        if end > self.brk:
            new = (end + PAGE - 1) // PAGE * PAGE
            self.mem.map(self.brk, new - self.brk)
            self.m._event(("brk", self.brk, new))
            self.brk = new

    def sbrk(self, n: int) -> int:
        old = self.brk
        if n:
            new = old + n
            self.mem.map(old, n)
            self.m._event(("brk", old, new))
            self.brk = new
            self.bump = max(self.bump, (new + 15) & ~15)
        return old

    def alloc(self, size: int) -> int:
        cap = max(16, (size + 15) & ~15)
        bucket = self.free_list.get(cap)
        if bucket:
            ptr = bucket.pop(0)
        else:
            ptr = (self.bump + 15) & ~15
            self._grow_to(ptr + cap)
            self.bump = ptr + cap
        self.sizes[ptr] = size
        self.caps[ptr] = cap
        return ptr

    def free(self, ptr: int):
        if ptr == 0:
            return
        if ptr not in self.sizes:
            raise VMError(f"free of unknown pointer {ptr:#x}")
        del self.sizes[ptr]
        self.free_list.setdefault(self.caps.pop(ptr), []).append(ptr)


class Machine:
    def __init__(self, prog: Program | HardenedProgram, inputs=(), *, hooks=(),
                 fuel: int = DEFAULT_FUEL, record: bool = True, seed: int | None = None,
                 entropy=None, write_listeners=()):
        self.hardened = prog if isinstance(prog, HardenedProgram) else None
        base = self.hardened.program if self.hardened else prog
        self.prog = base
        self.inputs = [bytes(x) for x in inputs]
        self.hooks = list(hooks)
        self.write_listeners = list(write_listeners)
        self.fuel = fuel
        self.record = record
        self.trace = ExecutionTrace()
        self.mem = Memory()
        self.regs = [0] * 16
        self.zf = self.cf = self.sf = False
        self.output = bytearray()
        self.instret = 0
        self.cost = 0
        self.halted = False
        if entropy is None:
            if seed is None:
                entropy = os.urandom
            else:
                rng = random.Random(seed)
                entropy = rng.randbytes
        self.entropy = entropy
        self.code: dict[int, isa.Instruction] = {}
        self._code_regions: list[tuple[int, bytes]] = [(base.code_base, base.code)]
        self.mem.map(base.code_base, len(base.code))
        self.mem.write(base.code_base, base.code)
        if base.static_size:
            self.mem.map(STATIC_BASE, base.static_size)
        for addr, data in base.static_data:
            self.mem.write(addr, data)
        self.mem.map(STACK_LO, STACK_TOP - STACK_LO)
        self.regs[SP] = STACK_TOP - 64
        self.dispatch: dict[int, int] = {}
        self.pc = base.entry
        if self.hardened:
            h = self.hardened
            self._code_regions.append((h.instrument_base, h.instrument))
            self.mem.map(h.instrument_base, len(h.instrument))
            self.mem.write(h.instrument_base, h.instrument)
            if h.data_area[1]:
                self.mem.map(h.data_area[0], h.data_area[1])
            self.dispatch = dict(h.dispatch)
            self.pc = h.init_entry
        self.heap = _Allocator(self.mem, self)

    # -- helpers --------------------------------------------------------
    def _event(self, ev):
        if self.record:
            self.trace.events.append(ev)

    def _fetch(self, pc: int) -> isa.Instruction:
        ins = self.code.get(pc)
        if ins is None:
            for base, blob in self._code_regions:
                if base <= pc < base + len(blob):
                    ins = decode(blob, pc - base)
                    break
            else:
                raise MemoryFault(f"instruction fetch outside code at {pc:#x}")
            self.code[pc] = ins
        return ins

    def _ea(self, m: isa.Mem) -> int:
        if m.base is None:
            return m.disp & MASK64
        return (self.regs[m.base] + m.disp) & MASK64

    def _load(self, pc: int, addr: int, n: int) -> bytes:
        data = self.mem.read(addr, n)
        if self.record:
            self.trace.events.append(("read", pc, addr, n))
        return data

    def _store(self, pc: int, addr: int, data: bytes):
        self.mem.write(addr, data)
        if self.record:
            self.trace.events.append(("write", pc, addr, len(data), bytes(data)))
        for fn in self.write_listeners:
            fn(self, pc, addr, len(data))

    def state(self) -> MachineState:
        return MachineState(list(self.regs), self.zf, self.cf, self.sf, self.mem,
                            self.heap.brk, self.pc, self.halted, bytes(self.output),
                            self.instret, self.cost, dict(self.heap.sizes))

    # -- main loop ------------------------------------------------------
    def run(self) -> tuple[MachineState, ExecutionTrace]:
        try:
            while not self.halted:
                if self.instret >= self.fuel:
                    raise FuelExhausted(f"fuel exhausted after {self.instret} instructions")
                self.step()
        except VMError as e:
            e.state, e.trace = self.state(), self.trace
            raise
        return self.state(), self.trace

    def step(self):
        pc = self.pc
        ins = self._fetch(pc)
        op = ins.op
        regs = self.regs
        nxt = pc + isa.FORMAT_LENGTH[ins.fmt]
        self.instret += 1
        self.cost += 1
        if self.record:
            self.trace.events.append(("exec", pc))
        ea = None
        aux = None
        sp_before = regs[SP]
        m = ins.mem
        if op is Op.LOAD:
            ea = self._ea(m)
            regs[ins.a] = int.from_bytes(self._load(pc, ea, m.width), "little")
        elif op is Op.STORE:
            ea = self._ea(m)
            self._store(pc, ea, (regs[ins.a] & ((1 << (8 * m.width)) - 1)).to_bytes(m.width, "little"))
        elif op in isa.ALU_RR:
            r, self.zf, self.cf, self.sf = alu(isa.ALU_KIND[op], regs[ins.a], regs[ins.b], ins.width)
            regs[ins.a] = r
        elif op in isa.ALU_RI:
            r, self.zf, self.cf, self.sf = alu(isa.ALU_KIND[op], regs[ins.a], ins.imm & MASK64, ins.width)
            regs[ins.a] = r
        elif op is Op.MOV:
            regs[ins.a] = regs[ins.b] & ((1 << (8 * ins.width)) - 1)
        elif op is Op.MOVI:
            regs[ins.a] = ins.imm & MASK64
        elif op is Op.LEA:
            regs[ins.a] = self._ea(m)
        elif op in isa.RMW:
            ea = self._ea(m)
            w = m.width
            old = int.from_bytes(self._load(pc, ea, w), "little")
            src = regs[ins.a] if op in isa.RMW_REG else ins.imm & MASK64
            r, self.zf, self.cf, self.sf = alu(isa.ALU_KIND[op], old, src, w)
            self._store(pc, ea, r.to_bytes(w, "little"))
        elif op is Op.CMP:
            _, self.zf, self.cf, self.sf = alu("sub", regs[ins.a], regs[ins.b], ins.width)
        elif op is Op.CMPI:
            _, self.zf, self.cf, self.sf = alu("sub", regs[ins.a], ins.imm & MASK64, ins.width)
        elif op is Op.JMP or op is Op.JMPS:
            nxt += ins.imm
        elif op is Op.JZ or op is Op.JZS:
            if self.zf:
                nxt += ins.imm
        elif op is Op.JNZ or op is Op.JNZS:
            if not self.zf:
                nxt += ins.imm
        elif op is Op.CMOVZ or op is Op.CMOVNZ:
            if self.zf == (op is Op.CMOVZ):
                regs[ins.a] = regs[ins.b] & ((1 << (8 * ins.width)) - 1)
        elif op is Op.CALL:
            target = nxt + ins.imm
            regs[SP] = (regs[SP] - 8) & MASK64
            ea = regs[SP]
            self._store(pc, ea, nxt.to_bytes(8, "little"))
            self._event(("call", pc, target))
            aux = target
            nxt = target
        elif op is Op.RET:
            ea = regs[SP]
            nxt = int.from_bytes(self._load(pc, ea, 8), "little")
            regs[SP] = (regs[SP] + 8) & MASK64
            self._event(("ret", pc))
        elif op is Op.PUSH:
            val = regs[ins.a]
            regs[SP] = (regs[SP] - 8) & MASK64
            ea = regs[SP]
            self._store(pc, ea, val.to_bytes(8, "little"))
        elif op is Op.POP:
            ea = regs[SP]
            val = int.from_bytes(self._load(pc, ea, 8), "little")
            regs[SP] = (regs[SP] + 8) & MASK64
            regs[ins.a] = val
        elif op is Op.MARKB or op is Op.MARKE:
            self.cost -= 1
            self._event(("marker", ins.imm, "begin" if op is Op.MARKB else "end"))
        elif op is Op.NZMASK:
            r = nzmask(regs[ins.b], ins.width)
            regs[ins.a] = r
            self.zf, self.cf, self.sf = r == 0, False, bool(r >> (8 * ins.width - 1))
        elif op is Op.LAHF:
            regs[ins.a] = int(self.zf) | int(self.cf) << 1 | int(self.sf) << 2
        elif op is Op.SAHF:
            v = regs[ins.a]
            self.zf, self.cf, self.sf = bool(v & 1), bool(v & 2), bool(v & 4)
        elif op is Op.RDRAND:
            self.cost += RDRAND_COST - 1
            regs[ins.a] = int.from_bytes(self.entropy(8), "little")
        elif op is Op.AESR:
            ea = self._ea(m)
            blob = self._load(pc, ea, 32)
            st = aes_round(blob[:16], blob[16:])
            self._store(pc, ea, st)
            regs[ins.a] = int.from_bytes(st[:8], "little")
        elif op is Op.COPYN:
            dst, src, n = regs[1], regs[2], regs[3]
            aux = (dst, src, n)
            for i in range(n):
                word = self._load(pc, src + 8 * i, 8)
                self._store(pc, dst + 8 * i, word)
            regs[1] = (dst + 8 * n) & MASK64
            regs[2] = (src + 8 * n) & MASK64
            regs[3] = 0
        elif op is Op.ALLOC:
            size = regs[ins.b]
            ptr = self.heap.alloc(size)
            regs[ins.a] = ptr
            self._event(("alloc", pc, size, ptr))
            aux = (ptr, size)
        elif op is Op.FREE:
            ptr = regs[ins.a]
            self.heap.free(ptr)
            self._event(("free", pc, ptr))
            aux = ptr
        elif op is Op.REALLOC:
            aux = self._realloc(pc, ins)
        elif op is Op.MSIZE:
            regs[ins.a] = self.heap.sizes.get(regs[ins.b], 0)
        elif op is Op.SBRK:
            regs[ins.a] = self.heap.sbrk(regs[ins.b])
        elif op is Op.ILEN:
            idx = regs[ins.b]
            regs[ins.a] = len(self.inputs[idx]) if idx < len(self.inputs) else 0
        elif op is Op.SHMAP:
            self.mem.map(regs[ins.a], regs[ins.b])
        elif op is Op.CLASSIFY or op is Op.DECLASSIFY:
            kind = "classify" if op is Op.CLASSIFY else "declassify"
            aux = (regs[ins.a], regs[ins.b])
            self._event((kind, pc, regs[ins.a], regs[ins.b]))
        elif op is Op.INPUT:
            idx = regs[ins.b]
            if idx >= len(self.inputs):
                raise VMError(f"input {idx} not provided")
            data = self.inputs[idx]
            ea = regs[ins.a]
            aux = (idx, len(data))
            if data:
                self._store(pc, ea, data)
        elif op is Op.OUTPUT:
            ea, n = regs[ins.a], regs[ins.b]
            aux = n
            if n:
                self.output += self._load(pc, ea, n)
        elif op is Op.HALT:
            self.halted = True
            nxt = pc
        elif op is Op.BRK:
            if pc not in self.dispatch:
                raise BreakTrap(f"break at {pc:#x} without dispatch entry")
            nxt = self.dispatch[pc]
        else:  # pragma: no cover
            raise VMError(f"unimplemented opcode {op.name}")
        self.pc = nxt
        if self.hooks:
            for h in self.hooks:
                h.step(self, pc, ins, ea, aux, sp_before)

    def _realloc(self, pc, ins):
        old = self.regs[ins.a]
        size = self.regs[ins.b]
        heap = self.heap
        if old == 0:
            new = heap.alloc(size)
            copied = 0
        else:
            if old not in heap.sizes:
                raise VMError(f"realloc of unknown pointer {old:#x}")
            old_size = heap.sizes[old]
            if max(16, (size + 15) & ~15) <= heap.caps[old]:
                new, copied = old, 0
                heap.sizes[old] = size
            else:
                copied = min(old_size, size)
                data = self._load(pc, old, copied) if copied else b""
                heap.free(old)
                new = heap.alloc(size)
                if copied:
                    self._store(pc, new, data)
        self.regs[ins.a] = new
        self._event(("realloc", pc, old, new, size))
        return (old, new, size, copied)


def execute(prog, inputs=(), hooks=(), fuel: int = DEFAULT_FUEL, **kw):
    """Run ``prog`` to ``halt``; raises :class:`FuelExhausted` past ``fuel``."""
    if fuel <= 0:
        raise ValueError("fuel must be positive")
    return Machine(prog, inputs, hooks=hooks, fuel=fuel, **kw).run()


__all__ = ["execute", "Machine", "MachineState", "ExecutionTrace", "Memory", "alu",
           "VMError", "MemoryFault", "StackOverflow", "FuelExhausted", "BreakTrap",
           "DATA_AREA_BASE", "PAGE"]

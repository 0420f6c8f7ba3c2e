"""Bit-precise forward slicing over one concrete execution.

Independent of the taint engine: every register bit and memory bit carries
a flag "depends on secret input", and each rule uses the concrete operand
values, so ``and`` with a known zero bit, ``x ^ x`` and shifts by public
amounts are followed exactly.  Covers the instruction subset the generated
test programs use.
"""

from __future__ import annotations

from cipherbench import isa
from cipherbench.isa import SP, Op

M64 = (1 << 64) - 1
_QUIET = {Op.HALT, Op.JMP, Op.JMPS, Op.JZ, Op.JNZ, Op.JZS, Op.JNZS, Op.RET}


def _carry_spread(t: int, bits: int) -> int:
    """Add/sub: bit i depends on every operand bit at or below i."""
    if not t:
        return 0
    low = (t & -t).bit_length() - 1
    return ((1 << bits) - 1) & ~((1 << low) - 1)


def alu_flow(kind: str, x: int, y: int, tx: int, ty: int, bits: int, same: bool = False) -> int:
    m = (1 << bits) - 1
    x, y, tx, ty = x & m, y & m, tx & m, ty & m
    if same and kind in ("xor", "sub"):
        return 0
    if kind == "xor":
        return tx | ty
    if kind == "and":
        return (tx & (y | ty)) | (ty & (x | tx))
    if kind == "or":
        return ((tx & (~y | ty)) | (ty & (~x | tx))) & m
    if kind in ("add", "sub"):
        return _carry_spread(tx | ty, bits)
    if kind in ("shl", "shr"):
        if ty & 63:
            return m if (tx or ty) else 0
        c = y & 63
        return ((tx << c) & m) if kind == "shl" else tx >> c
    raise ValueError(kind)


class ExactFlow:
    """Machine hook; ``ever`` collects every memory byte that ever held a
    secret-dependent bit."""

    def __init__(self, prog, secret_inputs: set[int]):
        self.secret_inputs = set(secret_inputs)
        self.rt = [0] * 16
        self.mem: dict[int, int] = {}
        # concrete memory as it was before the current step
        self.vals: dict[int, int] = {}
        for addr, data in prog.static_data:
            for i, b in enumerate(data):
                self.vals[addr + i] = b
        self.flags = False
        self.zf = False
        self.prev = [0] * 16
        self.ever: set[int] = set()
        self._primed = False

    def _taint(self, addr: int, n: int) -> int:
        return sum(self.mem.get(addr + i, 0) << (8 * i) for i in range(n))

    def _value(self, machine, addr: int, n: int) -> int:
        raw = bytes(self.vals.get(a, 0) for a in range(addr, addr + n))
        return int.from_bytes(raw, "little")

    def _put(self, machine, addr: int, n: int, t: int) -> None:
        for i in range(n):
            b = (t >> (8 * i)) & 0xFF
            self.mem[addr + i] = b
            self.vals[addr + i] = machine.mem.read(addr + i, 1)[0]
            if b:
                self.ever.add(addr + i)

    def step(self, machine, pc, ins, ea, aux, sp_before):
        if not self._primed:
            self.prev = [0] * 16
            self.prev[SP] = sp_before
            self._primed = True
        prev, rt, op = self.prev, self.rt, ins.op
        if op is Op.MOVI:
            rt[ins.a] = 0
        elif op is Op.MOV:
            rt[ins.a] = rt[ins.b] & ((1 << 8 * ins.width) - 1)
        elif op in isa.ALU_RR or op in isa.ALU_RI:
            rr = op in isa.ALU_RR
            y = prev[ins.b] if rr else ins.imm & M64
            ty = rt[ins.b] if rr else 0
            r = alu_flow(isa.ALU_KIND[op], prev[ins.a], y, rt[ins.a], ty, 8 * ins.width,
                         same=rr and ins.a == ins.b)
            rt[ins.a] = r
            self.flags = bool(r)
        elif op is Op.CMP:
            m = (1 << 8 * ins.width) - 1
            self.flags = ins.a != ins.b and bool((rt[ins.a] | rt[ins.b]) & m)
        elif op is Op.CMPI:
            self.flags = bool(rt[ins.a] & ((1 << 8 * ins.width) - 1))
        elif op in (Op.CMOVZ, Op.CMOVNZ):
            if self.flags:
                rt[ins.a] = rt[ins.a] | rt[ins.b] | (prev[ins.a] ^ prev[ins.b])
            elif (op is Op.CMOVZ) == self.zf:
                rt[ins.a] = rt[ins.b]
        elif op is Op.LOAD:
            rt[ins.a] = self._taint(ea, ins.mem.width)
        elif op is Op.STORE:
            self._put(machine, ea, ins.mem.width, rt[ins.a])
        elif op in isa.RMW:
            w = ins.mem.width
            rr = op in isa.RMW_REG
            r = alu_flow(isa.ALU_KIND[op], self._value(machine, ea, w),
                         prev[ins.a] if rr else ins.imm & M64,
                         self._taint(ea, w), rt[ins.a] if rr else 0, 8 * w)
            self._put(machine, ea, w, r)
            self.flags = bool(r)
        elif op is Op.PUSH:
            self._put(machine, ea, 8, rt[ins.a])
        elif op is Op.POP:
            rt[ins.a] = self._taint(ea, 8)
        elif op is Op.CALL:
            self._put(machine, ea, 8, 0)
        elif op is Op.INPUT:
            idx, n = aux
            if n:
                self._put(machine, ea, n, ((1 << 8 * n) - 1) if idx in self.secret_inputs else 0)
        elif op is Op.OUTPUT:
            if aux:
                self._put(machine, ea, aux, 0)
        elif op not in _QUIET:
            raise NotImplementedError(f"oracle does not model {op.name}")
        rt[SP] = 0
        self.prev = list(machine.regs)
        self.zf = machine.zf

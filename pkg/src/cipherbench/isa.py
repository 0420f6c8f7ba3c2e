"""MiniCT instruction set: opcodes, operand layout and the binary encoding.

Every opcode belongs to one encoding format and the format fixes the
encoded length:

=========  ======  ==============================================
format     bytes   layout
=========  ======  ==============================================
NONE       1       op
R          2       op, reg
REL8       2       op, rel8
ID         2       op, id8
RR         3       op, rd | width_code << 4, rs
RI         3       op, rd | width_code << 4, imm8
REL32      5       op, rel32
MEM        8       op, reg-or-imm8, base (0xff = absolute), width, disp32
IMM64      10      op, rd, imm64
=========  ======  ==============================================

Multi-byte integers are little-endian.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field

NUM_REGS = 16
SP = 15
MASK64 = (1 << 64) - 1

CODE_BASE = 0x0001_0000
INSTRUMENT_BASE = 0x0008_0000
DATA_AREA_BASE = 0x000C_0000
DATA_AREA_SIZE = 0x1000
STATIC_BASE = 0x0010_0000
HEAP_BASE = 0x0040_0000
STACK_TOP = 0x1000_0000
STACK_SIZE = 0x0010_0000
GUARD_SIZE = 0x0010_0000
STACK_LO = STACK_TOP - STACK_SIZE
GUARD_LO = STACK_LO - GUARD_SIZE

MASK_DISTANCE = 0x3FFF_F000
SECRECY_DISTANCE = 0x2FFF_F000

WIDTHS = (1, 2, 4, 8)
_WIDTH_CODE = {8: 0, 1: 1, 2: 2, 4: 3}
_CODE_WIDTH = {v: k for k, v in _WIDTH_CODE.items()}
ABSOLUTE = 0xFF


class DecodeError(ValueError):
    pass


class Fmt(enum.Enum):
    NONE = 1
    R = 2
    REL8 = 3
    ID = 4
    RR = 5
    RI = 6
    REL32 = 7
    MEM = 8
    IMM64 = 9


FORMAT_LENGTH = {
    Fmt.NONE: 1, Fmt.R: 2, Fmt.REL8: 2, Fmt.ID: 2, Fmt.RR: 3, Fmt.RI: 3,
    Fmt.REL32: 5, Fmt.MEM: 8, Fmt.IMM64: 10,
}


class Op(enum.IntEnum):
    HALT = 0x00
    BRK = 0x01
    RET = 0x02
    COPYN = 0x03

    JMPS = 0x10
    JZS = 0x11
    JNZS = 0x12
    MARKB = 0x13
    MARKE = 0x14
    PUSH = 0x15
    POP = 0x16
    RDRAND = 0x17
    LAHF = 0x18
    SAHF = 0x19

    MOV = 0x20
    ADD = 0x21
    SUB = 0x22
    XOR = 0x23
    AND = 0x24
    OR = 0x25
    SHL = 0x26
    SHR = 0x27
    CMP = 0x28
    CMOVZ = 0x29
    CMOVNZ = 0x2A
    NZMASK = 0x2B

    ADDI = 0x30
    SUBI = 0x31
    XORI = 0x32
    ANDI = 0x33
    ORI = 0x34
    SHLI = 0x35
    SHRI = 0x36
    CMPI = 0x37

    ALLOC = 0x40
    FREE = 0x41
    REALLOC = 0x42
    MSIZE = 0x43
    SBRK = 0x44
    CLASSIFY = 0x45
    DECLASSIFY = 0x46
    INPUT = 0x47
    OUTPUT = 0x48
    SHMAP = 0x49
    ILEN = 0x4A

    JMP = 0x50
    JZ = 0x51
    JNZ = 0x52
    CALL = 0x53

    LOAD = 0x60
    STORE = 0x61
    LEA = 0x62
    ADDM = 0x63
    SUBM = 0x64
    XORM = 0x65
    ANDM = 0x66
    ORM = 0x67
    SHLM = 0x68
    SHRM = 0x69
    ADDMI = 0x6A
    SUBMI = 0x6B
    XORMI = 0x6C
    ANDMI = 0x6D
    ORMI = 0x6E
    SHLMI = 0x6F
    SHRMI = 0x70
    AESR = 0x71

    MOVI = 0x78


_FMT: dict[Op, Fmt] = {}
for _op in Op:
    v = int(_op)
    if v < 0x10:
        _FMT[_op] = Fmt.NONE
    elif _op in (Op.JMPS, Op.JZS, Op.JNZS):
        _FMT[_op] = Fmt.REL8
    elif _op in (Op.MARKB, Op.MARKE):
        _FMT[_op] = Fmt.ID
    elif v < 0x20:
        _FMT[_op] = Fmt.R
    elif v < 0x30 or 0x40 <= v < 0x50:
        _FMT[_op] = Fmt.RR
    elif v < 0x40:
        _FMT[_op] = Fmt.RI
    elif v < 0x60:
        _FMT[_op] = Fmt.REL32
    elif v < 0x78:
        _FMT[_op] = Fmt.MEM
    else:
        _FMT[_op] = Fmt.IMM64

ALU_RR = {Op.ADD, Op.SUB, Op.XOR, Op.AND, Op.OR, Op.SHL, Op.SHR}
ALU_RI = {Op.ADDI, Op.SUBI, Op.XORI, Op.ANDI, Op.ORI, Op.SHLI, Op.SHRI}
RMW_REG = {Op.ADDM, Op.SUBM, Op.XORM, Op.ANDM, Op.ORM, Op.SHLM, Op.SHRM}
RMW_IMM = {Op.ADDMI, Op.SUBMI, Op.XORMI, Op.ANDMI, Op.ORMI, Op.SHLMI, Op.SHRMI}
RMW = RMW_REG | RMW_IMM
# imm8 of these is an unsigned shift count; every other imm8 is signed.
SHIFT_IMM = {Op.SHLI, Op.SHRI, Op.SHLMI, Op.SHRMI}
FLAG_WRITERS = ALU_RR | ALU_RI | RMW | {Op.CMP, Op.CMPI, Op.NZMASK, Op.SAHF}
FLAG_READERS = {Op.JZ, Op.JNZ, Op.JZS, Op.JNZS, Op.CMOVZ, Op.CMOVNZ, Op.LAHF}
BRANCHES = {Op.JMP, Op.JZ, Op.JNZ, Op.JMPS, Op.JZS, Op.JNZS}
COND_BRANCHES = {Op.JZ, Op.JNZ, Op.JZS, Op.JNZS}
SHORT_BRANCHES = {Op.JMPS: Op.JMP, Op.JZS: Op.JZ, Op.JNZS: Op.JNZ}
TERMINATORS = BRANCHES | {Op.RET, Op.HALT, Op.BRK}

# Base ALU operation behind each register, immediate and memory form.
ALU_KIND = {
    Op.ADD: "add", Op.ADDI: "add", Op.ADDM: "add", Op.ADDMI: "add",
    Op.SUB: "sub", Op.SUBI: "sub", Op.SUBM: "sub", Op.SUBMI: "sub",
    Op.XOR: "xor", Op.XORI: "xor", Op.XORM: "xor", Op.XORMI: "xor",
    Op.AND: "and", Op.ANDI: "and", Op.ANDM: "and", Op.ANDMI: "and",
    Op.OR: "or", Op.ORI: "or", Op.ORM: "or", Op.ORMI: "or",
    Op.SHL: "shl", Op.SHLI: "shl", Op.SHLM: "shl", Op.SHLMI: "shl",
    Op.SHR: "shr", Op.SHRI: "shr", Op.SHRM: "shr", Op.SHRMI: "shr",
    Op.CMP: "sub", Op.CMPI: "sub",
}
RR_OF_KIND = {"add": Op.ADD, "sub": Op.SUB, "xor": Op.XOR, "and": Op.AND,
              "or": Op.OR, "shl": Op.SHL, "shr": Op.SHR}
RI_OF_KIND = {"add": Op.ADDI, "sub": Op.SUBI, "xor": Op.XORI, "and": Op.ANDI,
              "or": Op.ORI, "shl": Op.SHLI, "shr": Op.SHRI}


def fmt_of(op: Op) -> Fmt:
    return _FMT[op]


def length_of(op: Op) -> int:
    return FORMAT_LENGTH[_FMT[op]]


@dataclass(frozen=True)
class Mem:
    """Memory operand ``width[base + disp]``; ``base=None`` is absolute."""

    base: int | None
    disp: int
    width: int = 8

    def __str__(self) -> str:
        w = {1: "b", 2: "w", 4: "d", 8: "q"}[self.width]
        if self.base is None:
            return f"{w}[{self.disp:#x}]"
        sign = "+" if self.disp >= 0 else "-"
        return f"{w}[r{self.base}{sign}{abs(self.disp):#x}]"


@dataclass(frozen=True)
class Instruction:
    op: Op
    a: int | None = None       # rd / rs / single register
    b: int | None = None       # rs of RR forms
    imm: int | None = None     # immediate, branch displacement or marker id
    mem: Mem | None = None
    width: int = 8             # operand width of RR/RI forms
    target: object = field(default=None, compare=False)  # unresolved label (emitter use)

    @property
    def length(self) -> int:
        return length_of(self.op)

    @property
    def fmt(self) -> Fmt:
        return _FMT[self.op]

    def __str__(self) -> str:
        name = self.op.name.lower()
        if self.width != 8 and self.fmt in (Fmt.RR, Fmt.RI):
            name += "." + {1: "b", 2: "w", 4: "d"}[self.width]
        f = self.fmt
        if f is Fmt.NONE:
            return name
        if f is Fmt.R:
            return f"{name} r{self.a}"
        if f in (Fmt.REL8, Fmt.REL32):
            if self.target is not None:
                return f"{name} {self.target}"
            return f"{name} {self.imm:+d}"
        if f is Fmt.ID:
            return f"{name} {self.imm}"
        if f is Fmt.RR:
            return f"{name} r{self.a}, r{self.b}"
        if f is Fmt.RI:
            return f"{name} r{self.a}, {self.imm}"
        if f is Fmt.IMM64:
            return f"{name} r{self.a}, {self.imm:#x}"
        if self.op is Op.STORE or self.op in RMW_REG:
            return f"{name} {self.mem}, r{self.a}"
        if self.op in RMW_IMM:
            return f"{name} {self.mem}, {self.imm}"
        return f"{name} r{self.a}, {self.mem}"


def _check_reg(r: int | None) -> int:
    if r is None or not 0 <= r < NUM_REGS:
        raise ValueError(f"bad register {r!r}")
    return r


def encode(ins: Instruction) -> bytes:
    op, f = ins.op, ins.fmt
    if f is Fmt.NONE:
        return bytes([op])
    if f is Fmt.R:
        return bytes([op, _check_reg(ins.a)])
    if f is Fmt.REL8:
        if not -128 <= ins.imm <= 127:
            raise ValueError(f"short displacement out of range: {ins.imm}")
        return struct.pack("<Bb", op, ins.imm)
    if f is Fmt.ID:
        if not 0 <= ins.imm <= 255:
            raise ValueError(f"marker id out of range: {ins.imm}")
        return bytes([op, ins.imm])
    if f in (Fmt.RR, Fmt.RI):
        head = _check_reg(ins.a) | (_WIDTH_CODE[ins.width] << 4)
        if f is Fmt.RR:
            return bytes([op, head, _check_reg(ins.b)])
        if op in SHIFT_IMM:
            if not 0 <= ins.imm <= 255:
                raise ValueError(f"shift count out of range: {ins.imm}")
            return bytes([op, head, ins.imm])
        if not -128 <= ins.imm <= 127:
            raise ValueError(f"immediate out of imm8 range: {ins.imm}")
        return struct.pack("<BBb", op, head, ins.imm)
    if f is Fmt.REL32:
        return struct.pack("<Bi", op, ins.imm)
    if f is Fmt.IMM64:
        return struct.pack("<BBQ", op, _check_reg(ins.a), ins.imm & MASK64)
    m = ins.mem
    if m.width not in WIDTHS:
        raise ValueError(f"bad access width {m.width}")
    if op in RMW_IMM:
        if op in SHIFT_IMM:
            reg = ins.imm & 0xFF
        else:
            reg = struct.pack("<b", ins.imm)[0]
    else:
        reg = _check_reg(ins.a)
    base = ABSOLUTE if m.base is None else _check_reg(m.base)
    return struct.pack("<BBBBi", op, reg, base, m.width, m.disp)


def decode(code: bytes, offset: int = 0) -> Instruction:
    try:
        op = Op(code[offset])
    except (ValueError, IndexError):
        bad = code[offset] if offset < len(code) else None
        raise DecodeError(f"unknown opcode byte {bad!r} at offset {offset:#x}") from None
    f = _FMT[op]
    n = FORMAT_LENGTH[f]
    raw = bytes(code[offset:offset + n])
    if len(raw) < n:
        raise DecodeError(f"truncated {op.name} at offset {offset:#x}")
    if f is Fmt.NONE:
        return Instruction(op)
    if f is Fmt.R:
        return Instruction(op, a=_dreg(raw[1], offset))
    if f is Fmt.REL8:
        return Instruction(op, imm=struct.unpack_from("<b", raw, 1)[0])
    if f is Fmt.ID:
        return Instruction(op, imm=raw[1])
    if f in (Fmt.RR, Fmt.RI):
        wc = raw[1] >> 4
        if wc not in _CODE_WIDTH:
            raise DecodeError(f"bad width code at offset {offset:#x}")
        rd, w = raw[1] & 0xF, _CODE_WIDTH[wc]
        if f is Fmt.RR:
            return Instruction(op, a=rd, b=_dreg(raw[2], offset), width=w)
        imm = raw[2] if op in SHIFT_IMM else struct.unpack_from("<b", raw, 2)[0]
        return Instruction(op, a=rd, imm=imm, width=w)
    if f is Fmt.REL32:
        return Instruction(op, imm=struct.unpack_from("<i", raw, 1)[0])
    if f is Fmt.IMM64:
        return Instruction(op, a=_dreg(raw[1], offset), imm=struct.unpack_from("<Q", raw, 2)[0])
    _, reg, base, width, disp = struct.unpack("<BBBBi", raw)
    if width not in WIDTHS:
        raise DecodeError(f"bad access width {width} at offset {offset:#x}")
    mem = Mem(None if base == ABSOLUTE else _dreg(base, offset), disp, width)
    if op in RMW_IMM:
        imm = reg if op in SHIFT_IMM else struct.unpack("<b", bytes([reg]))[0]
        return Instruction(op, imm=imm, mem=mem)
    return Instruction(op, a=_dreg(reg, offset), mem=mem)


def _dreg(r: int, offset: int) -> int:
    if r >= NUM_REGS:
        raise DecodeError(f"bad register {r} at offset {offset:#x}")
    return r


def decode_all(code: bytes, base: int = 0) -> dict[int, Instruction]:
    """Linear sweep of ``code``; keys are absolute addresses."""
    out = {}
    off = 0
    while off < len(code):
        ins = decode(code, off)
        out[base + off] = ins
        off += ins.length
    return out


def memory_access(ins: Instruction) -> tuple[bool, bool]:
    """(reads memory, writes memory) for data accesses, excluding call/ret."""
    op = ins.op
    if op is Op.LOAD or op is Op.POP:
        return True, False
    if op is Op.STORE or op is Op.PUSH:
        return False, True
    if op in RMW or op is Op.AESR or op is Op.COPYN or op is Op.REALLOC:
        return True, True
    if op is Op.INPUT:
        return False, True
    if op is Op.OUTPUT:
        return True, False
    return False, False


def regs_read(ins: Instruction) -> set[int]:
    """Registers whose incoming value the instruction consumes."""
    op, f = ins.op, ins.fmt
    s: set[int] = set()
    if ins.mem is not None and ins.mem.base is not None:
        s.add(ins.mem.base)
    if op in (Op.PUSH, Op.POP, Op.CALL, Op.RET):
        s.add(SP)
    if op in (Op.PUSH, Op.SAHF, Op.FREE):
        s.add(ins.a)
    if op is Op.STORE or op in RMW_REG:
        s.add(ins.a)
    if op is Op.COPYN:
        s |= {1, 2, 3}
    if f is Fmt.RR:
        if op in ALU_RR or op in (Op.CMP, Op.CMOVZ, Op.CMOVNZ, Op.REALLOC,
                                  Op.CLASSIFY, Op.DECLASSIFY, Op.INPUT, Op.OUTPUT,
                                  Op.SHMAP):
            s |= {ins.a, ins.b}
        elif op in (Op.MOV, Op.NZMASK, Op.ALLOC, Op.MSIZE, Op.SBRK, Op.ILEN):
            s.add(ins.b)
    if f is Fmt.RI:
        s.add(ins.a)
    return s


def regs_written(ins: Instruction) -> set[int]:
    op, f = ins.op, ins.fmt
    s: set[int] = set()
    if op in (Op.PUSH, Op.POP, Op.CALL, Op.RET):
        s.add(SP)
    if op in (Op.POP, Op.RDRAND, Op.LAHF, Op.LOAD, Op.LEA, Op.AESR, Op.MOVI):
        s.add(ins.a)
    if op is Op.COPYN:
        s |= {1, 2, 3}
    if f is Fmt.RR and op not in (Op.CMP, Op.FREE, Op.CLASSIFY, Op.DECLASSIFY,
                                  Op.INPUT, Op.OUTPUT, Op.SHMAP):
        s.add(ins.a)
    if f is Fmt.RI and op is not Op.CMPI:
        s.add(ins.a)
    return s

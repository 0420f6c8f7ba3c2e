"""Two-pass assembler for MiniCT text.

Syntax, one statement per line, ``;`` starts a comment::

    .func main            ; function symbol; also defines the label ``main``
    .entry main
    .static key, 32       ; 32 zero bytes in the statics region
    .bytes tbl, 1, 2, 3   ; initialised bytes
    .quads p, 5, 6        ; initialised little-endian 64-bit words
    loop:
        load r1, q[r2+0x10]
        add r1, 5
        add.b r1, r3      ; 1-byte ALU form
        shr q[r15-0x20], 8
        jnz.s loop        ; short (rel8) form
        jmp +4            ; raw displacement after the instruction
"""

from __future__ import annotations

import re

from .isa import (
    CODE_BASE, Instruction, Mem, Op, RI_OF_KIND, RR_OF_KIND,
    STATIC_BASE, length_of, encode,
)
from .program import Program


class AssemblyError(ValueError):
    def __init__(self, msg: str, line: int | None = None):
        super().__init__(f"line {line}: {msg}" if line is not None else msg)
        self.line = line


_REG = re.compile(r"^r(\d+)$")
_MEM = re.compile(r"^([bwdq])?\[\s*([^\]]+?)\s*\]$")
_WCHAR = {"b": 1, "w": 2, "d": 4, "q": 8}
_RMW_REG = {"add": Op.ADDM, "sub": Op.SUBM, "xor": Op.XORM, "and": Op.ANDM,
            "or": Op.ORM, "shl": Op.SHLM, "shr": Op.SHRM}
_RMW_IMM = {"add": Op.ADDMI, "sub": Op.SUBMI, "xor": Op.XORMI, "and": Op.ANDMI,
            "or": Op.ORMI, "shl": Op.SHLMI, "shr": Op.SHRMI}
_NOARG = {"halt": Op.HALT, "brk": Op.BRK, "ret": Op.RET, "copyn": Op.COPYN}
_ONEREG = {"push": Op.PUSH, "pop": Op.POP, "rdrand": Op.RDRAND, "lahf": Op.LAHF,
           "sahf": Op.SAHF}
_TWOREG = {"cmovz": Op.CMOVZ, "cmovnz": Op.CMOVNZ, "nzmask": Op.NZMASK,
           "alloc": Op.ALLOC, "realloc": Op.REALLOC, "msize": Op.MSIZE,
           "sbrk": Op.SBRK, "classify": Op.CLASSIFY, "declassify": Op.DECLASSIFY,
           "input": Op.INPUT, "output": Op.OUTPUT, "shmap": Op.SHMAP,
           "ilen": Op.ILEN}
_BRANCH = {"jmp": (Op.JMP, Op.JMPS), "jz": (Op.JZ, Op.JZS), "jnz": (Op.JNZ, Op.JNZS),
           "call": (Op.CALL, None)}
_ALU = ("add", "sub", "xor", "and", "or", "shl", "shr")


def _int(tok: str) -> int | None:
    try:
        return int(tok, 0)
    except ValueError:
        return None


def _split_operands(text: str) -> list[str]:
    return [t.strip() for t in text.split(",")] if text.strip() else []


class _Assembler:
    def __init__(self, source: str):
        self.source = source
        self.labels: dict[str, int] = {}
        self.functions: dict[str, int] = {}
        self.statics: list[tuple[int, bytes]] = []
        self.static_cursor = STATIC_BASE
        self.entry_label: str | None = None
        self.items: list[tuple[int, int, str, list[str], str]] = []

    # -- pass 1 -----------------------------------------------------------
    def layout(self):
        pc = CODE_BASE
        for lineno, raw in enumerate(self.source.splitlines(), 1):
            line = raw.split(";", 1)[0].strip()
            if not line:
                continue
            while True:
                m = re.match(r"^([A-Za-z_.$][\w.$]*):\s*(.*)$", line)
                if not m:
                    break
                self._define(m.group(1), pc, lineno)
                line = m.group(2).strip()
            if not line:
                continue
            if line.startswith("."):
                self._directive(line, pc, lineno)
                continue
            mnem, _, rest = line.partition(" ")
            ops = _split_operands(rest)
            size = self._size(mnem.lower(), ops, lineno)
            self.items.append((lineno, pc, mnem.lower(), ops, line))
            pc += size
        self.end = pc

    def _define(self, name: str, addr: int, lineno: int):
        if name in self.labels and self.labels[name] != addr:
            raise AssemblyError(f"duplicate label {name!r}", lineno)
        self.labels[name] = addr

    def _directive(self, line: str, pc: int, lineno: int):
        word, _, rest = line.partition(" ")
        args = _split_operands(rest)
        if word == ".func":
            if len(args) != 1:
                raise AssemblyError(".func takes one name", lineno)
            self._define(args[0], pc, lineno)
            self.functions[args[0]] = pc
        elif word == ".entry":
            self.entry_label = args[0]
        elif word in (".static", ".bytes", ".quads"):
            if not args:
                raise AssemblyError(f"{word} needs a name", lineno)
            name, vals = args[0], args[1:]
            try:
                nums = [int(v, 0) for v in vals]
            except ValueError:
                raise AssemblyError(f"bad value in {word}", lineno) from None
            if word == ".static":
                if len(nums) != 1:
                    raise AssemblyError(".static takes name, size", lineno)
                data = bytes(nums[0])
            elif word == ".bytes":
                data = bytes(v & 0xFF for v in nums)
            else:
                data = b"".join((v & (2**64 - 1)).to_bytes(8, "little") for v in nums)
            # 16-byte alignment plus a 16-byte gap keeps neighbouring
            # variables from looking like one contiguous object.
            addr = (self.static_cursor + 15) & ~15
            if self.statics:
                addr += 16
            self._define(name, addr, lineno)
            self.statics.append((addr, data))
            self.static_cursor = addr + len(data)
        else:
            raise AssemblyError(f"unknown directive {word}", lineno)

    def _size(self, mnem: str, ops: list[str], lineno: int) -> int:
        return self._build(mnem, ops, lineno, pc=None, sizing=True).length

    # -- pass 2 -----------------------------------------------------------
    def emit(self) -> Program:
        code = bytearray()
        starts = {pc for _, pc, *_ in self.items}
        for lineno, pc, mnem, ops, _ in self.items:
            ins = self._build(mnem, ops, lineno, pc=pc, sizing=False)
            if ins.op in (Op.JMP, Op.JZ, Op.JNZ, Op.CALL, Op.JMPS, Op.JZS, Op.JNZS):
                tgt = pc + ins.length + ins.imm
                if tgt not in starts:
                    raise AssemblyError(f"misaligned branch target {tgt:#x}", lineno)
            try:
                code += encode(ins)
            except ValueError as e:
                raise AssemblyError(str(e), lineno) from None
        entry = CODE_BASE
        if self.entry_label is not None:
            if self.entry_label not in self.labels:
                raise AssemblyError(f"undefined entry label {self.entry_label!r}")
            entry = self.labels[self.entry_label]
        end_static = max((a + len(d) for a, d in self.statics), default=STATIC_BASE)
        size = (end_static - STATIC_BASE + 0xFFF) & ~0xFFF if self.statics else 0
        return Program(
            code=bytes(code), entry=entry, code_base=CODE_BASE,
            static_data=[(a, d) for a, d in self.statics if any(d)],
            static_size=size, functions=dict(self.functions), labels=dict(self.labels),
        )

    # -- operand parsing --------------------------------------------------
    def _reg(self, tok: str, lineno: int) -> int:
        m = _REG.match(tok)
        if not m or int(m.group(1)) > 15:
            raise AssemblyError(f"expected register, got {tok!r}", lineno)
        return int(m.group(1))

    def _value(self, tok: str, lineno: int, sizing: bool) -> int:
        v = _int(tok)
        if v is not None:
            return v
        m = re.match(r"^([A-Za-z_.$][\w.$]*)\s*([+-]\s*\w+)?$", tok)
        if not m:
            raise AssemblyError(f"bad operand {tok!r}", lineno)
        if sizing:
            return 0
        if m.group(1) not in self.labels:
            raise AssemblyError(f"undefined label {m.group(1)!r}", lineno)
        off = _int(m.group(2).replace(" ", "")) if m.group(2) else 0
        if off is None:
            raise AssemblyError(f"bad offset in {tok!r}", lineno)
        return self.labels[m.group(1)] + off

    def _mem(self, tok: str, lineno: int, sizing: bool, need_width=True) -> Mem:
        m = _MEM.match(tok)
        if not m:
            raise AssemblyError(f"bad memory operand {tok!r}", lineno)
        if m.group(1) is None and need_width:
            raise AssemblyError(f"memory operand needs width prefix: {tok!r}", lineno)
        width = _WCHAR[m.group(1) or "q"]
        inner = m.group(2).replace(" ", "")
        rm = re.match(r"^r(\d+)(?:([+-])(.+))?$", inner)
        if rm:
            base = self._reg("r" + rm.group(1), lineno)
            disp = 0
            if rm.group(2):
                d = self._value(rm.group(3), lineno, sizing)
                disp = d if rm.group(2) == "+" else -d
        else:
            base, disp = None, self._value(inner, lineno, sizing)
        if not -(2**31) <= disp < 2**31:
            raise AssemblyError(f"displacement out of signed 32-bit range: {disp:#x}", lineno)
        return Mem(base, disp, width)

    def _is_mem(self, tok: str) -> bool:
        return bool(_MEM.match(tok))

    def _build(self, mnem: str, ops: list[str], lineno: int, pc, sizing: bool) -> Instruction:
        base_m, _, suffix = mnem.partition(".")
        width = 8
        short = False
        if suffix:
            if suffix == "s" and base_m in _BRANCH:
                short = True
            elif suffix in _WCHAR:
                width = _WCHAR[suffix]
            else:
                raise AssemblyError(f"unknown mnemonic {mnem!r}", lineno)

        def need(n):
            if len(ops) != n:
                raise AssemblyError(f"{mnem} takes {n} operand(s)", lineno)

        if base_m in _NOARG:
            need(0)
            return Instruction(_NOARG[base_m])
        if base_m in _ONEREG:
            need(1)
            return Instruction(_ONEREG[base_m], a=self._reg(ops[0], lineno))
        if base_m in ("markb", "marke"):
            need(1)
            return Instruction(Op.MARKB if base_m == "markb" else Op.MARKE,
                               imm=self._value(ops[0], lineno, False))
        if base_m == "free":
            need(1)
            return Instruction(Op.FREE, a=self._reg(ops[0], lineno), b=0)
        if base_m in _BRANCH:
            need(1)
            near, sh = _BRANCH[base_m]
            if short and sh is None:
                raise AssemblyError("call has no short form", lineno)
            op = sh if short else near
            tok = ops[0]
            if sizing:
                return Instruction(op, imm=0)
            if tok[0] in "+-" and _int(tok) is not None:
                rel = _int(tok)
            else:
                rel = self._value(tok, lineno, False) - (pc + length_of(op))
            if short and not -128 <= rel <= 127:
                raise AssemblyError(f"short branch out of range ({rel})", lineno)
            return Instruction(op, imm=rel)
        if base_m in _TWOREG:
            need(2)
            return Instruction(_TWOREG[base_m], a=self._reg(ops[0], lineno),
                               b=self._reg(ops[1], lineno), width=width)
        if base_m == "mov":
            need(2)
            rd = self._reg(ops[0], lineno)
            if _REG.match(ops[1]):
                return Instruction(Op.MOV, a=rd, b=self._reg(ops[1], lineno), width=width)
            return Instruction(Op.MOVI, a=rd, imm=self._value(ops[1], lineno, sizing) & (2**64 - 1))
        if base_m == "load" or base_m == "lea" or base_m == "aesr":
            need(2)
            op = {"load": Op.LOAD, "lea": Op.LEA, "aesr": Op.AESR}[base_m]
            return Instruction(op, a=self._reg(ops[0], lineno),
                               mem=self._mem(ops[1], lineno, sizing, need_width=(op is Op.LOAD)))
        if base_m == "store":
            need(2)
            return Instruction(Op.STORE, a=self._reg(ops[1], lineno),
                               mem=self._mem(ops[0], lineno, sizing))
        if base_m in _ALU or base_m == "cmp":
            need(2)
            if self._is_mem(ops[0]):
                if base_m == "cmp":
                    raise AssemblyError("cmp has no memory form", lineno)
                mem = self._mem(ops[0], lineno, sizing)
                if _REG.match(ops[1]):
                    return Instruction(_RMW_REG[base_m], a=self._reg(ops[1], lineno), mem=mem)
                imm = self._imm8(base_m, ops[1], lineno)
                return Instruction(_RMW_IMM[base_m], imm=imm, mem=mem)
            rd = self._reg(ops[0], lineno)
            if _REG.match(ops[1]):
                op = Op.CMP if base_m == "cmp" else RR_OF_KIND[base_m]
                return Instruction(op, a=rd, b=self._reg(ops[1], lineno), width=width)
            op = Op.CMPI if base_m == "cmp" else RI_OF_KIND[base_m]
            return Instruction(op, a=rd, imm=self._imm8(base_m, ops[1], lineno), width=width)
        raise AssemblyError(f"unknown mnemonic {mnem!r}", lineno)

    def _imm8(self, kind: str, tok: str, lineno: int) -> int:
        v = _int(tok)
        if v is None:
            raise AssemblyError(f"expected immediate, got {tok!r}", lineno)
        lo, hi = (0, 255) if kind in ("shl", "shr") else (-128, 127)
        if not lo <= v <= hi:
            raise AssemblyError(f"immediate {v} out of 8-bit range", lineno)
        return v


def assemble(source: str) -> Program:
    a = _Assembler(source)
    a.layout()
    return a.emit()


def disassemble(prog: Program) -> str:
    lines = []
    names = {v: k for k, v in prog.labels.items()}
    for addr, ins in prog.instructions().items():
        if addr in names:
            lines.append(f"{names[addr]}:")
        lines.append(f"  {addr:#08x}  {ins}")
    return "\n".join(lines)


__all__ = ["assemble", "disassemble", "AssemblyError"]

"""Program images and the ``MCT1`` binary container."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

from .isa import CODE_BASE, STATIC_BASE, decode_all, Instruction

MAGIC = b"MCT1"
VERSION = 1

SEC_CODE = 1
SEC_STATIC_DATA = 2
SEC_BSS = 3
SEC_SYMBOLS = 4
SEC_INSTRUMENT = 16
SEC_DISPATCH = 17
SEC_STATIC_SECRETS = 18
SEC_METADATA = 19
SEC_DATA_AREA = 20

_HEADER = struct.Struct("<4sHHQ")
_ENTRY = struct.Struct("<IQQQ")


class ContainerError(ValueError):
    pass


@dataclass
class Program:
    code: bytes
    entry: int
    code_base: int = CODE_BASE
    static_data: list[tuple[int, bytes]] = field(default_factory=list)
    static_size: int = 0
    functions: dict[str, int] = field(default_factory=dict)
    labels: dict[str, int] = field(default_factory=dict)

    @property
    def code_end(self) -> int:
        return self.code_base + len(self.code)

    def instructions(self) -> dict[int, Instruction]:
        return decode_all(self.code, self.code_base)

    def program_hash(self) -> str:
        h = hashlib.sha256()
        h.update(struct.pack("<QQQ", self.code_base, self.entry, self.static_size))
        h.update(self.code)
        for addr, data in sorted(self.static_data):
            h.update(struct.pack("<QI", addr, len(data)))
            h.update(data)
        return h.hexdigest()

    def function_entries(self) -> set[int]:
        return set(self.functions.values())

    def static_range(self) -> tuple[int, int]:
        return STATIC_BASE, STATIC_BASE + self.static_size


@dataclass
class HardenedProgram:
    """Patched original code plus the instrument section and its tables."""

    program: Program
    instrument: bytes
    instrument_base: int
    init_entry: int
    dispatch: dict[int, int] = field(default_factory=dict)
    static_secrets: list[tuple[int, int]] = field(default_factory=list)
    data_area: tuple[int, int] = (0, 0)
    meta: dict = field(default_factory=dict)

    @property
    def entry(self) -> int:
        return self.init_entry

    def program_hash(self) -> str:
        return self.meta.get("program_hash", "")

    def site_offsets(self) -> dict[int, int]:
        """Marker id -> original instruction address."""
        return {int(k): v for k, v in self.meta.get("sites", {}).items()}


def _section(kind: int, addr: int, payload: bytes, size: int | None = None):
    return kind, addr, len(payload) if size is None else size, payload


def dump(obj: Program | HardenedProgram) -> bytes:
    hp = obj if isinstance(obj, HardenedProgram) else None
    prog = hp.program if hp else obj
    secs = [_section(SEC_CODE, prog.code_base, prog.code)]
    recs = b"".join(struct.pack("<QI", a, len(d)) + d for a, d in prog.static_data)
    secs.append(_section(SEC_STATIC_DATA, STATIC_BASE, recs))
    secs.append(_section(SEC_BSS, STATIC_BASE, b"", prog.static_size))
    sym = json.dumps({"functions": prog.functions, "labels": prog.labels,
                      "entry": prog.entry}, sort_keys=True).encode()
    secs.append(_section(SEC_SYMBOLS, 0, sym))
    if hp:
        secs.append(_section(SEC_INSTRUMENT, hp.instrument_base, hp.instrument))
        disp = b"".join(struct.pack("<QQ", k, v) for k, v in sorted(hp.dispatch.items()))
        secs.append(_section(SEC_DISPATCH, 0, disp))
        ss = b"".join(struct.pack("<QQ", a, n) for a, n in hp.static_secrets)
        secs.append(_section(SEC_STATIC_SECRETS, 0, ss))
        secs.append(_section(SEC_DATA_AREA, hp.data_area[0], b"", hp.data_area[1]))
        secs.append(_section(SEC_METADATA, 0, json.dumps(hp.meta, sort_keys=True).encode()))
    entry = hp.init_entry if hp else prog.entry
    out = bytearray(_HEADER.pack(MAGIC, VERSION, len(secs), entry))
    offset = _HEADER.size + _ENTRY.size * len(secs)
    table, payloads = bytearray(), bytearray()
    for kind, addr, size, payload in secs:
        table += _ENTRY.pack(kind, addr, size, offset + len(payloads))
        payloads += payload
    return bytes(out + table + payloads)


def load(raw: bytes) -> Program | HardenedProgram:
    if len(raw) < _HEADER.size or raw[:4] != MAGIC:
        raise ContainerError("not an MCT1 container")
    _, version, nsec, entry = _HEADER.unpack_from(raw, 0)
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    secs = {}
    for i in range(nsec):
        kind, addr, size, off = _ENTRY.unpack_from(raw, _HEADER.size + i * _ENTRY.size)
        plen = 0 if kind in (SEC_BSS, SEC_DATA_AREA) else size
        secs[kind] = (addr, size, raw[off:off + plen])
    if SEC_CODE not in secs:
        raise ContainerError("missing code section")
    code_base, _, code = secs[SEC_CODE]
    statics = []
    _, _, recs = secs.get(SEC_STATIC_DATA, (0, 0, b""))
    pos = 0
    while pos < len(recs):
        a, n = struct.unpack_from("<QI", recs, pos)
        pos += 12
        statics.append((a, bytes(recs[pos:pos + n])))
        pos += n
    sym = json.loads(secs[SEC_SYMBOLS][2]) if SEC_SYMBOLS in secs else {}
    prog = Program(
        code=bytes(code), entry=sym.get("entry", entry), code_base=code_base,
        static_data=statics, static_size=secs.get(SEC_BSS, (0, 0, b""))[1],
        functions=sym.get("functions", {}), labels=sym.get("labels", {}),
    )
    if SEC_INSTRUMENT not in secs:
        return prog
    ibase, _, icode = secs[SEC_INSTRUMENT]
    disp = secs[SEC_DISPATCH][2]
    dispatch = dict(struct.unpack_from("<QQ", disp, i) for i in range(0, len(disp), 16))
    ss = secs[SEC_STATIC_SECRETS][2]
    secrets = [struct.unpack_from("<QQ", ss, i) for i in range(0, len(ss), 16)]
    da_addr, da_size, _ = secs[SEC_DATA_AREA]
    meta = json.loads(secs[SEC_METADATA][2])
    return HardenedProgram(prog, bytes(icode), ibase, entry, dispatch,
                           [tuple(x) for x in secrets], (da_addr, da_size), meta)

"""Deterministic memory-encryption attacker.

The attacker sees one 16-byte ciphertext tag per written block and the
control flow of the guest (calls, returns and marker instructions, as a
single-stepping hypervisor would).  The cipher is modelled as a keyed
128-bit digest: equal (address, content) pairs give equal tags and the
address acts as the tweak.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

from .isa import Op
from .vm import Machine

BLOCK = 16
MAGIC = b"CTR1"
_HEAD = struct.Struct("<4sH32s32sQQ")
_OBS = struct.Struct("<QQ16s")
_CTRL = struct.Struct("<QBQ")
_KINDS = ["call", "ret", "markb", "marke"]


class AttackError(ValueError):
    pass


class TraceFormatError(ValueError):
    pass


class EncryptionOracle:
    """Tag of a 16-byte block under a fixed boot seed."""

    def __init__(self, boot_seed: bytes | int):
        if isinstance(boot_seed, int):
            boot_seed = boot_seed.to_bytes(16, "little")
        if len(boot_seed) != 16:
            raise ValueError("boot seed must be 128 bits")
        self.seed = bytes(boot_seed)

    def tag(self, addr: int, content: bytes) -> bytes:
        if addr % BLOCK or len(content) != BLOCK:
            raise ValueError("tags are defined on aligned 16-byte blocks")
        h = hashlib.blake2b(struct.pack("<Q", addr) + content, key=self.seed, digest_size=16)
        return h.digest()

    def commitment(self) -> bytes:
        return hashlib.sha256(self.seed).digest()


@dataclass(frozen=True)
class Observation:
    step: int
    addr: int
    tag: bytes


@dataclass(frozen=True)
class ControlEvent:
    step: int
    kind: str
    value: int


@dataclass
class CiphertextTrace:
    observations: list[Observation] = field(default_factory=list)
    control: list[ControlEvent] = field(default_factory=list)
    program_hash: str = ""
    seed_commitment: bytes = b"\0" * 32

    def of_block(self, addr: int) -> list[Observation]:
        return [o for o in self.observations if o.addr == addr]

    def blocks(self) -> set[int]:
        return {o.addr for o in self.observations}

    # -- file format ------------------------------------------------------
    def dumps(self) -> bytes:
        ph = bytes.fromhex(self.program_hash) if self.program_hash else b"\0" * 32
        out = [_HEAD.pack(MAGIC, 1, self.seed_commitment, ph, len(self.observations), len(self.control))]
        out += [_OBS.pack(o.step, o.addr, o.tag) for o in self.observations]
        out += [_CTRL.pack(c.step, _KINDS.index(c.kind), c.value) for c in self.control]
        return b"".join(out)

    @classmethod
    def loads(cls, blob: bytes) -> "CiphertextTrace":
        if len(blob) < _HEAD.size:
            raise TraceFormatError("truncated trace header")
        magic, ver, commit, ph, n_obs, n_ctrl = _HEAD.unpack_from(blob)
        if magic != MAGIC or ver != 1:
            raise TraceFormatError("not a ciphertext trace")
        need = _HEAD.size + n_obs * _OBS.size + n_ctrl * _CTRL.size
        if len(blob) != need:
            raise TraceFormatError(f"trace length {len(blob)} does not match header ({need})")
        off = _HEAD.size
        obs = []
        for _ in range(n_obs):
            step, addr, tag = _OBS.unpack_from(blob, off)
            obs.append(Observation(step, addr, tag))
            off += _OBS.size
        ctrl = []
        for _ in range(n_ctrl):
            step, kind, value = _CTRL.unpack_from(blob, off)
            if kind >= len(_KINDS):
                raise TraceFormatError(f"unknown control record kind {kind}")
            ctrl.append(ControlEvent(step, _KINDS[kind], value))
            off += _CTRL.size
        program_hash = "" if ph == b"\0" * 32 else ph.hex()
        return cls(obs, ctrl, program_hash, commit)


class Observer:
    """Machine hook and write listener producing a :class:`CiphertextTrace`.

    ``granularity="marker"`` models a weaker attacker who only gets to look
    at memory when a marker instruction runs.  ``keep_contents`` stores the
    plaintext block contents alongside (for the evaluation harness only;
    attack functions never receive them).
    """

    def __init__(self, oracle: EncryptionOracle, granularity: str = "write",
                 keep_contents: bool = False):
        if granularity not in ("write", "marker"):
            raise ValueError(f"unknown granularity {granularity!r}")
        self.oracle = oracle
        self.granularity = granularity
        self.trace = CiphertextTrace(seed_commitment=oracle.commitment())
        self.contents: list[bytes] | None = [] if keep_contents else None
        # writing pc per observation; harness bookkeeping, never part of the trace
        self.pcs: list[int] = []
        self._dirty: dict[int, None] = {}

    def _record(self, machine: Machine, step: int, block: int, pc: int = -1) -> None:
        self.pcs.append(pc)
        content = machine.mem.read(block, BLOCK)
        self.trace.observations.append(Observation(step, block, self.oracle.tag(block, content)))
        if self.contents is not None:
            self.contents.append(content)

    def on_write(self, machine: Machine, pc: int, addr: int, n: int) -> None:
        if n <= 0:
            return
        first, last = addr & ~(BLOCK - 1), (addr + n - 1) & ~(BLOCK - 1)
        for block in range(first, last + BLOCK, BLOCK):
            if self.granularity == "write":
                self._record(machine, machine.instret - 1, block, pc)
            else:
                self._dirty[block] = None

    def step(self, machine, pc, ins, ea, aux, sp_before) -> None:
        op = ins.op
        s = machine.instret - 1
        if op is Op.CALL:
            self.trace.control.append(ControlEvent(s, "call", aux))
        elif op is Op.RET:
            self.trace.control.append(ControlEvent(s, "ret", machine.pc))
        elif op is Op.MARKB or op is Op.MARKE:
            self.trace.control.append(ControlEvent(s, "markb" if op is Op.MARKB else "marke", ins.imm))
            if self._dirty:
                for block in self._dirty:
                    self._record(machine, s, block)
                self._dirty.clear()


def observe(prog, inputs, oracle: EncryptionOracle, *, granularity: str = "write", seed=None,
            keep_contents: bool = False, fuel: int | None = None, hooks=(), entropy=None):
    """Run ``prog`` under the attacker's eye.

    Returns ``(trace, machine_state)``, plus the plaintext of every
    observed block as a third element with ``keep_contents``.
    """
    obs = Observer(oracle, granularity, keep_contents)
    kw = {"seed": seed, "record": False, "entropy": entropy}
    if fuel is not None:
        kw["fuel"] = fuel
    m = Machine(prog, inputs, hooks=[obs, *hooks], write_listeners=[obs.on_write], **kw)
    state, _ = m.run()
    h = prog.program_hash() if callable(getattr(prog, "program_hash", None)) else ""
    obs.trace.program_hash = h
    if keep_contents:
        return obs.trace, state, obs.contents
    return obs.trace, state


# --------------------------------------------------------------------------
# attacks

def collision_attack(trace: CiphertextTrace, block: int) -> list[bool]:
    """Entry ``i`` tells whether write ``i + 1`` changed the block's tag."""
    tags = [o.tag for o in trace.observations if o.addr == block]
    if not tags:
        raise AttackError(f"block {block:#x} was never observed")
    return [tags[i] != tags[i - 1] for i in range(1, len(tags))]


def call_windows(trace: CiphertextTrace, entry: int) -> list[tuple[int, int]]:
    """(call step, matching return step) for every call to ``entry``."""
    out = []
    depth_stack: list[int | None] = []
    for ev in trace.control:
        if ev.kind == "call":
            depth_stack.append(ev.step if ev.value == entry else None)
        elif ev.kind == "ret" and depth_stack:
            start = depth_stack.pop()
            if start is not None:
                out.append((start, ev.step))
    return out


def infer_cswap_bits(trace: CiphertextTrace, block: int, swap_entry: int) -> list[int]:
    """Bit ``i`` is 1 iff the block's tag differs across swap call ``i``."""
    windows = call_windows(trace, swap_entry)
    if not windows:
        raise AttackError(f"no calls to {swap_entry:#x} in the trace")
    obs = [o for o in trace.observations if o.addr == block]
    bits = []
    j = 0
    last: bytes | None = None
    for start, end in windows:
        while j < len(obs) and obs[j].step < start:
            last = obs[j].tag
            j += 1
        before = last
        while j < len(obs) and obs[j].step <= end:
            last = obs[j].tag
            j += 1
        if before is None:
            raise AttackError(f"block {block:#x} unobserved before swap at step {start}")
        bits.append(int(last != before))
    return bits


def build_dictionary(trace: CiphertextTrace, known: dict[int, bytes]) -> dict[tuple[int, bytes], bytes]:
    """Known-plaintext phase: ``known`` maps observation index to the block
    content the attacker knows was written there."""
    out = {}
    for i, content in known.items():
        o = trace.observations[i]
        out[(o.addr, o.tag)] = content
    return out


def dictionary_attack(trace: CiphertextTrace, dictionary: dict[tuple[int, bytes], bytes],
                      start: int = 0) -> dict[int, bytes]:
    """Guesses from ``start`` on: observation index -> recovered plaintext."""
    if not dictionary:
        raise AttackError("empty dictionary")
    return {i: dictionary[(o.addr, o.tag)] for i, o in enumerate(trace.observations)
            if i >= start and (o.addr, o.tag) in dictionary}


def infer_nonzero_plaintext(trace: CiphertextTrace, block: int, zero_tag: bytes,
                            nonzero_masks: bool) -> list[int]:
    """Steps at which the attacker concludes a secret write held P != 0.

    If the scheme guarantees nonzero masks on secret bytes, a data block
    that falls back to its known all-zero ciphertext must have received
    ``P ^ M = 0`` with ``M != 0``, hence ``P != 0``.  Without that guarantee
    the same observation says nothing.
    """
    if not nonzero_masks:
        return []
    obs = [o for o in trace.observations if o.addr == block]
    return [o.step for o in obs[1:] if o.tag == zero_tag]


__all__ = ["EncryptionOracle", "Observation", "ControlEvent", "CiphertextTrace", "Observer",
           "observe", "collision_attack", "call_windows", "infer_cswap_bits", "build_dictionary",
           "dictionary_attack", "infer_nonzero_plaintext", "AttackError", "TraceFormatError", "BLOCK"]

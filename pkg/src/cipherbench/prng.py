"""Mask generators: XorShift128+, one-round AES and OS randomness.

The Python generators here are the reference behaviour; the rewriter emits
MiniCT code that computes the same sequences inside the guest.
"""

from __future__ import annotations

import enum
import os
from dataclasses import dataclass

MASK64 = (1 << 64) - 1


class PrngKind(str, enum.Enum):
    XS128P = "xs128p"
    AESROUND = "aesround"
    SECURE = "secure"


# --- AES round ---------------------------------------------------------------

SBOX = bytes.fromhex(
    "637c777bf26b6fc53001672bfed7ab76ca82c97dfa5947f0add4a2af9ca472c0"
    "b7fd9326363ff7cc34a5e5f171d8311504c723c31896059a071280e2eb27b275"
    "09832c1a1b6e5aa0523bd6b329e32f8453d100ed20fcb15b6acbbe394a4c58cf"
    "d0efaafb434d338545f9027f503c9fa851a3408f929d38f5bcb6da2110fff3d2"
    "cd0c13ec5f974417c4a77e3d645d197360814fdc222a908846eeb814de5e0bdb"
    "e0323a0a4906245cc2d3ac629195e479e7c8376d8dd54ea96c56f4ea657aae08"
    "ba78252e1ca6b4c6e8dd741f4bbd8b8a703eb5664803f60e613557b986c11d9e"
    "e1f8981169d98e949b1e87e9ce5528df8ca1890dbfe6426841992d0fb054bb16"
)


def _xtime(b: int) -> int:
    b <<= 1
    return (b ^ 0x1B) & 0xFF if b & 0x100 else b


def aes_round(state: bytes, key: bytes) -> bytes:
    """One full AES encryption round (the ``aesenc`` step).

    SubBytes, ShiftRows, MixColumns, then AddRoundKey; the 16 bytes are in
    the usual column-major order.
    """
    s = [SBOX[b] for b in state]
    s = [s[(i + 4 * (i % 4)) % 16] for i in range(16)]
    out = bytearray(16)
    for c in range(4):
        a0, a1, a2, a3 = s[4 * c:4 * c + 4]
        t = a0 ^ a1 ^ a2 ^ a3
        out[4 * c + 0] = a0 ^ t ^ _xtime(a0 ^ a1)
        out[4 * c + 1] = a1 ^ t ^ _xtime(a1 ^ a2)
        out[4 * c + 2] = a2 ^ t ^ _xtime(a2 ^ a3)
        out[4 * c + 3] = a3 ^ t ^ _xtime(a3 ^ a0)
    return bytes(o ^ k for o, k in zip(out, key))


# --- generators --------------------------------------------------------------

class ZeroSeedError(ValueError):
    pass


@dataclass
class XorShift128Plus:
    s0: int
    s1: int

    def __post_init__(self):
        self.s0 &= MASK64
        self.s1 &= MASK64
        if self.s0 == 0 and self.s1 == 0:
            raise ZeroSeedError("xorshift128+ state must not be all zero")

    def next64(self) -> int:
        s1, s0 = self.s0, self.s1
        self.s0 = s0
        s1 ^= (s1 << 23) & MASK64
        s1 ^= s1 >> 17
        s1 ^= s0 ^ (s0 >> 26)
        self.s1 = s1
        return (s1 + s0) & MASK64


@dataclass
class AesRoundPrng:
    state: bytes
    key: bytes

    def next64(self) -> int:
        self.state = aes_round(self.state, self.key)
        return int.from_bytes(self.state[:8], "little")


class SecurePrng:
    def __init__(self, source=os.urandom):
        self.source = source

    def next64(self) -> int:
        return int.from_bytes(self.source(8), "little")


def prng_next(state, width: int) -> tuple[int, object]:
    """Draw a ``width``-bit mask; the state object is advanced in place."""
    if width not in (8, 16, 32, 64):
        raise ValueError(f"unsupported mask width {width}")
    return state.next64() & ((1 << width) - 1), state


def make_prng(kind: PrngKind | str, entropy=os.urandom):
    kind = PrngKind(kind)
    if kind is PrngKind.SECURE:
        return SecurePrng(entropy)
    if kind is PrngKind.AESROUND:
        return AesRoundPrng(entropy(16), entropy(16))
    while True:
        s0 = int.from_bytes(entropy(8), "little")
        s1 = int.from_bytes(entropy(8), "little")
        if s0 or s1:
            return XorShift128Plus(s0, s1)

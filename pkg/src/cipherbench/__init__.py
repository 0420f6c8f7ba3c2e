"""cipherbench: deterministic-memory-encryption hardening on the MiniCT toy ISA."""

__version__ = "0.1.0"

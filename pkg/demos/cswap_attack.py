"""Recover cswap decision bits from a ciphertext trace, then try again on
each hardened variant.

    python3 demos/cswap_attack.py [--bits 64] [--seed 1]
"""
import argparse
import random

from cipherbench.analysis import analyze
from cipherbench.attack import EncryptionOracle, infer_cswap_bits, observe
from cipherbench.corpus import TARGETS, cswap_bits_inputs
from cipherbench.rewriter import instrument


def accuracy(prog, target, bits: int, nbits: int, rng: random.Random) -> float:
    inputs = cswap_bits_inputs(bits, nbits, rng)
    trace, _ = observe(prog, inputs, EncryptionOracle(rng.getrandbits(128)), seed=rng.getrandbits(32))
    guess = infer_cswap_bits(trace, target.params["p"], target.program.functions["cswap"])
    return sum(g == (bits >> i & 1) for i, g in enumerate(guess)) / nbits


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--bits", type=int, default=64)
    ap.add_argument("--seed", type=int, default=1)
    args = ap.parse_args()
    t = TARGETS["cswap_bits"]
    rng = random.Random(args.seed)
    bits = rng.getrandbits(args.bits)
    print(f"{'program':<22} accuracy")
    print(f"{'unhardened':<22} {accuracy(t.program, t, bits, args.bits, rng):.3f}")
    report = analyze(t.program, [t.inputs(s) for s in range(4)], t.sources)
    for variant in ("base", "fast", "enhanced"):
        hp = instrument(t.program, report, variant, "xs128p")
        print(f"{variant + '/xs128p':<22} {accuracy(hp, t, bits, args.bits, rng):.3f}")


if __name__ == "__main__":
    main()

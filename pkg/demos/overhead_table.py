"""Instruction-count overhead per variant and PRNG, plus Enhanced collision
counts, over the whole corpus."""
from cipherbench.analysis import analyze
from cipherbench.attack import EncryptionOracle
from cipherbench.corpus import TARGETS
from cipherbench.evaluation import align_traces, count_collisions, measure_overhead, run_hardened, run_original
from cipherbench.rewriter import instrument

VARIANTS = ("base", "fast", "enhanced")
PRNGS = ("xs128p", "aesround", "secure")

targets = [TARGETS[n] for n in sorted(TARGETS)]
_, means = measure_overhead(targets, VARIANTS, PRNGS, trials=3)
print("geometric-mean overhead factor (executed instructions)")
print(f"{'':<10}" + "".join(f"{p:>10}" for p in PRNGS))
for v in VARIANTS:
    print(f"{v:<10}" + "".join(f"{means[(v, p)]:>10.2f}" for p in PRNGS))

print("\ncollisions in 5 runs per target (xs128p)")
print(f"{'target':<12}" + "".join(f"{v:>10}" for v in VARIANTS))
for t in targets:
    rep = analyze(t.program, [t.inputs(s) for s in range(4)], t.sources)
    row = []
    for v in VARIANTS:
        hp = instrument(t.program, rep, v, "xs128p")
        sites = set(hp.site_offsets().values())
        n = 0
        for s in range(5):
            x = t.inputs(100 + s)
            o = run_original(t.program, x, t.sources, sites)
            n += count_collisions(align_traces(o, run_hardened(hp, x, EncryptionOracle(s), seed=s).trace,
                                               hp.site_offsets())).total
        row.append(n)
    print(f"{t.name:<12}" + "".join(f"{n:>10}" for n in row))

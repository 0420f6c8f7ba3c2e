"""Command-line front end.

Exit codes:

====  ==========================================================
code  meaning
====  ==========================================================
0     success
2     analysis aborted: a memory address depended on secret data
3     trace anomaly during analysis (or the analysed run faulted)
4     rewriting aborted: unsupported instruction or site
5     program hash mismatch between program and report
6     guest fault while running a program
7     malformed trace / alignment failure
8     attack could not run on the given trace
64    usage error (bad arguments, missing files)
====  ==========================================================
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

from . import program as container
from .analysis import AnalysisReport, analyze
from .asm import AssemblyError, assemble
from .attack import (
    AttackError, CiphertextTrace, EncryptionOracle, TraceFormatError, collision_attack,
    infer_cswap_bits, observe,
)
from .campaign import CampaignConfig, EntrySpec, run_campaign
from .corpus import TARGETS, get_target
from .emitter import RewriteError
from .evaluation import AlignmentError
from .objects import AnalysisError
from .program import ContainerError, HardenedProgram, Program
from .rewriter import instrument
from .taint import HashMismatch, SourceSpecError, TaintedAddressError, TaintSources
from .vm import VMError, execute

log = logging.getLogger("cipherbench")

EXIT_OK, EXIT_TAINTED, EXIT_ANOMALY, EXIT_REWRITE, EXIT_HASH = 0, 2, 3, 4, 5
EXIT_FAULT, EXIT_TRACE, EXIT_ATTACK, EXIT_USAGE = 6, 7, 8, 64


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse's default exit code 2 is taken
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------------------
# file helpers

def load_program(path: str) -> Program | HardenedProgram:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"no such program file: {path}")
    raw = p.read_bytes()
    if raw[:4] == container.MAGIC:
        return container.load(raw)
    return assemble(raw.decode())


def read_input_sets(path: str) -> tuple[list[list[bytes]], list[str]]:
    """A directory of input files is one run; a directory of directories is
    one run per subdirectory.  Files are ordered by name."""
    d = Path(path)
    if not d.is_dir():
        raise UsageError(f"no such input directory: {path}")
    subdirs = sorted(x for x in d.iterdir() if x.is_dir())
    runs = subdirs or [d]
    sets, names = [], []
    for r in runs:
        files = sorted(x for x in r.iterdir() if x.is_file())
        sets.append([f.read_bytes() for f in files])
        names = [f.name for f in files]
    return sets, names


def resolve_seed(arg: int | None) -> int:
    if arg is not None:
        return arg
    env = os.environ.get("CIPHERBENCH_SEED")
    if env is None:
        return 0
    try:
        return int(env, 0)
    except ValueError:
        raise UsageError(f"CIPHERBENCH_SEED is not an integer: {env!r}") from None


def _addr(text: str, prog: Program | None) -> int:
    try:
        return int(text, 0)
    except ValueError:
        pass
    if prog is not None:
        for table in (prog.functions, prog.labels):
            if text in table:
                return table[text]
    raise UsageError(f"cannot resolve address {text!r}")


# --------------------------------------------------------------------------
# commands

def cmd_analyze(a) -> int:
    prog = load_program(a.program)
    if isinstance(prog, HardenedProgram):
        raise UsageError("analyze expects an uninstrumented program")
    sets, names = read_input_sets(a.inputs)
    if a.runs < 1:
        raise UsageError("--runs must be at least 1")
    sources = TaintSources.parse(Path(a.sources).read_text()) if a.sources else TaintSources()
    # the machine is deterministic, so repeating an input set adds nothing
    runs = sets[:a.runs]
    report = analyze(prog, runs, sources, input_names=names)
    Path(a.output).write_text(report.dumps())
    gaps = report.coverage_gaps
    print(f"analyzed {len(runs)} run(s); {len(report.instrumented_offsets())} instrumented sites; "
          f"{len(gaps)} coverage gap(s)")
    for g in gaps:
        print(f"  gap {g[0]:#x}..{g[1]:#x}" if isinstance(g, (tuple, list)) else f"  gap {g}")
    return EXIT_OK


def cmd_instrument(a) -> int:
    prog = load_program(a.program)
    report = AnalysisReport.loads(Path(a.report).read_text())
    hp = instrument(prog, report, a.variant, a.prng)
    hp.meta["seed"] = resolve_seed(a.seed)
    Path(a.output).write_bytes(container.dump(hp))
    print(f"{a.variant}/{a.prng}: {len(hp.site_offsets())} sites, trampolines {hp.meta['trampolines']}")
    return EXIT_OK


class _CommittedEntropy:
    """OS randomness for the SECURE PRNG, with a running hash for audit."""

    def __init__(self):
        self.h = hashlib.sha256()

    def __call__(self, n: int) -> bytes:
        b = os.urandom(n)
        self.h.update(b)
        return b


def cmd_run(a) -> int:
    prog = load_program(a.program)
    sets, _ = read_input_sets(a.inputs) if a.inputs else ([[]], [])
    inputs = sets[0]
    seed = resolve_seed(a.seed)
    kw = {"seed": seed}
    committed = None
    if isinstance(prog, HardenedProgram) and prog.meta.get("prng") == "secure":
        committed = _CommittedEntropy()
        kw = {"entropy": committed}
    summary = {}
    if a.observe:
        oracle = EncryptionOracle(resolve_seed(a.boot_seed) if a.boot_seed is not None else seed)
        trace, state = observe(prog, inputs, oracle, granularity=a.granularity, **kw)
        Path(a.observe).write_bytes(trace.dumps())
        summary["observations"] = len(trace.observations)
    else:
        state, _ = execute(prog, inputs, record=False, **kw)
    if a.output:
        Path(a.output).write_bytes(state.output)
    summary.update({"output": state.output.hex(), "instructions": state.instret, "cost": state.cost})
    if committed is not None:
        summary["entropy_commitment"] = committed.h.hexdigest()
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_attack(a) -> int:
    trace = CiphertextTrace.loads(Path(a.trace).read_bytes())
    prog = load_program(a.program) if a.program else None
    base = prog.program if isinstance(prog, HardenedProgram) else prog
    block = _addr(a.block, base)
    if a.mode == "cswap":
        if not a.swap_entry:
            raise UsageError("--swap-entry is required for the cswap attack")
        bits = infer_cswap_bits(trace, block, _addr(a.swap_entry, base))
        print("".join(map(str, bits)))
    else:
        changes = collision_attack(trace, block)
        print("".join("1" if c else "0" for c in changes))
    return EXIT_OK


def cmd_evaluate(a) -> int:
    if a.config:
        cfg = CampaignConfig.from_json(json.loads(Path(a.config).read_text()))
        if a.seed is not None or "CIPHERBENCH_SEED" in os.environ:
            cfg.seed = resolve_seed(a.seed)
    else:
        targets = a.targets or list(TARGETS)
        for t in targets:
            get_target(t)
        cfg = CampaignConfig.grid(targets, a.variants, a.prngs, a.trials, resolve_seed(a.seed),
                                  a.analysis_runs, baseline=a.baseline)
    run_campaign(cfg, a.out, jobs=a.jobs)
    index = Path(a.out) / "index.json"
    print(index)
    return EXIT_OK


def cmd_corpus(a) -> int:
    """Write a corpus target as an assembly file, a source spec and input
    directories, ready for the other commands."""
    if a.name is None:
        for t in TARGETS.values():
            print(f"{t.name:12} {t.description}")
        return EXIT_OK
    t = get_target(a.name)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{t.name}.s").write_text(t.source)
    lines = [f"input {i} secret" for i in sorted(t.sources.secret_inputs)]
    (out / "sources.txt").write_text("\n".join(lines) + "\n")
    for r in range(a.runs):
        d = out / "inputs" / f"run{r:02d}"
        d.mkdir(parents=True, exist_ok=True)
        for i, data in enumerate(t.inputs(resolve_seed(a.seed) + r)):
            (d / f"in{i:02d}.bin").write_bytes(data)
    print(out)
    return EXIT_OK


# --------------------------------------------------------------------------

VARIANTS = ["base", "fast", "enhanced"]
PRNGS = ["xs128p", "aesround", "secure"]


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cipherbench", description="Ciphertext side-channel hardening workbench")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("analyze", help="taint and structure analysis")
    s.add_argument("program")
    s.add_argument("--inputs", required=True, help="input directory (or directory of run directories)")
    s.add_argument("--sources", help="taint source spec file")
    s.add_argument("--runs", type=int, default=10)
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_analyze)

    s = sub.add_parser("instrument", help="harden a program")
    s.add_argument("program")
    s.add_argument("report")
    s.add_argument("--variant", choices=VARIANTS, default="enhanced")
    s.add_argument("--prng", choices=PRNGS, default="xs128p")
    s.add_argument("--seed", type=lambda x: int(x, 0))
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_instrument)

    s = sub.add_parser("run", help="execute a program, optionally under the attacker's eye")
    s.add_argument("program")
    s.add_argument("--inputs")
    s.add_argument("--seed", type=lambda x: int(x, 0))
    s.add_argument("--observe", metavar="TRACE", help="write a ciphertext trace file")
    s.add_argument("--boot-seed", type=lambda x: int(x, 0), help="memory-encryption key seed")
    s.add_argument("--granularity", choices=["write", "marker"], default="write")
    s.add_argument("--output", help="write guest output bytes here")
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("attack", help="run an attack on a ciphertext trace")
    s.add_argument("trace")
    s.add_argument("--mode", choices=["cswap", "collision"], default="cswap")
    s.add_argument("--block", required=True, help="block address or symbol")
    s.add_argument("--swap-entry", help="swap function address or symbol")
    s.add_argument("--program", help="program file for symbol resolution")
    s.set_defaults(func=cmd_attack)

    s = sub.add_parser("evaluate", help="campaign over targets x variants x PRNGs")
    s.add_argument("--config", help="JSON campaign config")
    s.add_argument("--targets", nargs="*")
    s.add_argument("--variants", nargs="*", choices=VARIANTS, default=VARIANTS)
    s.add_argument("--prngs", nargs="*", choices=PRNGS, default=PRNGS)
    s.add_argument("--trials", type=int, default=10)
    s.add_argument("--analysis-runs", type=int, default=10)
    s.add_argument("--baseline", action="store_true", help="include unhardened entries")
    s.add_argument("--seed", type=lambda x: int(x, 0))
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("corpus", help="list or export corpus targets")
    s.add_argument("name", nargs="?")
    s.add_argument("--out", default=".")
    s.add_argument("--runs", type=int, default=10)
    s.add_argument("--seed", type=lambda x: int(x, 0))
    s.set_defaults(func=cmd_corpus)
    return p


_EXIT_OF = [
    (UsageError, EXIT_USAGE), (SourceSpecError, EXIT_USAGE), (AssemblyError, EXIT_USAGE),
    (ContainerError, EXIT_USAGE), (KeyError, EXIT_USAGE), (FileNotFoundError, EXIT_USAGE),
    (TaintedAddressError, EXIT_TAINTED), (AnalysisError, EXIT_ANOMALY),
    (HashMismatch, EXIT_HASH), (RewriteError, EXIT_REWRITE),
    (TraceFormatError, EXIT_TRACE), (AlignmentError, EXIT_TRACE), (AttackError, EXIT_ATTACK),
]


def main(argv=None) -> int:
    parser = build_parser()
    a = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return a.func(a)
    except VMError as exc:
        print(f"cipherbench: guest fault: {exc}", file=sys.stderr)
        return EXIT_ANOMALY if a.command == "analyze" else EXIT_FAULT
    except tuple(e for e, _ in _EXIT_OF) as exc:
        code = next(c for e, c in _EXIT_OF if isinstance(exc, e))
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"cipherbench: {msg}", file=sys.stderr)
        if isinstance(exc, RewriteError) and getattr(exc, "offset", None) is not None:
            print(f"cipherbench: unsupported site {exc.offset:#x}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())

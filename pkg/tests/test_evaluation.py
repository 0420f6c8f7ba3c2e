import json
import math

import pytest
from hypothesis import given, strategies as st

from cipherbench.analysis import analyze
from cipherbench.attack import EncryptionOracle
from cipherbench.campaign import CampaignConfig, EntrySpec, run_campaign, run_entry
from cipherbench.corpus import TARGETS
from cipherbench.evaluation import (
    AlignmentError, CollisionReport, align_traces, count_collisions, geometric_mean, run_hardened,
    run_original,
)
from cipherbench.asm import assemble
from cipherbench.isa import MASK_DISTANCE, Op
from cipherbench.rewriter import instrument
from cipherbench.taint import TaintSources

ORACLE = EncryptionOracle(7)


def _pair(name, variant="base", seed=5, report=None, **opts):
    t = TARGETS[name]
    rep = report or analyze(t.program, [t.inputs(s) for s in range(3)], t.sources)
    hp = instrument(t.program, rep, variant, "xs128p", **opts)
    x = t.inputs(seed)
    o = run_original(t.program, x, t.sources, set(hp.site_offsets().values()))
    h = run_hardened(hp, x, ORACLE, seed=seed, orig=o)
    return t, hp, o, h, align_traces(o, h.trace, hp.site_offsets())


def test_public_only_program_reports_nothing():
    t = TARGETS["memcpy"]
    rep = analyze(t.program, [t.inputs(0)], TaintSources())
    _, hp, o, h, pair = _pair("memcpy", report=rep)
    assert pair.entries == [] and count_collisions(pair).total == 0
    assert h.output == o.output


@pytest.mark.parametrize("variant", ["base", "fast", "enhanced"])
def test_genuine_masks_align_and_decode(variant):
    _, _, o, h, pair = _pair("cswap_bits", variant)
    assert h.consistency_failures == []
    assert h.output == o.output
    assert pair.secret_writes()


def test_forced_mask_collides_only_at_forced_sites():
    t = TARGETS["cswap_bits"]
    rep = analyze(t.program, [t.inputs(s) for s in range(3)], t.sources)
    hp = instrument(t.program, rep, "base", "xs128p")
    p = t.params["p"]
    o = run_original(t.program, t.inputs(5), t.sources, set(hp.site_offsets().values()))
    # every store site that writes the first 16-byte block of p (setup and both swap limbs)
    forced = {w.pc for ws in o.writes.values() for w in ws if p <= w.addr < p + 16 and w.secret}
    assert len(forced) >= 2
    _, _, _, h, pair = _pair("cswap_bits", report=rep, fixed_mask={pc: 0x5A5A for pc in forced})
    rep_c = count_collisions(pair)
    assert h.consistency_failures == []
    assert rep_c.total > 0
    # the setup store writes the block once, so only the swap limbs repeat
    assert set(rep_c.by_site) <= forced


def test_mismatched_inputs_fail_alignment():
    t = TARGETS["ladder"]
    rep = analyze(t.program, [t.inputs(s) for s in range(3)], t.sources)
    hp = instrument(t.program, rep, "base", "xs128p")
    a = t.inputs(1)
    b = [a[0], (3).to_bytes(8, "little")]
    o = run_original(t.program, a, t.sources, set(hp.site_offsets().values()))
    h = run_hardened(hp, b, ORACLE, seed=1)
    with pytest.raises(AlignmentError):
        align_traces(o, h.trace, hp.site_offsets())


COPY4 = """
.static src, 32
.static pad, 32
.static dst, 32
  mov r1, src
  mov r2, 0
  input r1, r2
  mov r1, dst
  mov r2, src
  mov r3, 4
  copyn
  halt
"""


def test_copyn_span_carries_every_word():
    prog = assemble(COPY4)
    src = TaintSources({0})
    rep = analyze(prog, [[bytes(range(32))]], src)
    hp = instrument(prog, rep, "base", "xs128p")
    x = [bytes(range(100, 132))]
    o = run_original(prog, x, src, set(hp.site_offsets().values()))
    h = run_hardened(hp, x, ORACLE, seed=1, orig=o)
    pair = align_traces(o, h.trace, hp.site_offsets())
    assert h.consistency_failures == []
    (copy_pc,) = [a for a, i in prog.instructions().items() if i.op is Op.COPYN]
    entries = [e for e in pair.entries if e.site == copy_pc]
    assert len(entries) == 4 and len({e.span for e in entries}) == 1
    dst = prog.labels["dst"]
    assert [e.original.addr for e in entries] == [dst, dst + 8, dst + 16, dst + 24]
    assert all(e.original.secret for e in entries)
    # data and mask planes of both destination blocks show up inside the span
    addrs = {h.trace.observations[k].addr for k in entries[0].hardened}
    assert {dst, dst + 16, dst + MASK_DISTANCE, dst + 16 + MASK_DISTANCE} <= addrs


def test_report_merge_keeps_earliest_index():
    a = CollisionReport(first_index={1: 5, 2: 3})
    b = CollisionReport(first_index={1: 2, 3: 9})
    a.by_address[16] += 1
    b.by_address[16] += 2
    m = a.merge(b)
    assert m.first_index == {1: 2, 2: 3, 3: 9} and m.total == 3


@given(st.lists(st.floats(0.01, 100), min_size=1, max_size=20))
def test_geometric_mean_matches_log_mean(xs):
    ref = math.exp(sum(math.log(x) for x in xs) / len(xs))
    assert math.isclose(geometric_mean(xs), ref, rel_tol=1e-9)


def test_entry_reports_errors_instead_of_raising():
    r = run_entry(EntrySpec("cswap", "base", "xs128p", trials=1), seed=0, analysis_runs=2)
    assert r["error"] is None and r["output_mismatches"] == 0


def test_campaign_bundle_is_deterministic(tmp_path):
    cfg = CampaignConfig.grid(["cswap", "bytefill"], ["base", "enhanced"], ["xs128p"], trials=2,
                              seed=3, analysis_runs=2, baseline=True)
    run_campaign(cfg, tmp_path / "a", jobs=1)
    run_campaign(cfg, tmp_path / "b", jobs=2)
    files_a = sorted(p.name for p in (tmp_path / "a").iterdir())
    files_b = sorted(p.name for p in (tmp_path / "b").iterdir())
    assert files_a == files_b and "index.json" in files_a
    for name in files_a:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
    index = json.loads((tmp_path / "a" / "index.json").read_text())
    assert index["seed"] == 3 and len(index["entries"]) == len(cfg.entries)

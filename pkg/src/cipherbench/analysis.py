"""Dynamic analysis front end: runs, merges and serialises the results."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .objects import (
    AllocationSite, FrameLayout, StaticObject, _settle_tracker, track_objects,
)
from .program import Program
from .structure import BasicBlock, BasicBlockTable, LivenessTable, compute_liveness, find_basic_blocks
from .taint import (
    HashMismatch, InstructionSecrecy, SecrecyClass, TaintSources, classify_accesses,
    merge_classes, run_taint,
)
from .vm import DEFAULT_FUEL

SCHEMA_VERSION = 1


class ReportError(ValueError):
    pass


@dataclass
class AnalysisReport:
    program_hash: str
    secrecy: dict[int, InstructionSecrecy]
    statics: list[StaticObject]
    sites: dict[tuple[int, ...], AllocationSite]
    tracked_calls: dict[int, bool]
    frames: dict[int, FrameLayout]
    blocks: BasicBlockTable
    liveness: LivenessTable
    runs: int = 1
    warnings: list[str] = field(default_factory=list)
    unattributed: list[int] = field(default_factory=list)
    # offset -> bitmask of registers that held taint on entry in some run
    reg_taint: dict[int, int] = field(default_factory=dict)

    @property
    def coverage_gaps(self):
        return self.blocks.coverage_gaps

    def class_of(self, offset: int) -> SecrecyClass:
        ent = self.secrecy.get(offset)
        return ent.cls if ent else SecrecyClass.PUBLIC_ONLY

    def instrumented_offsets(self) -> list[int]:
        return sorted(o for o, e in self.secrecy.items() if e.cls is not SecrecyClass.PUBLIC_ONLY)

    def secret_statics(self) -> list[StaticObject]:
        return [o for o in self.statics if o.secret]

    # -- merging ----------------------------------------------------------
    def merge(self, other: "AnalysisReport") -> "AnalysisReport":
        if other.program_hash != self.program_hash:
            raise HashMismatch("reports come from different programs")
        sites = {k: AllocationSite(k, v.secret, set(v.sizes)) for k, v in self.sites.items()}
        warnings = list(self.warnings) + [w for w in other.warnings if w not in self.warnings]
        for k, v in other.sites.items():
            if k in sites:
                if sites[k].secret != v.secret:
                    warnings.append(f"allocation site {list(k)} has conflicting secrecy; merged as secret")
                sites[k].secret |= v.secret
                sites[k].sizes |= v.sizes
            else:
                sites[k] = AllocationSite(k, v.secret, set(v.sizes))
        tracked = _settle_tracker(sites, warnings)
        frames = dict(self.frames)
        for k, v in other.frames.items():
            frames[k] = frames[k].merge(v) if k in frames else v
        blocks = _merge_blocks(self.blocks, other.blocks)
        return AnalysisReport(
            self.program_hash, merge_classes(self.secrecy, other.secrecy),
            _merge_statics(self.statics, other.statics), sites, tracked, frames, blocks,
            self.liveness.merge(other.liveness), self.runs + other.runs, warnings,
            sorted(set(self.unattributed) | set(other.unattributed)),
            _or_maps(self.reg_taint, other.reg_taint),
        )

    # -- serialisation ----------------------------------------------------
    def to_json(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "program_hash": self.program_hash,
            "runs": self.runs,
            "secrecy": [e.to_json() for _, e in sorted(self.secrecy.items())],
            "statics": [o.to_json() for o in self.statics],
            "sites": [s.to_json() for _, s in sorted(self.sites.items())],
            "tracked_calls": {str(k): v for k, v in sorted(self.tracked_calls.items())},
            "frames": [f.to_json() for _, f in sorted(self.frames.items())],
            "blocks": self.blocks.to_json(),
            "liveness": self.liveness.to_json(),
            "warnings": self.warnings,
            "unattributed": self.unattributed,
            "reg_taint": {str(k): v for k, v in sorted(self.reg_taint.items())},
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, d: dict) -> "AnalysisReport":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ReportError(f"unsupported report schema {d.get('schema_version')!r}")
        return cls(
            d["program_hash"],
            {e["offset"]: InstructionSecrecy.from_json(e) for e in d["secrecy"]},
            [StaticObject(o["base"], o["length"], o["secret"]) for o in d["statics"]],
            {tuple(s["call_stack"]): AllocationSite(tuple(s["call_stack"]), s["secret"], set(s["sizes"]))
             for s in d["sites"]},
            {int(k): v for k, v in d["tracked_calls"].items()},
            {f["entry"]: FrameLayout(f["entry"], f["frame_size"], set(f["secret_rel"]), f["is_tail_target"],
                              set(f.get("accessors", ())))
             for f in d["frames"]},
            BasicBlockTable.from_json(d["blocks"]),
            LivenessTable.from_json(d["liveness"]),
            d.get("runs", 1), list(d.get("warnings", [])), list(d.get("unattributed", [])),
            {int(k): v for k, v in d.get("reg_taint", {}).items()},
        )

    @classmethod
    def loads(cls, text: str) -> "AnalysisReport":
        try:
            return cls.from_json(json.loads(text))
        except (KeyError, TypeError, json.JSONDecodeError) as e:
            raise ReportError(f"malformed analysis report: {e}") from None


def _or_maps(a: dict[int, int], b: dict[int, int]) -> dict[int, int]:
    out = dict(a)
    for k, v in b.items():
        out[k] = out.get(k, 0) | v
    return out


def _merge_statics(a: list[StaticObject], b: list[StaticObject]) -> list[StaticObject]:
    out: list[StaticObject] = []
    for o in sorted(a + b, key=lambda o: o.base):
        if out and o.base <= out[-1].base + out[-1].length:
            last = out[-1]
            end = max(last.base + last.length, o.base + o.length)
            out[-1] = StaticObject(last.base, end - last.base, last.secret or o.secret)
        else:
            out.append(StaticObject(o.base, o.length, o.secret))
    return out


def _merge_blocks(a: BasicBlockTable, b: BasicBlockTable) -> BasicBlockTable:
    # Block bounds depend on the union of observed starts; re-split both
    # tables at every start either one knows about.
    starts = sorted({x.start for x in a.blocks} | {x.start for x in b.blocks})
    spans = {}
    for blk in a.blocks + b.blocks:
        for i, s in enumerate(starts):
            if blk.start <= s < blk.end:
                end = min(blk.end, starts[i + 1] if i + 1 < len(starts) else blk.end)
                prev = spans.get(s)
                succ = set(blk.successors) if end == blk.end else {end}
                if prev:
                    spans[s] = (max(prev[0], end), prev[1] | succ)
                else:
                    spans[s] = (end, succ)
    blocks = [BasicBlock(s, e, succ) for s, (e, succ) in sorted(spans.items())]
    covered = set()
    for blk in blocks:
        covered.update(range(blk.start, blk.end))
    gaps = [g for g in a.coverage_gaps + b.coverage_gaps
            if not any(x in covered for x in range(g[0], g[1]))]
    return BasicBlockTable(blocks, sorted(set(gaps)))


def analyze(prog: Program, input_sets, sources: TaintSources | None = None, *,
            input_names=None, fuel: int = DEFAULT_FUEL) -> AnalysisReport:
    """Run ``prog`` on every input set and build the joint report."""
    runs, _ = run_taint(prog, input_sets, sources, input_names=input_names, fuel=fuel)
    return report_from_runs(prog, runs)


def report_from_runs(prog: Program, runs) -> AnalysisReport:
    objs = track_objects(runs, prog)
    classes = classify_accesses(runs, objs.object_masks(runs))
    warnings = []
    for r in runs:
        warnings.extend(w for w in r.warnings if w not in warnings)
    warnings.extend(objs.heap.warnings)
    return AnalysisReport(
        prog.program_hash(), classes, objs.statics, objs.heap.sites, objs.heap.tracked_calls,
        objs.frames.layouts, find_basic_blocks(runs, prog), compute_liveness(runs, prog),
        len(runs), warnings, sorted(objs.unattributed),
        _fold_reg_taint(runs),
    )


def _fold_reg_taint(runs) -> dict[int, int]:
    out: dict[int, int] = {}
    for r in runs:
        out = _or_maps(out, r.reg_taint)
    return out


__all__ = ["AnalysisReport", "ReportError", "analyze", "report_from_runs", "SCHEMA_VERSION"]

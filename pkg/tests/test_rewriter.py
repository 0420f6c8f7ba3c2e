import random

import pytest

from cipherbench.analysis import analyze
from cipherbench.asm import assemble
from cipherbench.corpus import TARGETS
from cipherbench.emitter import RewriteError
from cipherbench.evaluation import decode_bytes
from cipherbench.isa import MASK_DISTANCE, SECRECY_DISTANCE, Op
from cipherbench.rewriter import instrument
from cipherbench.structure import BasicBlock
from cipherbench.taint import TaintSources
from cipherbench.trampoline import plan_trampolines
from cipherbench.vm import Machine, execute

VARIANTS = ["base", "fast", "enhanced"]
SECRET0 = TaintSources({0})

# Word copy laid out so the copy routine's four blocks are 7, 4, 12 and 3
# bytes long: the loop body sits at offset 11 of the routine.
FIG7 = """
.entry main
.static src, 32
.static dst, 32
.func main
main:
  mov r1, src
  mov r2, 0
  input r1, r2
  mov r1, dst
  mov r2, src
  mov r3, 4
  call memcpy
  mov r1, dst
  mov r2, 32
  output r1, r2
  halt
.func memcpy
memcpy:
  push r9
  cmp r3, 0
  jz.s done
  push r3
  pop r9
loop:
  xor r3, r3
  add r3, 1
  copyn
  sub r9, 1
  jnz.s loop
done:
  pop r9
  ret
"""


def _fig7():
    prog = assemble(FIG7)
    rep = analyze(prog, [[random.Random(s).randbytes(32)] for s in range(2)], SECRET0)
    return prog, rep


def test_plan_on_figure_shape():
    # block sizes 7, 4, 12, 3; the third block hosts the second block's hop
    base = 0x10000
    blocks = [BasicBlock(base, base + 7), BasicBlock(base + 7, base + 11),
              BasicBlock(base + 11, base + 23), BasicBlock(base + 23, base + 26)]
    plan = plan_trampolines(blocks)
    assert [(p.start - base, p.kind) for p in plan] == [(0, "jmp"), (7, "hop"), (11, "jmp"), (23, "brk")]
    assert plan[1].slot == base + 16


def test_plan_large_and_tiny_blocks():
    big = [BasicBlock(0x10000 + 8 * i, 0x10008 + 8 * i) for i in range(4)]
    assert {p.kind for p in plan_trampolines(big)} == {"jmp"}
    assert [p.kind for p in plan_trampolines([BasicBlock(0x10000, 0x10001)])] == ["brk"]


def test_fixture_reproduces_figure_plan():
    prog, rep = _fig7()
    start = prog.labels["memcpy"]
    blocks = [(b.start - start, b.size) for b in rep.blocks.blocks if b.start >= start]
    assert blocks == [(0, 7), (7, 4), (11, 12), (23, 3)]
    hp = instrument(prog, rep, "base", "xs128p")
    # the copy routine contributes one jmp, one hop and one brk (jmp count includes main)
    assert hp.meta["trampolines"]["hop"] == 1
    assert list(hp.dispatch) == [start + 23]


class _Flow:
    def __init__(self):
        self.pcs: list[int] = []

    def step(self, machine, pc, ins, ea, aux, sp_before):
        self.pcs.append(pc)


@pytest.mark.parametrize("name", ["fig7"] + sorted(TARGETS))
def test_redirected_entries_reach_instrument_section(name):
    if name == "fig7":
        prog, rep = _fig7()
        inputs = [bytes(range(32))]
    else:
        t = TARGETS[name]
        prog, inputs = t.program, t.inputs(7)
        rep = analyze(prog, [t.inputs(s) for s in range(3)], t.sources)
    hp = instrument(prog, rep, "base", "xs128p")
    relocated = {int(k): v for k, v in hp.meta["relocated"].items()}
    lo, hi = prog.code_base, prog.code_base + len(prog.code)
    flow = _Flow()
    Machine(hp, inputs, hooks=[flow], seed=3, record=False).run()
    pcs = flow.pcs
    entries = 0
    i = 0
    while i < len(pcs):
        pc = pcs[i]
        if lo <= pc < hi:
            assert pc in relocated, f"original byte {pc:#x} executed outside a trampoline"
            j = i + 1
            if hp.program.instructions().get(pc) and hp.program.instructions()[pc].op is Op.JMPS:
                assert lo <= pcs[j] < hi
                j += 1
            assert pcs[j] == relocated[pc]
            entries += 1
            i = j
        i += 1
    assert entries > 0
    assert execute(hp, inputs, seed=3)[0].output == execute(prog, inputs)[0].output


ENH = """
.static sec, 8
.static buf, 16
  mov r1, sec
  mov r2, 0
  input r1, r2
  load r3, b[sec+0]
  store b[buf+6], r3
  halt
"""


class _SpanWrites:
    def __init__(self):
        self.inside = False
        self.writes: list[tuple[int, int]] = []

    def step(self, machine, pc, ins, ea, aux, sp_before):
        if ins.op is Op.MARKB:
            self.inside = True
        elif ins.op is Op.MARKE:
            self.inside = False

    def write(self, machine, pc, addr, n):
        if self.inside:
            self.writes.append((addr, n))


def _span_bytes(src, variant, inputs):
    prog = assemble(src)
    rep = analyze(prog, [inputs], SECRET0)
    hp = instrument(prog, rep, variant, "xs128p")
    w = _SpanWrites()
    Machine(hp, inputs, hooks=[w], write_listeners=[w.write], seed=5, record=False).run()
    out = set()
    for a, n in w.writes:
        out.update(range(a, a + n))
    return prog, out


def test_enhanced_byte_write_updates_window():
    prog, touched = _span_bytes(ENH, "enhanced", [b"\x17" * 8])
    buf = prog.labels["buf"]
    for plane in (0, MASK_DISTANCE):
        assert set(range(buf + plane + 4, buf + plane + 8)) <= touched
        assert not touched & {buf + plane + 3, buf + plane + 8}


def test_base_byte_write_touches_one_byte():
    prog, touched = _span_bytes(ENH, "base", [b"\x17" * 8])
    buf = prog.labels["buf"]
    assert (buf + 6 in touched) and (buf + 4 not in touched)


def test_enhanced_rejects_two_byte_rmw():
    src = ".static sec, 8\n  mov r1, sec\n  mov r2, 0\n  input r1, r2\n  add w[sec+0], 1\n  halt\n"
    prog = assemble(src)
    rep = analyze(prog, [[bytes(8)]], SECRET0)
    with pytest.raises(RewriteError) as exc:
        instrument(prog, rep, "enhanced", "xs128p")
    assert "2-byte" in str(exc.value)
    instrument(prog, rep, "base", "xs128p")


def test_public_program_has_no_sites():
    t = TARGETS["memcpy"]
    rep = analyze(t.program, [t.inputs(0)], TaintSources())
    hp = instrument(t.program, rep, "base", "xs128p")
    assert hp.site_offsets() == {}
    assert execute(hp, t.inputs(1), seed=0)[0].output == execute(t.program, t.inputs(1))[0].output


def test_cswap_limb_stores_are_wrapped():
    t = TARGETS["cswap"]
    rep = analyze(t.program, [t.inputs(s) for s in range(2)], t.sources)
    hp = instrument(t.program, rep, "base", "xs128p")
    entry = t.program.functions["cswap"]
    stores = {a for a, i in t.program.instructions().items() if i.op is Op.STORE and a >= entry}
    assert stores <= set(hp.site_offsets().values())


class _AfterRealloc:
    def __init__(self, variant):
        self.variant = variant
        self.ptr = None
        self.decoded = None

    def step(self, machine, pc, ins, ea, aux, sp_before):
        if ins.op is Op.REALLOC and self.ptr is None:
            self.ptr = machine.regs[ins.a]
        elif ins.op is Op.MARKB and self.ptr is not None and self.decoded is None:
            self.decoded = decode_bytes(machine, self.variant, self.ptr, 32)


@pytest.mark.parametrize("variant", VARIANTS)
def test_realloc_preserves_secret_prefix(variant):
    t = TARGETS["realloc"]
    rep = analyze(t.program, [t.inputs(s) for s in range(3)], t.sources)
    hp = instrument(t.program, rep, variant, "xs128p")
    inputs = t.inputs(11)
    w = _AfterRealloc(variant)
    Machine(hp, inputs, hooks=[w], seed=2, record=False).run()
    assert w.decoded == inputs[0]


@pytest.mark.parametrize("variant", ["base", "enhanced"])
def test_secrecy_plane_is_zero_or_ff(variant):
    t = TARGETS["cswap"]
    rep = analyze(t.program, [t.inputs(s) for s in range(2)], t.sources)
    hp = instrument(t.program, rep, variant, "xs128p")
    seen: set[int] = set()

    def listen(machine, pc, addr, n):
        lo = addr - SECRECY_DISTANCE
        if 0x100000 <= lo < 0x400000:
            seen.update(machine.mem.read(addr, n))
    Machine(hp, t.inputs(3), write_listeners=[listen], seed=1, record=False).run()
    assert seen and seen <= {0, 0xFF}


RECURSE = """
.entry main
.static sec, 8
.static depth, 8
.func main
main:
  mov r1, sec
  mov r2, 0
  input r1, r2
  mov r1, depth
  mov r2, 1
  input r1, r2
  load r5, q[depth]
  call f
  halt
.func f
f:
  sub r15, 16
  cmp r5, 0
  jz leaf
  mov r3, 7
  store q[r15+8], r3
  sub r5, 1
  call f
  jmp out
leaf:
  load r3, q[sec]
  store q[r15+0], r3
out:
  add r15, 16
  ret
"""


def test_frame_gadget_reinitializes_on_reentry():
    """Every activation of the recursive function sees its own freshly
    initialised frame: secret offsets 0xff, all other frame bytes 0x00."""
    prog = assemble(RECURSE)
    ins = [[bytes(8), (d).to_bytes(8, "little")] for d in (0, 2)]
    rep = analyze(prog, ins, TaintSources({0}, {1}))
    lay = rep.frames[prog.labels["f"]]
    # 16 bytes of locals plus the outgoing return-address slot of the inner call
    assert lay.frame_size == 24 and sorted(lay.secret_rel) == list(range(-16, -8))
    hp = instrument(prog, rep, "base", "xs128p")
    frames = []

    class AtRet:
        def step(self, machine, pc, i, ea, aux, sp_before):
            if i.op is Op.RET:
                e = sp_before
                frames.append(machine.mem.read(e - 24 + SECRECY_DISTANCE, 24))

    Machine(hp, ins[1], hooks=[AtRet()], seed=1, record=False).run()
    assert len(frames) == 3
    assert all(f == bytes(8) + b"\xff" * 8 + bytes(8) for f in frames)


@pytest.mark.parametrize("name", sorted(TARGETS))
@pytest.mark.parametrize("variant", VARIANTS)
def test_hardened_output_matches(name, variant):
    t = TARGETS[name]
    rep = analyze(t.program, [t.inputs(s) for s in range(3)], t.sources)
    hp = instrument(t.program, rep, variant, "xs128p")
    for s in range(20, 23):
        assert execute(hp, t.inputs(s), seed=s)[0].output == execute(t.program, t.inputs(s))[0].output

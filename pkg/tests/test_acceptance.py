"""Release gate: one test per shipped claim, one printed verdict line each.

Every test here pins an end-to-end behavior of the toolkit at fixed seeds
and explicit tolerances, and prints a [PASS]/[FAIL] line straight to the
terminal (bypassing capture) so a plain pytest run reads as a checklist.
Budgets are wall-clock upper bounds on this corpus, generous enough for a
loaded CI worker yet tight enough to catch algorithmic regressions.
"""

import itertools
import os
import random
import time
from contextlib import contextmanager

import numpy as np
import pytest

from staleregs import covert, data, jigsaw, llm, pixel
from staleregs.cli import main
from staleregs.cnn import (CONV, FILTERS, GROUP, IMG, KSIZE, attack_adreno,
                           attack_nvidia, evaluate_adreno, random_model)
from staleregs.covert import junk_program
from staleregs.isa import parse_program, validate_program
from staleregs.kernels import load_kernel
from staleregs.pgm import encode_pgm, parse_pgm
from staleregs.sanitize import analyze, rewrite_cleanup
from staleregs.sim import GlobalBuffer, GpuConfig, Simulator

from util import random_program


@pytest.fixture
def verdict(capsys):
    @contextmanager
    def _criterion(num: int, label: str):
        ok = False
        try:
            yield
            ok = True
        finally:
            with capsys.disabled():
                print(f"[{'PASS' if ok else 'FAIL'}] {num:2d}. {label}")
    return _criterion


def scene() -> np.ndarray:
    return parse_pgm(data.fixture_bytes("scene_128.pgm"))


def digit() -> np.ndarray:
    return parse_pgm(data.fixture_bytes("digit_28.pgm"))


# ── 1. covert channel round-trip ────────────────────────────────────────────

def test_1_covert_roundtrip(verdict):
    with verdict(1, "covert channel moves 10 KiB losslessly on every "
                    "profile; zeroed allocation receives nothing"):
        message = np.random.default_rng(2026).bytes(10 * 1024)
        t0 = time.perf_counter()
        for prof in ("adreno", "agx", "nvidia"):
            got, stats = covert.transmit(message, prof, seed=1)
            assert got == message, prof
            assert stats.frames_received == stats.frames_sent
        got, stats = covert.transmit(message, "agx", seed=1, mitigated=True)
        assert stats.frames_received == 0
        assert got == b""
        assert time.perf_counter() - t0 < 10.0


# ── 2. throughput peaks at matched sender/receiver counts ───────────────────

def test_2_sweep_diagonal(verdict):
    with verdict(2, "5x5 group sweep: bytes/dispatch argmax sits on the "
                    "diagonal for agx and nvidia"):
        message = np.random.default_rng(2).bytes(2048)
        for prof in ("agx", "nvidia"):
            points = covert.sweep(prof, message, range(1, 6), range(1, 6),
                                  seed=7)
            top = max(p.bytes_per_dispatch for p in points)
            winners = [(p.sender_groups, p.receiver_groups) for p in points
                       if p.bytes_per_dispatch == top]
            assert len(winners) == 1, prof
            assert winners[0][0] == winners[0][1], prof


# ── 3. store-residue leak mask ──────────────────────────────────────────────

def conv_with_bias_oracle(model, img):
    """Independent scalar accumulation, float32 at every step."""
    out = np.zeros((FILTERS, CONV, CONV), dtype=np.float32)
    for f in range(FILTERS):
        for y in range(CONV):
            for x in range(CONV):
                acc = np.float32(0)
                for ky in range(KSIZE):
                    for kx in range(KSIZE):
                        acc = acc + model.conv_w[f, ky, kx] * img[y + ky, x + kx]
                out[f, y, x] = acc + model.conv_b[f]
    return out


def test_3_nvidia_mask(verdict):
    with verdict(3, "store-residue capture is exactly the first 16 lanes "
                    "of every 32-thread wave, bit-equal to the host conv"):
        model = random_model(5)
        img = digit()
        atk = attack_nvidia(model, img, seed=5)
        lane_mask = (np.arange(GROUP) % 32) < 16
        for f in range(FILTERS):
            assert np.array_equal(atk.mask[f].reshape(-1), lane_mask)
        assert atk.mask.mean() == 0.5

        truth = conv_with_bias_oracle(model, img)
        got = atk.recovered[atk.mask].view(np.uint32)
        want = truth[atk.mask].view(np.uint32)
        assert np.array_equal(got, want)


# ── 4. overlap stitching equals exhaustive ordering search ──────────────────

def test_4_overlap_vs_brute_force(verdict):
    with verdict(4, "greedy overlap stitching of 8 shuffled segments "
                    "matches the exhaustive-orderings oracle"):
        from staleregs.cnn import reconstruct_overlap
        row = scene()[64].astype(np.float32)
        segs = [row[k * 8: k * 8 + 16] for k in range(8)]
        perm = np.random.default_rng(4).permutation(8)
        shuffled = [segs[i] for i in perm]

        order, stitched = reconstruct_overlap(shuffled)

        n = len(shuffled)
        cost = np.zeros((n, n))
        for a in range(n):
            for b in range(n):
                d = (shuffled[a][-8:].astype(np.float64)
                     - shuffled[b][:8].astype(np.float64))
                cost[a, b] = d @ d
        best, best_c = None, np.inf
        for p in itertools.permutations(range(n)):
            c = sum(cost[p[i], p[i + 1]] for i in range(n - 1))
            if c < best_c - 1e-12:
                best, best_c = list(p), c

        assert order == best
        assert [int(perm[i]) for i in order] == list(range(8))
        assert np.array_equal(stitched, row[:72])


# ── 5. persistent-register capture coverage ─────────────────────────────────

def test_5_adreno_coverage(verdict):
    with verdict(5, "persistent-register attack recovers >= 40% of one "
                    "conv filter with a 256-value consecutive run"):
        t0 = time.perf_counter()
        atk = attack_adreno(random_model(1), digit(), seed=1)
        ev = evaluate_adreno(atk, atk.fwd.conv_acc)
        assert (ev.coverage >= 0.40).all()
        assert (ev.max_run >= 256).all()
        assert time.perf_counter() - t0 < 30.0


# ── 6. embedding reconstruction at desk scale ───────────────────────────────

def test_6_llm_reconstruction(verdict):
    with verdict(6, "embedding match: 20/20 tokens+positions at vocab "
                    "1000, zero false hits across 100 noise streams"):
        t0 = time.perf_counter()
        tables = llm.random_tables(vocab=1000, dim=64, max_pos=30, seed=3)
        lut = llm.build_lut(tables)
        assert time.perf_counter() - t0 < 60.0

        tokens = np.random.default_rng(6).integers(0, 1000, 20).tolist()
        atk = llm.attack_embedding(tables, tokens, lut=lut, seed=6)
        assert atk.sequence == {p: t for p, t in enumerate(tokens)}
        assert len(atk.hits) == 2 * len(tokens)

        t0 = time.perf_counter()
        assert llm.reconstruct(atk.stream, lut) == atk.hits
        for s in range(100):
            noise = np.random.default_rng(1000 + s).standard_normal(
                640).astype(np.float32)
            assert llm.reconstruct(noise, lut) == []
        assert time.perf_counter() - t0 < 5.0


# ── 7. static analyzer verdicts and soundness ───────────────────────────────

def _dirty_run(program, quad):
    cfg = GpuConfig(cores=1, simd_per_core=1, regs_per_thread=64,
                    quad_registers=quad)
    sim = Simulator(cfg)
    jb = GlobalBuffer("b_junk", 32 * 64)
    sim.run(junk_program(64, quad=quad), groups=1, group_size=32,
            buffers={"b_junk": jb})
    bufs = {"b0": GlobalBuffer("b0", 1 << 12), "b1": GlobalBuffer("b1", 1 << 12)}
    return sim.run(program, groups=1, group_size=32, buffers=bufs)


def test_7_sanitizer_soundness(verdict):
    with verdict(7, "sanitizer rejects all three dump kernels, accepts the "
                    "fragment shader, and Accept implies no stale reads "
                    "over 1000 random programs"):
        for name in ("dump_adreno", "dump_agx", "dump_nvidia"):
            assert not analyze(load_kernel(name)).accepted, name
        assert analyze(load_kernel("fragment_shader")).accepted

        accepted = 0
        for k in range(1000):
            quad = k % 2 == 1
            rng = random.Random(0xACCE97 + k)
            p = random_program(rng, name=f"fz{k}", quad=quad)
            validate_program(p)
            if analyze(p).accepted:
                accepted += 1
                report = _dirty_run(p, quad)
                assert not any(r.uninit for r in report.leak_records()), p.name
        assert accepted > 0   # the implication must not hold vacuously


# ── 8. cleanup rewriting stops the leak, keeps the outputs ──────────────────

VICTIM = parse_program("""
.shader payroll
get_tid r0
mov_imm r1, 0x00C0FFEE
iadd r2, r1, r0
st_global [b1 + r0], r2
exit
""")

SNOOP = parse_program("""
.shader snoop
st_global [b0 + tid], r2
exit
""")


def _victim_then_snoop(victim):
    cfg = GpuConfig(cores=1, simd_per_core=1, regs_per_thread=64)
    sim = Simulator(cfg)
    b1 = GlobalBuffer("b1", 32)
    sim.run(victim, groups=1, group_size=32, buffers={"b1": b1})
    out = GlobalBuffer("b0", 32)
    report = sim.run(SNOOP, groups=1, group_size=32, buffers={"b0": out})
    return b1.as_bytes(), out.words.tolist(), report


def test_8_cleanup_differential(verdict):
    with verdict(8, "cleanup rewrite: stale reads go from secret values to "
                    "all zero while victim outputs stay bit-identical"):
        before_buf, before_leak, _ = _victim_then_snoop(VICTIM)
        assert before_leak == [0x00C0FFEE + t for t in range(32)]

        scrubbed = rewrite_cleanup(VICTIM)
        after_buf, after_leak, report = _victim_then_snoop(scrubbed)
        assert after_leak == [0] * 32
        assert all(r.value == 0 for r in report.leak_records())
        assert after_buf == before_buf


# ── 9. full render-leak-solve pipeline ──────────────────────────────────────

def test_9_jigsaw_pipeline(verdict):
    with verdict(9, "render->leak->solve on the shipped 128x128 scene "
                    "reaches 95% neighbor accuracy within 100 generations; "
                    "2x2 equals the 24-arrangement oracle"):
        res = pixel.attack_render(scene(), tile_size=16, seed=0)
        assert res.accuracy is not None and res.accuracy >= 0.95
        assert res.solver.generations_run <= 100

        quads = [scene()[:64, :64], scene()[:64, 64:],
                 scene()[64:, :64], scene()[64:, 64:]]
        perm = np.random.default_rng(3).permutation(4)
        tiles = [quads[i].copy() for i in perm]
        costs = jigsaw.edge_costs(tiles)
        scored = sorted((jigsaw.fitness(np.array(p).reshape(2, 2), costs), p)
                        for p in itertools.permutations(range(4)))
        assert scored[0][0] < scored[1][0] - 1e-12   # unique optimum
        small = jigsaw.solve(tiles, 2, 2, seed=0)
        assert small.fitness == scored[0][0]
        assert tuple(small.arrangement.reshape(-1)) == scored[0][1]


# ── 10. rerun determinism of every subcommand ───────────────────────────────

RERUNS = (
    ["sim-run", "dump_agx", "--profile", "agx", "--out", "leaks.csv"],
    ["covert-bench", "--profile", "nvidia", "--grid", "3",
     "--message-bytes", "512", "--seed", "11", "--out", "sweep.csv"],
    ["pixel-attack", "--image", "scene.pgm", "--seed", "2",
     "--out", "recon.pgm"],
    ["cnn-attack", "--seed", "4", "--out", "leaked.pgm",
     "--csv", "coverage.csv"],
    ["llm-attack", "--out", "tokens.csv"],
    ["sanitize", "rewrite", "victim.asm", "-o", "clean.asm"],
)


def _run_all(at, monkeypatch):
    os.makedirs(at)
    monkeypatch.chdir(at)
    yy, xx = np.mgrid[0:32, 0:32].astype(np.float32)
    with open("scene.pgm", "wb") as fh:
        fh.write(encode_pgm((16 * yy + xx) / np.float32(16 * 31 + 31)))
    with open("victim.asm", "w") as fh:
        fh.write(".shader v\n.regs 2\nmov_imm r0, 0x7\n"
                 "st_global [b0 + tid], r0\nexit\n")
    for args in RERUNS:
        assert main(list(args)) == 0, args
    produced = {}
    for name in sorted(os.listdir(at)):
        with open(os.path.join(at, name), "rb") as fh:
            produced[name] = fh.read()
    return produced


def test_10_rerun_determinism(verdict, tmp_path, monkeypatch):
    with verdict(10, "every subcommand rerun with the same seed writes "
                     "byte-identical artifacts"):
        first = _run_all(str(tmp_path / "a"), monkeypatch)
        second = _run_all(str(tmp_path / "b"), monkeypatch)
        assert sorted(first) == sorted(second)
        for name in first:
            assert first[name] == second[name], name

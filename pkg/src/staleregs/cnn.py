"""Small CNN victim and the two first-layer leak reconstruction attacks.

The victim is a fixed-architecture digit-size network: one 5x5 convolution
with 8 filters (28x28 input, 24x24 output per filter), relu, 2x2 max
pooling and a 10-way fully connected head. Every layer runs as its own
kernel dispatch and every intermediate result passes through a global
buffer.

The execution split deserves a sentence: the shader ISA here moves words,
it cannot multiply, so the layer arithmetic is computed host side in
single precision and the kernels model the dataflow that leaks - each
layer kernel loads the previous layer's live buffer (a real dependency),
parks its values in general registers and stores its output. The conv
kernel additionally parks the pre-bias accumulator in a second register,
which is exactly the intermediate that leaks on persistent register files.

Arithmetic order contract (needed for bit-exact oracles and the embedding
attack's value matching): convolution accumulates its 25 taps row major,
the fully connected layer accumulates its 1152 inputs in flattened
(filter, y, x) order, everything in float32.

Two attacks:

* store-residue model: the conv output store is coalesced, so each SIMD
  unit's store buffer retains the first half (16 lanes) of its last wave.
  An attacker reading an unwritten register recovers those 16 values. The
  recovered positions form the first-16-of-every-32 mask; consecutive
  leaked segments are displaced 32 positions = 8 columns on a 24-wide row,
  which is the 8-pixel overlap that reconstruct_overlap chains on.
* persistent-register model: the attacker dispatches thread groups shaped
  like the victim's right after it. Each SIMD unit still holds the
  registers of the last victim wave it ran, so with 8 SIMD units per core
  and 18 victim waves per group, waves 10..17 survive: 256 consecutive
  values (44.4% of one filter) behind a constant zeroed prefix.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .config import profile as gpu_profile
from .isa import Instruction, MemRef, Opcode, Program, TID, reg
from .sim import GlobalBuffer, GpuConfig, Lifecycle, Simulator

FILTERS = 8
IMG = 28
KSIZE = 5
CONV = IMG - KSIZE + 1          # 24
POOL = CONV // 2                # 12
CLASSES = 10
GROUP = CONV * CONV             # 576 threads, one per conv output
FC_IN = FILTERS * POOL * POOL   # 1152


@dataclass
class CnnModel:
    conv_w: np.ndarray   # (8, 5, 5) float32
    conv_b: np.ndarray   # (8,) float32
    fc_w: np.ndarray     # (10, 1152) float32
    fc_b: np.ndarray     # (10,) float32

    def __post_init__(self):
        assert self.conv_w.shape == (FILTERS, KSIZE, KSIZE)
        assert self.fc_w.shape == (CLASSES, FC_IN)


def random_model(seed: int = 0) -> CnnModel:
    rng = np.random.default_rng(seed)
    return CnnModel(
        conv_w=(rng.standard_normal((FILTERS, KSIZE, KSIZE)) * 0.2).astype(np.float32),
        conv_b=(rng.standard_normal(FILTERS) * 0.1).astype(np.float32),
        fc_w=(rng.standard_normal((CLASSES, FC_IN)) * 0.05).astype(np.float32),
        fc_b=(rng.standard_normal(CLASSES) * 0.1).astype(np.float32),
    )


@dataclass
class CnnForward:
    image: np.ndarray
    conv_acc: np.ndarray   # (8, 24, 24) pre-bias accumulator
    conv: np.ndarray       # (8, 24, 24) accumulator + bias
    relu: np.ndarray
    pool: np.ndarray       # (8, 12, 12)
    logits: np.ndarray     # (10,)


def forward_host(model: CnnModel, image: np.ndarray) -> CnnForward:
    """Single-precision reference pass with a pinned accumulation order."""
    img = np.asarray(image, dtype=np.float32)
    if img.shape != (IMG, IMG):
        raise ValueError(f"image must be {IMG}x{IMG}, got {img.shape}")
    acc = np.zeros((FILTERS, CONV, CONV), dtype=np.float32)
    for f in range(FILTERS):
        a = np.zeros((CONV, CONV), dtype=np.float32)
        for ky in range(KSIZE):
            for kx in range(KSIZE):
                a = a + model.conv_w[f, ky, kx] * img[ky:ky + CONV, kx:kx + CONV]
        acc[f] = a
    conv = acc + model.conv_b[:, None, None]
    relu = np.maximum(conv, np.float32(0))
    p = relu.reshape(FILTERS, POOL, 2, POOL, 2)
    pool = p.max(axis=(2, 4))
    x = pool.reshape(-1)
    logits = model.fc_b.copy()
    for i in range(FC_IN):
        logits = logits + model.fc_w[:, i] * x[i]
    return CnnForward(img, acc, conv, relu, pool, logits)


# ── layer kernels ─────────────────────────────────────────────────────────

def _layer_program(name: str, prev_buf: Optional[str], stage_buf: str,
                   out_buf: str, quad: bool, park_acc: Optional[str] = None) -> Program:
    def r(i):
        return reg(i, "x") if quad else reg(i)

    body = []
    if quad:
        # the zeroed prefix the victim shader leaves in front of its data
        for sub in ("x", "y", "z", "w"):
            body.append(Instruction(Opcode.MOV_IMM, dst=reg(0, sub), srcs=(0,)))
    if park_acc is not None:
        body.append(Instruction(Opcode.LD_GLOBAL, dst=r(2), mem=MemRef(park_acc, TID)))
    if prev_buf is not None:
        body.append(Instruction(Opcode.LD_GLOBAL, dst=r(3), mem=MemRef(prev_buf, TID)))
    body.append(Instruction(Opcode.LD_GLOBAL, dst=r(1), mem=MemRef(stage_buf, TID)))
    body.append(Instruction(Opcode.ST_GLOBAL, mem=MemRef(out_buf, TID), srcs=(r(1),)))
    body.append(Instruction(Opcode.EXIT))
    return Program(name, tuple(body))


@dataclass
class CnnRun:
    fwd: CnnForward
    sim: Simulator
    logits: np.ndarray
    buffers: dict


def run_forward(model: CnnModel, image: np.ndarray, cfg: GpuConfig,
                after_conv: Optional[Callable[[Simulator], None]] = None) -> CnnRun:
    """Dispatch the network layer per kernel; returns the stored logits.

    `after_conv` lets an attacker dispatch right between the conv layer and
    the rest of the network, which is when the conv output is freshest in
    register files and store buffers.
    """
    fwd = forward_host(model, image)
    sim = Simulator(cfg)
    quad = cfg.quad_registers
    n = FILTERS * GROUP

    bufs = {name: GlobalBuffer(name, size) for name, size in [
        ("b_acc", n), ("b_stage_conv", n), ("b_conv", n),
        ("b_stage_relu", n), ("b_relu", n),
        ("b_stage_pool", FILTERS * POOL * POOL), ("b_pool", FILTERS * POOL * POOL),
        ("b_stage_fc", CLASSES), ("b_logits", CLASSES),
    ]}
    bufs["b_acc"].fill_f32(fwd.conv_acc)
    bufs["b_stage_conv"].fill_f32(fwd.conv)
    bufs["b_stage_relu"].fill_f32(fwd.relu)
    bufs["b_stage_pool"].fill_f32(fwd.pool)
    bufs["b_stage_fc"].fill_f32(fwd.logits)

    sim.run(_layer_program("conv5x5", None, "b_stage_conv", "b_conv", quad,
                           park_acc="b_acc"),
            groups=FILTERS, group_size=GROUP,
            buffers={k: bufs[k] for k in ("b_acc", "b_stage_conv", "b_conv")})
    if after_conv is not None:
        after_conv(sim)
    sim.run(_layer_program("relu", "b_conv", "b_stage_relu", "b_relu", quad),
            groups=FILTERS, group_size=GROUP,
            buffers={k: bufs[k] for k in ("b_conv", "b_stage_relu", "b_relu")})
    sim.run(_layer_program("maxpool2x2", "b_relu", "b_stage_pool", "b_pool", quad),
            groups=FILTERS, group_size=POOL * POOL,
            buffers={k: bufs[k] for k in ("b_relu", "b_stage_pool", "b_pool")})
    sim.run(_layer_program("fc10", "b_pool", "b_stage_fc", "b_logits", quad),
            groups=1, group_size=CLASSES,
            buffers={k: bufs[k] for k in ("b_pool", "b_stage_fc", "b_logits")})

    logits = bufs["b_logits"].as_f32().copy()
    return CnnRun(fwd, sim, logits, bufs)


# ── store-residue attack ──────────────────────────────────────────────────

def _probe_program(quad: bool, probe_cell: int) -> Program:
    src = reg(probe_cell // 4, "xyzw"[probe_cell % 4]) if quad else reg(probe_cell)
    return Program("probe", (
        Instruction(Opcode.ST_GLOBAL, mem=MemRef("b_probe", TID), srcs=(src,)),
        Instruction(Opcode.EXIT),
    ))


@dataclass
class NvidiaCnnAttack:
    fwd: CnnForward
    mask: np.ndarray               # (8, 24, 24) bool
    recovered: np.ndarray          # (8, 24, 24) float32, NaN where not leaked
    segments: list                 # shuffled 16-value float32 arrays
    segment_origin: list = field(repr=False, default_factory=list)
    # (filter, wave) per segment: ground truth for evaluation, not attacker input


def attack_nvidia(model: CnnModel, image: np.ndarray, seed: int = 0,
                  mitigated: bool = False) -> NvidiaCnnAttack:
    """Recover the first half of every conv-output wave via store residue.

    One SIMD unit per victim wave keeps every wave's residue alive until
    the attacker's matching dispatch reads it. The attacker knows the
    round-robin schedule, so probe position maps straight to conv position.
    """
    waves = GROUP // 32
    cfg = replace(gpu_profile("nvidia"), cores=FILTERS, simd_per_core=waves, seed=seed)
    if mitigated:
        cfg = replace(cfg, lifecycle=Lifecycle.ZERO_ON_ALLOC)
    probe_buf = GlobalBuffer("b_probe", FILTERS * GROUP)

    def attacker(sim: Simulator) -> None:
        sim.run(_probe_program(False, cfg.regs_per_thread - 1),
                groups=FILTERS, group_size=GROUP, buffers={"b_probe": probe_buf})

    run = run_forward(model, image, cfg, after_conv=attacker)
    dump = probe_buf.as_f32().reshape(FILTERS, waves, 32)

    mask = np.zeros((FILTERS, GROUP), dtype=bool)
    recovered = np.full((FILTERS, GROUP), np.nan, dtype=np.float32)
    segments = []
    origin = []
    for f in range(FILTERS):
        for w in range(waves):
            seg = dump[f, w, :16].copy()
            lo = 32 * w
            mask[f, lo:lo + 16] = True
            recovered[f, lo:lo + 16] = seg
            segments.append(seg)
            origin.append((f, w))
    order = np.random.default_rng(seed).permutation(len(segments))
    segments = [segments[i] for i in order]
    origin = [origin[i] for i in order]
    return NvidiaCnnAttack(run.fwd, mask.reshape(FILTERS, CONV, CONV),
                           recovered.reshape(FILTERS, CONV, CONV),
                           segments, origin)


# ── overlap stitching ─────────────────────────────────────────────────────

def reconstruct_overlap(segments: list, overlap: int = 8) -> tuple[list, np.ndarray]:
    """Chain shuffled segments by their overlapping edges.

    Greedy: from each possible start, repeatedly append the unused segment
    whose first `overlap` values are closest (sum of squared differences)
    to the current tail's last `overlap` values; keep the cheapest chain.
    Ties always resolve to the lowest segment index. The stitched output
    advances len(segment) - overlap values per link, successor values win
    inside the overlapped region.
    """
    if not segments:
        raise ValueError("need at least one segment")
    segs = [np.asarray(s, dtype=np.float32) for s in segments]
    n = len(segs)
    if n == 1:
        return [0], segs[0].copy()
    seg_len = len(segs[0])
    if any(len(s) != seg_len for s in segs) or overlap >= seg_len:
        raise ValueError("segments must share a length greater than the overlap")

    cost = np.zeros((n, n), dtype=np.float64)
    for a in range(n):
        for b in range(n):
            d = segs[a][-overlap:].astype(np.float64) - segs[b][:overlap].astype(np.float64)
            cost[a, b] = np.dot(d, d)

    best_order: Optional[list] = None
    best_cost = np.inf
    for start in range(n):
        used = [start]
        total = 0.0
        while len(used) < n:
            tail = used[-1]
            remaining = [j for j in range(n) if j not in used]
            nxt = min(remaining, key=lambda j: (cost[tail, j], j))
            total += cost[tail, nxt]
            used.append(nxt)
        if total < best_cost - 1e-12:
            best_cost = total
            best_order = used
    assert best_order is not None

    advance = seg_len - overlap
    out = np.zeros(advance * (n - 1) + seg_len, dtype=np.float32)
    for k, idx in enumerate(best_order):
        out[k * advance: k * advance + seg_len] = segs[idx]
    return best_order, out


# ── persistent-register attack ────────────────────────────────────────────

def _window_probe_program() -> Program:
    """Store the zeroed prefix plus the parked accumulator, 5 words/thread."""
    srcs = (reg(0, "x"), reg(0, "y"), reg(0, "z"), reg(0, "w"), reg(2, "x"))
    return Program("probe_window", (
        Instruction(Opcode.ST_GLOBAL, mem=MemRef("b_probe", TID, scale=len(srcs)),
                    srcs=srcs),
        Instruction(Opcode.EXIT),
    ))


@dataclass
class AdrenoCnnAttack:
    fwd: CnnForward
    raw: np.ndarray            # (threads, 5) uint32 as captured
    zero_prefix_words: int     # calibrated constant-zero prefix length
    values: np.ndarray         # float32 stream after stripping the prefix


def attack_adreno(model: CnnModel, image: np.ndarray, seed: int = 0,
                  mitigated: bool = False) -> AdrenoCnnAttack:
    """Dump surviving victim registers with matched thread-group shape.

    Eight SIMD units per core keep one victim wave per unit resident; the
    attacker's identically-shaped dispatch reads each unit's registers
    once. The capture is the zeroed prefix plus the conv accumulator.
    """
    cfg = replace(gpu_profile("adreno"), cores=FILTERS, simd_per_core=FILTERS, seed=seed)
    if mitigated:
        cfg = replace(cfg, lifecycle=Lifecycle.ZERO_ON_ALLOC)
    probe_buf = GlobalBuffer("b_probe", FILTERS * GROUP * 5)

    def attacker(sim: Simulator) -> None:
        sim.run(_window_probe_program(), groups=FILTERS, group_size=GROUP,
                buffers={"b_probe": probe_buf})

    run = run_forward(model, image, cfg, after_conv=attacker)
    raw = probe_buf.words.reshape(-1, 5)

    prefix = 0
    while prefix < raw.shape[1] and not raw[:, prefix].any():
        prefix += 1
    values = raw[:, prefix:].view(np.uint32).ravel().view(np.float32).copy()
    return AdrenoCnnAttack(run.fwd, raw, prefix, values)


@dataclass
class AdrenoEvaluation:
    coverage: np.ndarray        # (8,) fraction of each filter's output recovered
    max_run: np.ndarray         # (8,) longest consecutive recovered run
    positions: list             # per filter, sorted recovered position array


def evaluate_adreno(attack: AdrenoCnnAttack, conv_acc: np.ndarray) -> AdrenoEvaluation:
    """Score a capture against the true accumulator values, bit for bit."""
    truth_bits = np.ascontiguousarray(conv_acc, dtype=np.float32).reshape(FILTERS, GROUP).view(np.uint32)
    got = set(np.asarray(attack.values, dtype=np.float32).view(np.uint32).tolist())
    coverage = np.zeros(FILTERS)
    max_run = np.zeros(FILTERS, dtype=int)
    positions = []
    for f in range(FILTERS):
        pos = np.nonzero(np.isin(truth_bits[f], list(got)))[0] if got else np.array([], dtype=int)
        positions.append(pos)
        coverage[f] = len(pos) / GROUP
        run = best = 0
        prev = -2
        for p in pos.tolist():
            run = run + 1 if p == prev + 1 else 1
            best = max(best, run)
            prev = p
        max_run[f] = best
    return AdrenoEvaluation(coverage, max_run, positions)

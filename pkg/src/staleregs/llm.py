"""Token embedding victim and lookup-table reconstruction attack.

The victim computes the first step of a transformer inference: for token t
at position p it produces the vector emb[t] + pos[p] in single precision
and stores it through global memory. The element values of that sum are
so specific that their exact 32-bit patterns identify (token, position)
pairs: the attacker precomputes a lookup table from every float of every
possible sum vector to the (token, position, element index) triples that
produce it.

Reconstruction then scans leaked memory in chunks of 16 words (one leaked
half wave). A chunk identifies a token when all 16 words resolve to one
common (token, position) pair with strictly ascending element indices.
Random words (other shaders' junk) fail the lookup almost surely, and a
chunk spanning two different vectors fails the ascending-index rule, so
false positives stay out.

Desk-scale defaults keep the table build in seconds; the full-size tables
of real language models (tens of thousands of tokens, dimension in the
hundreds) only change the build time, not the algorithm.
"""

from __future__ import annotations

import struct
from collections import defaultdict
from dataclasses import dataclass, replace
from typing import IO, Optional, Sequence

import numpy as np

from .config import profile as gpu_profile
from .isa import Instruction, MemRef, Opcode, Program, TID, reg
from .sim import GlobalBuffer, GpuConfig, Simulator

CHUNK = 16
DESK_V = 1000
DESK_D = 64
DESK_P = 30


@dataclass
class EmbeddingTables:
    tok: np.ndarray   # (V, D) float32
    pos: np.ndarray   # (P, D) float32

    @property
    def vocab(self) -> int:
        return self.tok.shape[0]

    @property
    def dim(self) -> int:
        return self.tok.shape[1]

    @property
    def max_pos(self) -> int:
        return self.pos.shape[0]

    def __post_init__(self):
        self.tok = np.ascontiguousarray(self.tok, dtype=np.float32)
        self.pos = np.ascontiguousarray(self.pos, dtype=np.float32)
        if self.tok.ndim != 2 or self.pos.ndim != 2 or self.tok.shape[1] != self.pos.shape[1]:
            raise ValueError("token and positional tables must be (V,D) and (P,D)")


def random_tables(vocab: int = DESK_V, dim: int = DESK_D, max_pos: int = DESK_P,
                  seed: int = 0) -> EmbeddingTables:
    rng = np.random.default_rng(seed)
    return EmbeddingTables(
        tok=rng.standard_normal((vocab, dim)).astype(np.float32) * np.float32(0.1),
        pos=rng.standard_normal((max_pos, dim)).astype(np.float32) * np.float32(0.01),
    )


def save_tables(tables: EmbeddingTables, out: IO[bytes]) -> None:
    """Header V, D, P as little-endian uint32, then both row-major float32."""
    out.write(struct.pack("<III", tables.vocab, tables.dim, tables.max_pos))
    out.write(tables.tok.astype("<f4").tobytes())
    out.write(tables.pos.astype("<f4").tobytes())


def load_tables(inp: IO[bytes]) -> EmbeddingTables:
    v, d, p = struct.unpack("<III", inp.read(12))
    tok = np.frombuffer(inp.read(v * d * 4), dtype="<f4").reshape(v, d)
    pos = np.frombuffer(inp.read(p * d * 4), dtype="<f4").reshape(p, d)
    return EmbeddingTables(tok.copy(), pos.copy())


def embed_reference(tables: EmbeddingTables, token_ids: Sequence[int]) -> np.ndarray:
    """emb[t_i] + pos_emb[i], float32, same operand order as the LUT build."""
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= tables.vocab):
        raise ValueError("token id out of vocabulary")
    if len(ids) > tables.max_pos:
        raise ValueError(f"sequence longer than {tables.max_pos} positions")
    return tables.tok[ids] + tables.pos[: len(ids)]


# ── lookup table ──────────────────────────────────────────────────────────

def build_lut(tables: EmbeddingTables, max_pos: Optional[int] = None) -> dict:
    """Map each possible sum value's bit pattern to its (token, pos, index).

    Keys are the exact uint32 representations; any float equality looser
    than bit equality would merge unrelated entries.
    """
    p_lim = tables.max_pos if max_pos is None else min(max_pos, tables.max_pos)
    lut: dict = defaultdict(list)
    v, d = tables.tok.shape
    idx_col = np.tile(np.arange(d, dtype=np.int32), v)
    tok_col = np.repeat(np.arange(v, dtype=np.int32), d)
    for p in range(p_lim):
        bits = (tables.tok + tables.pos[p]).view(np.uint32).ravel()
        for b, t, i in zip(bits.tolist(), tok_col.tolist(), idx_col.tolist()):
            lut[b].append((t, p, i))
    return dict(lut)


@dataclass(frozen=True)
class ReconstructedToken:
    chunk_offset: int
    token: int
    position: int


def _ascending_selection(index_lists: list) -> bool:
    # greedy minimal ascending pick; works because choosing the smallest
    # feasible index never blocks a later word more than any other choice
    cur = -1
    for choices in index_lists:
        nxt = None
        for i in choices:
            if i > cur and (nxt is None or i < nxt):
                nxt = i
        if nxt is None:
            return False
        cur = nxt
    return True


def reconstruct(leak: np.ndarray, lut: dict, sliding: bool = False) -> list:
    """Scan a leaked word stream for embedding vectors.

    Non-overlapping chunks of 16 by default; `sliding` switches to stride
    1 for misaligned captures. A chunk yields a hit when one (token,
    position) pair explains all 16 words with ascending element indices.
    """
    words = np.asarray(leak)
    if words.dtype != np.uint32:
        words = np.ascontiguousarray(words, dtype=np.float32).view(np.uint32)
    step = 1 if sliding else CHUNK
    hits = []
    for off in range(0, len(words) - CHUNK + 1, step):
        chunk = words[off: off + CHUNK].tolist()
        entry_lists = []
        candidates: Optional[set] = None
        for w in chunk:
            entries = lut.get(w)
            if not entries:
                candidates = set()
                break
            entry_lists.append(entries)
            pairs = {(t, p) for t, p, _ in entries}
            candidates = pairs if candidates is None else candidates & pairs
            if not candidates:
                break
        if not candidates:
            continue
        for t, p in sorted(candidates):
            index_lists = [[i for tt, pp, i in entries if (tt, pp) == (t, p)]
                           for entries in entry_lists]
            if _ascending_selection(index_lists):
                hits.append(ReconstructedToken(off, t, p))
    return hits


def recovered_sequence(hits: Sequence[ReconstructedToken]) -> dict:
    """Collapse chunk hits into a position -> token map."""
    seq: dict = {}
    for h in sorted(hits, key=lambda h: (h.position, h.chunk_offset)):
        seq.setdefault(h.position, h.token)
    return seq


# ── victim and attack over the simulator ──────────────────────────────────

GROUP_SIZE = 256


def _embed_program() -> Program:
    return Program("embed_store", (
        Instruction(Opcode.LD_GLOBAL, dst=reg(4), mem=MemRef("b_emb", TID)),
        Instruction(Opcode.ST_GLOBAL, mem=MemRef("b_io", TID), srcs=(reg(4),)),
        Instruction(Opcode.EXIT),
    ))


def _probe_program(probe_cell: int) -> Program:
    return Program("probe", (
        Instruction(Opcode.ST_GLOBAL, mem=MemRef("b_probe", TID), srcs=(reg(probe_cell),)),
        Instruction(Opcode.EXIT),
    ))


@dataclass
class EmbeddingAttack:
    stream: np.ndarray            # float32 leak stream fed to reconstruct
    hits: list
    sequence: dict                # position -> token
    n_dispatches: int


def attack_embedding(tables: EmbeddingTables, token_ids: Sequence[int],
                     lut: Optional[dict] = None, seed: int = 0) -> EmbeddingAttack:
    """Run the victim embedding store, drain residues, reconstruct tokens.

    The victim's output store is coalesced, so each SIMD unit retains the
    first 16 words of its last wave. One SIMD unit per victim wave keeps
    all of them alive for the probe dispatch.
    """
    vec = embed_reference(tables, token_ids)
    flat = vec.reshape(-1)
    n_threads = -(-len(flat) // GROUP_SIZE) * GROUP_SIZE
    groups = n_threads // GROUP_SIZE
    waves = GROUP_SIZE // 32
    cfg = replace(gpu_profile("nvidia"), cores=max(8, groups),
                  simd_per_core=waves, seed=seed)
    sim = Simulator(cfg)

    b_emb = GlobalBuffer("b_emb", n_threads)
    b_emb.fill_f32(flat)
    b_io = GlobalBuffer("b_io", n_threads)
    sim.run(_embed_program(), groups=groups, group_size=GROUP_SIZE,
            buffers={"b_emb": b_emb, "b_io": b_io})

    b_probe = GlobalBuffer("b_probe", n_threads)
    sim.run(_probe_program(cfg.regs_per_thread - 1), groups=groups,
            group_size=GROUP_SIZE, buffers={"b_probe": b_probe})

    dump = b_probe.as_f32().reshape(groups, waves, 32)
    stream = dump[:, :, :CHUNK].reshape(-1).copy()

    if lut is None:
        lut = build_lut(tables)
    hits = reconstruct(stream, lut)
    return EmbeddingAttack(stream, hits, recovered_sequence(hits), sim.dispatch_count)

"""Deterministic SIMT execution model with configurable register lifecycle.

The machine is a grid of cores, each holding several SIMD units. A dispatch
launches `groups` thread groups of `group_size` threads. Group g always lands
on core g mod cores; inside a group, wave w (32 threads by default) always
lands on SIMD unit w mod simd_per_core. Waves run to completion in a fixed
serialized order, so every run is bit-reproducible.

What makes the model interesting is what happens to the per-SIMD register
file between waves:

* no_clear        - register cells keep whatever the previous wave left.
                    A read of a cell the current wave never wrote returns
                    stale data from an earlier (possibly foreign) shader.
* store_residue   - cells are scrubbed on allocation, but each SIMD unit has
                    a 16-word store buffer that latches the last coalesced
                    half-wave bus transaction. An unwritten register reads
                    that latch instead of zero: residue[lane mod 16].
* zero_on_alloc   - cells are scrubbed on allocation and unwritten reads
                    return zero. This is the mitigated configuration.

Every read of a never-written general register cell emits a LeakRecord.

Register remapping sits between architectural names and physical cells.
`identity` maps rN to cell N. `seeded_permutation` rotates the whole file by
a per-dispatch displacement derived from (seed, dispatch id), so the same
architectural name refers to different physical cells in different
dispatches while consecutive names stay physically adjacent.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from typing import IO, Iterable, Iterator, Optional

import numpy as np

from .isa import (
    Instruction, IsaError, MemRef, Opcode, Program, RegClass, RegisterRef,
    uses_quad_refs, validate_program,
)

HALF_WAVE_WORDS = 16
MAX_GROUP_SIZE = 1024


class SimError(RuntimeError):
    """Raised for runtime faults: bad config, unbound buffers, wild addresses."""


class Lifecycle(enum.Enum):
    NO_CLEAR = "no_clear"
    STORE_RESIDUE = "store_residue"
    ZERO_ON_ALLOC = "zero_on_alloc"


class RemapPolicy(enum.Enum):
    IDENTITY = "identity"
    SEEDED_PERMUTATION = "seeded_permutation"


@dataclass
class GpuConfig:
    cores: int = 8
    simd_per_core: int = 4
    wave_width: int = 32
    regs_per_thread: int = 64
    quad_registers: bool = False
    lifecycle: Lifecycle = Lifecycle.NO_CLEAR
    remap: RemapPolicy = RemapPolicy.IDENTITY
    seed: int = 0
    jitter: bool = False

    def validate(self) -> None:
        if self.cores < 1 or self.simd_per_core < 1:
            raise SimError("cores and simd_per_core must be positive")
        if self.wave_width < 1 or self.wave_width % HALF_WAVE_WORDS:
            raise SimError("wave_width must be a positive multiple of 16")
        if self.regs_per_thread < 1:
            raise SimError("regs_per_thread must be positive")
        if self.quad_registers and self.regs_per_thread % 4:
            raise SimError("quad register files need a multiple of 4 cells")


def splitmix64(x: int) -> int:
    """SplitMix64 mixer; a stable, dependency-free source of seeded offsets."""
    x = (x + 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    return x ^ (x >> 31)


def remap_displacement(cfg: GpuConfig, dispatch_id: int) -> int:
    """Physical displacement of architectural cell 0 for one dispatch."""
    if cfg.remap is RemapPolicy.IDENTITY:
        return 0
    return splitmix64(splitmix64(cfg.seed) ^ (dispatch_id + 1)) % cfg.regs_per_thread


def apply_remap(cfg: GpuConfig, dispatch_id: int, cell: int) -> int:
    """Map an architectural cell index to its physical cell for a dispatch."""
    if not 0 <= cell < cfg.regs_per_thread:
        raise SimError(f"register cell {cell} outside file of {cfg.regs_per_thread}")
    return (cell + remap_displacement(cfg, dispatch_id)) % cfg.regs_per_thread


@dataclass
class LeakRecord:
    dispatch: int
    core: int
    simd: int
    wave: int
    lane: int
    reg: str
    value: int
    uninit: bool = True


LEAK_CSV_HEADER = ["dispatch", "core", "simd", "wave", "lane", "reg", "value_hex", "uninit"]


def write_leak_csv(records: Iterable[LeakRecord], out: IO[str]) -> int:
    w = csv.writer(out, lineterminator="\n")
    w.writerow(LEAK_CSV_HEADER)
    n = 0
    for r in records:
        w.writerow([r.dispatch, r.core, r.simd, r.wave, r.lane, r.reg,
                    f"0x{r.value:08x}", int(r.uninit)])
        n += 1
    return n


class GlobalBuffer:
    """Word-addressed global memory, zero-initialized."""

    def __init__(self, name: str, n_words: int):
        if n_words < 0:
            raise SimError("buffer size must be >= 0")
        self.name = name
        self.words = np.zeros(n_words, dtype=np.uint32)

    def __len__(self) -> int:
        return len(self.words)

    def as_bytes(self) -> bytes:
        return self.words.astype("<u4").tobytes()

    def as_f32(self) -> np.ndarray:
        return self.words.view(np.float32)

    def fill_f32(self, values: np.ndarray) -> None:
        v = np.asarray(values, dtype=np.float32).ravel()
        if len(v) > len(self.words):
            raise SimError(f"buffer {self.name}: {len(v)} words exceed capacity {len(self.words)}")
        self.words[: len(v)] = v.view(np.uint32)

    def fill_words(self, values: np.ndarray) -> None:
        v = np.asarray(values, dtype=np.uint32).ravel()
        if len(v) > len(self.words):
            raise SimError(f"buffer {self.name}: {len(v)} words exceed capacity {len(self.words)}")
        self.words[: len(v)] = v


class RegisterFile:
    """Per-SIMD physical register state plus the store-residue latch."""

    def __init__(self, cfg: GpuConfig):
        shape = (cfg.regs_per_thread, cfg.wave_width)
        self.cells = np.zeros(shape, dtype=np.uint32)
        self.written = np.zeros(shape, dtype=bool)
        self.residue = np.zeros(HALF_WAVE_WORDS, dtype=np.uint32)


# Compact per-instruction leak batch; expanded lazily into LeakRecords.
@dataclass
class _LeakEvent:
    dispatch: int
    core: int
    simd: int
    wave: int
    reg: str
    lanes: np.ndarray
    values: np.ndarray

    def expand(self) -> Iterator[LeakRecord]:
        for lane, value in zip(self.lanes.tolist(), self.values.tolist()):
            yield LeakRecord(self.dispatch, self.core, self.simd, self.wave,
                             lane, self.reg, value)


@dataclass
class DispatchReport:
    dispatch_id: int
    program_name: str
    groups: int
    group_size: int
    events: list = field(default_factory=list)

    def leak_records(self) -> Iterator[LeakRecord]:
        for ev in self.events:
            yield from ev.expand()

    @property
    def leak_count(self) -> int:
        return sum(len(ev.lanes) for ev in self.events)


class Simulator:
    """Owns the register files of one GPU and executes dispatches in order."""

    def __init__(self, cfg: GpuConfig):
        cfg.validate()
        self.cfg = cfg
        self.files = {
            (c, s): RegisterFile(cfg)
            for c in range(cfg.cores) for s in range(cfg.simd_per_core)
        }
        self.dispatch_count = 0
        self.reports: list[DispatchReport] = []
        self._jitter_state = splitmix64(cfg.seed)

    # ── scheduling helpers ────────────────────────────────────────────

    def core_of_group(self, group: int) -> int:
        return group % self.cfg.cores

    def simd_of_wave(self, wave_in_group: int) -> int:
        return wave_in_group % self.cfg.simd_per_core

    def waves_per_group(self, group_size: int) -> int:
        return math.ceil(group_size / self.cfg.wave_width)

    # ── dispatch ──────────────────────────────────────────────────────

    def run(self, program: Program, groups: int, group_size: int,
            buffers: Optional[dict[str, GlobalBuffer]] = None) -> DispatchReport:
        buffers = buffers or {}
        self._check_dispatch(program, groups, group_size, buffers)
        dispatch_id = self.dispatch_count
        self.dispatch_count += 1
        displacement = remap_displacement(self.cfg, dispatch_id)
        report = DispatchReport(dispatch_id, program.name, groups, group_size)

        wpg = self.waves_per_group(group_size)
        for core in range(self.cfg.cores):
            core_groups = [g for g in range(groups) if self.core_of_group(g) == core]
            if self.cfg.jitter:
                core_groups = self._jitter_order(core_groups, dispatch_id, core)
            for g in core_groups:
                for w in range(wpg):
                    simd = self.simd_of_wave(w)
                    lanes = min(self.cfg.wave_width, group_size - w * self.cfg.wave_width)
                    wave_index = g * wpg + w
                    self._run_wave(program, buffers, report, displacement,
                                   core, simd, wave_index, g,
                                   first_tid=g * group_size + w * self.cfg.wave_width,
                                   n_lanes=lanes)
        self.reports.append(report)
        return report

    def _jitter_order(self, groups: list[int], dispatch_id: int, core: int) -> list[int]:
        keyed = [(splitmix64(self._jitter_state ^ (dispatch_id << 20) ^ (core << 10) ^ g), g)
                 for g in groups]
        return [g for _, g in sorted(keyed)]

    def _check_dispatch(self, program: Program, groups: int, group_size: int,
                        buffers: dict[str, GlobalBuffer]) -> None:
        try:
            validate_program(program)
        except IsaError as e:
            raise SimError(f"program {program.name}: {e}") from None
        if groups < 1:
            raise SimError("dispatch needs at least one group")
        if not 1 <= group_size <= MAX_GROUP_SIZE:
            raise SimError(f"group size must be in 1..{MAX_GROUP_SIZE}")
        if uses_quad_refs(program) and not self.cfg.quad_registers:
            raise SimError(f"program {program.name} uses quad registers on a flat register file")
        if self.cfg.quad_registers and not uses_quad_refs(program):
            # flat names on a quad file are fine only if no general register is used
            for ins in program.instructions:
                refs = list(ins.srcs) + [ins.dst]
                if ins.mem is not None:
                    refs.append(ins.mem.index)
                if any(isinstance(r, RegisterRef) and r.is_general for r in refs):
                    raise SimError(f"program {program.name} uses flat registers on a quad register file")
        if program.declared_registers > self.cfg.regs_per_thread:
            raise SimError(
                f"program {program.name} declares {program.declared_registers} registers;"
                f" file holds {self.cfg.regs_per_thread}")
        referenced = set()
        for ins in program.instructions:
            if ins.mem is not None and ins.opcode is not Opcode.ST_TILE:
                referenced.add(ins.mem.buffer)
            if ins.opcode is Opcode.ST_TILE:
                referenced.add("tile")
        missing = sorted(referenced - set(buffers))
        if missing:
            raise SimError(f"program {program.name}: unbound buffers {missing}")

    # ── wave execution ────────────────────────────────────────────────

    def _run_wave(self, program: Program, buffers: dict[str, GlobalBuffer],
                  report: DispatchReport, displacement: int,
                  core: int, simd: int, wave_index: int, group: int,
                  first_tid: int, n_lanes: int) -> None:
        rf = self.files[(core, simd)]
        rf.written[:] = False
        if self.cfg.lifecycle is not Lifecycle.NO_CLEAR:
            rf.cells[:] = 0

        tids = np.arange(first_tid, first_tid + n_lanes, dtype=np.uint32)
        R = self.cfg.regs_per_thread

        def phys(ref: RegisterRef) -> int:
            cell = ref.cell()
            if cell >= R:
                raise SimError(f"{program.name}: register {ref} outside file of {R} cells")
            return (cell + displacement) % R

        def read_reg(ref: RegisterRef) -> np.ndarray:
            if ref.kind is RegClass.SPECIAL:
                return tids if ref.index == 0 else np.full(n_lanes, group, dtype=np.uint32)
            p = phys(ref)
            vals = rf.cells[p, :n_lanes].copy()
            fresh = rf.written[p, :n_lanes]
            if not fresh.all():
                stale = np.nonzero(~fresh)[0]
                if self.cfg.lifecycle is Lifecycle.STORE_RESIDUE:
                    vals[stale] = rf.residue[stale % HALF_WAVE_WORDS]
                elif self.cfg.lifecycle is Lifecycle.ZERO_ON_ALLOC:
                    vals[stale] = 0
                report.events.append(_LeakEvent(
                    report.dispatch_id, core, simd, wave_index, str(ref),
                    stale.astype(np.uint8), vals[stale].copy()))
            return vals

        def write_reg(ref: RegisterRef, vals: np.ndarray) -> None:
            p = phys(ref)
            rf.cells[p, :n_lanes] = vals
            rf.written[p, :n_lanes] = True

        def operand(op) -> np.ndarray:
            if isinstance(op, RegisterRef):
                return read_reg(op)
            return np.full(n_lanes, op, dtype=np.uint32)

        def addresses(mem: MemRef) -> np.ndarray:
            base = np.full(n_lanes, mem.offset, dtype=np.int64)
            if mem.index is not None:
                base += read_reg(mem.index).astype(np.int64) * mem.scale
            return base

        def buffer_of(mem: MemRef) -> GlobalBuffer:
            return buffers[mem.buffer]

        def check_bounds(buf: GlobalBuffer, addrs: np.ndarray) -> None:
            if addrs.size and (addrs.min() < 0 or addrs.max() >= len(buf)):
                raise SimError(
                    f"{program.name}: address {int(addrs.max())} outside buffer"
                    f" {buf.name!r} of {len(buf)} words")

        for ins in program.instructions:
            op = ins.opcode
            if op is Opcode.EXIT:
                break
            if op is Opcode.NOP:
                continue
            if op is Opcode.MOV_IMM:
                write_reg(ins.dst, np.full(n_lanes, ins.srcs[0], dtype=np.uint32))
            elif op is Opcode.MOV_REG:
                write_reg(ins.dst, read_reg(ins.srcs[0]))
            elif op is Opcode.IADD:
                a, b = read_reg(ins.srcs[0]), operand(ins.srcs[1])
                write_reg(ins.dst, a + b)
            elif op is Opcode.ISHL:
                a, b = read_reg(ins.srcs[0]), operand(ins.srcs[1])
                write_reg(ins.dst, np.left_shift(a, b & np.uint32(31)))
            elif op is Opcode.FADD:
                a, b = read_reg(ins.srcs[0]), operand(ins.srcs[1])
                write_reg(ins.dst, (a.view(np.float32) + b.view(np.float32)).view(np.uint32))
            elif op is Opcode.GET_TID:
                write_reg(ins.dst, tids)
            elif op is Opcode.GET_GID:
                write_reg(ins.dst, np.full(n_lanes, group, dtype=np.uint32))
            elif op is Opcode.LD_GLOBAL:
                buf = buffer_of(ins.mem)
                addrs = addresses(ins.mem)
                check_bounds(buf, addrs)
                write_reg(ins.dst, buf.words[addrs])
            elif op is Opcode.ST_GLOBAL:
                buf = buffer_of(ins.mem)
                base = addresses(ins.mem)
                self._store(rf, buf, base, [read_reg(r) for r in ins.srcs],
                            program.name)
            elif op is Opcode.ST_TILE:
                buf = buffers["tile"]
                base = tids.astype(np.int64) * len(ins.srcs)
                self._store(rf, buf, base, [read_reg(r) for r in ins.srcs],
                            program.name)
            else:  # pragma: no cover
                raise SimError(f"unhandled opcode {op}")

    def _store(self, rf: RegisterFile, buf: GlobalBuffer, base: np.ndarray,
               columns: list[np.ndarray], prog_name: str) -> None:
        """Write one store instruction and feed the store-residue latch.

        Lane l writes columns[j] value at base[l] + j. If the full set of
        addresses written by the wave is one contiguous, non-overlapping run
        whose length is a multiple of 16 words, the store goes out as
        half-wave bus transactions. Transactions issue from the highest
        16-word block down, so the latch ends up holding the lowest block.
        Anything else (strided, partial, scattered) bypasses the latch.
        """
        n_lanes = len(base)
        k = len(columns)
        addrs = base[:, None] + np.arange(k, dtype=np.int64)[None, :]
        flat_addrs = addrs.ravel()
        flat_vals = np.stack(columns, axis=1).ravel() if k > 1 else columns[0].copy()
        if flat_addrs.size and (flat_addrs.min() < 0 or flat_addrs.max() >= len(buf)):
            raise SimError(
                f"{prog_name}: address {int(flat_addrs.max())} outside buffer"
                f" {buf.name!r} of {len(buf)} words")
        buf.words[flat_addrs] = flat_vals

        count = flat_addrs.size
        if count == 0 or count % HALF_WAVE_WORDS:
            return
        lo = int(flat_addrs.min())
        hi = int(flat_addrs.max())
        contiguous = (hi - lo + 1 == count) and (len(np.unique(flat_addrs)) == count)
        if contiguous:
            rf.residue[:] = buf.words[lo: lo + HALF_WAVE_WORDS]

    # ── reporting ─────────────────────────────────────────────────────

    def leak_records(self) -> Iterator[LeakRecord]:
        for report in self.reports:
            yield from report.leak_records()

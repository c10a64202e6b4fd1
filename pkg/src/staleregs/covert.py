"""Register-file covert channel between cooperating shaders.

The sender writes a frame into a fixed window of general registers and
exits without clearing them. The receiver allocates onto the same SIMD
unit, reads the window it never wrote, and stores the leaked words to a
buffer it owns. On the store-residue profile the window travels through
the 16-word store buffer instead, so frames are 16 words; on the
persistent-register profiles the window is 32 words.

Frame layout (one 32-bit word per register):

    word 0   : magic 0xC0DE in the upper half, frame counter in the lower
    word 1.. : payload bytes, little endian, zero padded inside the last word

The counter strictly increases across the frames of one message, which
gives the receiver deduplication (stale re-reads of an old frame) and loss
accounting (gaps in the counter sequence) for free. Sixteen counter bits
cap a message at 65536 frames; longer messages are rejected.

Sender and receiver cooperate, so the decoded stream is trimmed to the
pre-agreed message length when the caller provides one. Nothing in the
frame format spends bytes on a length field: capacity stays at 31 payload
words (124 bytes) on the persistent profiles and 15 words (60 bytes) on
the store-residue profile.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from typing import IO, Iterable, Optional, Sequence

import numpy as np

from .config import profile as gpu_profile
from .isa import Instruction, MemRef, Opcode, Program, RegisterRef, TID, GID, reg
from .sim import GlobalBuffer, GpuConfig, Lifecycle, Simulator

MAGIC = 0xC0DE
MAX_FRAMES = 1 << 16

_SUBS = ("x", "y", "z", "w")


class ChannelError(ValueError):
    pass


def window_refs(base_cell: int, n_cells: int, quad: bool) -> list[RegisterRef]:
    """Architectural names of a register window starting at a cell index."""
    if not quad:
        return [reg(base_cell + i) for i in range(n_cells)]
    return [reg((base_cell + i) // 4, _SUBS[(base_cell + i) % 4]) for i in range(n_cells)]


@dataclass
class ChannelProfile:
    name: str
    gpu: GpuConfig
    window_base: int          # first register cell of the frame window
    window_words: int         # 32 on persistent profiles, 16 on store-residue
    record_words: int         # receiver dump record size during parsing
    residue_channel: bool

    @property
    def payload_words(self) -> int:
        return self.window_words - 1

    @property
    def capacity(self) -> int:
        """Payload bytes per frame."""
        return self.payload_words * 4

    def window(self) -> list[RegisterRef]:
        return window_refs(self.window_base, self.window_words,
                           self.gpu.quad_registers)


def channel_profile(name: str, window_base: Optional[int] = None,
                    seed: int = 0) -> ChannelProfile:
    gpu = replace(gpu_profile(name), seed=seed)
    if name == "nvidia":
        base = 0 if window_base is None else window_base
        cp = ChannelProfile(name, gpu, base, window_words=16, record_words=16,
                            residue_channel=True)
    elif name == "agx":
        base = gpu.regs_per_thread - 32 if window_base is None else window_base
        cp = ChannelProfile(name, gpu, base, window_words=32,
                            record_words=gpu.regs_per_thread, residue_channel=False)
    elif name == "adreno":
        base = gpu.regs_per_thread - 32 if window_base is None else window_base
        cp = ChannelProfile(name, gpu, base, window_words=32, record_words=32,
                            residue_channel=False)
    else:
        raise ChannelError(f"no channel profile for {name!r}")
    if cp.window_base < 0 or cp.window_base + cp.window_words > gpu.regs_per_thread:
        raise ChannelError(
            f"register window [{cp.window_base}, {cp.window_base + cp.window_words})"
            f" exceeds regs_per_thread={gpu.regs_per_thread}")
    return cp


# ── frames ────────────────────────────────────────────────────────────────

@dataclass
class Frame:
    counter: int
    payload: bytes

    @property
    def header_word(self) -> int:
        return (MAGIC << 16) | self.counter

    def words(self, pad_to: Optional[int] = None) -> list[int]:
        """Header plus packed payload words; optionally zero-padded."""
        raw = self.payload + b"\x00" * (-len(self.payload) % 4)
        out = [self.header_word]
        out.extend(int.from_bytes(raw[i:i + 4], "little") for i in range(0, len(raw), 4))
        if pad_to is not None:
            out.extend([0] * (pad_to - len(out)))
        return out


def encode(message: bytes, profile: ChannelProfile) -> list[Frame]:
    if not message:
        raise ChannelError("cannot encode an empty message")
    cap = profile.capacity
    n = math.ceil(len(message) / cap)
    if n > MAX_FRAMES:
        raise ChannelError(f"message needs {n} frames; the 16-bit counter allows {MAX_FRAMES}")
    return [Frame(i, message[i * cap:(i + 1) * cap]) for i in range(n)]


@dataclass
class ChannelStats:
    frames_sent: int = 0
    frames_received: int = 0
    duplicates: int = 0
    losses: int = 0
    payload_bytes_delivered: int = 0
    simulated_dispatches: int = 0
    rejected_headers: int = 0


# ── kernels ───────────────────────────────────────────────────────────────

def sender_program(frame: Frame, cp: ChannelProfile) -> Program:
    """Immediate-value sender: one mov per frame word, then exit.

    On the store-residue profile the window additionally goes out through
    one coalesced store, because registers alone do not survive there.
    """
    window = cp.window()
    words = frame.words()
    if len(words) > len(window):
        raise ChannelError("frame does not fit the register window")
    body = [Instruction(Opcode.MOV_IMM, dst=window[i], srcs=(w,))
            for i, w in enumerate(words)]
    if cp.residue_channel:
        k = len(words)
        body.append(Instruction(Opcode.ST_GLOBAL,
                                mem=MemRef("b_tx", TID, scale=k),
                                srcs=tuple(window[:k])))
    body.append(Instruction(Opcode.EXIT))
    return Program("channel_send", tuple(body))


def staged_sender_program(cp: ChannelProfile) -> Program:
    """Multi-group sender: group g loads its frame from a staging buffer.

    Staging slot g holds window_words words at [g * window_words]. All
    lanes of a group load the same words, so the whole window carries the
    group's frame regardless of lane.
    """
    window = cp.window()
    w = cp.window_words
    body = [Instruction(Opcode.LD_GLOBAL, dst=window[j],
                        mem=MemRef("b_stage", GID, scale=w, offset=j))
            for j in range(w)]
    if cp.residue_channel:
        body.append(Instruction(Opcode.ST_GLOBAL,
                                mem=MemRef("b_tx", TID, scale=w),
                                srcs=tuple(window)))
    body.append(Instruction(Opcode.EXIT))
    return Program("channel_send_staged", tuple(body))


def receiver_program(cp: ChannelProfile) -> Program:
    """The receiver never writes a register; it only stores what it finds.

    Persistent profiles dump record_words architectural registers per
    thread. The store-residue profile reads a single unwritten register,
    which drains the 16-word store buffer across the half-wave lanes.
    """
    if cp.residue_channel:
        probe_reg = reg(cp.gpu.regs_per_thread - 1)
        body = [Instruction(Opcode.ST_GLOBAL, mem=MemRef("b_rx", TID), srcs=(probe_reg,)),
                Instruction(Opcode.EXIT)]
        return Program("channel_recv", tuple(body))
    if cp.record_words == cp.gpu.regs_per_thread:
        # remapped file: the window could be anywhere, dump everything
        dump = window_refs(0, cp.record_words, cp.gpu.quad_registers)
    else:
        dump = cp.window()
    body = [Instruction(Opcode.ST_GLOBAL,
                        mem=MemRef("b_rx", TID, scale=cp.record_words, offset=j),
                        srcs=(dump[j],))
            for j in range(cp.record_words)]
    body.append(Instruction(Opcode.EXIT))
    return Program("channel_recv", tuple(body))


def junk_program(n_words: int, quad: bool, base_cell: int = 0) -> Program:
    """A benign-looking shader that fills registers with its own data."""
    regs = window_refs(base_cell, n_words, quad)
    body = [Instruction(Opcode.LD_GLOBAL, dst=regs[j],
                        mem=MemRef("b_junk", TID, scale=n_words, offset=j))
            for j in range(n_words)]
    body.append(Instruction(Opcode.EXIT))
    return Program("bystander", tuple(body))


# ── wire protocol over the simulator ──────────────────────────────────────

def send_frame(sim: Simulator, frame: Frame, cp: ChannelProfile) -> None:
    buffers = {}
    if cp.residue_channel:
        k = len(frame.words())
        buffers["b_tx"] = GlobalBuffer("b_tx", cp.gpu.wave_width * k)
    sim.run(sender_program(frame, cp), groups=1, group_size=cp.gpu.wave_width,
            buffers=buffers)


def probe(sim: Simulator, cp: ChannelProfile, groups: int = 1) -> np.ndarray:
    """Run one receiver dispatch and return the dumped words."""
    n_threads = groups * cp.gpu.wave_width
    per_thread = 1 if cp.residue_channel else cp.record_words
    rx = GlobalBuffer("b_rx", n_threads * per_thread)
    sim.run(receiver_program(cp), groups=groups, group_size=cp.gpu.wave_width,
            buffers={"b_rx": rx})
    return rx.words.copy()


def run_junk(sim: Simulator, cp: ChannelProfile, rng: np.random.Generator,
             n_words: int = 32) -> None:
    """Dispatch a bystander shader that dirties the register file."""
    n_threads = cp.gpu.wave_width
    junk = GlobalBuffer("b_junk", n_threads * n_words)
    junk.fill_f32(rng.random(n_threads * n_words, dtype=np.float32))
    sim.run(junk_program(n_words, cp.gpu.quad_registers, base_cell=cp.window_base),
            groups=1, group_size=n_threads, buffers={"b_junk": junk})


# ── receive ───────────────────────────────────────────────────────────────

def receive(words, cp: ChannelProfile, message_len: Optional[int] = None,
            stats: Optional[ChannelStats] = None,
            counter_slack: int = 16) -> tuple[bytes, ChannelStats]:
    """Parse receiver dumps back into a message.

    `words` is a flat uint32 stream of receiver records (length a multiple
    of record_words). Frames are identified by the magic upper half of the
    header word at any offset within a record; the payload follows with
    wraparound, which is what a remapped register window looks like in an
    architectural dump. Duplicate counters are dropped, counter gaps are
    reported as losses.

    A payload word can spoof the magic by accident. Real counters grow
    roughly monotonically in dump order, so a header whose counter jumps
    more than counter_slack past the largest accepted one is rejected as
    implausible. Keep the slack above the largest sender batch in use.
    """
    if stats is None:
        stats = ChannelStats()
    stream = np.asarray(words, dtype=np.uint32).ravel()
    rw = cp.record_words
    if len(stream) % rw:
        raise ChannelError(f"dump length {len(stream)} is not a multiple of {rw}")
    frames: dict[int, bytes] = {}
    top = -1
    for rec in stream.reshape(-1, rw):
        hits = np.nonzero((rec >> 16) == MAGIC)[0]
        for p in hits.tolist():
            counter = int(rec[p] & 0xFFFF)
            if counter > top + counter_slack:
                stats.rejected_headers += 1
                continue
            if counter in frames:
                stats.duplicates += 1
                continue
            stats.frames_received += 1
            top = max(top, counter)
            idx = (p + 1 + np.arange(cp.payload_words)) % rw
            frames[counter] = rec[idx].astype("<u4").tobytes()
    if not frames:
        stats.losses += stats.frames_sent
        return b"", stats
    present = sorted(frames)
    if stats.frames_sent:
        stats.losses += stats.frames_sent - len(frames)
    else:
        stats.losses += (top + 1) - len(frames)
    message = b"".join(frames[c] for c in present)
    cap = cp.capacity
    if message_len is not None:
        if len(frames) == top + 1 == math.ceil(message_len / cap):
            # complete sequence: exact trim is well defined
            message = message[:message_len]
        delivered = 0
        for c in present:
            delivered += min(cap, max(0, message_len - c * cap))
        stats.payload_bytes_delivered += delivered
    else:
        stats.payload_bytes_delivered += len(frames) * cap
    return message, stats


def transmit(message: bytes, profile_name: str, seed: int = 0,
             mitigated: bool = False) -> tuple[bytes, ChannelStats]:
    """Point-to-point transfer: alternate sender and receiver dispatches."""
    cp = channel_profile(profile_name, seed=seed)
    if mitigated:
        cp = replace(cp, gpu=replace(cp.gpu, lifecycle=Lifecycle.ZERO_ON_ALLOC))
    sim = Simulator(cp.gpu)
    frames = encode(message, cp)
    dumps = []
    for frame in frames:
        send_frame(sim, frame, cp)
        dumps.append(probe(sim, cp))
    stats = ChannelStats(frames_sent=len(frames),
                         simulated_dispatches=sim.dispatch_count)
    out, stats = receive(np.concatenate(dumps), cp, message_len=len(message),
                         stats=stats)
    return out, stats


# ── throughput sweep ──────────────────────────────────────────────────────

@dataclass
class SweepPoint:
    sender_groups: int
    receiver_groups: int
    bytes_per_dispatch: float
    loss_rate: float
    stats: ChannelStats = field(default_factory=ChannelStats, repr=False)


def _stage_frames(batch: Sequence[Frame], cp: ChannelProfile) -> GlobalBuffer:
    w = cp.window_words
    buf = GlobalBuffer("b_stage", len(batch) * w)
    flat = []
    for f in batch:
        flat.extend(f.words(pad_to=w))
    buf.fill_words(np.array(flat, dtype=np.uint32))
    return buf


def sweep_cell(cp: ChannelProfile, message: bytes, sender_groups: int,
               receiver_groups: int) -> SweepPoint:
    """One sweep cell on a fresh simulator.

    Each round stages up to sender_groups frames, sends them in one
    dispatch (group g on core g carries frame g of the batch), then reads
    with one receiver dispatch of receiver_groups groups. Receiver group j
    probes core j, so frames land only where a receiver group is listening;
    surplus sender groups are overwritten next round and counted as losses,
    surplus receiver groups re-read stale or virgin registers.
    """
    if max(sender_groups, receiver_groups) > cp.gpu.cores:
        raise ChannelError("sweep needs one core per group; raise cores")
    sim = Simulator(cp.gpu)
    frames = encode(message, cp)
    send_prog = staged_sender_program(cp)
    w = cp.window_words
    dumps = []
    for start in range(0, len(frames), sender_groups):
        batch = frames[start:start + sender_groups]
        buffers = {"b_stage": _stage_frames(batch, cp)}
        if cp.residue_channel:
            buffers["b_tx"] = GlobalBuffer("b_tx", len(batch) * cp.gpu.wave_width * w)
        sim.run(send_prog, groups=len(batch), group_size=cp.gpu.wave_width,
                buffers=buffers)
        dumps.append(probe(sim, cp, groups=receiver_groups))
    stats = ChannelStats(frames_sent=len(frames),
                         simulated_dispatches=sim.dispatch_count)
    _, stats = receive(np.concatenate(dumps), cp, message_len=len(message),
                       stats=stats)
    loss_rate = stats.losses / stats.frames_sent if stats.frames_sent else 0.0
    bpd = stats.payload_bytes_delivered / stats.simulated_dispatches
    return SweepPoint(sender_groups, receiver_groups, bpd, loss_rate, stats)


def sweep(profile_name: str, message: bytes,
          sender_grid: Iterable[int] = range(1, 6),
          receiver_grid: Iterable[int] = range(1, 6),
          seed: int = 0, mitigated: bool = False) -> list[SweepPoint]:
    """Sweep the sender/receiver group grid; cells are independent runs."""
    sender_grid = list(sender_grid)
    receiver_grid = list(receiver_grid)
    need = max(sender_grid + receiver_grid)
    points = []
    for gs in sender_grid:
        for gr in receiver_grid:
            cp = channel_profile(profile_name, seed=seed)
            if cp.gpu.cores < need:
                cp = replace(cp, gpu=replace(cp.gpu, cores=need))
            if mitigated:
                cp = replace(cp, gpu=replace(cp.gpu, lifecycle=Lifecycle.ZERO_ON_ALLOC))
            points.append(sweep_cell(cp, message, gs, gr))
    return points


SWEEP_CSV_HEADER = ["sender_groups", "receiver_groups", "bytes_per_dispatch", "loss_rate"]


def write_sweep_csv(points: Iterable[SweepPoint], out: IO[str]) -> None:
    w = csv.writer(out, lineterminator="\n")
    w.writerow(SWEEP_CSV_HEADER)
    for p in points:
        w.writerow([p.sender_groups, p.receiver_groups,
                    f"{p.bytes_per_dispatch:.6f}", f"{p.loss_rate:.6f}"])


def best_cell(points: Sequence[SweepPoint]) -> SweepPoint:
    """The unique throughput maximum; ties broken toward smaller grids."""
    return max(points, key=lambda p: (p.bytes_per_dispatch,
                                      -(p.sender_groups + p.receiver_groups)))

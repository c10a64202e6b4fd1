"""Straight-line shader ISA: types, assembler, disassembler, dataflow queries.

The instruction set is deliberately tiny. It is just large enough to express
the kernels that matter here: victim shaders that move data through general
purpose registers, and attacker shaders that read registers they never wrote.
There is no control flow; every program is a straight line ending in `exit`.

Two register models exist. Flat files name 32-bit registers `r0, r1, ...`.
Quad files group four 32-bit cells per named register and address them as
`rN.x / rN.y / rN.z / rN.w`. A program must use one style consistently; the
simulator config decides which one is legal.

Special registers `tid` (global thread index) and `gid` (thread group index)
are read-only and always defined. They may appear directly in memory address
operands, e.g. `st_global [b0 + tid*4 + 1], r2`.
"""

from __future__ import annotations

import enum
import re
import struct
from dataclasses import dataclass
from typing import Iterable, Optional, Union


class IsaError(ValueError):
    """Raised for malformed programs, at parse time or validation time."""


class RegClass(enum.Enum):
    GENERAL = "general"
    SPECIAL = "special"


_SUBS = ("x", "y", "z", "w")


@dataclass(frozen=True)
class RegisterRef:
    """A named register cell.

    For general registers `sub` is present exactly when the program targets
    the quad model. Special registers never carry a subregister.
    """

    kind: RegClass
    index: int
    sub: Optional[str] = None

    def __post_init__(self):
        if self.sub is not None and self.sub not in _SUBS:
            raise IsaError(f"bad subregister {self.sub!r}")
        if self.index < 0:
            raise IsaError("negative register index")

    @property
    def is_general(self) -> bool:
        return self.kind is RegClass.GENERAL

    def cell(self) -> int:
        """Linear cell index within the per-thread register file."""
        if self.sub is None:
            return self.index
        return self.index * 4 + _SUBS.index(self.sub)

    def __str__(self) -> str:
        if self.kind is RegClass.SPECIAL:
            return "tid" if self.index == 0 else "gid"
        if self.sub is None:
            return f"r{self.index}"
        return f"r{self.index}.{self.sub}"


TID = RegisterRef(RegClass.SPECIAL, 0)
GID = RegisterRef(RegClass.SPECIAL, 1)


def reg(index: int, sub: Optional[str] = None) -> RegisterRef:
    return RegisterRef(RegClass.GENERAL, index, sub)


class Opcode(enum.Enum):
    MOV_IMM = "mov_imm"
    MOV_REG = "mov"
    IADD = "iadd"
    ISHL = "ishl"
    FADD = "fadd"
    GET_TID = "get_tid"
    GET_GID = "get_gid"
    LD_GLOBAL = "ld_global"
    ST_GLOBAL = "st_global"
    ST_TILE = "st_tile"
    NOP = "nop"
    EXIT = "exit"


# Address operand: word address = index_reg * scale + offset. A missing
# index register means a constant address. `st_tile` ignores its MemRef
# fields; the tile store always lands at tid * len(srcs).
@dataclass(frozen=True)
class MemRef:
    buffer: str
    index: Optional[RegisterRef] = None
    scale: int = 1
    offset: int = 0

    def __str__(self) -> str:
        parts = [self.buffer]
        if self.index is not None:
            parts.append(str(self.index) if self.scale == 1 else f"{self.index}*{self.scale}")
        if self.offset or self.index is None:
            parts.append(str(self.offset))
        return "[" + " + ".join(parts) + "]"


Operand = Union[RegisterRef, int]  # int = 32-bit immediate, stored unsigned


@dataclass(frozen=True)
class Instruction:
    opcode: Opcode
    dst: Optional[RegisterRef] = None
    srcs: tuple = ()
    mem: Optional[MemRef] = None


@dataclass
class Program:
    name: str
    instructions: tuple
    declared_registers: int = 0

    def __post_init__(self):
        self.instructions = tuple(self.instructions)
        if self.declared_registers == 0:
            self.declared_registers = _max_cell(self.instructions) + 1


# ── instruction shape checks ──────────────────────────────────────────────

_SHAPES = {
    Opcode.MOV_IMM: "d i",
    Opcode.MOV_REG: "d r",
    Opcode.IADD: "d r o",
    Opcode.ISHL: "d r o",
    Opcode.FADD: "d r o",
    Opcode.GET_TID: "d",
    Opcode.GET_GID: "d",
    Opcode.LD_GLOBAL: "d m",
    Opcode.ST_GLOBAL: "m R",
    Opcode.ST_TILE: "R",
    Opcode.NOP: "",
    Opcode.EXIT: "",
}


def check_instruction(ins: Instruction) -> None:
    shape = _SHAPES[ins.opcode].split()
    if ("d" in shape) != (ins.dst is not None):
        raise IsaError(f"{ins.opcode.value}: bad destination operand")
    if ins.dst is not None and not ins.dst.is_general:
        raise IsaError(f"{ins.opcode.value}: destination must be a general register")
    want_mem = "m" in shape or ins.opcode is Opcode.ST_TILE
    if want_mem != (ins.mem is not None):
        raise IsaError(f"{ins.opcode.value}: bad memory operand")
    src_codes = [c for c in shape if c in ("r", "o", "i", "R")]
    if src_codes == ["R"]:
        if not ins.srcs or not all(isinstance(s, RegisterRef) and s.is_general for s in ins.srcs):
            raise IsaError(f"{ins.opcode.value}: source list must be general registers")
    else:
        if len(ins.srcs) != len(src_codes):
            raise IsaError(f"{ins.opcode.value}: expected {len(src_codes)} source operands")
        for code, s in zip(src_codes, ins.srcs):
            if code == "r" and not isinstance(s, RegisterRef):
                raise IsaError(f"{ins.opcode.value}: operand must be a register")
            if code == "i" and not isinstance(s, int):
                raise IsaError(f"{ins.opcode.value}: operand must be an immediate")
            if isinstance(s, int) and not (0 <= s < 2 ** 32):
                raise IsaError(f"{ins.opcode.value}: immediate out of 32-bit range")
            if isinstance(s, RegisterRef) and s.kind is RegClass.SPECIAL:
                # tid/gid flow only through get_tid/get_gid or addressing
                raise IsaError(f"{ins.opcode.value}: special register not allowed here")
    if ins.mem is not None and ins.mem.scale < 1:
        raise IsaError("address scale must be >= 1")
    if ins.mem is not None and ins.mem.offset < 0:
        raise IsaError("address offset must be >= 0")


# ── dataflow queries ──────────────────────────────────────────────────────

def _instr_reads(ins: Instruction) -> list[RegisterRef]:
    """General registers this instruction reads, in operand order."""
    out = []
    for s in ins.srcs:
        if isinstance(s, RegisterRef) and s.is_general:
            out.append(s)
    if ins.mem is not None and ins.mem.index is not None and ins.mem.index.is_general:
        out.append(ins.mem.index)
    return out


def uninitialized_reads(p: Program) -> list[tuple[int, RegisterRef]]:
    """All (instruction index, register) reads that precede any write.

    Reads of an instruction are evaluated before its own write takes effect,
    so `iadd r0, r0, 1` with no prior `r0` write is flagged.
    """
    written: set[tuple[int, Optional[str]]] = set()
    flagged: set[tuple[int, Optional[str]]] = set()
    out = []
    for i, ins in enumerate(p.instructions):
        for r in _instr_reads(ins):
            key = (r.index, r.sub)
            if key not in written and key not in flagged:
                flagged.add(key)
                out.append((i, r))
        if ins.dst is not None:
            written.add((ins.dst.index, ins.dst.sub))
    return out


def read_set_before_write(p: Program) -> set[RegisterRef]:
    """The set of general registers read before they are ever written."""
    return {r for _, r in uninitialized_reads(p)}


def written_registers(p: Program) -> list[RegisterRef]:
    """Registers the program writes, in first-write order, deduplicated."""
    seen = set()
    out = []
    for ins in p.instructions:
        if ins.dst is not None:
            key = (ins.dst.index, ins.dst.sub)
            if key not in seen:
                seen.add(key)
                out.append(ins.dst)
    return out


def _max_cell(instructions: Iterable[Instruction]) -> int:
    top = -1
    for ins in instructions:
        refs = list(ins.srcs) + [ins.dst]
        if ins.mem is not None:
            refs.append(ins.mem.index)
        for r in refs:
            if isinstance(r, RegisterRef) and r.is_general:
                top = max(top, r.cell())
    return top


def uses_quad_refs(p: Program) -> bool:
    for ins in p.instructions:
        refs = list(ins.srcs) + [ins.dst]
        if ins.mem is not None:
            refs.append(ins.mem.index)
        for r in refs:
            if isinstance(r, RegisterRef) and r.is_general and r.sub is not None:
                return True
    return False


def validate_program(p: Program) -> None:
    """Structural validation independent of any simulator config."""
    if not p.instructions:
        raise IsaError("program has no instructions")
    if p.instructions[-1].opcode is not Opcode.EXIT:
        raise IsaError("program must end with exit")
    quad = None
    for i, ins in enumerate(p.instructions):
        try:
            check_instruction(ins)
        except IsaError as e:
            raise IsaError(f"instruction {i}: {e}") from None
        refs = list(ins.srcs) + [ins.dst]
        if ins.mem is not None:
            refs.append(ins.mem.index)
        for r in refs:
            if isinstance(r, RegisterRef) and r.is_general:
                has_sub = r.sub is not None
                if quad is None:
                    quad = has_sub
                elif quad != has_sub:
                    raise IsaError(f"instruction {i}: mixes quad and flat register names")
    if _max_cell(p.instructions) + 1 > p.declared_registers:
        raise IsaError("program references registers beyond its declared count")


# ── assembler ─────────────────────────────────────────────────────────────

_REG_RE = re.compile(r"^r(\d+)(?:\.([xyzw]))?$")
_IDENT_RE = re.compile(r"^[A-Za-z_]\w*$")


def _parse_reg(tok: str, line: int) -> RegisterRef:
    if tok == "tid":
        return TID
    if tok == "gid":
        return GID
    m = _REG_RE.match(tok)
    if not m:
        raise IsaError(f"line {line}: bad register {tok!r}")
    return RegisterRef(RegClass.GENERAL, int(m.group(1)), m.group(2))


def _parse_imm(tok: str, line: int) -> int:
    try:
        if tok.lower().lstrip("+-").startswith("0x"):
            return int(tok, 16) & 0xFFFFFFFF
        if any(c in tok for c in ".eE"):
            # float literal, stored as its IEEE-754 single precision bits
            return struct.unpack("<I", struct.pack("<f", float(tok)))[0]
        return int(tok, 10) & 0xFFFFFFFF
    except (ValueError, struct.error):
        raise IsaError(f"line {line}: bad immediate {tok!r}") from None


def _parse_operand(tok: str, line: int) -> Operand:
    if tok == "tid" or tok == "gid" or _REG_RE.match(tok):
        return _parse_reg(tok, line)
    return _parse_imm(tok, line)


def _parse_mem(tok: str, line: int) -> MemRef:
    if not (tok.startswith("[") and tok.endswith("]")):
        raise IsaError(f"line {line}: bad address operand {tok!r}")
    parts = [t.strip() for t in tok[1:-1].split("+")]
    if not parts or not _IDENT_RE.match(parts[0]) or _REG_RE.match(parts[0]) or parts[0] in ("tid", "gid"):
        raise IsaError(f"line {line}: address must start with a buffer name")
    buffer = parts[0]
    index: Optional[RegisterRef] = None
    scale = 1
    offset = 0
    for part in parts[1:]:
        if "*" in part:
            base, _, mul = part.partition("*")
            if index is not None:
                raise IsaError(f"line {line}: multiple index registers in address")
            index = _parse_reg(base.strip(), line)
            scale = int(mul.strip(), 0)
        elif part == "tid" or part == "gid" or _REG_RE.match(part):
            if index is not None:
                raise IsaError(f"line {line}: multiple index registers in address")
            index = _parse_reg(part, line)
        else:
            try:
                offset += int(part, 0)
            except ValueError:
                raise IsaError(f"line {line}: bad address term {part!r}") from None
    return MemRef(buffer, index, scale, offset)


def _parse_reglist(tok: str, line: int) -> tuple:
    regs = tuple(_parse_reg(t, line) for t in tok.split("_"))
    if not regs:
        raise IsaError(f"line {line}: empty register list")
    return regs


def parse_program(text: str, name: Optional[str] = None) -> Program:
    """Assemble source text into a Program. `//` starts a comment."""
    instructions: list[Instruction] = []
    declared = 0
    prog_name = name or "kernel"
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("//", 1)[0].strip()
        if not line:
            continue
        if line.startswith(".shader"):
            tok = line.split(None, 1)[1].strip() if len(line.split(None, 1)) > 1 else ""
            if not _IDENT_RE.match(tok):
                raise IsaError(f"line {lineno}: bad shader name")
            if name is None:
                prog_name = tok
            continue
        if line.startswith(".regs"):
            try:
                declared = int(line.split()[1], 0)
            except (IndexError, ValueError):
                raise IsaError(f"line {lineno}: bad .regs directive") from None
            continue
        mnemonic, _, rest = line.partition(" ")
        ops = [t.strip() for t in _split_operands(rest.strip())] if rest.strip() else []
        try:
            opcode = Opcode(mnemonic)
        except ValueError:
            raise IsaError(f"line {lineno}: unknown opcode {mnemonic!r}") from None
        instructions.append(_build_instruction(opcode, ops, lineno))
    prog = Program(prog_name, tuple(instructions), declared)
    validate_program(prog)
    return prog


def _split_operands(rest: str) -> list[str]:
    # commas never occur inside operands, bracketed or not
    return [t for t in (s.strip() for s in rest.split(",")) if t]


def _build_instruction(opcode: Opcode, ops: list[str], line: int) -> Instruction:
    def need(n):
        if len(ops) != n:
            raise IsaError(f"line {line}: {opcode.value} takes {n} operands, got {len(ops)}")

    if opcode in (Opcode.NOP, Opcode.EXIT):
        need(0)
        ins = Instruction(opcode)
    elif opcode is Opcode.MOV_IMM:
        need(2)
        ins = Instruction(opcode, dst=_parse_reg(ops[0], line), srcs=(_parse_imm(ops[1], line),))
    elif opcode is Opcode.MOV_REG:
        need(2)
        ins = Instruction(opcode, dst=_parse_reg(ops[0], line), srcs=(_parse_reg(ops[1], line),))
    elif opcode in (Opcode.IADD, Opcode.ISHL, Opcode.FADD):
        need(3)
        ins = Instruction(opcode, dst=_parse_reg(ops[0], line),
                          srcs=(_parse_reg(ops[1], line), _parse_operand(ops[2], line)))
    elif opcode in (Opcode.GET_TID, Opcode.GET_GID):
        need(1)
        ins = Instruction(opcode, dst=_parse_reg(ops[0], line))
    elif opcode is Opcode.LD_GLOBAL:
        need(2)
        ins = Instruction(opcode, dst=_parse_reg(ops[0], line), mem=_parse_mem(ops[1], line))
    elif opcode is Opcode.ST_GLOBAL:
        need(2)
        ins = Instruction(opcode, mem=_parse_mem(ops[0], line), srcs=_parse_reglist(ops[1], line))
    elif opcode is Opcode.ST_TILE:
        need(2)
        if ops[1] != "quad":
            raise IsaError(f"line {line}: st_tile target must be 'quad'")
        ins = Instruction(opcode, srcs=_parse_reglist(ops[0], line), mem=MemRef("tile"))
    else:  # pragma: no cover
        raise IsaError(f"line {line}: unhandled opcode")
    try:
        check_instruction(ins)
    except IsaError as e:
        raise IsaError(f"line {line}: {e}") from None
    return ins


# ── disassembler ──────────────────────────────────────────────────────────

def _fmt_operand(op: Operand) -> str:
    if isinstance(op, RegisterRef):
        return str(op)
    return f"0x{op:08x}"


def render_instruction(ins: Instruction) -> str:
    op = ins.opcode
    if op in (Opcode.NOP, Opcode.EXIT):
        return op.value
    if op in (Opcode.GET_TID, Opcode.GET_GID):
        return f"{op.value} {ins.dst}"
    if op is Opcode.LD_GLOBAL:
        return f"{op.value} {ins.dst}, {ins.mem}"
    if op is Opcode.ST_GLOBAL:
        return f"{op.value} {ins.mem}, {'_'.join(str(r) for r in ins.srcs)}"
    if op is Opcode.ST_TILE:
        return f"{op.value} {'_'.join(str(r) for r in ins.srcs)}, quad"
    parts = ", ".join([str(ins.dst)] + [_fmt_operand(s) for s in ins.srcs])
    return f"{op.value} {parts}"


def render_program(p: Program) -> str:
    """Canonical source text. parse_program(render_program(p)) == p."""
    if not p.instructions:
        raise IsaError("cannot render an empty program")
    validate_program(p)
    lines = [f".shader {p.name}", f".regs {p.declared_registers}"]
    lines.extend(render_instruction(ins) for ins in p.instructions)
    return "\n".join(lines) + "\n"

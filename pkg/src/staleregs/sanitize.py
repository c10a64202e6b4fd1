"""Static shader sanitizer.

Two tools against register leakage, both pure dataflow over the straight
line instruction list:

* `analyze` rejects any program that reads a general register before
  writing it. On hardware that keeps register contents across shader
  allocations, such a read observes another shader's data, so a clean
  driver should refuse to run the program.
* `rewrite_cleanup` hardens a victim shader instead: it appends zeroing
  writes in front of `exit`, so nothing the shader computed survives into
  the next occupant of the SIMD unit. Buffer outputs are untouched because
  the inserted writes only follow the existing stores.

ABI-defined registers (attribute interpolants and similar, which the driver
initializes before shader start) can be whitelisted so `analyze` does not
flag them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import FrozenSet, Iterable

from .isa import (
    Instruction, Opcode, Program, RegisterRef, reg, uninitialized_reads,
    uses_quad_refs, written_registers,
)

_SUBS = ("x", "y", "z", "w")


@dataclass
class Verdict:
    accepted: bool
    violations: list = field(default_factory=list)  # (instruction index, RegisterRef)

    def __str__(self) -> str:
        if self.accepted:
            return "Accept"
        locs = ", ".join(f"{r} at instruction {i}" for i, r in self.violations)
        return f"Reject: uninitialized reads: {locs}"


def analyze(program: Program, abi_registers: Iterable[RegisterRef] = ()) -> Verdict:
    """Accept iff every general register is written before it is read."""
    abi = {(r.index, r.sub) for r in abi_registers}
    violations = [(i, r) for i, r in uninitialized_reads(program)
                  if (r.index, r.sub) not in abi]
    return Verdict(accepted=not violations, violations=violations)


def _window_refs(n_cells: int, quad: bool) -> list[RegisterRef]:
    if not quad:
        return [reg(i) for i in range(n_cells)]
    return [reg(i // 4, _SUBS[i % 4]) for i in range(n_cells)]


def rewrite_cleanup(program: Program, full: bool = False) -> Program:
    """Append zeroing writes for everything the shader may have dirtied.

    By default only the registers the program actually writes are scrubbed.
    With `full=True` the whole declared register window is scrubbed, which
    also covers registers the program read but never wrote.
    """
    if full:
        targets = _window_refs(program.declared_registers, uses_quad_refs(program))
    else:
        targets = written_registers(program)
    body = list(program.instructions)
    tail = body.pop() if body and body[-1].opcode is Opcode.EXIT else None
    for r in targets:
        body.append(Instruction(Opcode.MOV_IMM, dst=r, srcs=(0,)))
    if tail is not None:
        body.append(tail)
    return Program(f"{program.name}_scrubbed", tuple(body),
                   declared_registers=program.declared_registers)

"""Access to the shipped kernel fixtures."""

from __future__ import annotations

import importlib.resources

from .isa import Program, parse_program

KERNEL_NAMES = ("dump_adreno", "dump_agx", "dump_nvidia", "fragment_shader")


def kernel_source(name: str) -> str:
    if name not in KERNEL_NAMES:
        raise KeyError(f"unknown kernel fixture {name!r}; have {KERNEL_NAMES}")
    ref = importlib.resources.files("staleregs").joinpath("kernels", f"{name}.asm")
    return ref.read_text(encoding="utf-8")


def load_kernel(name: str) -> Program:
    return parse_program(kernel_source(name))

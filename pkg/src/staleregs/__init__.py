"""staleregs: a deterministic model of GPU register-lifecycle leakage.

The package simulates three register lifecycle policies observed on consumer
GPUs, the covert channel and data-reconstruction attacks they enable, and a
shader sanitizer that rejects or rewrites the offending programs.

Submodules:
  isa       tiny straight-line shader ISA: parser, renderer, read/write sets
  sim       the lockstep multi-core simulator and leak record export
  config    named GPU profiles and the key=value config format
  covert    framed covert channel over stale registers, plus the group sweep
  pixel     tiled-rendering victim, fragment identification, screen rebuild
  jigsaw    genetic solver arranging leaked tiles by edge similarity
  cnn       conv-layer victim and the two activation-capture attacks
  llm       embedding-table victim and exact-match token reconstruction
  sanitize  static uninitialized-read check and cleanup rewriting
  cli       the `staleregs` command-line harness
"""

__version__ = "0.1.0"

from .config import PROFILE_NAMES, profile
from .isa import Program, parse_program, read_set_before_write, render_program
from .sim import (GlobalBuffer, GpuConfig, LeakRecord, Lifecycle, RemapPolicy,
                  Simulator)

__all__ = [
    "__version__",
    "Program", "parse_program", "render_program", "read_set_before_write",
    "GpuConfig", "GlobalBuffer", "LeakRecord", "Lifecycle", "RemapPolicy", "Simulator",
    "profile", "PROFILE_NAMES",
]

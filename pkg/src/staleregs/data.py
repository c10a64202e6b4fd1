"""Access to the shipped default fixtures (images, tables, leak captures).

Everything the CLI needs to run end-to-end offline lives here. The files
are generated by scripts/make_fixtures.py and committed; nothing is
downloaded or synthesized at runtime.
"""

from __future__ import annotations

import importlib.resources
import io

import numpy as np

from .pgm import parse_pgm

FIXTURE_NAMES = ("scene_128.pgm", "digit_28.pgm", "tables.bin", "leak.bin")


def fixture_bytes(name: str) -> bytes:
    if name not in FIXTURE_NAMES:
        raise KeyError(f"unknown fixture {name!r}; have {FIXTURE_NAMES}")
    ref = importlib.resources.files("staleregs").joinpath("data", name)
    return ref.read_bytes()


def load_image(name: str = "scene_128.pgm") -> np.ndarray:
    return parse_pgm(fixture_bytes(name))


def load_default_tables():
    from .llm import load_tables
    return load_tables(io.BytesIO(fixture_bytes("tables.bin")))


def load_default_leak() -> np.ndarray:
    return np.frombuffer(fixture_bytes("leak.bin"), dtype="<f4").copy()

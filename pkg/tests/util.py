"""Shared helpers for the test suite."""

import random

import numpy as np

from staleregs.isa import Instruction, MemRef, Opcode, Program, TID, GID, reg


def random_program(rng: random.Random, name: str = "fuzz", quad: bool = False,
                   max_len: int = 10) -> Program:
    """A random straight-line program over a 64-cell register window.

    Reads are drawn uniformly, so early instructions frequently touch
    registers nothing has written yet; roughly half the corpus should be
    rejected by the static check. Address index registers are drawn only
    from values the program provably bounded (tid, gid, small immediates),
    so every generated program runs without faulting no matter what
    garbage the data registers hold.
    """
    safe: list = []   # registers currently holding a small bounded value

    def r():
        if quad:
            return reg(rng.randrange(16), "xyzw"[rng.randrange(4)])
        return reg(rng.randrange(64))

    def write(dst, bounded=False):
        if bounded:
            if dst not in safe:
                safe.append(dst)
        elif dst in safe:
            safe.remove(dst)
        return dst

    def operand():
        return r() if rng.random() < 0.7 else rng.randrange(2 ** 32)

    def mem():
        kind = rng.random()
        if kind < 0.5:
            index = TID
        elif kind < 0.7:
            index = GID
        elif kind < 0.9 and safe:
            index = rng.choice(safe)
        else:
            index = None
        return MemRef(rng.choice(("b0", "b1")), index,
                      rng.choice((1, 1, 2, 4)) if index is not None else 1,
                      rng.randrange(4))

    body = []
    for _ in range(rng.randrange(1, max_len + 1)):
        pick = rng.random()
        if pick < 0.25:
            small = rng.random() < 0.5
            imm = rng.randrange(512) if small else rng.randrange(2 ** 32)
            body.append(Instruction(Opcode.MOV_IMM,
                                    dst=write(r(), bounded=small), srcs=(imm,)))
        elif pick < 0.40:
            body.append(Instruction(Opcode.MOV_REG, dst=write(r()), srcs=(r(),)))
        elif pick < 0.55:
            op = rng.choice((Opcode.IADD, Opcode.ISHL, Opcode.FADD))
            body.append(Instruction(op, dst=write(r()), srcs=(r(), operand())))
        elif pick < 0.65:
            body.append(Instruction(rng.choice((Opcode.GET_TID, Opcode.GET_GID)),
                                    dst=write(r(), bounded=True)))
        elif pick < 0.80:
            body.append(Instruction(Opcode.LD_GLOBAL, dst=write(r()), mem=mem()))
        elif pick < 0.95:
            srcs = tuple(r() for _ in range(rng.randrange(1, 3)))
            body.append(Instruction(Opcode.ST_GLOBAL, srcs=srcs, mem=mem()))
        else:
            body.append(Instruction(Opcode.NOP))
    body.append(Instruction(Opcode.EXIT))
    return Program(name, tuple(body), declared_registers=64)


def smooth_image(shape=(128, 128), seed: int = 11, waves: int = 6) -> np.ndarray:
    """Low-frequency cosine mixture in [2/255, 253/255], byte-quantized."""
    rng = np.random.default_rng(seed)
    h, w = shape
    y, x = np.mgrid[0:h, 0:w].astype(np.float64)
    img = np.zeros(shape)
    for _ in range(waves):
        fx, fy = rng.uniform(0.5, 3.0, 2)
        px, py = rng.uniform(0, 2 * np.pi, 2)
        img += (rng.uniform(0.3, 1.0)
                * np.cos(2 * np.pi * fx * x / w + px)
                * np.cos(2 * np.pi * fy * y / h + py))
    img = (img - img.min()) / (img.max() - img.min())
    img = 2 / 255 + img * (251 / 255)
    return np.float32(np.rint(img * 255) / 255)

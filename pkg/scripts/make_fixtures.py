"""Regenerate the packaged test images (committed as binary PGMs).

Both fixtures are synthetic: a smooth 128x128 "scene" built from a few
low-frequency cosine ripples (smooth enough for edge-based tile
reassembly, clipped away from pure black/white so exact 0.0 / 1.0 never
collide with sentinel values), and a blobby 28x28 "digit" for the conv
demos. Byte quantization happens here so in-package floats round-trip
through PGM exactly.
"""

import pathlib
import sys

import numpy as np

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parents[1] / "src"))
from staleregs.pgm import write_pgm  # noqa: E402

DATA = pathlib.Path(__file__).resolve().parents[1] / "src" / "staleregs" / "data"


def scene_128() -> np.ndarray:
    rng = np.random.default_rng(11)
    y, x = np.mgrid[0:128, 0:128].astype(np.float64)
    img = np.zeros((128, 128))
    for _ in range(6):
        fx, fy = rng.uniform(0.5, 3.0, 2)
        px, py = rng.uniform(0, 2 * np.pi, 2)
        img += (rng.uniform(0.3, 1.0)
                * np.cos(2 * np.pi * fx * x / 128 + px)
                * np.cos(2 * np.pi * fy * y / 128 + py))
    img = (img - img.min()) / (img.max() - img.min())
    return np.float32(2 / 255 + img * (251 / 255))


def digit_28() -> np.ndarray:
    rng = np.random.default_rng(28)
    y, x = np.mgrid[0:28, 0:28].astype(np.float64)
    img = np.zeros((28, 28))
    for _ in range(4):
        cx, cy = rng.uniform(6, 22, 2)
        s = rng.uniform(2.0, 5.0)
        img += np.exp(-(((x - cx) ** 2 + (y - cy) ** 2) / (2 * s * s)))
    img = img / img.max()
    return np.float32(np.clip(img, 0.0, 250 / 255))


def llm_fixtures() -> None:
    from staleregs import llm

    tables = llm.random_tables(seed=97)
    with open(DATA / "tables.bin", "wb") as fh:
        llm.save_tables(tables, fh)
    phrase = list(np.random.default_rng(98).integers(0, tables.vocab, 20))
    atk = llm.attack_embedding(tables, [int(t) for t in phrase], seed=99)
    with open(DATA / "leak.bin", "wb") as fh:
        fh.write(np.ascontiguousarray(atk.stream, dtype="<f4").tobytes())
    print("wrote", DATA / "tables.bin")
    print("wrote", DATA / "leak.bin", f"({len(phrase)} tokens hidden inside)")


def main() -> None:
    DATA.mkdir(parents=True, exist_ok=True)
    write_pgm(DATA / "scene_128.pgm", scene_128())
    write_pgm(DATA / "digit_28.pgm", digit_28())
    print("wrote", DATA / "scene_128.pgm")
    print("wrote", DATA / "digit_28.pgm")
    llm_fixtures()


if __name__ == "__main__":
    main()

"""Command-line harness: run experiments, write reproducible artifacts.

Every experiment subcommand resolves a GPU config (profile, optional
config file, --set overrides, seed), runs entirely in memory, then writes
its artifacts plus a manifest in one go. Nothing is written when a run
fails, and reruns with the same arguments produce byte-identical files;
manifests carry the config echo and input digests but never timestamps.
"""

from __future__ import annotations

import argparse
import hashlib
import io
import os
import sys
from dataclasses import replace
from typing import Optional, Sequence

import numpy as np

from . import __version__, cnn, covert, data, llm, pixel, sanitize
from .config import (PROFILE_NAMES, ConfigError, apply_setting, config_items,
                     load_config, profile)
from .isa import parse_program, render_program
from .kernels import KERNEL_NAMES, load_kernel
from .pgm import encode_pgm, read_pgm
from .sim import GlobalBuffer, GpuConfig, SimError, Simulator, write_leak_csv


class Artifacts:
    """Staged output files, committed together after a successful run."""

    def __init__(self):
        self._staged: list = []

    def add(self, path: str, payload: bytes) -> None:
        self._staged.append((path, payload))

    def add_text(self, path: str, text: str) -> None:
        self.add(path, text.encode("utf-8"))

    def commit(self) -> None:
        for path, payload in self._staged:
            parent = os.path.dirname(os.path.abspath(path))
            os.makedirs(parent, exist_ok=True)
            tmp = path + ".tmp"
            with open(tmp, "wb") as fh:
                fh.write(payload)
            os.replace(tmp, path)


def manifest_text(command: str, params: Sequence[tuple],
                  cfg: Optional[GpuConfig] = None,
                  inputs: Sequence[tuple] = ()) -> str:
    lines = [f"staleregs {__version__}", f"command: {command}"]
    lines += [f"{k}: {v}" for k, v in params]
    if cfg is not None:
        lines += [f"gpu.{k}: {v}" for k, v in config_items(cfg)]
    lines += [f"input.{name}: sha256 {hashlib.sha256(blob).hexdigest()}"
              for name, blob in inputs]
    return "\n".join(lines) + "\n"


def _manifest_path(out_path: str) -> str:
    return os.path.join(os.path.dirname(os.path.abspath(out_path)), "manifest.txt")


def resolve_config(args, default_profile: str) -> GpuConfig:
    if getattr(args, "config", None):
        cfg = load_config(args.config, profile(default_profile))
    elif getattr(args, "profile", None):
        cfg = profile(args.profile)
    else:
        cfg = profile(default_profile)
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        cfg = apply_setting(cfg, key, value)
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _load_program(path: str):
    if path in KERNEL_NAMES:
        return load_kernel(path)
    with open(path, "r", encoding="utf-8") as fh:
        return parse_program(fh.read())


def _read_image(path: Optional[str], default: str) -> tuple:
    if path is None:
        blob = data.fixture_bytes(default)
        name = default
    else:
        with open(path, "rb") as fh:
            blob = fh.read()
        name = os.path.basename(path)
    from .pgm import parse_pgm
    return parse_pgm(blob), name, blob


# ── subcommands ────────────────────────────────────────────────────────────

def cmd_sim_run(args) -> int:
    cfg = resolve_config(args, "adreno")
    program = _load_program(args.kernel)
    buffers = {}
    for ins in program.instructions:
        if ins.mem is not None:
            name = ins.mem.buffer
            if name not in buffers:
                buffers[name] = GlobalBuffer(name, args.buf_words)
    sim = Simulator(cfg)
    report = sim.run(program, groups=args.groups, group_size=args.group_size,
                     buffers=buffers)
    records = list(report.leak_records())

    out = io.StringIO()
    write_leak_csv(records, out)
    arts = Artifacts()
    arts.add_text(args.out, out.getvalue())
    arts.add_text(_manifest_path(args.out), manifest_text(
        "sim-run",
        [("kernel", program.name), ("groups", args.groups),
         ("group_size", args.group_size), ("buf_words", args.buf_words)],
        cfg))
    arts.commit()
    uninit = sum(r.uninit for r in records)
    print(f"{program.name}: {args.groups} groups x {args.group_size} threads")
    print(f"leak records: {len(records)} ({uninit} uninitialized reads)")
    print(f"wrote {args.out}")
    return 0


def cmd_covert_bench(args) -> int:
    cfg_seed = args.seed if args.seed is not None else 0
    message = np.random.default_rng(cfg_seed).integers(
        0, 256, args.message_bytes, dtype=np.uint8).tobytes()

    got, stats = covert.transmit(message, args.profile, seed=cfg_seed,
                                 mitigated=args.mitigated)
    ok = got == message
    cp = covert.channel_profile(args.profile, seed=cfg_seed)
    print(f"profile {args.profile}: frame capacity {cp.capacity} bytes")
    print(f"round-trip {args.message_bytes} bytes: "
          f"{'ok' if ok else 'FAILED'} "
          f"({stats.frames_received}/{stats.frames_sent} frames, "
          f"{stats.simulated_dispatches} dispatches)")

    grid = range(1, args.grid + 1)
    points = covert.sweep(args.profile, message, grid, grid, seed=cfg_seed,
                          mitigated=args.mitigated)
    out = io.StringIO()
    covert.write_sweep_csv(points, out)
    best = covert.best_cell(points)
    print(f"best cell: sender_groups={best.sender_groups} "
          f"receiver_groups={best.receiver_groups} "
          f"bytes_per_dispatch={best.bytes_per_dispatch:.1f}")

    arts = Artifacts()
    arts.add_text(args.out, out.getvalue())
    arts.add_text(_manifest_path(args.out), manifest_text(
        "covert-bench",
        [("profile", args.profile), ("grid", args.grid),
         ("message_bytes", args.message_bytes), ("seed", cfg_seed),
         ("mitigated", str(args.mitigated).lower()),
         ("round_trip", "ok" if ok else "failed")]))
    arts.commit()
    print(f"wrote {args.out}")
    return 0 if ok or args.mitigated else 1


def cmd_pixel_attack(args) -> int:
    image, img_name, img_blob = _read_image(args.image, "scene_128.pgm")
    seed = args.seed if args.seed is not None else 0
    res = pixel.attack_render(image, tile_size=args.tile, seed=seed,
                              mitigated=args.mitigated)
    if not res.tiles:
        print("no fragments recovered; nothing to reconstruct", file=sys.stderr)
        return 1
    acc = res.accuracy if res.accuracy is not None else 0.0
    print(f"recovered {len(res.tiles)} tiles in {res.dispatches} dispatches")
    print(f"solver: {res.solver.generations_run} generations, "
          f"fitness {res.solver.fitness:.6f}")
    print(f"neighbor accuracy vs source arrangement: {acc:.3f}")

    arts = Artifacts()
    arts.add(args.out, encode_pgm(res.image))
    arts.add_text(_manifest_path(args.out), manifest_text(
        "pixel-attack",
        [("image", img_name), ("tile", args.tile), ("seed", seed),
         ("mitigated", str(args.mitigated).lower()),
         ("neighbor_accuracy", f"{acc:.6f}")],
        pixel.attack_config(seed, args.mitigated),
        inputs=[(img_name, img_blob)]))
    arts.commit()
    print(f"wrote {args.out}")
    return 0


def _coverage_rows(recovered: np.ndarray, truth: np.ndarray,
                   mask: np.ndarray) -> list:
    """Per-filter bit-exact coverage over the conv output grid."""
    rows = []
    t_bits = np.ascontiguousarray(truth, dtype=np.float32).view(np.uint32)
    r_bits = np.ascontiguousarray(recovered, dtype=np.float32).view(np.uint32)
    for f in range(truth.shape[0]):
        m = mask[f].reshape(-1)
        hit = m & (r_bits[f].reshape(-1) == t_bits[f].reshape(-1))
        runs = np.diff(np.flatnonzero(np.diff(np.concatenate(
            ([0], hit.astype(np.int8), [0])))).reshape(-1, 2), axis=1)
        rows.append((f, hit.mean(), m.mean(), int(runs.max()) if runs.size else 0))
    return rows


def cmd_cnn_attack(args) -> int:
    image, img_name, img_blob = _read_image(args.image, "digit_28.pgm")
    if image.shape != (cnn.IMG, cnn.IMG):
        print(f"cnn-attack needs a {cnn.IMG}x{cnn.IMG} image, "
              f"got {image.shape[0]}x{image.shape[1]}", file=sys.stderr)
        return 2
    seed = args.seed if args.seed is not None else 0
    model = cnn.random_model(seed)

    if args.model == "nvidia":
        atk = cnn.attack_nvidia(model, image, seed=seed, mitigated=args.mitigated)
        truth = atk.fwd.conv        # the residue snapshots the conv output store
        recovered = np.nan_to_num(atk.recovered, nan=0.0)
        mask = atk.mask
    else:
        atk = cnn.attack_adreno(model, image, seed=seed, mitigated=args.mitigated)
        truth = atk.fwd.conv_acc
        ev = cnn.evaluate_adreno(atk, truth)
        recovered = np.zeros((cnn.FILTERS, cnn.GROUP), dtype=np.float32)
        mask = np.zeros((cnn.FILTERS, cnn.GROUP), dtype=bool)
        flat_truth = truth.reshape(cnn.FILTERS, cnn.GROUP)
        for f in range(cnn.FILTERS):
            pos = ev.positions[f]
            mask[f, pos] = True
            recovered[f, pos] = flat_truth[f, pos]
        recovered = recovered.reshape(truth.shape)
        mask = mask.reshape(truth.shape[0], cnn.CONV, cnn.CONV)

    rows = _coverage_rows(recovered, truth, mask)
    csv_lines = ["filter,coverage,mask_density,max_run"]
    csv_lines += [f"{f},{cov:.6f},{den:.6f},{run}" for f, cov, den, run in rows]
    for f, cov, den, run in rows:
        print(f"filter {f}: coverage {cov:.3f}, mask density {den:.3f}, "
              f"longest run {run}")

    # render recovered activations as one stacked grayscale sheet
    sheet = recovered.reshape(cnn.FILTERS * cnn.CONV, cnn.CONV)
    finite = sheet[np.isfinite(sheet) & (sheet != 0)]
    lo, hi = (float(finite.min()), float(finite.max())) if finite.size else (0, 1)
    span = (hi - lo) or 1.0
    arts = Artifacts()
    arts.add(args.out, encode_pgm(np.clip((sheet - lo) / span, 0, 1)))
    arts.add_text(args.csv, "\n".join(csv_lines) + "\n")
    arts.add_text(_manifest_path(args.out), manifest_text(
        "cnn-attack",
        [("model", args.model), ("image", img_name), ("seed", seed),
         ("mitigated", str(args.mitigated).lower())],
        inputs=[(img_name, img_blob)]))
    arts.commit()
    print(f"wrote {args.out} and {args.csv}")
    return 0


def cmd_llm_attack(args) -> int:
    if args.tables is None:
        tables_blob = data.fixture_bytes("tables.bin")
        tables_name = "tables.bin"
    else:
        with open(args.tables, "rb") as fh:
            tables_blob = fh.read()
        tables_name = os.path.basename(args.tables)
    tables = llm.load_tables(io.BytesIO(tables_blob))

    if args.leak is None:
        leak_blob = data.fixture_bytes("leak.bin")
        leak_name = "leak.bin"
    else:
        with open(args.leak, "rb") as fh:
            leak_blob = fh.read()
        leak_name = os.path.basename(args.leak)
    stream = np.frombuffer(leak_blob, dtype="<f4").copy()

    lut = llm.build_lut(tables, max_pos=args.max_pos)
    hits = llm.reconstruct(stream, lut, sliding=args.sliding)
    seq = llm.recovered_sequence(hits)

    print(f"tables: vocab {tables.vocab}, dim {tables.dim}, "
          f"positions {tables.max_pos} (scan limit {args.max_pos})")
    print(f"leak stream: {stream.size} words -> {len(hits)} chunk hits, "
          f"{len(seq)} positions")
    if seq:
        phrase = " ".join(str(seq[p]) for p in sorted(seq))
        print(f"recovered token ids by position: {phrase}")

    lines = ["chunk_offset,token,position"]
    lines += [f"{h.chunk_offset},{h.token},{h.position}"
              for h in sorted(hits, key=lambda h: h.chunk_offset)]
    arts = Artifacts()
    arts.add_text(args.out, "\n".join(lines) + "\n")
    arts.add_text(_manifest_path(args.out), manifest_text(
        "llm-attack",
        [("max_pos", args.max_pos), ("sliding", str(args.sliding).lower())],
        inputs=[(tables_name, tables_blob), (leak_name, leak_blob)]))
    arts.commit()
    print(f"wrote {args.out}")
    return 0


def _parse_abi(spec: Optional[str]) -> list:
    if not spec:
        return []
    from .isa import _parse_reg
    return [_parse_reg(tok.strip(), 0) for tok in spec.split(",") if tok.strip()]


def cmd_sanitize(args) -> int:
    program = _load_program(args.file)
    if args.mode == "check":
        verdict = sanitize.analyze(program, abi_registers=_parse_abi(args.abi))
        if verdict.accepted:
            print(f"{program.name}: Accept")
            return 0
        print(f"{program.name}: Reject")
        for idx, ref in verdict.violations:
            print(f"  instruction {idx}: read of uninitialized {ref}")
        return 1

    clean = sanitize.rewrite_cleanup(program, full=args.full)
    out_path = args.o or (os.path.splitext(args.file)[0] + "_clean.asm")
    arts = Artifacts()
    arts.add_text(out_path, render_program(clean))
    arts.add_text(_manifest_path(out_path), manifest_text(
        "sanitize-rewrite",
        [("input", os.path.basename(args.file)), ("full", str(args.full).lower()),
         ("added", len(clean.instructions) - len(program.instructions))]))
    arts.commit()
    print(f"wrote {out_path} "
          f"(+{len(clean.instructions) - len(program.instructions)} cleanup writes)")
    return 0


# ── parser ─────────────────────────────────────────────────────────────────

def _add_config_options(p: argparse.ArgumentParser, with_profile: bool = True):
    if with_profile:
        p.add_argument("--profile", choices=PROFILE_NAMES,
                       help="GPU profile (default depends on subcommand)")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("--seed", type=int, help="simulation seed")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="staleregs",
        description="Stale-register leakage simulator and attack bench")
    ap.add_argument("--version", action="version",
                    version=f"staleregs {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sim-run", help="run a kernel and export leak records")
    p.add_argument("kernel", help=f"kernel .asm path or one of {KERNEL_NAMES}")
    p.add_argument("--groups", type=int, default=4)
    p.add_argument("--group-size", type=int, default=32)
    p.add_argument("--buf-words", type=int, default=1 << 16,
                   help="size of each auto-allocated buffer")
    p.add_argument("--out", default="leaks.csv")
    _add_config_options(p)
    p.set_defaults(func=cmd_sim_run)

    p = sub.add_parser("covert-bench", help="capacity benchmark and group sweep")
    p.add_argument("--profile", choices=PROFILE_NAMES, default="agx")
    p.add_argument("--grid", type=int, default=5,
                   help="sweep sender/receiver groups over 1..N")
    p.add_argument("--message-bytes", type=int, default=1024)
    p.add_argument("--mitigated", action="store_true",
                   help="zero registers on allocation")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default="sweep.csv")
    p.set_defaults(func=cmd_covert_bench)

    p = sub.add_parser("pixel-attack", help="reconstruct a rendered image")
    p.add_argument("--image", help="input PGM (default: packaged scene)")
    p.add_argument("--tile", type=int, default=pixel.DEFAULT_TILE)
    p.add_argument("--mitigated", action="store_true")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default="recon.pgm")
    p.set_defaults(func=cmd_pixel_attack)

    p = sub.add_parser("cnn-attack", help="recover first-layer conv activations")
    p.add_argument("--model", choices=("nvidia", "adreno"), default="nvidia")
    p.add_argument("--image", help="28x28 input PGM (default: packaged digit)")
    p.add_argument("--mitigated", action="store_true")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default="leaked.pgm")
    p.add_argument("--csv", default="coverage.csv")
    p.set_defaults(func=cmd_cnn_attack)

    p = sub.add_parser("llm-attack", help="match leaked embedding vectors")
    p.add_argument("--tables", help="embedding tables.bin (default: packaged)")
    p.add_argument("--leak", help="captured float32 stream (default: packaged)")
    p.add_argument("--max-pos", type=int, default=llm.DESK_P)
    p.add_argument("--sliding", action="store_true",
                   help="stride-1 scan for misaligned captures")
    p.add_argument("--out", default="tokens.csv")
    p.set_defaults(func=cmd_llm_attack)

    p = sub.add_parser("sanitize", help="static shader check / cleanup rewrite")
    p.add_argument("mode", choices=("check", "rewrite"))
    p.add_argument("file", help=f"shader .asm path or one of {KERNEL_NAMES}")
    p.add_argument("--abi", help="comma-separated registers allowed unwritten")
    p.add_argument("--full", action="store_true",
                   help="rewrite scrubs the whole declared window")
    p.add_argument("-o", help="output path for rewrite")
    p.set_defaults(func=cmd_sanitize)

    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, SimError, FileNotFoundError) as exc:
        # covers config/parse/channel errors too; they subclass ValueError
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

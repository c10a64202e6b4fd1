"""End-to-end runs of every subcommand through main(), in throwaway dirs.

These call staleregs.cli.main() in-process so exit codes and artifacts
are checked exactly as a shell user would see them, without subprocess
overhead. Determinism is checked by byte-comparing rerun artifacts.
"""

import os

import numpy as np
import pytest

from staleregs import __version__
from staleregs.cli import main
from staleregs.pgm import encode_pgm, parse_pgm


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    return tmp_path


def read(path) -> bytes:
    with open(path, "rb") as fh:
        return fh.read()


def gradient_pgm(path, side=32):
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float32)
    img = (16 * yy + xx) / np.float32(16 * (side - 1) + side - 1)
    with open(path, "wb") as fh:
        fh.write(encode_pgm(img))
    return img


# ── sim-run ─────────────────────────────────────────────────────────────────

def test_sim_run_writes_leak_csv_and_manifest(workdir, capsys):
    assert main(["sim-run", "dump_adreno", "--out", "leaks.csv"]) == 0
    out = capsys.readouterr().out
    assert "dump_adreno: 4 groups x 32 threads" in out
    assert "wrote leaks.csv" in out

    lines = read("leaks.csv").decode().splitlines()
    assert lines[0] == "dispatch,core,simd,wave,lane,reg,value_hex,uninit"
    # a dump with nothing staged reads 32 lanes x 4 groups of stale cells
    assert len(lines) == 1 + 128
    assert all(row.endswith(",1") for row in lines[1:])

    manifest = read("manifest.txt").decode()
    assert manifest.startswith(f"staleregs {__version__}\ncommand: sim-run\n")
    assert "kernel: dump_adreno" in manifest
    assert "gpu.lifecycle: no_clear" in manifest
    assert "gpu.quad_registers: true" in manifest
    # reproducible by construction: no clock anywhere in the manifest
    assert "time" not in manifest.lower()
    assert ":" in manifest.splitlines()[-1]


def test_sim_run_accepts_external_kernel_file(workdir):
    with open("probe.asm", "w") as fh:
        fh.write(".shader probe\n.regs 4\nst_global [b0 + tid], r3\nexit\n")
    args = ["sim-run", "probe.asm", "--profile", "nvidia", "--groups", "1",
            "--out", "l.csv"]
    assert main(args) == 0
    rows = read("l.csv").decode().splitlines()[1:]
    assert len(rows) == 32
    assert all(",r3," in row for row in rows)


def test_sim_run_flat_kernel_on_quad_profile_exits_2(workdir, capsys):
    with open("probe.asm", "w") as fh:
        fh.write(".shader probe\n.regs 4\nst_global [b0 + tid], r3\nexit\n")
    assert main(["sim-run", "probe.asm", "--profile", "adreno"]) == 2
    assert "flat registers" in capsys.readouterr().err
    assert not os.path.exists("leaks.csv")


def test_sim_run_missing_kernel_exits_2(workdir, capsys):
    assert main(["sim-run", "nosuch.asm"]) == 2
    assert "error:" in capsys.readouterr().err
    assert not os.path.exists("leaks.csv")
    assert not os.path.exists("manifest.txt")


def test_sim_run_rejects_malformed_set_option(workdir, capsys):
    assert main(["sim-run", "dump_agx", "--set", "junk"]) == 2
    assert "key=value" in capsys.readouterr().err


def test_sim_run_rejects_unknown_config_key(workdir, capsys):
    assert main(["sim-run", "dump_agx", "--set", "warp_speed=9"]) == 2
    assert "warp_speed" in capsys.readouterr().err


# ── covert-bench ────────────────────────────────────────────────────────────

BENCH = ["covert-bench", "--profile", "nvidia", "--grid", "3",
         "--message-bytes", "256", "--seed", "42", "--out", "sweep.csv"]


def test_covert_bench_round_trips_and_sweeps(workdir, capsys):
    assert main(BENCH) == 0
    out = capsys.readouterr().out
    assert "frame capacity 60 bytes" in out
    assert "round-trip 256 bytes: ok" in out
    assert "best cell: sender_groups=3 receiver_groups=3" in out

    lines = read("sweep.csv").decode().splitlines()
    assert lines[0] == "sender_groups,receiver_groups,bytes_per_dispatch,loss_rate"
    assert len(lines) == 1 + 9
    manifest = read("manifest.txt").decode()
    assert "round_trip: ok" in manifest
    assert "seed: 42" in manifest


def test_covert_bench_rerun_is_byte_identical(workdir):
    assert main(BENCH) == 0
    first = read("sweep.csv"), read("manifest.txt")
    os.remove("sweep.csv")
    os.remove("manifest.txt")
    assert main(BENCH) == 0
    assert (read("sweep.csv"), read("manifest.txt")) == first


def test_covert_bench_mitigated_reports_failure_but_exits_0(workdir, capsys):
    args = BENCH + ["--mitigated"]
    assert main(args) == 0
    out = capsys.readouterr().out
    assert "FAILED" in out
    assert "round_trip: failed" in read("manifest.txt").decode()


def test_covert_bench_unknown_profile_is_an_argparse_error(workdir, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["covert-bench", "--profile", "volta"])
    assert exc.value.code == 2
    err = capsys.readouterr().err
    assert "invalid choice: 'volta'" in err
    for name in ("adreno", "agx", "nvidia"):
        assert name in err


# ── pixel-attack ────────────────────────────────────────────────────────────

def test_pixel_attack_reconstructs_a_small_scene(workdir, capsys):
    img = gradient_pgm("scene.pgm")
    args = ["pixel-attack", "--image", "scene.pgm", "--seed", "1",
            "--out", "recon.pgm"]
    assert main(args) == 0
    out = capsys.readouterr().out
    assert "recovered 4 tiles" in out
    assert "neighbor accuracy vs source arrangement: 1.000" in out

    recon = parse_pgm(read("recon.pgm"))
    assert recon.shape == img.shape
    # 8-bit PGM quantization is the only loss in the loop
    assert np.abs(recon - img).max() <= 1.0 / 255.0

    manifest = read("manifest.txt").decode()
    assert "command: pixel-attack" in manifest
    assert "neighbor_accuracy: 1.000000" in manifest
    assert "input.scene.pgm: sha256 " in manifest
    assert "gpu.remap: seeded_permutation" in manifest


def test_pixel_attack_rerun_is_byte_identical(workdir):
    gradient_pgm("scene.pgm")
    args = ["pixel-attack", "--image", "scene.pgm", "--seed", "7",
            "--out", "recon.pgm"]
    assert main(args) == 0
    first = read("recon.pgm")
    os.remove("recon.pgm")
    assert main(args) == 0
    assert read("recon.pgm") == first


def test_pixel_attack_mitigated_exits_1_and_writes_nothing(workdir, capsys):
    gradient_pgm("scene.pgm")
    args = ["pixel-attack", "--image", "scene.pgm", "--mitigated",
            "--out", "recon.pgm"]
    assert main(args) == 1
    assert "nothing to reconstruct" in capsys.readouterr().err
    assert not os.path.exists("recon.pgm")
    assert not os.path.exists("manifest.txt")


# ── cnn-attack ──────────────────────────────────────────────────────────────

def test_cnn_attack_nvidia_defaults(workdir, capsys):
    assert main(["cnn-attack", "--seed", "3"]) == 0
    out = capsys.readouterr().out
    for f in range(8):
        assert f"filter {f}: coverage 0.500" in out

    lines = read("coverage.csv").decode().splitlines()
    assert lines[0] == "filter,coverage,mask_density,max_run"
    assert len(lines) == 9
    for row in lines[1:]:
        _, cov, den, run = row.split(",")
        assert cov == "0.500000" and den == "0.500000" and run == "16"

    sheet = parse_pgm(read("leaked.pgm"))
    assert sheet.shape == (8 * 24, 24)
    manifest = read("manifest.txt").decode()
    assert "model: nvidia" in manifest
    assert "input.digit_28.pgm: sha256 " in manifest


def test_cnn_attack_adreno_coverage(workdir):
    assert main(["cnn-attack", "--model", "adreno", "--seed", "0"]) == 0
    rows = read("coverage.csv").decode().splitlines()[1:]
    for row in rows:
        _, cov, _, run = row.split(",")
        assert 0.40 <= float(cov) <= 0.50
        assert int(run) >= 256


def test_cnn_attack_mitigated_zero_coverage(workdir):
    assert main(["cnn-attack", "--mitigated", "--seed", "3"]) == 0
    rows = read("coverage.csv").decode().splitlines()[1:]
    assert all(row.split(",")[1] == "0.000000" for row in rows)


def test_cnn_attack_rejects_wrong_image_size(workdir, capsys):
    gradient_pgm("big.pgm", side=32)
    assert main(["cnn-attack", "--image", "big.pgm"]) == 2
    assert "28x28" in capsys.readouterr().err
    assert not os.path.exists("coverage.csv")


# ── llm-attack ──────────────────────────────────────────────────────────────

def test_llm_attack_packaged_capture(workdir, capsys):
    assert main(["llm-attack", "--out", "tokens.csv"]) == 0
    out = capsys.readouterr().out
    assert "tables: vocab 1000, dim 64, positions 30" in out
    assert "40 chunk hits, 20 positions" in out

    lines = read("tokens.csv").decode().splitlines()
    assert lines[0] == "chunk_offset,token,position"
    assert len(lines) == 1 + 40
    # both residue halves of each embedding land, so hits pair up
    by_pos = {}
    for row in lines[1:]:
        off, tok, pos = map(int, row.split(","))
        assert off % 16 == 0
        by_pos.setdefault(pos, set()).add(tok)
    assert sorted(by_pos) == list(range(20))
    assert all(len(toks) == 1 for toks in by_pos.values())

    manifest = read("manifest.txt").decode()
    assert "input.tables.bin: sha256 " in manifest
    assert "input.leak.bin: sha256 " in manifest


def test_llm_attack_reads_external_captures(workdir, tmp_path):
    from staleregs import data
    with open("t.bin", "wb") as fh:
        fh.write(data.fixture_bytes("tables.bin"))
    with open("l.bin", "wb") as fh:
        fh.write(data.fixture_bytes("leak.bin"))
    args = ["llm-attack", "--tables", "t.bin", "--leak", "l.bin",
            "--out", "ext.csv"]
    assert main(args) == 0
    assert main(["llm-attack", "--out", "pkg.csv"]) == 0
    assert read("ext.csv") == read("pkg.csv")


# ── sanitize ────────────────────────────────────────────────────────────────

def test_sanitize_check_rejects_dump_kernels(workdir, capsys):
    for kernel in ("dump_adreno", "dump_agx", "dump_nvidia"):
        assert main(["sanitize", "check", kernel]) == 1
        out = capsys.readouterr().out
        assert f"{kernel}: Reject" in out
        assert "read of uninitialized" in out


def test_sanitize_check_accepts_fragment_shader(workdir, capsys):
    assert main(["sanitize", "check", "fragment_shader"]) == 0
    assert "fragment_shader: Accept" in capsys.readouterr().out


def test_sanitize_check_abi_whitelist(workdir):
    with open("abi.asm", "w") as fh:
        fh.write(".shader abi\n.regs 2\nst_global [b0 + tid], r1\nexit\n")
    assert main(["sanitize", "check", "abi.asm"]) == 1
    assert main(["sanitize", "check", "abi.asm", "--abi", "r1"]) == 0


def test_sanitize_rewrite_names_output_after_input(workdir, capsys):
    with open("victim.asm", "w") as fh:
        fh.write(".shader victim\n.regs 3\nmov_imm r0, 0x1\n"
                 "st_global [b0 + tid], r0\nexit\n")
    assert main(["sanitize", "rewrite", "victim.asm"]) == 0
    assert "wrote victim_clean.asm" in capsys.readouterr().out

    text = read("victim_clean.asm").decode()
    assert text.count("mov_imm r0, 0x00000000") == 1
    # the scrubbed version must itself pass the static check
    assert main(["sanitize", "check", "victim_clean.asm"]) == 0


def test_sanitize_rewrite_full_scrubs_whole_window(workdir):
    with open("v.asm", "w") as fh:
        fh.write(".shader v\n.regs 4\nmov_imm r0, 0x1\nexit\n")
    assert main(["sanitize", "rewrite", "v.asm", "--full", "-o", "f.asm"]) == 0
    text = read("f.asm").decode()
    for r in range(4):
        assert f"mov_imm r{r}, 0x00000000" in text


# ── global flags ────────────────────────────────────────────────────────────

def test_version_flag(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
    assert capsys.readouterr().out.strip() == f"staleregs {__version__}"


def test_missing_subcommand_exits_2(capsys):
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == 2

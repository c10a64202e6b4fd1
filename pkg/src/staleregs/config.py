"""Named hardware profiles and the key/value config file format."""

from __future__ import annotations

from dataclasses import replace
from typing import Optional

from .sim import GpuConfig, Lifecycle, RemapPolicy


class ConfigError(ValueError):
    pass


def _profile_table() -> dict[str, GpuConfig]:
    return {
        # Tiled mobile GPU, quad register file, registers survive reallocation.
        "adreno": GpuConfig(cores=4, simd_per_core=4, wave_width=32,
                            regs_per_thread=256, quad_registers=True,
                            lifecycle=Lifecycle.NO_CLEAR,
                            remap=RemapPolicy.IDENTITY),
        # Flat register file, registers survive, but names are displaced
        # per dispatch by a seeded remap.
        "agx": GpuConfig(cores=8, simd_per_core=4, wave_width=32,
                         regs_per_thread=128, quad_registers=False,
                         lifecycle=Lifecycle.NO_CLEAR,
                         remap=RemapPolicy.SEEDED_PERMUTATION),
        # Registers are scrubbed, but the per-SIMD store buffer leaks the
        # last coalesced half-wave transaction into unwritten reads.
        "nvidia": GpuConfig(cores=8, simd_per_core=4, wave_width=32,
                            regs_per_thread=64, quad_registers=False,
                            lifecycle=Lifecycle.STORE_RESIDUE,
                            remap=RemapPolicy.IDENTITY),
    }


PROFILE_NAMES = tuple(sorted(_profile_table()))


def profile(name: str) -> GpuConfig:
    table = _profile_table()
    if name not in table:
        raise ConfigError(
            f"unknown profile {name!r}; valid profiles: {', '.join(sorted(table))}")
    return table[name]


_BOOL_WORDS = {"1": True, "true": True, "yes": True, "0": False, "false": False, "no": False}

_INT_KEYS = ("cores", "simd_per_core", "wave_width", "regs_per_thread", "seed")
_BOOL_KEYS = ("quad_registers", "jitter")


def apply_setting(cfg: GpuConfig, key: str, value: str) -> GpuConfig:
    key = key.strip().lower()
    value = value.strip()
    try:
        if key in _INT_KEYS:
            return replace(cfg, **{key: int(value, 0)})
        if key in _BOOL_KEYS:
            return replace(cfg, **{key: _BOOL_WORDS[value.lower()]})
        if key == "lifecycle":
            return replace(cfg, lifecycle=Lifecycle(value.lower()))
        if key == "remap":
            return replace(cfg, remap=RemapPolicy(value.lower()))
    except (ValueError, KeyError):
        raise ConfigError(f"bad value {value!r} for config key {key!r}") from None
    raise ConfigError(f"unknown config key {key!r}")


def parse_config_text(text: str, base: Optional[GpuConfig] = None) -> GpuConfig:
    """Parse `key = value` lines. `#` starts a comment.

    An optional `profile = <name>` line (first, conventionally) picks the
    base; later keys override individual fields.
    """
    cfg = base
    settings: list[tuple[str, str]] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, _, value = line.partition("=")
        key = key.strip().lower()
        if key == "profile":
            cfg = profile(value.strip())
        else:
            settings.append((key, value))
    if cfg is None:
        cfg = GpuConfig()
    for key, value in settings:
        cfg = apply_setting(cfg, key, value)
    cfg.validate()
    return cfg


def load_config(path: str, base: Optional[GpuConfig] = None) -> GpuConfig:
    with open(path, "r", encoding="utf-8") as f:
        return parse_config_text(f.read(), base)


def config_items(cfg: GpuConfig) -> list[tuple[str, str]]:
    """Stable key/value view of a config, for manifests and echo output."""
    return [
        ("cores", str(cfg.cores)),
        ("simd_per_core", str(cfg.simd_per_core)),
        ("wave_width", str(cfg.wave_width)),
        ("regs_per_thread", str(cfg.regs_per_thread)),
        ("quad_registers", str(cfg.quad_registers).lower()),
        ("lifecycle", cfg.lifecycle.value),
        ("remap", cfg.remap.value),
        ("seed", str(cfg.seed)),
        ("jitter", str(cfg.jitter).lower()),
    ]

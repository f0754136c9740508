"""Scenario files: flat ``key = value`` text grouped in sections.

Values may carry a unit suffix (``65 ps``, ``400 MHz``, ``10 dB``). Unknown
sections or keys are rejected with the offending line number.
"""
from __future__ import annotations

import os
import re
from decimal import Decimal
from dataclasses import dataclass, fields, replace
from importlib import resources
from pathlib import Path

from .keyrate import DEFAULT_WIDTHS
from .model import ConfigError, SideChannelModel, SystemConfig

BUNDLED = ("paper-zero-bias", "paper-high-bias")

# decimal exponent per unit suffix
_UNITS = {
    "": 0, "s": 0, "ms": -3, "us": -6, "ns": -9, "ps": -12, "fs": -15,
    "hz": 0, "khz": 3, "mhz": 6, "ghz": 9, "db": 0, "cps": 0, "%": -2,
}
_NUMBER = re.compile(r"^([-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)\s*([A-Za-z%]*)$")

_SECTIONS: dict[str, tuple[str, ...]] = {
    "scenario": ("name", "n_slots", "seed"),
    "source": ("clock_rate", "mean_photon_number", "optical_pulse_fwhm", "dc_bias_ratio",
               "se_rate_per_laser"),
    "channel": ("channel_loss_db", "receiver_loss_db", "optical_error_prob"),
    "detector": ("detector_efficiency", "dark_count_rate", "detection_jitter_fwhm",
                 "bin_width", "dead_time"),
    "sidechannel": ("enabled", "base_offset", "max_temporal_offset", "relaxation_time",
                    "max_amplitude_deviation"),
    "protocol": ("ec_coefficient", "sifting_ratio", "closure_epsilon"),
    "sweep": ("widths",),
}
_CONFIG_KEYS = {f.name for f in fields(SystemConfig)}
_SIDE_KEYS = {f.name for f in fields(SideChannelModel)}


class SpecError(ValueError):
    def __init__(self, message: str, line: int | None = None, field: str | None = None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field!r}")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)
        self.line = line
        self.field = field


@dataclass(frozen=True)
class ScenarioSpec:
    name: str
    config: SystemConfig
    side_channel: SideChannelModel
    n_slots: int = 10**8
    seed: int | None = None
    widths: tuple[float, ...] = DEFAULT_WIDTHS
    closure_epsilon: float = 0.05

    def with_(self, **changes) -> "ScenarioSpec":
        return replace(self, **changes)

    def resolve_seed(self, override: int | None = None) -> int:
        """Explicit override, else the file's seed, else ``$QKDSIM_SEED``, else 0."""
        if override is not None:
            return override
        if self.seed is not None:
            return self.seed
        env = os.environ.get("QKDSIM_SEED")
        if env:
            try:
                return int(env, 0)
            except ValueError:
                raise SpecError(f"QKDSIM_SEED is not an integer: {env!r}", field="seed")
        return 0


def parse_quantity(text: str) -> float:
    m = _NUMBER.match(text.strip())
    if not m or m.group(2).lower() not in _UNITS:
        raise ValueError(f"not a number with a known unit: {text!r}")
    # one rounding step, so "1.25 ns" == 1.25e-9 exactly
    return float(Decimal(m.group(1)).scaleb(_UNITS[m.group(2).lower()]))


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "yes", "on", "1"):
        return True
    if t in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_int(text: str) -> int:
    t = text.strip().replace("_", "")
    try:
        return int(t, 0)
    except ValueError:
        v = float(t)  # accept 1e8
        if v != int(v):
            raise ValueError(f"not an integer: {text!r}")
        return int(v)


def parse_spec(text: str, source: str = "<spec>") -> ScenarioSpec:
    values: dict[str, tuple[str, int]] = {}
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].split(";", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise SpecError("malformed section header", lineno)
            section = line[1:-1].strip().lower()
            if section not in _SECTIONS:
                raise SpecError(f"unknown section [{section}]", lineno)
            continue
        if "=" not in line:
            raise SpecError("expected 'key = value'", lineno)
        if section is None:
            raise SpecError("key outside of any section", lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _SECTIONS[section]:
            raise SpecError(f"unknown key in [{section}]", lineno, key)
        if key in values:
            raise SpecError("duplicate key", lineno, key)
        values[key] = (value, lineno)

    def get(key, conv):
        value, lineno = values[key]
        try:
            return conv(value)
        except ValueError as e:
            raise SpecError(str(e), lineno, key) from None

    name = values["name"][0] if "name" in values else Path(source).stem
    cfg_kw = {k: get(k, parse_quantity) for k in values if k in _CONFIG_KEYS}
    try:
        config = SystemConfig(**cfg_kw)
    except ConfigError as e:
        raise SpecError(str(e).split(": ", 1)[-1], values.get(e.field, (None, None))[1],
                        e.field) from None
    side_kw = {k: get(k, _parse_bool if k == "enabled" else parse_quantity)
               for k in values if k in _SIDE_KEYS}
    side_kw["min_interval"] = config.slot_period
    try:
        side = SideChannelModel(**side_kw)
    except ConfigError as e:
        raise SpecError(str(e).split(": ", 1)[-1], values.get(e.field, (None, None))[1],
                        e.field) from None

    n_slots = get("n_slots", _parse_int) if "n_slots" in values else 10**8
    if n_slots < 1:
        raise SpecError("n_slots must be ≥ 1", values["n_slots"][1], "n_slots")
    seed = get("seed", _parse_int) if "seed" in values else None
    if seed is not None and not 0 <= seed < 2**64:
        raise SpecError("seed must be an unsigned 64-bit integer", values["seed"][1], "seed")
    widths = DEFAULT_WIDTHS
    if "widths" in values:
        widths = get("widths", lambda v: tuple(parse_quantity(w) for w in v.split(",") if w.strip()))
        if not widths:
            raise SpecError("widths must be nonempty", values["widths"][1], "widths")
    eps = get("closure_epsilon", parse_quantity) if "closure_epsilon" in values else 0.05
    if not 0 < eps < 1:
        raise SpecError("closure_epsilon must lie in (0, 1)", values["closure_epsilon"][1],
                        "closure_epsilon")
    return ScenarioSpec(name, config, side, n_slots, seed, tuple(widths), eps)


def load_spec(path_or_name: str | os.PathLike) -> ScenarioSpec:
    """Read a scenario file, or one of the bundled scenarios by name."""
    p = Path(path_or_name)
    if p.is_file():
        return parse_spec(p.read_text(encoding="utf-8"), str(p))
    if str(path_or_name) in BUNDLED:
        text = resources.files("qkdsim.scenarios").joinpath(f"{path_or_name}.ini").read_text(
            encoding="utf-8")
        return parse_spec(text, str(path_or_name))
    raise SpecError(f"no such spec file or bundled scenario: {path_or_name}")


def format_spec(spec: ScenarioSpec) -> str:
    """Serialize in SI units; ``parse_spec(format_spec(s))`` reproduces ``s``."""
    cfg, sc = spec.config, spec.side_channel
    out = []
    for section, keys in _SECTIONS.items():
        out.append(f"[{section}]")
        for key in keys:
            if key == "name":
                out.append(f"name = {spec.name}")
            elif key == "n_slots":
                out.append(f"n_slots = {spec.n_slots}")
            elif key == "seed":
                if spec.seed is not None:
                    out.append(f"seed = {spec.seed}")
            elif key == "widths":
                out.append("widths = " + ", ".join(repr(w) for w in spec.widths))
            elif key == "closure_epsilon":
                out.append(f"closure_epsilon = {spec.closure_epsilon!r}")
            elif key == "enabled":
                out.append(f"enabled = {str(sc.enabled).lower()}")
            elif key in _SIDE_KEYS:
                out.append(f"{key} = {float(getattr(sc, key))!r}")
            else:
                out.append(f"{key} = {float(getattr(cfg, key))!r}")
        out.append("")
    return "\n".join(out)

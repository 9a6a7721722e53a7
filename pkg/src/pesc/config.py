"""TOML run configuration with strict schema validation.

Every section and key is checked before any computation; unknown keys are
rejected with their location.  Example::

    [run]
    preset = "sqrt_iswap"
    out = "runs/sqrt_iswap"
    workers = 2
    dt_ns = 0.005

    [grid]
    start_ghz = 5.45
    stop_ghz = 5.70
    step_ghz = 0.005
"""
from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .device import PRESETS, DeviceError, DeviceParams, params_from_mapping, preset
from .flux import FluxPulse, PulseError
from .gradient import KrotovConfig


class ConfigError(ValueError):
    pass


def _number(kind=float):
    def check(v):
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise TypeError("expected a number")
        return kind(v)
    return check


def _integer(v):
    if isinstance(v, bool) or not isinstance(v, int):
        raise TypeError("expected an integer")
    return v


def _string(v):
    if not isinstance(v, str):
        raise TypeError("expected a string")
    return v


def _boolean(v):
    if not isinstance(v, bool):
        raise TypeError("expected true or false")
    return v


def _list_of(check):
    def inner(v):
        if not isinstance(v, list):
            raise TypeError("expected a list")
        return [check(x) for x in v]
    return inner


def _table(v):
    if not isinstance(v, dict):
        raise TypeError("expected a table")
    return v


_num = _number()

SCHEMA = {
    "run": {"preset": _string, "out": _string, "workers": _integer, "dt_ns": _num,
            "stride": _integer, "omega3_ghz": _num},
    "device": {"name": _string, "omega_q_ghz": _list_of(_num), "alpha_q_mhz": _list_of(_num),
               "g_mhz": _list_of(_num), "omega_c_max_ghz": _num, "alpha_c_mhz": _num,
               "levels": _list_of(_integer)},
    "pulse": {"theta": _num, "harmonics": _list_of(_table), "omega_phi_mhz": _num,
              "sigma_t_ns": _num, "T_ns": _num},
    "grid": {"start_ghz": _num, "stop_ghz": _num, "step_ghz": _num},
    "calibration": {"T_min_ns": _num, "T_max_ns": _num, "T_step_ns": _num,
                    "omega_phi_offsets_mhz": _list_of(_num), "refine": _list_of(_string),
                    "dt_ns": _num, "target_eps": _num},
    "krotov": {"lambda_a": _num, "stage1_max_iter": _integer, "stage2_max_iter": _integer,
               "tol": _num, "dt_ns": _num, "costate_frame": _string, "sigma_t_ns": _num,
               "spectral_penalty": _num, "gradient": _string, "memory_budget_mb": _num},
    "simplex": {"bounds": _table, "frozen": _list_of(_string), "tol": _num,
                "max_steps": _integer, "harmonics": _integer},
    "scan": {"axis": _string, "values": _list_of(_num), "start": _num, "stop": _num,
             "step": _num},
}
HARMONIC_KEYS = {"k": _integer, "delta": _num, "phi_rad": _num}


def validate(raw: dict, source: str = "<config>") -> dict:
    """Check sections, keys and value types; returns a normalized copy."""
    out = {}
    for section, body in raw.items():
        if section not in SCHEMA:
            raise ConfigError(f"{source}: unknown section [{section}]; "
                              f"allowed: {', '.join(SCHEMA)}")
        if not isinstance(body, dict):
            raise ConfigError(f"{source}: [{section}] must be a table")
        norm = {}
        for key, value in body.items():
            if key not in SCHEMA[section]:
                raise ConfigError(f"{source}: [{section}] unknown key '{key}'; "
                                  f"allowed: {', '.join(SCHEMA[section])}")
            try:
                norm[key] = SCHEMA[section][key](value)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{source}: [{section}] {key}: {exc}") from None
        out[section] = norm
    for i, h in enumerate(out.get("pulse", {}).get("harmonics", [])):
        for key, value in h.items():
            if key not in HARMONIC_KEYS:
                raise ConfigError(f"{source}: [pulse] harmonics[{i}] unknown key '{key}'")
            try:
                HARMONIC_KEYS[key](value)
            except TypeError as exc:
                raise ConfigError(f"{source}: [pulse] harmonics[{i}].{key}: {exc}") from None
        if "k" not in h or "delta" not in h:
            raise ConfigError(f"{source}: [pulse] harmonics[{i}] needs k and delta")
    bounds = out.get("simplex", {}).get("bounds", {})
    for name, pair in bounds.items():
        if (not isinstance(pair, list) or len(pair) != 2
                or not all(isinstance(v, (int, float)) for v in pair)):
            raise ConfigError(f"{source}: [simplex] bounds.{name} must be [lower, upper]")
    return out


def load(path) -> dict:
    path = Path(path)
    try:
        with path.open("rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"{path}: no such file") from None
    except tomllib.TOMLDecodeError as exc:
        # the message carries "(at line L, column C)"
        raise ConfigError(f"{path}: {exc}") from None
    return validate(raw, str(path))


@dataclass
class RunConfig:
    sections: dict = field(default_factory=dict)
    source: str = "<defaults>"

    def get(self, section, key, default=None):
        return self.sections.get(section, {}).get(key, default)

    def set(self, section, key, value):
        if value is not None:
            self.sections.setdefault(section, {})[key] = value

    @property
    def preset_name(self) -> str:
        name = self.get("run", "preset", "sqrt_iswap")
        if name not in PRESETS:
            raise ConfigError(f"{self.source}: [run] preset must be one of {sorted(PRESETS)}")
        return name

    @property
    def gate(self) -> str:
        return self.preset_name

    def device(self) -> DeviceParams:
        try:
            if "device" in self.sections:
                base = preset(self.preset_name).to_dict()
                base.update(self.sections["device"])
                return params_from_mapping(base, name=self.preset_name)
            return preset(self.preset_name)
        except DeviceError as exc:
            raise ConfigError(f"{self.source}: [device] {exc}") from None

    @property
    def device_is_preset(self) -> bool:
        """True when a [device] section, if any, only repeats preset values."""
        if "device" not in self.sections:
            return True
        return self.device().to_dict() == preset(self.preset_name).to_dict()

    def pulse(self) -> FluxPulse | None:
        """Explicit pulse if the [pulse] section gives T_ns, else None."""
        sec = self.sections.get("pulse")
        if not sec:
            return None
        from .flux import GUESS_PULSES

        g = GUESS_PULSES[self.gate]
        harmonics = sec.get("harmonics") or [{"k": 1, "delta": g["delta"], "phi_rad": 0.0}]
        d = {
            "theta": sec.get("theta", g["theta"]),
            "harmonics": harmonics,
            "omega_phi_mhz": sec.get("omega_phi_mhz", g["omega_phi_mhz"]),
            "sigma_t_ns": sec.get("sigma_t_ns", g["sigma_t"]),
            "T_ns": sec.get("T_ns"),
        }
        if d["T_ns"] is None:
            return None
        try:
            return FluxPulse.from_dict(d)
        except PulseError as exc:
            raise ConfigError(f"{self.source}: [pulse] {exc}") from None

    def krotov(self) -> KrotovConfig:
        sec = self.sections.get("krotov", {})
        mapping = {"dt_ns": "dt", "sigma_t_ns": "sigma_t"}
        kwargs = {mapping.get(k, k): v for k, v in sec.items()}
        kwargs.setdefault("dt", self.get("run", "dt_ns", KrotovConfig.dt))
        try:
            return KrotovConfig(**kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{self.source}: [krotov] {exc}") from None

    def resolved(self) -> dict:
        return json.loads(json.dumps(self.sections, sort_keys=True))

    def content_hash(self, *extra) -> str:
        blob = json.dumps([self.resolved(), *extra], sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def from_file(path) -> RunConfig:
    return RunConfig(load(path), str(path))

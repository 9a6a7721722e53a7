"""Command-line front end: ``pesc resonances|spectrum|optimize|scan|report``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 optimizer finished without reaching its tolerance.
"""
from __future__ import annotations

import argparse
import json
import os
import platform
import sys
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .config import ConfigError, RunConfig, from_file
from .device import AssignmentError, DeviceError, build_model
from .evaluation import DEFAULT_DT, DEFAULT_STRIDE
from .flux import FluxPulse, PulseError, guess_pulse, idle_modulation, sample, write_control_csv
from .gradient import OptimizationError, two_stage_optimize
from .metrics import InvariantsUndefined
from .propagator import IntegratorError
from .simplex import STEP_CAPS, SIMPLEX_TOL, ParamSpace, SimplexError, omega_phi_scan, \
    optimize_parameters, theta_scan
from .spectrum import (CalibrationError, CalibrationResult, PESpectrum, calibrate_gate,
                       calibrated_pulse, compare, frequency_grid, read_points_csv, sweep,
                       write_points_csv)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_TOLERANCE = 0, 2, 3, 4
CONVENTIONS = {
    "units": "angular frequencies in rad/ns, times in ns; files use GHz, MHz and ns",
    "basis": "dressed logical states |q1 q2 q3>, spectator slowest; blocks split by spectator",
    "frame": "rotating frame of the dressed static energies at the idle coupler setting",
    "clamping": "J_PE clamped at zero; spectrum value is the minimum over time",
    "envelope": "sin^2 flanks on the oscillating flux component, offset not ramped",
}


class NumericalFailure(RuntimeError):
    pass


def _metadata(cfg: RunConfig, command: str, extra=None) -> dict:
    meta = {
        "command": command,
        "config": cfg.resolved(),
        "config_hash": cfg.content_hash(),
        "versions": {"pesc": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "python": platform.python_version()},
        "conventions": CONVENTIONS,
    }
    meta.update(extra or {})
    return meta


def _write_json(path: Path, data):
    path.write_text(json.dumps(data, indent=2, sort_keys=True, default=str) + "\n")


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.get("run", "out", "pesc-out"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _grid(cfg: RunConfig, default):
    sec = cfg.sections.get("grid", {})
    start = sec.get("start_ghz", default[0])
    stop = sec.get("stop_ghz", default[1])
    step = sec.get("step_ghz", default[2])
    try:
        return frequency_grid(start, stop, step)
    except ValueError as exc:
        raise ConfigError(f"{cfg.source}: [grid] {exc}") from None


def _dt(cfg: RunConfig) -> float:
    return float(cfg.get("run", "dt_ns", DEFAULT_DT))


def _stride(cfg: RunConfig) -> int:
    return int(cfg.get("run", "stride", DEFAULT_STRIDE))


def _workers(cfg: RunConfig) -> int:
    return max(1, int(cfg.get("run", "workers", 1)))


# -- calibration cache ---------------------------------------------------------

def cache_dir() -> Path:
    root = os.environ.get("PESC_CACHE_DIR")
    return Path(root) if root else Path.home() / ".cache" / "pesc"


def _calibration_settings(cfg: RunConfig, template: FluxPulse) -> dict:
    sec = cfg.sections.get("calibration", {})
    gate = cfg.gate
    if "T_min_ns" in sec or "T_max_ns" in sec:
        t_grid = np.arange(sec.get("T_min_ns", 2.5 * template.sigma_t),
                           sec.get("T_max_ns", 250.0) + 1e-9, sec.get("T_step_ns", 1.0))
    else:
        t_grid = None
    default_refine = ["T", "omega_phi_mhz", "delta"] if gate == "cz" else ["T"]
    return {
        "T_grid": None if t_grid is None else [float(x) for x in t_grid],
        "omega_phi_offsets_mhz": list(sec.get("omega_phi_offsets_mhz", [0.0])),
        "refine": list(sec.get("refine", default_refine)),
        "dt": float(sec.get("dt_ns", 0.01)),
        "target_eps": float(sec.get("target_eps", 1e-3)),
    }


def resolve_pulse(cfg: RunConfig, out: Path, force_calibration: bool = False,
                  log=print) -> FluxPulse:
    """Explicit [pulse] with T_ns, else the shipped calibration for an
    unmodified preset, else a (cached) calibration run."""
    pulse = cfg.pulse()
    if pulse is not None and not force_calibration:
        return pulse
    if cfg.device_is_preset and "pulse" not in cfg.sections and not force_calibration:
        return calibrated_pulse(cfg.gate)
    params = cfg.device()
    template = pulse or calibrated_pulse(cfg.gate)
    sec = cfg.sections.get("pulse", {})
    if sec and "T_ns" not in sec:
        # [pulse] without T: the given drive is the template, T from calibration
        template = FluxPulse.from_dict({**template.to_dict(),
                                        **{k: v for k, v in sec.items()},
                                        "T_ns": template.T})
    settings = _calibration_settings(cfg, template)
    key = cfg.content_hash("calibration", params.to_dict(), template.to_dict(), settings)
    cache = cache_dir() / f"calibration-{key}.json"
    if cache.exists():
        data = json.loads(cache.read_text())
        log(f"calibration: loaded {cache}")
        return FluxPulse.from_dict(data["pulse"])
    log(f"calibration: {cfg.gate} (this runs once per device and drive)")
    try:
        res: CalibrationResult = calibrate_gate(
            params, template, cfg.gate,
            T_grid=settings["T_grid"], omega_phi_offsets_mhz=settings["omega_phi_offsets_mhz"],
            refine=tuple(settings["refine"]), dt=settings["dt"],
            target_eps=settings["target_eps"])
    except CalibrationError as exc:
        trace = out / "calibration_trace.json"
        _write_json(trace, {"error": str(exc), "trace": exc.trace})
        raise NumericalFailure(f"{exc}; trace written to {trace}") from None
    cache.parent.mkdir(parents=True, exist_ok=True)
    _write_json(cache, res.to_dict())
    _write_json(out / "calibration.json", {**res.to_dict(), "metadata": _metadata(cfg, "calibrate")})
    log(f"calibration: eps_avg = {res.eps_avg:.2e}, T = {res.pulse.T:.4f} ns")
    return res.pulse


# -- commands ------------------------------------------------------------------

def cmd_resonances(cfg: RunConfig, args) -> int:
    params = cfg.device()
    sec = cfg.sections.get("grid", {})
    lo, hi = sec.get("start_ghz", 3.0), sec.get("stop_ghz", 7.5)
    from .device import static_resonances

    table = static_resonances(params, (lo, hi))
    print(f"{'omega3_ghz':>12}  transition")
    for f, label in table:
        print(f"{f:12.6f}  {label}")
    if not table:
        print("(no static resonances in range)")
    if cfg.get("run", "out"):
        out = _out_dir(cfg)
        _write_json(out / "resonances.json", {
            "range_ghz": [lo, hi],
            "resonances": [{"omega3_ghz": f, "label": lab} for f, lab in table],
            "metadata": _metadata(cfg, "resonances"),
        })
    return EXIT_OK


def _check_resume(out: Path, cfg: RunConfig, tag: str, resume: bool):
    """Refuse to resume a CSV produced by a different configuration."""
    stamp = out / f"{tag}.run.json"
    key = cfg.content_hash(tag)
    if resume and stamp.exists() and json.loads(stamp.read_text()).get("key") != key:
        raise ConfigError(f"{out}: existing {tag} results come from a different configuration; "
                          "use a new --out directory")
    stamp.write_text(json.dumps({"key": key}) + "\n")


def _resume_key_config(cfg: RunConfig) -> RunConfig:
    sections = json.loads(json.dumps(cfg.sections))
    sections.get("run", {}).pop("workers", None)
    sections.get("run", {}).pop("out", None)
    sections.pop("grid", None)
    return RunConfig(sections, cfg.source)


def run_sweep(cfg: RunConfig, params, pulse, grid, out: Path, tag: str, resume: bool,
              log=print) -> PESpectrum:
    """Sweep in chunks, persisting the CSV after every chunk so an
    interrupted run can continue with ``--resume``."""
    csv_path = out / f"{tag}.csv"
    _check_resume(out, _resume_key_config(cfg), tag, resume)
    done = read_points_csv(csv_path) if resume and csv_path.exists() else []
    have = {f"{p.omega3_ghz:.6f}": p for p in done}
    workers = _workers(cfg)
    chunk = max(4 * workers, 8)
    todo = [w for w in grid if f"{w:.6f}" not in have]
    if done:
        log(f"{tag}: resuming, {len(grid) - len(todo)} of {len(grid)} points present")
    for i in range(0, len(todo), chunk):
        part = sweep(params, pulse, todo[i:i + chunk], workers=workers, dt=_dt(cfg),
                     stride=_stride(cfg), band=None)
        for p in part.points():
            have[f"{p.omega3_ghz:.6f}"] = p
        ordered = sorted(have.values(), key=lambda p: p.omega3_ghz)
        write_points_csv(ordered, csv_path)
        log(f"{tag}: {min(i + chunk, len(todo))}/{len(todo)} points")
    spec = sweep(params, pulse, grid, workers=1, dt=_dt(cfg), stride=_stride(cfg),
                 resume=have.values(), band=None)
    write_points_csv(spec.points(), csv_path)
    return spec


def cmd_spectrum(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg)
    params = cfg.device()
    pulse = resolve_pulse(cfg, out, force_calibration=args.calibrate)
    grid = _grid(cfg, (4.0, 6.2, 0.005))
    spec = run_sweep(cfg, params, pulse, grid, out, "spectrum", args.resume)
    spec.metadata.update(_metadata(cfg, "spectrum"))
    spec.write_annotations(out / "spectrum.json")
    spec.plot_svg(out / "spectrum.svg", title=f"PE spectrum ({cfg.gate})")
    n_failed = sum(1 for f in spec.flags if f)
    print(f"{len(spec)} points, {len(spec.peaks)} peaks, {n_failed} failed; "
          f"written to {out}/spectrum.csv")
    for p in spec.peaks:
        print(f"  peak {p.omega3_ghz:.4f} GHz  J={p.height:.3e}  {p.label}")
    return EXIT_OK


def _simplex_space(cfg: RunConfig, pulse: FluxPulse, omega3: float) -> ParamSpace:
    sec = cfg.sections.get("simplex", {})
    try:
        return ParamSpace.for_pulse(
            pulse, gate=cfg.gate, harmonics=sec.get("harmonics", 1),
            bounds={k: tuple(v) for k, v in sec.get("bounds", {}).items()},
            frozen=sec.get("frozen"), omega3_ghz=omega3)
    except SimplexError as exc:
        raise ConfigError(f"{cfg.source}: [simplex] {exc}") from None


def cmd_optimize(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg)
    omega3 = cfg.get("run", "omega3_ghz")
    if omega3 is None:
        raise ConfigError("optimize needs a spectator frequency (--omega3 or [run] omega3_ghz)")
    mode = args.mode or "krotov"
    if mode not in ("krotov", "simplex"):
        raise ConfigError(f"--mode must be krotov or simplex, got {mode!r}")
    params = cfg.device()
    pulse = resolve_pulse(cfg, out, force_calibration=args.calibrate)
    tag = f"optimize-{mode}-{omega3:.6f}"
    if mode == "krotov":
        kcfg = cfg.krotov()
        model = build_model(params.with_spectator(omega3), idle_modulation(pulse))
        record = two_stage_optimize(model, pulse, kcfg, log=print)
    else:
        sec = cfg.sections.get("simplex", {})
        space = _simplex_space(cfg, pulse, omega3)
        record = optimize_parameters(
            params, pulse, omega3, space=space, gate=cfg.gate,
            tol=sec.get("tol", SIMPLEX_TOL), max_steps=sec.get("max_steps", STEP_CAPS[cfg.gate]),
            dt=_dt(cfg), stride=_stride(cfg))
        record.final_control = sample(record.final_pulse, _dt(cfg))
    record.metadata.update(_metadata(cfg, "optimize", {"omega3_ghz": omega3, "mode": mode}))
    record.write(out / f"{tag}.json")
    write_control_csv(record.final_control, out / f"{tag}-control.csv")
    before, after = record.metadata.get("pe_before"), record.metadata.get("pe_after")
    print(f"{mode} at {omega3:.4f} GHz: {record.termination}; "
          f"PE {before:.3e} -> {after:.3e} after {record.n_iterations} iterations")
    return EXIT_OK if record.termination == "tolerance" else EXIT_TOLERANCE


def _values(cfg: RunConfig, axis: str, pulse: FluxPulse) -> np.ndarray:
    sec = cfg.sections.get("scan", {})
    if "values" in sec:
        return np.asarray(sec["values"], dtype=float)
    if {"start", "stop", "step"} <= set(sec):
        if not sec["step"] > 0 or sec["stop"] < sec["start"]:
            raise ConfigError(f"{cfg.source}: [scan] needs step > 0 and stop >= start")
        n = int(np.floor((sec["stop"] - sec["start"]) / sec["step"] + 1e-9)) + 1
        return sec["start"] + sec["step"] * np.arange(n)
    centre = pulse.theta if axis == "theta" else pulse.omega_phi_mhz
    width = 0.02 if axis == "theta" else 20.0
    return centre + width * np.linspace(-1.0, 1.0, 5)


def cmd_scan(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg)
    axis = args.axis or cfg.get("scan", "axis", "theta")
    if axis not in ("theta", "omega_phi"):
        raise ConfigError(f"scan axis must be theta or omega_phi, got {axis!r}")
    params = cfg.device()
    pulse = resolve_pulse(cfg, out, force_calibration=args.calibrate)
    grid = _grid(cfg, (4.40, 4.55, 0.005))
    values = _values(cfg, axis, pulse)
    reference = run_sweep(cfg, params, pulse, grid, out, "scan-reference", args.resume)
    kw = dict(workers=_workers(cfg), dt=_dt(cfg), stride=_stride(cfg))
    if axis == "theta":
        res = theta_scan(params, pulse, grid, values, **kw)
        res.reference = reference.clamped
        res.envelope = np.minimum(res.envelope, reference.clamped)
    else:
        res = omega_phi_scan(params, pulse, grid, values, reference=reference.clamped, **kw)
    res.write_matrix_csv(out / f"scan-{axis}.csv")
    res.write_envelope_csv(out / f"scan-{axis}-envelope.csv")
    env = PESpectrum(grid, res.envelope, res.envelope, reference.t_min, reference.eps_avg,
                     reference.flags, reference.resonances)
    merged, table = compare(reference, env)
    reference.plot_svg(out / f"scan-{axis}.svg", overlays=[("envelope", res.envelope)],
                       title=f"{axis} scan ({cfg.gate})")
    _write_json(out / f"scan-{axis}.json", {
        "axis": axis,
        "values": [float(v) for v in values],
        "peak_trace_ghz": [float(v) for v in res.peak_trace],
        "improvement": table,
        "metadata": _metadata(cfg, "scan"),
    })
    print(f"{axis} scan: {len(values)} values x {len(grid)} points; "
          f"max reduction {max((r['improvement'] for r in table), default=1.0):.2f}x")
    return EXIT_OK


def cmd_report(cfg: RunConfig, args) -> int:
    out = Path(cfg.get("run", "out", "pesc-out"))
    if not out.is_dir():
        raise ConfigError(f"{out}: no such output directory")
    lines = [f"# pesc report: {out}", ""]
    summary = {"spectra": [], "optimizations": [], "metadata": _metadata(cfg, "report")}
    for path in sorted(out.glob("spectrum*.json")):
        data = json.loads(path.read_text())
        peaks = data.get("peaks", [])
        summary["spectra"].append({"file": path.name, "peaks": peaks})
        lines.append(f"## {path.stem}: {len(peaks)} peaks")
        for p in peaks:
            lines.append(f"- {p['omega3_ghz']:.4f} GHz, J = {p['height']:.3e}, {p['label']}")
        lines.append("")
    for path in sorted(out.glob("optimize-*.json")):
        data = json.loads(path.read_text())
        meta = data.get("metadata", {})
        entry = {"file": path.name, "termination": data.get("termination"),
                 "pe_before": meta.get("pe_before"), "pe_after": meta.get("pe_after")}
        summary["optimizations"].append(entry)
        lines.append(f"- {path.stem}: {entry['termination']}, "
                     f"PE {entry['pe_before']:.3e} -> {entry['pe_after']:.3e}")
    text = "\n".join(lines) + "\n"
    (out / "report.md").write_text(text)
    _write_json(out / "report.json", summary)
    print(text, end="")
    return EXIT_OK


COMMANDS = {"resonances": cmd_resonances, "spectrum": cmd_spectrum, "optimize": cmd_optimize,
            "scan": cmd_scan, "report": cmd_report}


def _parse_grid(text: str):
    try:
        start, stop, step = (float(x) for x in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError("grid must be start:stop:step in GHz") from None
    return start, stop, step


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML run configuration")
    common.add_argument("--preset", choices=["sqrt_iswap", "cz"])
    common.add_argument("--grid", type=_parse_grid, help="spectator grid start:stop:step (GHz)")
    common.add_argument("--omega3", type=float, help="spectator frequency (GHz)")
    common.add_argument("--mode", help="optimizer: krotov or simplex")
    common.add_argument("--axis", help="scan axis: theta or omega_phi")
    common.add_argument("--workers", type=int, help="worker processes")
    common.add_argument("--out", help="output directory")
    common.add_argument("--resume", action="store_true", help="reuse persisted grid points")
    common.add_argument("--dt", type=float, help="time step (ns)")
    common.add_argument("--calibrate", action="store_true",
                        help="calibrate the gate instead of using the shipped pulse")
    parser = argparse.ArgumentParser(prog="pesc", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"pesc {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return parser


def config_from_args(args) -> RunConfig:
    cfg = from_file(args.config) if args.config else RunConfig()
    cfg.set("run", "preset", args.preset)
    cfg.set("run", "out", args.out)
    cfg.set("run", "workers", args.workers)
    cfg.set("run", "dt_ns", args.dt)
    cfg.set("run", "omega3_ghz", args.omega3)
    if args.grid:
        for key, value in zip(("start_ghz", "stop_ghz", "step_ghz"), args.grid):
            cfg.set("grid", key, value)
    if args.dt is not None and "krotov" in cfg.sections:
        cfg.set("krotov", "dt_ns", args.dt)
    _ = cfg.preset_name
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = config_from_args(args)
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, DeviceError, PulseError) as exc:
        if isinstance(exc, AssignmentError):
            print(f"pesc: numerical failure: {exc}", file=sys.stderr)
            return EXIT_NUMERICAL
        print(f"pesc: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalFailure, IntegratorError, OptimizationError, InvariantsUndefined,
            np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"pesc: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())

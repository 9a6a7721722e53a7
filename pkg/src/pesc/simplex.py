"""Bounded Nelder-Mead search over parametric pulse parameters and the
Theta / omega_phi scans of the PE spectrum."""
from __future__ import annotations

import functools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .device import DeviceParams
from .evaluation import DEFAULT_DT, DEFAULT_STRIDE, evaluate_point, parallel_map
from .flux import FluxPulse
from .records import IterationRow, OptimizationRecord

SIMPLEX_TOL = 1e-2
STEP_CAPS = {"sqrt_iswap": 500, "cz": 1000}
DIAMETER_TOL = 1e-10
INITIAL_STEP = 0.05  # fraction of each bound width

# default half-widths around the guess ("rel" is a fraction of the value)
DEFAULT_BOUNDS = {
    "theta": ("abs", 0.05),
    "delta": ("rel", 0.30),
    "omega_phi_mhz": ("abs", 30.0),
}


class SimplexError(ValueError):
    pass


@dataclass(frozen=True)
class ParamSpace:
    """Named pulse parameters with box bounds and frozen flags.

    Names follow ``FluxPulse.replace``: ``theta``, ``omega_phi_mhz``,
    ``delta<k>`` and ``phi<k>`` for harmonic k.
    """

    names: tuple[str, ...]
    values: tuple[float, ...]
    lower: tuple[float, ...]
    upper: tuple[float, ...]
    frozen: tuple[bool, ...]
    gate: str = "sqrt_iswap"
    omega3_ghz: float | None = None

    def __post_init__(self):
        n = len(self.names)
        for attr in ("values", "lower", "upper", "frozen"):
            if len(getattr(self, attr)) != n:
                raise SimplexError(f"{attr} has the wrong length")
        for name, v, lo, hi in zip(self.names, self.values, self.lower, self.upper):
            if not lo <= v <= hi:
                raise SimplexError(f"initial {name}={v} outside [{lo}, {hi}]")
        if all(self.frozen):
            raise SimplexError("at least one parameter must be free")

    @property
    def free(self) -> np.ndarray:
        return np.flatnonzero(~np.asarray(self.frozen, dtype=bool))

    @property
    def lower_array(self) -> np.ndarray:
        return np.asarray(self.lower, dtype=float)

    @property
    def upper_array(self) -> np.ndarray:
        return np.asarray(self.upper, dtype=float)

    def project(self, x) -> np.ndarray:
        return np.clip(np.asarray(x, dtype=float), self.lower_array, self.upper_array)

    def as_dict(self, x) -> dict:
        return {n: float(v) for n, v in zip(self.names, x)}

    def to_pulse(self, base: FluxPulse, x) -> FluxPulse:
        return base.replace(**self.as_dict(x))

    def to_dict(self) -> dict:
        return {
            "gate": self.gate,
            "omega3_ghz": self.omega3_ghz,
            "parameters": [
                {"name": n, "value": v, "lower": lo, "upper": hi, "frozen": f}
                for n, v, lo, hi, f in zip(self.names, self.values, self.lower,
                                           self.upper, self.frozen)
            ],
        }

    @classmethod
    def for_pulse(cls, pulse: FluxPulse, gate: str = "sqrt_iswap", harmonics: int = 1,
                  bounds: dict | None = None, frozen: Sequence[str] | None = None,
                  omega3_ghz: float | None = None) -> "ParamSpace":
        """Default search space around ``pulse``.

        ``harmonics=1``: (theta, delta1, omega_phi_mhz, phi1).
        ``harmonics=3``: (theta, delta1..3, phi1..3) at fixed omega_phi.
        ``bounds`` maps a name (or the prefix ``delta`` / ``phi``) to
        ``(lower, upper)`` absolute bounds.  ``frozen=None`` freezes the
        phases for CZ.
        """
        if harmonics == 1:
            names = ["theta", "delta1", "omega_phi_mhz", "phi1"]
        elif harmonics == 3:
            names = ["theta", "delta1", "delta2", "delta3", "phi1", "phi2", "phi3"]
        else:
            raise SimplexError("harmonics must be 1 or 3")
        if frozen is None:
            frozen = [n for n in names if n.startswith("phi")] if gate == "cz" else []
        bounds = dict(bounds or {})
        d1 = pulse.harmonic(1).delta
        values, lower, upper = [], [], []
        for name in names:
            if name == "theta":
                v = pulse.theta
            elif name == "omega_phi_mhz":
                v = pulse.omega_phi_mhz
            elif name.startswith("delta"):
                v = pulse.harmonic(int(name[5:])).delta
            else:
                v = pulse.harmonic(int(name[3:])).phi
            prefix = name.rstrip("0123456789")
            if name in bounds or prefix in bounds:
                lo, hi = bounds.get(name, bounds.get(prefix))
            elif prefix == "phi":
                lo, hi = -np.pi, np.pi
            elif name == "delta1" or (prefix == "delta" and v != 0.0):
                w = DEFAULT_BOUNDS["delta"][1] * abs(v)
                lo, hi = v - w, v + w
            elif prefix == "delta":
                # added harmonics start at zero: bound by a fraction of delta1
                w = DEFAULT_BOUNDS["delta"][1] * abs(d1)
                lo, hi = -w, w
            else:
                w = DEFAULT_BOUNDS[name][1]
                lo, hi = v - w, v + w
            values.append(float(v))
            lower.append(float(lo))
            upper.append(float(hi))
        return cls(tuple(names), tuple(values), tuple(lower), tuple(upper),
                   tuple(n in frozen for n in names), gate, omega3_ghz)


@dataclass
class NelderMeadResult:
    x: np.ndarray
    value: float
    steps: int
    reason: str  # tolerance | step cap | diameter
    trace: list = field(default_factory=list)  # (step, best value, best x)
    evaluated: list = field(default_factory=list)  # every candidate evaluated
    n_evals: int = 0


def nelder_mead(objective: Callable[[np.ndarray], float], space: ParamSpace,
                tol: float = SIMPLEX_TOL, max_steps: int = 500,
                diameter_tol: float = DIAMETER_TOL) -> NelderMeadResult:
    """Downhill simplex on the free parameters with box projection.

    ``objective`` receives the full parameter vector.  Every candidate is
    projected onto the box before evaluation.  Stops when the best value is
    below ``tol`` (checked before each step, so a guess below tolerance
    costs zero steps), when the simplex diameter drops below
    ``diameter_tol`` or after ``max_steps`` steps.
    """
    free = space.free
    base = np.asarray(space.values, dtype=float)
    width = (space.upper_array - space.lower_array)[free]
    evaluated = []

    def full(y):
        x = base.copy()
        x[free] = y
        return space.project(x)

    def f(y):
        x = full(y)
        evaluated.append(x)
        v = float(objective(x))
        return v if np.isfinite(v) else np.inf

    n = len(free)
    y0 = full(base[free])[free]
    pts = [y0]
    for i in range(n):
        y = y0.copy()
        step = INITIAL_STEP * width[i]
        y[i] += step
        y = full(y)[free]
        if y[i] == y0[i]:
            y[i] = full(y0 - step * np.eye(n)[i])[free][i]
        pts.append(y)
    pts = np.array(pts)
    vals = np.array([f(p) for p in pts])
    if not np.all(np.isfinite(vals)):
        raise SimplexError("objective is not finite on the initial simplex")

    trace = []
    steps = 0
    reason = "step cap"
    while True:
        order = np.argsort(vals, kind="stable")
        pts, vals = pts[order], vals[order]
        trace.append((steps, float(vals[0]), full(pts[0])))
        if vals[0] < tol:
            reason = "tolerance"
            break
        if np.max(np.linalg.norm(pts[1:] - pts[0], axis=1)) < diameter_tol:
            reason = "diameter"
            break
        if steps >= max_steps:
            reason = "step cap"
            break
        steps += 1
        c = pts[:-1].mean(axis=0)
        yr = full(c + (c - pts[-1]))[free]
        fr = f(yr)
        if fr < vals[0]:
            ye = full(c + 2.0 * (yr - c))[free]
            fe = f(ye)
            pts[-1], vals[-1] = (ye, fe) if fe < fr else (yr, fr)
            continue
        if fr < vals[-2]:
            pts[-1], vals[-1] = yr, fr
            continue
        if fr < vals[-1]:
            yc = full(c + 0.5 * (yr - c))[free]
            fc = f(yc)
            accept = fc <= fr
        else:
            yc = full(c + 0.5 * (pts[-1] - c))[free]
            fc = f(yc)
            accept = fc < vals[-1]
        if accept:
            pts[-1], vals[-1] = yc, fc
            continue
        for i in range(1, n + 1):
            pts[i] = full(pts[0] + 0.5 * (pts[i] - pts[0]))[free]
            vals[i] = f(pts[i])
    return NelderMeadResult(full(pts[0]), float(vals[0]), steps, reason, trace,
                            evaluated, len(evaluated))


_REASONS = {"tolerance": "tolerance", "step cap": "iteration cap", "diameter": "stagnation"}


def optimize_parameters(params: DeviceParams, guess: FluxPulse, omega3_ghz: float,
                        space: ParamSpace | None = None, gate: str | None = None,
                        tol: float = SIMPLEX_TOL, max_steps: int | None = None,
                        dt: float = DEFAULT_DT, stride: int = DEFAULT_STRIDE,
                        ) -> OptimizationRecord:
    """Minimize the clamped PE-spectrum value (min over time) at one
    spectator frequency by Nelder-Mead over the pulse parameters.

    Defaults per gate: tolerance 1e-2, step caps 500 (sqrt_iswap) and
    1000 (cz), phases frozen for cz.
    """
    gate = gate or (space.gate if space is not None else params.name)
    if gate not in STEP_CAPS:
        raise SimplexError(f"unknown gate {gate!r}")
    if space is None:
        space = ParamSpace.for_pulse(guess, gate=gate, omega3_ghz=omega3_ghz)
    max_steps = STEP_CAPS[gate] if max_steps is None else int(max_steps)
    results = {}

    def objective(x):
        key = x.tobytes()
        if key not in results:
            results[key] = evaluate_point(params, space.to_pulse(guess, x), omega3_ghz,
                                          dt=dt, stride=stride)
        return results[key].value

    nm = nelder_mead(objective, space, tol=tol, max_steps=max_steps)
    record = OptimizationRecord(metadata={
        "mode": "simplex",
        "gate": gate,
        "omega3_ghz": omega3_ghz,
        "tol": tol,
        "max_steps": max_steps,
        "space": space.to_dict(),
        "dt_ns": dt,
        "stride": stride,
        "n_evaluations": nm.n_evals,
    })
    for step, value, x in nm.trace:
        best = results[x.tobytes()]
        record.append(IterationRow(step, "simplex", best.raw, 0.0, value, best.eps_avg,
                                   params=space.as_dict(x)))
    record.termination = _REASONS[nm.reason]
    record.final_pulse = space.to_pulse(guess, nm.x)
    # the first evaluation is the guess itself; initial_value is the best
    # vertex of the starting simplex
    record.metadata["pe_before"] = results[space.project(space.values).tobytes()].value
    record.metadata["pe_after"] = nm.value
    record.metadata["steps"] = nm.steps
    return record


# -- scans ---------------------------------------------------------------------

@dataclass
class ScanResult:
    axis: str
    omega3_ghz: np.ndarray
    param_values: np.ndarray
    values: np.ndarray  # (n_param, n_omega3) clamped PE values
    envelope: np.ndarray
    reference: np.ndarray | None = None
    peak_trace: np.ndarray | None = None  # omega3 of the highest value per row

    def write_matrix_csv(self, path):
        lines = ["omega3_ghz,param_value,j_pe"]
        for i, p in enumerate(self.param_values):
            for j, w in enumerate(self.omega3_ghz):
                lines.append(f"{w:.6f},{p:.10g},{self.values[i, j]:.12e}")
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")

    def write_envelope_csv(self, path):
        lines = ["omega3_ghz,envelope,reference"]
        for j, w in enumerate(self.omega3_ghz):
            ref = "" if self.reference is None else f"{self.reference[j]:.12e}"
            lines.append(f"{w:.6f},{self.envelope[j]:.12e},{ref}")
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")


def _scan_point(item, params, pulse, name, dt, stride):
    value, w3 = item
    return evaluate_point(params, pulse.replace(**{name: value}), w3, dt=dt,
                          stride=stride).value


def _scan(params, pulse, omega3_grid, name, grid, workers, dt, stride):
    omega3_grid = np.asarray(omega3_grid, dtype=float)
    grid = np.asarray(grid, dtype=float)
    if omega3_grid.size == 0 or grid.size == 0:
        raise SimplexError("scan grids must be non-empty")
    items = [(float(p), float(w)) for p in grid for w in omega3_grid]
    func = functools.partial(_scan_point, params=params, pulse=pulse, name=name,
                             dt=dt, stride=stride)
    vals = np.array(parallel_map(func, items, workers)).reshape(len(grid), len(omega3_grid))
    return omega3_grid, grid, vals


def theta_scan(params: DeviceParams, pulse: FluxPulse, omega3_grid, theta_grid,
               workers: int = 1, dt: float = DEFAULT_DT,
               stride: int = DEFAULT_STRIDE) -> ScanResult:
    """Clamped PE values for every (Theta, omega3) pair and the minimum over
    Theta per omega3."""
    w, grid, vals = _scan(params, pulse, omega3_grid, "theta", theta_grid, workers, dt, stride)
    return ScanResult("theta", w, grid, vals, vals.min(axis=0),
                      peak_trace=w[np.argmax(vals, axis=1)])


def omega_phi_scan(params: DeviceParams, pulse: FluxPulse, omega3_grid, omega_phi_grid_mhz,
                   reference=None, workers: int = 1, dt: float = DEFAULT_DT,
                   stride: int = DEFAULT_STRIDE) -> ScanResult:
    """Clamped PE values for every (omega_phi, omega3) pair; the envelope is
    the pointwise minimum of all rows and the ``reference`` spectrum."""
    w, grid, vals = _scan(params, pulse, omega3_grid, "omega_phi_mhz", omega_phi_grid_mhz,
                          workers, dt, stride)
    env = vals.min(axis=0)
    if reference is not None:
        reference = np.asarray(reference, dtype=float)
        if reference.shape != env.shape:
            raise SimplexError("reference spectrum does not match the omega3 grid")
        env = np.minimum(env, reference)
    return ScanResult("omega_phi_mhz", w, grid, vals, env, reference,
                      peak_trace=w[np.argmax(vals, axis=1)])

"""Parametric flux drive and sampled coupler controls.

The coupler frequency is omega_c_max * u(t) with
    u(t) = sqrt(|cos(pi * Phi(t))|),
    Phi(t) = Theta + env(t) * sum_k delta_k cos(k omega_phi t + phi_k).

``env`` is a flat top with sin^2 flanks of length ``sigma_t``; the offset
Theta is never ramped, so u(0) = u(T) = sqrt(|cos(pi Theta)|).
"""
from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np

TWO_PI = 2.0 * np.pi
ENVELOPE_CONVENTION = "sin^2 flanks on the oscillating part of Phi, offset not ramped"


class PulseError(ValueError):
    pass


@dataclass(frozen=True)
class Harmonic:
    k: int
    delta: float
    phi: float = 0.0


@dataclass(frozen=True)
class FluxPulse:
    theta: float
    harmonics: tuple[Harmonic, ...]
    omega_phi: float  # rad/ns
    sigma_t: float  # ns
    T: float  # ns

    def __post_init__(self):
        hs = tuple(
            h if isinstance(h, Harmonic) else Harmonic(*h) for h in self.harmonics
        )
        object.__setattr__(self, "harmonics", hs)
        if not self.omega_phi > 0:
            raise PulseError("omega_phi must be positive")
        if not (self.sigma_t >= 0 and self.T > 2 * self.sigma_t):
            raise PulseError("need T > 2 sigma_t >= 0")
        ks = [h.k for h in hs]
        if any(k < 1 for k in ks) or len(set(ks)) != len(ks):
            raise PulseError("harmonic multiples must be distinct integers >= 1")

    @classmethod
    def single(cls, theta, delta, omega_phi_mhz, phi=0.0, sigma_t=0.0, T=100.0):
        """Single-harmonic pulse with the drive frequency in MHz."""
        return cls(
            theta=float(theta),
            harmonics=(Harmonic(1, float(delta), float(phi)),),
            omega_phi=TWO_PI * 1e-3 * float(omega_phi_mhz),
            sigma_t=float(sigma_t),
            T=float(T),
        )

    @property
    def omega_phi_mhz(self) -> float:
        return self.omega_phi / TWO_PI * 1e3

    @property
    def delta(self) -> float:
        return self.harmonic(1).delta

    @property
    def phi(self) -> float:
        return self.harmonic(1).phi

    def harmonic(self, k: int) -> Harmonic:
        for h in self.harmonics:
            if h.k == k:
                return h
        return Harmonic(k, 0.0, 0.0)

    def replace(self, **changes) -> "FluxPulse":
        """Return a copy with top-level fields and/or harmonic entries
        changed; ``delta1=..., phi2=...`` address harmonics by multiple,
        ``omega_phi_mhz`` sets the drive frequency."""
        harmonics = {h.k: h for h in self.harmonics}
        top = {}
        for key, value in changes.items():
            if key.startswith(("delta", "phi")) and key not in ("delta", "phi"):
                name = "delta" if key.startswith("delta") else "phi"
                k = int(key[len(name):])
                h = harmonics.get(k, Harmonic(k, 0.0, 0.0))
                harmonics[k] = dataclasses.replace(h, **{name: float(value)})
            elif key in ("delta", "phi"):
                h = harmonics.get(1, Harmonic(1, 0.0, 0.0))
                harmonics[1] = dataclasses.replace(h, **{key: float(value)})
            elif key == "omega_phi_mhz":
                top["omega_phi"] = TWO_PI * 1e-3 * float(value)
            else:
                top[key] = value
        top["harmonics"] = tuple(harmonics[k] for k in sorted(harmonics))
        return dataclasses.replace(self, **top)

    def to_dict(self) -> dict:
        return {
            "theta": self.theta,
            "harmonics": [
                {"k": h.k, "delta": h.delta, "phi_rad": h.phi} for h in self.harmonics
            ],
            "omega_phi_mhz": self.omega_phi_mhz,
            "sigma_t_ns": self.sigma_t,
            "T_ns": self.T,
            "envelope": ENVELOPE_CONVENTION,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FluxPulse":
        return cls(
            theta=float(d["theta"]),
            harmonics=tuple(
                Harmonic(int(h["k"]), float(h["delta"]), float(h.get("phi_rad", 0.0)))
                for h in d["harmonics"]
            ),
            omega_phi=TWO_PI * 1e-3 * float(d["omega_phi_mhz"]),
            sigma_t=float(d.get("sigma_t_ns", 0.0)),
            T=float(d["T_ns"]),
        )


# Reference drives of the two presets; T is not part of them and is set by calibration.
GUESS_PULSES = {
    "sqrt_iswap": dict(theta=-0.108, delta=0.155, omega_phi_mhz=850.6, sigma_t=8.3),
    "cz": dict(theta=0.15, delta=0.19, omega_phi_mhz=816.58, sigma_t=13.0),
}


def guess_pulse(name: str, T: float) -> FluxPulse:
    return FluxPulse.single(T=T, **GUESS_PULSES[name])


def envelope(pulse: FluxPulse, t):
    t = np.asarray(t, dtype=float)
    s = pulse.sigma_t
    if s == 0.0:
        return np.ones_like(t)
    rise = np.sin(0.5 * np.pi * np.clip(t / s, 0.0, 1.0)) ** 2
    fall = np.sin(0.5 * np.pi * np.clip((pulse.T - t) / s, 0.0, 1.0)) ** 2
    return np.minimum(rise, fall)


def _check_times(pulse: FluxPulse, t):
    t = np.asarray(t, dtype=float)
    tol = 1e-12 * max(1.0, pulse.T)
    if np.any(t < -tol) or np.any(t > pulse.T + tol):
        raise PulseError(f"time outside [0, {pulse.T}]")
    return t


def flux_phase(pulse: FluxPulse, t):
    t = _check_times(pulse, t)
    osc = np.zeros_like(t)
    for h in pulse.harmonics:
        osc = osc + h.delta * np.cos(h.k * pulse.omega_phi * t + h.phi)
    return pulse.theta + envelope(pulse, t) * osc


def coupler_modulation(pulse: FluxPulse, t):
    return np.sqrt(np.abs(np.cos(np.pi * flux_phase(pulse, t))))


def idle_modulation(pulse: FluxPulse) -> float:
    return float(np.sqrt(abs(np.cos(np.pi * pulse.theta))))


@dataclass(frozen=True)
class SampledControl:
    """Piecewise-constant coupler modulation.

    ``u[k]`` holds on [k dt, (k+1) dt); the final step may be shorter
    (``dt_last``) when dt does not divide T.  ``substeps > 1`` marks the
    effective half-step controls of the fourth-order scheme (see
    ``sample_magnus4``): only every ``substeps``-th edge is a physical time.
    """

    dt: float
    u: np.ndarray
    origin: str = "parametric"
    dt_last: float | None = None
    clip_count: int = 0
    u0: float | None = None
    substeps: int = 1

    def __post_init__(self):
        u = np.asarray(self.u, dtype=float)
        u.setflags(write=False)
        object.__setattr__(self, "u", u)
        if self.dt_last is None:
            object.__setattr__(self, "dt_last", self.dt)

    def __len__(self):
        return len(self.u)

    @property
    def T(self) -> float:
        return self.dt * (len(self.u) - 1) + self.dt_last

    @property
    def step_sizes(self) -> np.ndarray:
        dts = np.full(len(self.u), self.dt)
        dts[-1] = self.dt_last
        return dts

    @property
    def edges(self) -> np.ndarray:
        return np.concatenate([np.arange(len(self.u)) * self.dt, [self.T]])

    @property
    def midpoints(self) -> np.ndarray:
        e = self.edges
        return 0.5 * (e[1:] + e[:-1])

    def with_values(self, u, origin=None, clip_count=0) -> "SampledControl":
        return dataclasses.replace(
            self, u=np.asarray(u, dtype=float), origin=origin or self.origin,
            clip_count=clip_count,
        )

    def to_csv(self, path):
        write_control_csv(self, path)


def sample(pulse: FluxPulse, dt: float) -> SampledControl:
    if not dt > 0:
        raise PulseError("dt must be positive")
    n = int(np.ceil(pulse.T / dt - 1e-9))
    dt_last = pulse.T - (n - 1) * dt
    if abs(dt_last - dt) < 1e-9 * dt:
        dt_last = dt
    edges = np.concatenate([np.arange(n) * dt, [pulse.T]])
    mid = 0.5 * (edges[1:] + edges[:-1])
    u = coupler_modulation(pulse, mid)
    return SampledControl(
        dt=float(dt), u=u, origin="parametric", dt_last=float(dt_last),
        u0=idle_modulation(pulse),
    )


# two-point Gauss-Legendre nodes and commutator-free weights
_GAUSS = (0.5 - np.sqrt(3.0) / 6.0, 0.5 + np.sqrt(3.0) / 6.0)
_CF4 = ((3.0 - 2.0 * np.sqrt(3.0)) / 12.0, (3.0 + 2.0 * np.sqrt(3.0)) / 12.0)


def sample_magnus4(pulse: FluxPulse, dt: float) -> SampledControl:
    """Effective controls of the fourth-order commutator-free Magnus scheme.

    One step of size h is exp(-i h (a1 H1 + a2 H2)) exp(-i h (a2 H1 + a1 H2))
    with H1, H2 taken at the Gauss nodes.  As H is affine in u and
    a1 + a2 = 1/2, each factor is a plain half-step of size h/2 at the
    effective control 2 (a2 u1 + a1 u2) (first) and 2 (a1 u1 + a2 u2)
    (second).  The result is a SampledControl of half-steps with
    ``substeps = 2``; its values may overshoot [0, 1] by a few percent.
    """
    base = sample(pulse, dt)
    edges = base.edges
    h = np.diff(edges)
    t1 = edges[:-1] + _GAUSS[0] * h
    t2 = edges[:-1] + _GAUSS[1] * h
    u1 = coupler_modulation(pulse, t1)
    u2 = coupler_modulation(pulse, t2)
    a1, a2 = _CF4
    v = np.empty(2 * len(h))
    v[0::2] = 2.0 * (a2 * u1 + a1 * u2)
    v[1::2] = 2.0 * (a1 * u1 + a2 * u2)
    return SampledControl(
        dt=0.5 * base.dt, u=v, origin="parametric-magnus4",
        dt_last=0.5 * base.dt_last, u0=base.u0, substeps=2,
    )


def apply_correction(base: SampledControl, delta_u) -> SampledControl:
    delta_u = np.asarray(delta_u, dtype=float)
    if delta_u.shape != base.u.shape:
        raise PulseError(
            f"correction length {delta_u.shape} != control length {base.u.shape}"
        )
    raw = base.u + delta_u
    clipped = np.clip(raw, 0.0, 1.0)
    n_clip = int(np.count_nonzero(clipped != raw))
    origin = "parametric+correction" if base.origin == "parametric" else base.origin
    return base.with_values(clipped, origin=origin, clip_count=n_clip)


def write_control_csv(control: SampledControl, path):
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t_ns", "u"])
        for t, u in zip(control.midpoints, control.u):
            w.writerow([f"{t:.9f}", f"{u:.17g}"])


def read_control_csv(path, u0: float | None = None) -> SampledControl:
    t, u = [], []
    with Path(path).open() as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            t.append(float(row["t_ns"]))
            u.append(float(row["u"]))
    t = np.asarray(t)
    if len(t) < 2:
        raise PulseError("control CSV needs at least two samples")
    dt = t[1] - t[0]
    # midpoints: last one may belong to a truncated step
    dt_last = 2.0 * (t[-1] - (t[-2] + 0.5 * dt))
    if abs(dt_last - dt) < 1e-6 * dt:
        dt_last = dt
    return SampledControl(
        dt=float(dt), u=np.asarray(u), origin="free-form",
        dt_last=float(dt_last), u0=u0,
    )


def update_shape(control: SampledControl, sigma_t: float) -> np.ndarray:
    """Krotov update shape S(t) at the step midpoints: flat top, sin^2 flanks."""
    t = control.midpoints
    T = control.T
    if sigma_t <= 0:
        return np.ones_like(t)
    rise = np.sin(0.5 * np.pi * np.clip(t / sigma_t, 0.0, 1.0)) ** 2
    fall = np.sin(0.5 * np.pi * np.clip((T - t) / sigma_t, 0.0, 1.0)) ** 2
    return np.minimum(rise, fall)


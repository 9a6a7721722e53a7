"""PE-spectrum value of one parameter set at one spectator frequency,
and a deterministic ordered worker pool."""
from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .device import AssignmentError, DeviceParams, build_model
from .flux import FluxPulse, idle_modulation
from .metrics import WORST_CASE, closest_pe_error, pe_spectrum_value
from .propagator import IntegratorError, propagate_pulse

DEFAULT_DT = 0.005
DEFAULT_STRIDE = 10


@dataclass(frozen=True)
class PointResult:
    omega3_ghz: float
    value: float  # clamped min-over-time PE functional
    raw: float
    t_min: float
    eps_avg: tuple[float, float]  # final-time error to the closest PE, per subspace
    flag: str = ""

    @property
    def ok(self) -> bool:
        return self.flag == ""


def failed_point(omega3_ghz, flag) -> PointResult:
    return PointResult(float(omega3_ghz), WORST_CASE, WORST_CASE, 0.0,
                       (WORST_CASE, WORST_CASE), flag)


def evaluate_point(params: DeviceParams, pulse: FluxPulse, omega3_ghz: float | None = None,
                   dt: float = DEFAULT_DT, stride: int = DEFAULT_STRIDE) -> PointResult:
    """Rebuild the model at ``omega3_ghz``, propagate ``pulse`` and evaluate
    the min-over-time PE functional.  Failures score the worst case with a
    flag instead of raising."""
    if omega3_ghz is not None:
        params = params.with_spectator(omega3_ghz)
    w3 = params.omega3_ghz
    try:
        model = build_model(params, idle_modulation(pulse))
    except AssignmentError:
        return failed_point(w3, "assignment")
    try:
        traj = propagate_pulse(model, pulse, dt=dt, checkpoint_stride=stride)
    except IntegratorError:
        return failed_point(w3, "integrator")
    sp = pe_spectrum_value(traj)
    if not sp.valid:
        return failed_point(w3, "leakage")
    u0, u1 = traj.final_blocks
    return PointResult(w3, sp.value, sp.raw, sp.t_min,
                       (closest_pe_error(u0), closest_pe_error(u1)))


def _call(args):
    func, item = args
    return func(item)


def parallel_map(func, items, workers: int = 1):
    """Map ``func`` over ``items`` returning results in input order.

    ``workers <= 1`` runs in-process; otherwise a process pool of at most
    ``workers`` processes is used.  ``func`` must be picklable.
    """
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [func(x) for x in items]
    with ProcessPoolExecutor(max_workers=min(workers, len(items))) as pool:
        return list(pool.map(_call, [(func, x) for x in items]))


def finite_or_worst(x) -> float:
    x = float(x)
    return x if np.isfinite(x) else WORST_CASE

"""Gradient-based pulse optimization of the final-time PE functional.

Stage 1 is Krotov's method with the sequential (immediate-feedback) update

    du(t) = S(t) / lambda_a * Im sum_j <chi_j(t)| dH/du |psi_j(t)>,

dH/du = omega_c_max b^dag b, co-states propagated under the previous
control and states under the control being updated.  Stage 2 continues with
L-BFGS-B driven by the adjoint (GRAPE) gradient of the piecewise-constant
propagator.

Sign conventions: J_T depends on the final states through the projected
blocks U_ab = exp(i eps_a T) <a|psi_b(T)>.  The co-state boundary condition
is chi_b(T) = -dJ_T/d<psi_b|, so that a change d psi of the final states
changes J_T by -2 Re sum_b <chi_b|d psi_b>.  The derivative with respect to
the control of step k is therefore

    dJ_T/du_k = -2 Re sum_b <chi_b(t_{k+1})| dU_k/du |psi_b(t_k)>
              ~ -2 dt Im sum_b <chi_b|dH/du|psi_b>      (first order in dt).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from .device import DeviceModel
from .flux import FluxPulse, SampledControl, sample, update_shape
from .metrics import (
    closest_pe_error,
    pe_functional_3q,
    pe_gradient,
    pe_spectrum_value,
)
from .propagator import Propagator, gate_blocks, propagate
from .records import IterationRow, OptimizationRecord

MONOTONIC_SLACK = 1e-10


class OptimizationError(RuntimeError):
    pass


@dataclass(frozen=True)
class KrotovConfig:
    """Settings of the two-stage optimization.

    ``sigma_t`` is the flank of the update shape S(t); ``None`` takes the
    flank of the guess pulse.  ``memory_budget_mb`` bounds the stored
    trajectories; longer runs are recomputed from sparse checkpoints.
    """

    lambda_a: float = 1.0
    sigma_t: float | None = None
    stage1_max_iter: int = 100
    stage2_max_iter: int = 500
    tol: float = 1e-5
    dt: float = 0.005
    spectral_penalty: float = 0.0
    lambda_max: float = 1e12
    gradient: str = "exact"  # or "first-order"
    memory_budget_mb: float = 512.0
    costate_frame: str = "dressed-interaction"

    def __post_init__(self):
        if not self.lambda_a > 0:
            raise ValueError("lambda_a must be positive")
        if self.stage1_max_iter < 0 or self.stage2_max_iter < 0:
            raise ValueError("iteration limits must be non-negative")
        if not self.tol > 0 or not self.dt > 0:
            raise ValueError("tol and dt must be positive")
        if self.spectral_penalty < 0:
            raise ValueError("spectral penalty weight must be >= 0")
        if self.gradient not in ("exact", "first-order"):
            raise ValueError("gradient must be 'exact' or 'first-order'")
        if self.costate_frame != "dressed-interaction":
            raise ValueError("only the dressed interaction frame is implemented")


# -- functional and co-states -----------------------------------------------

def final_blocks(model: DeviceModel, states: np.ndarray, T: float) -> np.ndarray:
    """Projected (2, 4, 4) blocks of full-space final states (dim, 8)."""
    basis = model.basis
    m = np.exp(1j * basis.energies * T)[:, None] * (basis.states.conj().T @ states)
    return gate_blocks(m)


def costate_boundary(model: DeviceModel, blocks: np.ndarray, T: float) -> np.ndarray:
    """chi_b(T) = -sum_a dJ_T/dU*_ab exp(-i eps_a T) |a>, shape (dim, 8).

    ``blocks`` are the final projected blocks the gradient is taken at.
    """
    grad = pe_gradient(blocks[0], blocks[1])  # dJ/dU*, (2, 4, 4)
    g8 = np.zeros((8, 8), dtype=complex)
    g8[:4, :4] = grad[0]
    g8[4:, 4:] = grad[1]
    basis = model.basis
    return -basis.states @ (np.exp(-1j * basis.energies * T)[:, None] * g8)


def _summary(blocks):
    u0, u1 = blocks
    j_t = pe_functional_3q(u0, u1, clamped=False)
    clamped = pe_functional_3q(u0, u1, clamped=True)
    return j_t, clamped, (closest_pe_error(u0), closest_pe_error(u1))


# -- trajectory storage ------------------------------------------------------

def _max_states(prop: Propagator, budget_mb: float) -> int:
    per_state = sum(len(idx) * len(c) for idx, c in zip(prop.blocks, prop.cols)) * 16
    return max(4, int(budget_mb * 2**20 // per_state))


class _Segments:
    """States at every time edge, stored in full when they fit the budget,
    otherwise as checkpoints every ``m`` steps with segments recomputed on
    demand.  ``step(parts, k)`` advances in the storage direction."""

    def __init__(self, n, parts, step, max_states, reverse=False):
        self.n = n
        self.step = step
        self.reverse = reverse
        self.m = n if n + 1 <= max_states else max(1, math.ceil(2 * (n + 1) / max_states))
        self.anchors = {}
        order = range(n, 0, -1) if reverse else range(n)
        edge = n if reverse else 0
        self.anchors[edge] = parts
        for k in order:
            parts = step(parts, k)
            edge = k - 1 if reverse else k + 1
            if edge % self.m == 0 or edge == n:
                self.anchors[edge] = parts
        self.last = parts
        self._cache = None

    def _segment(self, k0):
        """States at edges k0 .. min(k0 + m, n)."""
        k1 = min(k0 + self.m, self.n)
        if self.reverse:
            parts = self.anchors[k1]
            out = [parts]
            for k in range(k1, k0, -1):
                parts = self.step(parts, k)
                out.append(parts)
            out.reverse()
        else:
            parts = self.anchors[k0]
            out = [parts]
            for k in range(k0, k1):
                parts = self.step(parts, k)
                out.append(parts)
        return out

    def __getitem__(self, edge):
        k0 = (edge // self.m) * self.m
        if k0 == self.n and self.n > 0:
            k0 -= self.m
        if self._cache is None or self._cache[0] != k0:
            self._cache = (k0, self._segment(k0))
        return self._cache[1][edge - k0]


def _forward_store(prop, budget_mb):
    """Forward states; ``step(parts, k)`` maps edge k to k + 1."""
    if prop.n_steps + 1 <= _max_states(prop, budget_mb):
        parts, saved = prop.run_forward(prop.initial(), store=True)
        return saved, parts
    seg = _Segments(prop.n_steps, prop.initial(), prop.forward_step,
                    _max_states(prop, budget_mb))
    return seg, seg.last


def _backward_store(prop, parts_T, budget_mb):
    """Backward co-states at every edge, indexable by edge."""
    if prop.n_steps + 1 <= _max_states(prop, budget_mb):
        _, saved = prop.run_backward(parts_T, store=True)
        return saved
    return _Segments(prop.n_steps, parts_T, lambda p, k: prop.backward_step(p, k - 1),
                     _max_states(prop, budget_mb), reverse=True)


# -- GRAPE gradient ----------------------------------------------------------

@dataclass
class GradientResult:
    grad: np.ndarray
    j_t: float
    blocks: np.ndarray
    final_states: np.ndarray


def grape_gradient(model: DeviceModel, control: SampledControl, mode: str = "exact",
                   memory_budget_mb: float = 512.0, full: bool = False):
    """dJ_T/du_k for every sample of a piecewise-constant control.

    ``mode="exact"`` differentiates the step propagators exactly;
    ``"first-order"`` uses dU_k/du ~ -i dt dH/du U_k.
    Returns the gradient array, or a ``GradientResult`` with ``full=True``.
    """
    if mode not in ("exact", "first-order"):
        raise ValueError("mode must be 'exact' or 'first-order'")
    prop = Propagator(model, control)
    store, parts_t = _forward_store(prop, memory_budget_mb)
    T = control.T
    final = prop.join(parts_t)
    blocks = final_blocks(model, final, T)
    j_t = pe_functional_3q(blocks[0], blocks[1])
    chi = prop.split(costate_boundary(model, blocks, T))
    n = prop.n_steps
    grad = np.empty(n)
    for k in range(n - 1, -1, -1):
        psi = store[k]
        total = 0.0
        new_chi = []
        for p in (0, 1):
            u_k = prop.matrix(p, k)
            if mode == "exact":
                d_u = prop.derivative(p, k)
                total += np.vdot(chi[p], d_u @ psi[p]).real
            else:
                after = u_k @ psi[p]
                total += (np.vdot(chi[p], prop.hc_blocks[p][:, None] * after)
                          * (-1j * prop.dts[k])).real
            new_chi.append(u_k.conj().T @ chi[p])
        grad[k] = -2.0 * total
        chi = new_chi
    if full:
        return GradientResult(grad, float(j_t), blocks, final)
    return grad


def evaluate_control(model: DeviceModel, control: SampledControl):
    """Final-time (j_t, clamped value, eps_avg pair, blocks)."""
    traj = propagate(model, control, checkpoint_stride=len(control))
    blocks = traj.final_blocks
    j_t, clamped, eps = _summary(blocks)
    return j_t, clamped, eps, blocks


# -- Krotov ------------------------------------------------------------------

@dataclass
class KrotovStep:
    control: SampledControl
    j_t: float
    running_cost: float
    pe_clamped: float
    eps_avg: tuple[float, float]
    lambda_a: float
    rejected: int
    blocks: np.ndarray


def _krotov_sweep(prop, chis, u_old, shape, lam, clip=True):
    """Sequential forward sweep; returns (u_new, running cost, final parts)."""
    psi = prop.initial()
    n = prop.n_steps
    u_new = np.array(u_old, dtype=float)
    running = 0.0
    hc = prop.hc_blocks
    for k in range(n):
        s = shape[k]
        if s > 0.0:
            chi = chis[k]
            z = sum(np.vdot(chi[p], hc[p][:, None] * psi[p]) for p in (0, 1))
            du = s / lam * z.imag
            value = u_old[k] + du
            if clip:
                value = min(1.0, max(0.0, value))
            du = value - u_old[k]
            running += lam / s * du * du * prop.dts[k]
            u_new[k] = value
            psi = [prop.matrix(p, k, u=value) @ psi[p] for p in (0, 1)]
        else:
            psi = prop.forward_step(psi, k)
    return u_new, running, psi


def krotov_iterate(model: DeviceModel, control: SampledControl, cfg: KrotovConfig,
                   shape: np.ndarray | None = None, lambda_a: float | None = None,
                   j_old: float | None = None) -> KrotovStep:
    """One monotonic Krotov iteration.

    Co-states are propagated backward under ``control``; the forward sweep
    updates the control step by step.  If the total functional
    J_T(new) + sum_k (lambda_a / S_k) du_k^2 dt would exceed J_T(old), the
    trial is discarded and lambda_a doubled (up to ``cfg.lambda_max``).
    """
    lam = cfg.lambda_a if lambda_a is None else float(lambda_a)
    if shape is None:
        shape = update_shape(control, cfg.sigma_t or 0.0)
    shape = np.asarray(shape, dtype=float)
    prop = Propagator(model, control)
    T = control.T
    parts_t = prop.run_forward(prop.initial())
    blocks_old = final_blocks(model, prop.join(parts_t), T)
    if j_old is None:
        j_old = pe_functional_3q(blocks_old[0], blocks_old[1])
    chi_t = prop.split(costate_boundary(model, blocks_old, T))
    chis = _backward_store(prop, chi_t, cfg.memory_budget_mb)
    rejected = 0
    while True:
        u_new, running, psi = _krotov_sweep(prop, chis, control.u, shape, lam)
        if not np.all(np.isfinite(u_new)):
            raise OptimizationError("non-finite Krotov update")
        blocks = final_blocks(model, prop.join(psi), T)
        j_t, clamped, eps = _summary(blocks)
        if j_t + running <= j_old + MONOTONIC_SLACK:
            break
        rejected += 1
        lam *= 2.0
        if lam > cfg.lambda_max:
            raise OptimizationError("lambda_a exceeded its maximum; no monotonic update")
    clips = int(np.count_nonzero((u_new <= 0.0) | (u_new >= 1.0))
                - np.count_nonzero((control.u <= 0.0) | (control.u >= 1.0)))
    origin = "parametric+correction" if control.origin == "parametric" else control.origin
    new = control.with_values(u_new, origin=origin,
                              clip_count=control.clip_count + max(clips, 0))
    return KrotovStep(new, float(j_t), float(running), float(clamped), eps, lam,
                      rejected, blocks)


# -- stage 2 -----------------------------------------------------------------

def _spectral_penalty(du, dts, weight):
    """weight * sum ((du_{k+1} - du_k) / dt)^2 dt: a first-difference
    (high-pass) quadratic weight on the correction."""
    if weight == 0.0 or len(du) < 2:
        return 0.0, np.zeros_like(du)
    dt = dts[:-1]
    diff = np.diff(du)
    value = weight * np.sum(diff ** 2 / dt)
    g = np.zeros_like(du)
    w = 2.0 * weight * diff / dt
    g[:-1] -= w
    g[1:] += w
    return float(value), g


def _stage2(model, control, shape, cfg, record, start_iter):
    """L-BFGS-B on u = u_base + S x with bounds keeping u in [0, 1]."""
    base = np.array(control.u)
    free = shape > 0
    s = shape[free]
    lo = (0.0 - base[free]) / s
    hi = (1.0 - base[free]) / s
    dts = control.step_sizes
    cache = {}

    def controls(x):
        u = base.copy()
        u[free] = np.clip(base[free] + s * x, 0.0, 1.0)
        return u

    def fun(x):
        key = x.tobytes()
        if key not in cache:
            u = controls(x)
            ctrl = control.with_values(u, origin=_corrected(control.origin))
            res = grape_gradient(model, ctrl, mode=cfg.gradient,
                                 memory_budget_mb=cfg.memory_budget_mb, full=True)
            pen, gpen = _spectral_penalty(u - base, dts, cfg.spectral_penalty)
            g = (res.grad + gpen)[free] * s
            cache.clear()
            cache[key] = (res.j_t + pen, g, pen, res.blocks, ctrl)
        value, g = cache[key][:2]
        return value, g

    state = {"iter": start_iter, "ctrl": control, "stop": None}

    def callback(intermediate_result):
        x = intermediate_result.x
        fun(x)
        _, _, pen, blocks, ctrl = cache[x.tobytes()]
        j_t, clamped, eps = _summary(blocks)
        state["iter"] += 1
        state["ctrl"] = ctrl
        record.append(IterationRow(state["iter"], "quasi-newton", j_t, pen, clamped, eps))
        if clamped < cfg.tol:
            state["stop"] = "tolerance"
            raise StopIteration

    x0 = np.zeros(int(free.sum()))
    res = minimize(fun, x0, jac=True, method="L-BFGS-B", bounds=list(zip(lo, hi)),
                   callback=callback,
                   options={"maxiter": cfg.stage2_max_iter, "ftol": 1e-15, "gtol": 1e-12,
                            "maxcor": 20})
    if state["stop"] is None:
        state["stop"] = "iteration cap" if res.nit >= cfg.stage2_max_iter else "stagnation"
    return state["ctrl"], state["stop"]


def _corrected(origin):
    return "parametric+correction" if origin == "parametric" else origin


# -- driver --------------------------------------------------------------------

def two_stage_optimize(model: DeviceModel, guess, cfg: KrotovConfig = KrotovConfig(),
                       log=None) -> OptimizationRecord:
    """Krotov until the clamped final-time value drops below ``cfg.tol`` or
    the stage-1 cap is reached, then L-BFGS-B on the GRAPE gradient.

    ``guess`` is a FluxPulse (sampled at ``cfg.dt``) or a SampledControl.
    The optimization target is the raw final-time functional; the stopping
    rule uses its clamped counterpart.  Iteration 0 is the guess.
    """
    if isinstance(guess, FluxPulse):
        control = sample(guess, cfg.dt)
        sigma = guess.sigma_t if cfg.sigma_t is None else cfg.sigma_t
    else:
        control = guess
        sigma = cfg.sigma_t or 0.0
    if np.any(control.u < 0) or np.any(control.u > 1):
        raise OptimizationError("guess samples outside [0, 1]")
    shape = update_shape(control, sigma)
    record = OptimizationRecord(metadata={
        "config": cfg.__dict__.copy(),
        "functional": "final-time raw J_T (stopping on the clamped value)",
        "update_shape_sigma_t_ns": sigma,
        "n_samples": len(control),
    })
    j_t, clamped, eps, _ = evaluate_control(model, control)
    record.append(IterationRow(0, "guess", j_t, 0.0, clamped, eps, cfg.lambda_a))
    record.metadata["pe_before"] = pe_spectrum_value(propagate(model, control)).value
    termination = None
    if clamped < cfg.tol:
        termination = "tolerance"
    lam = cfg.lambda_a
    it = 0
    rejected = 0
    while termination is None and it < cfg.stage1_max_iter:
        try:
            step = krotov_iterate(model, control, cfg, shape=shape, lambda_a=lam, j_old=j_t)
        except OptimizationError as exc:
            record.metadata["stage1_error"] = str(exc)
            break
        it += 1
        rejected += step.rejected
        control, lam, j_t = step.control, step.lambda_a, step.j_t
        record.append(IterationRow(it, "krotov", step.j_t, step.running_cost,
                                   step.pe_clamped, step.eps_avg, lam))
        if log:
            log(f"krotov {it}: J_T={step.j_t:.3e} clamped={step.pe_clamped:.3e} lambda={lam:g}")
        if step.pe_clamped < cfg.tol:
            termination = "tolerance"
    record.metadata["stage1_rejections"] = rejected
    record.metadata["lambda_a_final"] = lam
    if termination is None and cfg.stage2_max_iter > 0:
        control, termination = _stage2(model, control, shape, cfg, record, it)
        if log:
            log(f"quasi-newton: {termination} after {record.n_iterations - it} iterations")
    if termination is None:
        termination = "iteration cap"
    record.termination = termination
    record.final_control = control
    clip_fraction = float(np.mean((control.u <= 0.0) | (control.u >= 1.0)))
    record.metadata["clip_fraction"] = clip_fraction
    if clip_fraction > 0.05:
        record.metadata["warning"] = "more than 5% of samples clipped; lambda_a too small"
    traj = propagate(model, control)
    record.metadata["pe_after"] = pe_spectrum_value(traj).value
    u0, u1 = traj.final_blocks
    record.metadata["eps_avg_final"] = [closest_pe_error(u0), closest_pe_error(u1)]
    record.metadata["eps_avg_final_mean"] = float(np.mean(record.metadata["eps_avg_final"]))
    return record

"""Unitary propagation of the eight logical states under H(u(t)).

The Hamiltonian is H(u) = H_static + u * H_c with H_c diagonal, and it is
block diagonal in total-excitation parity.  For a fixed step dt the step
propagator exp(-i H(u) dt) is an entire function of u; on each parity block
we interpolate it in u with a Chebyshev series whose nodes are exact
eigendecomposition exponentials.  The series is truncated only once the
interpolation error is below ``tol`` (default 1e-14), so each step is an
exact exponential to machine precision at a fraction of the cost of an
eigendecomposition per step.

Projected gates use the interaction frame of the idle dressed Hamiltonian:
    U^(i)_ab(t) = exp(i eps_a t) <a, i | psi_{b, i}(t)>.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .device import DeviceModel
from .flux import SampledControl, sample_magnus4

FRAME_CONVENTION = "interaction frame of idle dressed energies, U_ab = exp(i eps_a t) <a|psi_b(t)>"
NORM_TOL = 1e-8


class IntegratorError(RuntimeError):
    pass


def step(H: np.ndarray, dt: float, states: np.ndarray) -> np.ndarray:
    """Apply exp(-i H dt) to the columns of ``states`` (reference integrator)."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    try:
        w, v = np.linalg.eigh(H)
    except np.linalg.LinAlgError as exc:
        raise IntegratorError(f"eigendecomposition failed: {exc}") from exc
    return v @ (np.exp(-1j * w * dt)[:, None] * (v.conj().T @ states))


def exact_propagator(H: np.ndarray, dt: float) -> np.ndarray:
    w, v = np.linalg.eigh(H)
    return (v * np.exp(-1j * w * dt)) @ v.conj().T


def exact_propagator_derivative(H, dH_diag, dt):
    """exp(-i H dt) and its derivative along H -> H + s diag(dH_diag)."""
    w, v = np.linalg.eigh(H)
    ph = np.exp(-1j * w * dt)
    diff = w[:, None] - w[None, :]
    same = np.abs(diff) < 1e-12
    with np.errstate(divide="ignore", invalid="ignore"):
        kernel = np.where(same, -1j * dt * ph[:, None], (ph[:, None] - ph[None, :]) / np.where(same, 1.0, diff))
    m = (v.conj().T * dH_diag) @ v
    return (v * ph) @ v.conj().T, v @ (kernel * m) @ v.conj().T


def chebyshev_values(x, n):
    """T_0..T_{n-1} at points x, shape (len(x), n)."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    out = np.empty((len(x), n))
    out[:, 0] = 1.0
    if n > 1:
        out[:, 1] = x
    for k in range(2, n):
        out[:, k] = 2.0 * x * out[:, k - 1] - out[:, k - 2]
    return out


def chebyshev_derivatives(x, n):
    """d/dx T_k(x) = k U_{k-1}(x), shape (len(x), n)."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    second = np.empty((len(x), max(n - 1, 1)))
    second[:, 0] = 1.0
    if n > 2:
        second[:, 1] = 2.0 * x
    for k in range(2, n - 1):
        second[:, k] = 2.0 * x * second[:, k - 1] - second[:, k - 2]
    out = np.zeros((len(x), n))
    out[:, 1:] = np.arange(1, n) * second[:, : n - 1]
    return out


class ChebyshevStepper:
    """Interpolated step propagator exp(-i (h0 + u diag(hc)) dt) for u in a range."""

    def __init__(self, h0, hc, dt, u_range=(0.0, 1.0), tol=1e-14, max_nodes=96):
        self.h0 = np.asarray(h0, dtype=float)
        self.hc = np.asarray(hc, dtype=float)
        self.dt = float(dt)
        self.lo, self.hi = map(float, u_range)
        self.half = 0.5 * (self.hi - self.lo)
        self.mid = 0.5 * (self.hi + self.lo)
        n = 8
        while True:
            coeffs = self._fit(n)
            err = self._check(coeffs)
            if err < tol or n >= max_nodes:
                break
            n += 4
        self.coeffs = coeffs
        self.n = n
        self.error = err

    def _exact(self, u):
        return exact_propagator(self.h0 + np.diag(u * self.hc), self.dt)

    def _fit(self, n):
        j = np.arange(n)
        x = np.cos(np.pi * (j + 0.5) / n)
        mats = np.array([self._exact(self.mid + self.half * xi) for xi in x])
        t = chebyshev_values(x, n)  # (node, order)
        coeffs = (2.0 / n) * np.tensordot(t.T, mats, axes=1)
        coeffs[0] *= 0.5
        return coeffs

    def _check(self, coeffs):
        n = len(coeffs)
        xs = np.cos(np.pi * np.arange(0, n + 1, 3) / n)
        err = 0.0
        for x in xs:
            approx = np.tensordot(chebyshev_values([x], n)[0], coeffs, axes=1)
            err = max(err, np.abs(approx - self._exact(self.mid + self.half * x)).max())
        return err

    def to_x(self, u):
        u = np.asarray(u, dtype=float)
        if np.any(u < self.lo - 1e-12) or np.any(u > self.hi + 1e-12):
            raise IntegratorError(f"control outside interpolation range [{self.lo}, {self.hi}]")
        return (u - self.mid) / self.half

    def weights(self, u):
        return chebyshev_values(self.to_x(u), self.n)

    def derivative_weights(self, u):
        return chebyshev_derivatives(self.to_x(u), self.n) / self.half

    def matrix(self, weights_row):
        return np.tensordot(weights_row, self.coeffs, axes=1)


# effective controls of the fourth-order scheme overshoot [0, 1] slightly
STEPPER_RANGE = (-0.125, 1.125)


def steppers_for(model: DeviceModel, dt: float):
    """Per-block Chebyshev steppers, cached on the model."""
    key = ("chebyshev", float(dt))
    if key not in model.cache:
        model.cache[key] = tuple(
            ChebyshevStepper(model.h_static[np.ix_(idx, idx)], model.coupler_diag[idx],
                             dt, u_range=STEPPER_RANGE)
            for idx in model.blocks
        )
    return model.cache[key]


class Propagator:
    """Block-wise stepping machinery for one model, control and step size.

    States are handled as a pair of arrays (one per parity block) of shape
    (block_dim, 4) holding the logical states of that parity.
    """

    def __init__(self, model: DeviceModel, control: SampledControl, method="chebyshev"):
        self.model = model
        self.control = control
        self.method = method
        self.n_steps = len(control)
        self.dts = control.step_sizes
        self.blocks = model.blocks
        self.h_blocks = [model.h_static[np.ix_(i, i)] for i in self.blocks]
        self.hc_blocks = [model.coupler_diag[i] for i in self.blocks]
        parity = np.array([sum(int(c) for c in lab) % 2 for lab in model.basis.labels])
        self.cols = [np.flatnonzero(parity == p) for p in (0, 1)]
        if method == "chebyshev":
            self.steppers = steppers_for(model, control.dt)
        elif method == "eigh":
            self.steppers = None
        else:
            raise ValueError(f"unknown propagation method {method!r}")
        self.set_control(control.u)

    def set_control(self, u):
        self.u = np.asarray(u, dtype=float)
        self._dweights = None
        if self.steppers is not None:
            self.weights = [s.weights(self.u) for s in self.steppers]

    def regular(self, k):
        return self.dts[k] == self.control.dt

    def matrix(self, p, k, u=None):
        """Step propagator of block ``p`` for step ``k`` (optionally at a
        different control value ``u``)."""
        if u is None:
            u = self.u[k]
        if self.steppers is not None and self.regular(k):
            s = self.steppers[p]
            w = self.weights[p][k] if u == self.u[k] else s.weights([u])[0]
            return s.matrix(w)
        h = self.h_blocks[p] + np.diag(u * self.hc_blocks[p])
        return exact_propagator(h, self.dts[k])

    def derivative(self, p, k):
        """d/du of the step-k propagator of block ``p``."""
        if self.steppers is not None and self.regular(k):
            if self._dweights is None:
                self._dweights = [s.derivative_weights(self.u) for s in self.steppers]
            return self.steppers[p].matrix(self._dweights[p][k])
        h = self.h_blocks[p] + np.diag(self.u[k] * self.hc_blocks[p])
        return exact_propagator_derivative(h, self.hc_blocks[p], self.dts[k])[1]

    # -- state layout ------------------------------------------------------
    def split(self, states):
        """(dim, 8) full-space columns -> per-block (block_dim, 4) arrays."""
        return [np.array(states[np.ix_(idx, cols)], dtype=complex)
                for idx, cols in zip(self.blocks, self.cols)]

    def join(self, parts):
        out = np.zeros((self.model.dim, 8), dtype=complex)
        for idx, cols, part in zip(self.blocks, self.cols, parts):
            out[np.ix_(idx, cols)] = part
        return out

    def split_full(self, states):
        """(dim, n) arbitrary columns -> per-block (block_dim, n) arrays."""
        return [np.array(states[idx, :], dtype=complex) for idx in self.blocks]

    def join_full(self, parts):
        out = np.zeros((self.model.dim, parts[0].shape[1]), dtype=complex)
        for idx, part in zip(self.blocks, parts):
            out[idx, :] = part
        return out

    def initial(self):
        return self.split(self.model.basis.states)

    # -- propagation -------------------------------------------------------
    def forward_step(self, parts, k):
        return [self.matrix(p, k) @ parts[p] for p in (0, 1)]

    def backward_step(self, parts, k):
        return [self.matrix(p, k).conj().T @ parts[p] for p in (0, 1)]

    def run_forward(self, parts, k0=0, k1=None, store=False):
        k1 = self.n_steps if k1 is None else k1
        saved = [parts] if store else None
        for k in range(k0, k1):
            parts = self.forward_step(parts, k)
            if store:
                saved.append(parts)
        return (parts, saved) if store else parts

    def run_backward(self, parts, k1=None, k0=0, store=False):
        """Propagate from edge ``k1`` back to edge ``k0``; stored list is
        ordered by increasing time (index 0 <-> edge k0)."""
        k1 = self.n_steps if k1 is None else k1
        saved = [parts] if store else None
        for k in range(k1 - 1, k0 - 1, -1):
            parts = self.backward_step(parts, k)
            if store:
                saved.append(parts)
        if store:
            saved.reverse()
            return parts, saved
        return parts

    # -- projection --------------------------------------------------------
    def projected(self, parts, t):
        """8x8 overlap matrix exp(i eps_a t) <a|psi_b> in the logical basis."""
        basis = self.model.basis
        m = np.zeros((8, 8), dtype=complex)
        for idx, cols, part in zip(self.blocks, self.cols, parts):
            d = basis.states[np.ix_(idx, cols)]
            m[np.ix_(cols, cols)] = d.conj().T @ part
        return np.exp(1j * basis.energies * t)[:, None] * m


def gate_blocks(m8):
    """Split the 8x8 projected matrix into spectator-|0> and |1> 4x4 blocks."""
    return np.array([m8[0:4, 0:4], m8[4:8, 4:8]])


@dataclass
class GateTrajectory:
    times: np.ndarray
    blocks: np.ndarray  # (n_checkpoints, 2, 4, 4)
    norms: np.ndarray  # (n_checkpoints, 2): Tr[U^dag U]/4 per block
    final_states: np.ndarray  # (dim, 8)
    leakage_ok: bool = True
    metadata: dict = field(default_factory=dict)

    @property
    def final_blocks(self):
        return self.blocks[-1]

    def to_json(self, path=None):
        data = {
            "times_ns": self.times.tolist(),
            "blocks": [
                [[[[z.real, z.imag] for z in row] for row in blk] for blk in pair]
                for pair in self.blocks
            ],
            "norms": self.norms.tolist(),
            "metadata": {"frame": FRAME_CONVENTION, **self.metadata},
        }
        text = json.dumps(data)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text


def _norms(blocks):
    return np.array([np.real(np.trace(b.conj().T @ b)) / 4.0 for b in blocks])


def propagate(
    model: DeviceModel,
    control: SampledControl,
    checkpoint_stride: int = 10,
    method: str = "chebyshev",
) -> GateTrajectory:
    """Forward propagation of the 8 dressed logical states.

    Projected blocks are recorded at t = 0, every ``checkpoint_stride``
    physical steps and at the final time.
    """
    if checkpoint_stride < 1:
        raise ValueError("checkpoint stride must be >= 1")
    prop = Propagator(model, control, method=method)
    parts = prop.initial()
    edges = control.edges
    stride = checkpoint_stride * control.substeps
    times, blocks = [], []

    def record(k):
        times.append(edges[k])
        blocks.append(gate_blocks(prop.projected(parts, edges[k])))

    record(0)
    for k in range(prop.n_steps):
        parts = prop.forward_step(parts, k)
        if (k + 1) % stride == 0 or k + 1 == prop.n_steps:
            record(k + 1)
    final = prop.join(parts)
    norms = np.linalg.norm(final, axis=0)
    if not np.all(np.isfinite(norms)) or np.max(np.abs(norms - 1.0)) > NORM_TOL:
        raise IntegratorError(f"norm drift {np.max(np.abs(norms - 1.0)):.2e}")
    blocks = np.array(blocks)
    return GateTrajectory(
        times=np.array(times),
        blocks=blocks,
        norms=np.array([_norms(b) for b in blocks]),
        final_states=final,
        metadata={
            "dt_ns": control.dt * control.substeps,
            "n_steps": prop.n_steps // control.substeps,
            "scheme": "magnus4" if control.substeps == 2 else "piecewise-constant",
            "method": method,
        },
    )


def propagate_pulse(model: DeviceModel, pulse, dt: float = 0.01,
                    checkpoint_stride: int = 5, method: str = "chebyshev"):
    """Propagate a parametric pulse with the fourth-order scheme."""
    return propagate(model, sample_magnus4(pulse, dt), checkpoint_stride, method)


@dataclass
class CostateTrajectory:
    times: np.ndarray
    states: np.ndarray  # (n_stored, dim, 8)


def propagate_backward(
    model: DeviceModel,
    control: SampledControl,
    terminal_costates: np.ndarray,
    stride: int = 1,
    method: str = "chebyshev",
) -> CostateTrajectory:
    """Backward propagation chi(t_k) = U(T, t_k)^dag chi(T); stores every
    ``stride``-th time edge (plus t = 0 and T)."""
    prop = Propagator(model, control, method=method)
    parts = prop.split_full(np.asarray(terminal_costates, dtype=complex))
    edges = control.edges
    n = prop.n_steps
    times, saved = [edges[n]], [prop.join_full(parts)]
    for k in range(n - 1, -1, -1):
        parts = prop.backward_step(parts, k)
        if k % stride == 0:
            times.append(edges[k])
            saved.append(prop.join_full(parts))
    return CostateTrajectory(times=np.array(times[::-1]), states=np.array(saved[::-1]))

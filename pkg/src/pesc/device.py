"""Three transmons coupled to a flux-tunable coupler (Duffing model).

Units: frequencies are stored as angular frequencies in rad/ns (GHz x 2pi),
times in ns, hbar = 1.  Constructors taking ``*_ghz`` / ``*_mhz`` arguments
convert from ordinary frequencies.

Mode order on the tensor-product space is (qubit 1, qubit 2, qubit 3,
coupler), qubit 1 being the most significant factor.
"""
from __future__ import annotations

import dataclasses
import itertools
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

TWO_PI = 2.0 * np.pi
DEFAULT_DIM_CAP = 4096

# label order of the 8 logical states: spectator (q3) slowest, so that
# states[4*i:4*i+4] is the two-qubit subspace with the spectator in |i>
LOGICAL_LABELS = tuple(
    f"{q1}{q2}{q3}" for q3 in (0, 1) for q1 in (0, 1) for q2 in (0, 1)
)


class DeviceError(ValueError):
    pass


class AssignmentError(DeviceError):
    """Dressed-state labelling failed (hybridised or colliding states)."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


def ghz(f):
    return TWO_PI * np.asarray(f, dtype=float)


def mhz(f):
    return TWO_PI * 1e-3 * np.asarray(f, dtype=float)


@dataclass(frozen=True)
class DeviceParams:
    """Device parameters in angular units (rad/ns).

    ``levels`` holds the truncation for (q1, q2, q3, coupler).
    """

    omega_q: tuple[float, float, float]
    alpha_q: tuple[float, float, float]
    g: tuple[float, float, float]
    omega_c_max: float
    alpha_c: float
    levels: tuple[int, int, int, int] = (3, 3, 3, 4)
    name: str = "custom"

    def __post_init__(self):
        object.__setattr__(self, "omega_q", tuple(float(x) for x in self.omega_q))
        object.__setattr__(self, "alpha_q", tuple(float(x) for x in self.alpha_q))
        object.__setattr__(self, "g", tuple(float(x) for x in self.g))
        object.__setattr__(self, "levels", tuple(int(x) for x in self.levels))
        object.__setattr__(self, "omega_c_max", float(self.omega_c_max))
        object.__setattr__(self, "alpha_c", float(self.alpha_c))
        self.validate()

    def validate(self):
        if len(self.omega_q) != 3 or len(self.alpha_q) != 3 or len(self.g) != 3:
            raise DeviceError("omega_q, alpha_q and g need exactly 3 entries")
        if len(self.levels) != 4:
            raise DeviceError("levels needs 4 entries (q1, q2, q3, coupler)")
        values = [*self.omega_q, *self.alpha_q, self.omega_c_max, self.alpha_c]
        if not all(np.isfinite(v) and v > 0 for v in values):
            raise DeviceError("frequencies and anharmonicities must be positive")
        # g = 0 is the decoupled limit used by calibration and tests
        if not all(np.isfinite(v) and v >= 0 for v in self.g):
            raise DeviceError("couplings must be non-negative")
        if min(self.levels) < 2:
            raise DeviceError("every mode needs at least 2 levels")

    @classmethod
    def from_ghz(
        cls,
        omega_q_ghz: Sequence[float],
        alpha_q_mhz: Sequence[float],
        g_mhz: Sequence[float],
        omega_c_max_ghz: float,
        alpha_c_mhz: float,
        levels: Sequence[int] = (3, 3, 3, 4),
        name: str = "custom",
    ) -> "DeviceParams":
        return cls(
            omega_q=tuple(ghz(omega_q_ghz)),
            alpha_q=tuple(mhz(alpha_q_mhz)),
            g=tuple(mhz(g_mhz)),
            omega_c_max=float(ghz(omega_c_max_ghz)),
            alpha_c=float(mhz(alpha_c_mhz)),
            levels=tuple(levels),
            name=name,
        )

    @property
    def dim(self) -> int:
        return int(np.prod(self.levels))

    @property
    def omega3_ghz(self) -> float:
        return self.omega_q[2] / TWO_PI

    def with_spectator(self, omega3_ghz: float) -> "DeviceParams":
        omega = list(self.omega_q)
        omega[2] = float(ghz(omega3_ghz))
        return dataclasses.replace(self, omega_q=tuple(omega))

    def with_couplings(self, g_mhz: Sequence[float]) -> "DeviceParams":
        return dataclasses.replace(self, g=tuple(mhz(g_mhz)))

    def with_levels(self, levels: Sequence[int]) -> "DeviceParams":
        return dataclasses.replace(self, levels=tuple(levels))

    def decoupled_spectator(self) -> "DeviceParams":
        g = list(self.g)
        g[2] = 0.0
        return dataclasses.replace(self, g=tuple(g))

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "omega_q_ghz": [w / TWO_PI for w in self.omega_q],
            "alpha_q_mhz": [a / TWO_PI * 1e3 for a in self.alpha_q],
            "g_mhz": [x / TWO_PI * 1e3 for x in self.g],
            "omega_c_max_ghz": self.omega_c_max / TWO_PI,
            "alpha_c_mhz": self.alpha_c / TWO_PI * 1e3,
            "levels": list(self.levels),
        }


# Default spectator frequency of the presets; sweeps replace it.
PRESET_OMEGA3_GHZ = 4.0

PRESETS = {
    "sqrt_iswap": dict(
        omega_q_ghz=(5.8899, 5.0311, PRESET_OMEGA3_GHZ),
        alpha_q_mhz=(324.0, 235.0, 100.0),
        g_mhz=(100.0, 71.4, 85.0),
        omega_c_max_ghz=7.445,
        alpha_c_mhz=230.0,
        levels=(3, 3, 3, 4),
    ),
    # qubit 2 hosts the |11> <-> |02> transition, hence one guard level more
    "cz": dict(
        omega_q_ghz=(5.089, 6.189, PRESET_OMEGA3_GHZ),
        alpha_q_mhz=(310.0, 286.0, 100.0),
        g_mhz=(116.0, 142.0, 85.0),
        omega_c_max_ghz=8.1,
        alpha_c_mhz=235.0,
        levels=(3, 4, 3, 4),
    ),
}


def preset(name: str, omega3_ghz: float | None = None) -> DeviceParams:
    try:
        kwargs = PRESETS[name]
    except KeyError:
        raise DeviceError(
            f"unknown preset {name!r}; choose from {sorted(PRESETS)}"
        ) from None
    params = DeviceParams.from_ghz(name=name, **kwargs)
    if omega3_ghz is not None:
        params = params.with_spectator(omega3_ghz)
    return params


def params_from_mapping(section: dict, name: str = "custom") -> DeviceParams:
    """Build parameters from a ``[device]`` config section."""
    required = (
        "omega_q_ghz", "alpha_q_mhz", "g_mhz", "omega_c_max_ghz", "alpha_c_mhz"
    )
    missing = [k for k in required if k not in section]
    if missing:
        raise DeviceError(f"device section misses keys: {', '.join(missing)}")
    return DeviceParams.from_ghz(
        omega_q_ghz=section["omega_q_ghz"],
        alpha_q_mhz=section["alpha_q_mhz"],
        g_mhz=section["g_mhz"],
        omega_c_max_ghz=section["omega_c_max_ghz"],
        alpha_c_mhz=section["alpha_c_mhz"],
        levels=section.get("levels", (3, 3, 3, 4)),
        name=section.get("name", name),
    )


@dataclass(frozen=True)
class ModeOperators:
    """Ladder operators of all four modes embedded in the full space."""

    levels: tuple[int, ...]
    lowering: tuple[np.ndarray, ...]
    dim: int

    def raising(self, j: int) -> np.ndarray:
        return self.lowering[j].T

    def number(self, j: int) -> np.ndarray:
        return self.raising(j) @ self.lowering[j]

    def occupations(self) -> np.ndarray:
        """Bare occupation numbers, shape (dim, 4)."""
        return np.array(list(itertools.product(*(range(n) for n in self.levels))))

    def bare_index(self, occupation: Sequence[int]) -> int:
        return int(np.ravel_multi_index(tuple(occupation), self.levels))


def destroy(n: int) -> np.ndarray:
    return np.diag(np.sqrt(np.arange(1, n, dtype=float)), 1)


def build_operators(
    params: DeviceParams, dim_cap: int = DEFAULT_DIM_CAP
) -> ModeOperators:
    levels = params.levels
    dim = int(np.prod(levels))
    if dim > dim_cap:
        raise DeviceError(f"truncation too large: dim {dim} > cap {dim_cap}")
    lowering = []
    for j, n in enumerate(levels):
        factors = [np.eye(m) for m in levels]
        factors[j] = destroy(n)
        op = factors[0]
        for f in factors[1:]:
            op = np.kron(op, f)
        lowering.append(op)
    return ModeOperators(levels=tuple(levels), lowering=tuple(lowering), dim=dim)


def _duffing_diag(n_levels: int, omega: float, alpha: float) -> np.ndarray:
    n = np.arange(n_levels, dtype=float)
    return omega * n - 0.5 * alpha * n * (n - 1.0)


def hamiltonian_terms(params: DeviceParams, ops: ModeOperators):
    """Split H(u) = H_static + u * H_coupler.

    Returns ``(h_static, coupler_diag)`` where ``coupler_diag`` is the
    diagonal of omega_c_max * b^dag b.  Both are real.
    """
    occ = ops.occupations()
    diag = np.zeros(ops.dim)
    for j in range(3):
        n = occ[:, j].astype(float)
        diag += params.omega_q[j] * n - 0.5 * params.alpha_q[j] * n * (n - 1.0)
    nc = occ[:, 3].astype(float)
    diag -= 0.5 * params.alpha_c * nc * (nc - 1.0)
    h = np.diag(diag)
    b = ops.lowering[3]
    xb = b + b.T
    for j in range(3):
        if params.g[j] != 0.0:
            a = ops.lowering[j]
            h = h + params.g[j] * (xb @ (a + a.T))
    h = 0.5 * (h + h.T)
    return h, params.omega_c_max * nc


def assemble_hamiltonian(
    params: DeviceParams, ops: ModeOperators, u: float
) -> np.ndarray:
    """Full Hamiltonian at coupler modulation ``u`` (real symmetric)."""
    u = float(u)
    if not np.isfinite(u):
        raise DeviceError(f"coupler modulation must be finite, got {u}")
    if u < 0.0 or u > 1.0:
        raise DeviceError(f"coupler modulation {u} outside [0, 1]")
    h_static, coupler = hamiltonian_terms(params, ops)
    h = h_static + np.diag(u * coupler)
    return 0.5 * (h + h.T)


@dataclass(frozen=True)
class ComputationalBasis:
    """Dressed logical states of H(u0), labelled by their bare content.

    ``states`` has shape (dim, 8) with columns ordered as ``LOGICAL_LABELS``;
    ``energies`` are the matching dressed eigenvalues (rad/ns).
    """

    labels: tuple[str, ...]
    states: np.ndarray
    energies: np.ndarray
    overlaps: np.ndarray
    u0: float
    convention: str = "dressed eigenstates of H(u0), max-overlap labels, bare component real positive"

    @property
    def min_overlap(self) -> float:
        return float(self.overlaps.min())

    def block(self, spectator: int) -> slice:
        return slice(4 * spectator, 4 * spectator + 4)


def bare_logical_indices(ops: ModeOperators) -> list[int]:
    out = []
    for label in LOGICAL_LABELS:
        q1, q2, q3 = (int(c) for c in label)
        out.append(ops.bare_index((q1, q2, q3, 0)))
    return out


def parity_blocks(ops: ModeOperators) -> tuple[np.ndarray, np.ndarray]:
    """Index sets of even/odd total excitation number.

    Every term of the Hamiltonian changes the total excitation number by
    0 or +-2, so H is block diagonal in this parity.
    """
    parity = ops.occupations().sum(axis=1) % 2
    return np.flatnonzero(parity == 0), np.flatnonzero(parity == 1)


def _eigh_by_parity(h: np.ndarray, ops: ModeOperators):
    """Eigenpairs of h diagonalised per parity sector (avoids mixing of
    accidental cross-sector degeneracies)."""
    dim = h.shape[0]
    energies = np.empty(dim)
    vectors = np.zeros((dim, dim))
    col = 0
    for idx in parity_blocks(ops):
        w, v = np.linalg.eigh(h[np.ix_(idx, idx)])
        n = len(idx)
        energies[col:col + n] = w
        vectors[idx, col:col + n] = v
        col += n
    return energies, vectors


def computational_basis(
    params: DeviceParams, ops: ModeOperators, u0: float
) -> ComputationalBasis:
    h = assemble_hamiltonian(params, ops, u0)
    energies, vectors = _eigh_by_parity(h, ops)
    bare = bare_logical_indices(ops)
    weights = vectors[bare, :] ** 2  # (8 labels, dim eigvecs)
    chosen = np.argmax(weights, axis=1)
    best = weights[np.arange(8), chosen]
    diagnostics = {
        "labels": LOGICAL_LABELS,
        "best_overlap": best.tolist(),
        "omega3_ghz": params.omega3_ghz,
    }
    if np.any(best <= 0.5):
        bad = [LOGICAL_LABELS[i] for i in np.flatnonzero(best <= 0.5)]
        raise AssignmentError(
            f"ambiguous dressed-state assignment for {bad} "
            f"(max overlap^2 {best.min():.3f} <= 0.5)",
            diagnostics,
        )
    if len(set(chosen.tolist())) != 8:
        raise AssignmentError("dressed-state assignment collision", diagnostics)
    states = vectors[:, chosen].copy()
    signs = np.sign(states[bare, np.arange(8)])
    states *= signs
    return ComputationalBasis(
        labels=LOGICAL_LABELS,
        states=states.astype(complex),
        energies=energies[chosen].copy(),
        overlaps=best,
        u0=float(u0),
    )


def static_resonances(
    params: DeviceParams, omega3_range_ghz: tuple[float, float]
) -> list[tuple[float, str]]:
    """Spectator frequencies where a bare spectator transition matches a
    target-qubit transition.

    Spectator transitions: w3 (0-1), w3 - a3 (1-2), 2 w3 - a3 (0-2).
    Target transitions: w_j, w_j - a_j, 2 w_j - a_j for j = 1, 2.
    Returns ``(omega3_ghz, label)`` sorted by frequency.
    """
    lo, hi = sorted(omega3_range_ghz)
    a3 = params.alpha_q[2] / TWO_PI
    targets = []
    for j in range(2):
        w = params.omega_q[j] / TWO_PI
        a = params.alpha_q[j] / TWO_PI
        targets += [
            (w, f"w{j + 1}"),
            (w - a, f"w{j + 1}-a{j + 1}"),
            (2 * w - a, f"2w{j + 1}-a{j + 1}"),
        ]
    out = []
    for f, name in targets:
        candidates = [
            (f, f"w3 = {name}"),
            (f + a3, f"w3-a3 = {name}"),
            (0.5 * (f + a3), f"2w3-a3 = {name}"),
        ]
        for w3, label in candidates:
            if lo <= w3 <= hi:
                out.append((float(w3), label))
    out.sort()
    return out


@dataclass(frozen=True)
class DeviceModel:
    """Everything the propagator needs for one parameter set."""

    params: DeviceParams
    ops: ModeOperators
    h_static: np.ndarray
    coupler_diag: np.ndarray
    basis: ComputationalBasis
    blocks: tuple[np.ndarray, np.ndarray] = field(repr=False)
    cache: dict = field(default_factory=dict, repr=False, compare=False)

    def hamiltonian(self, u: float) -> np.ndarray:
        return self.h_static + np.diag(u * self.coupler_diag)

    @property
    def dim(self) -> int:
        return self.ops.dim


def build_model(params: DeviceParams, u0: float,
                dim_cap: int = DEFAULT_DIM_CAP) -> DeviceModel:
    ops = build_operators(params, dim_cap=dim_cap)
    h_static, coupler = hamiltonian_terms(params, ops)
    basis = computational_basis(params, ops, u0)
    return DeviceModel(
        params=params,
        ops=ops,
        h_static=h_static,
        coupler_diag=coupler,
        basis=basis,
        blocks=parity_blocks(ops),
    )

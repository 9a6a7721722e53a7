"""Two-qubit local invariants, perfect-entangler functionals and gate errors.

Conventions (frozen; round-trip tested):

* Magic basis: U_B = Q^dag U Q with ``MAGIC`` below (columns are Bell
  states with phases chosen such that local gates map to SO(4)).
* Weyl chamber: coordinates in radians with the full chamber
  0 <= c3 <= c2 <= c1 < pi, c2 <= pi - c1; CNOT -> (pi/2, 0, 0),
  sqrt(iSWAP) -> (pi/4, pi/4, 0), iSWAP -> (pi/2, pi/2, 0),
  SWAP -> (pi/2, pi/2, pi/2).  The canonical gate is
  A(c) = exp(i/2 (c1 XX + c2 YY + c3 ZZ)).
* Perfect entanglers: c1 + c2 >= pi/2, c1 - c2 <= pi/2, c2 + c3 <= pi/2.
* Swap side: gates with c2 + c3 > pi/2 lie beyond the perfect-entangler
  polyhedron towards SWAP.  There the invariants are mirrored,
  (g1, g2, g3) -> -(g1, g2, g3), i.e. the invariants of SWAP * U, so that
  the distance term of the functional is positive (SWAP scores like the
  identity).
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm, polar
from scipy.optimize import minimize

PI = np.pi
SQRT2 = np.sqrt(2.0)

MAGIC = np.array(
    [[1, 0, 0, 1j],
     [0, 1j, 1, 0],
     [0, 1j, -1, 0],
     [1, 0, 0, -1j]], dtype=complex) / SQRT2

PAULI_X = np.array([[0, 1], [1, 0]], dtype=complex)
PAULI_Y = np.array([[0, -1j], [1j, 0]], dtype=complex)
PAULI_Z = np.array([[1, 0], [0, -1]], dtype=complex)
XX = np.kron(PAULI_X, PAULI_X)
YY = np.kron(PAULI_Y, PAULI_Y)
ZZ = np.kron(PAULI_Z, PAULI_Z)

IDENTITY = np.eye(4, dtype=complex)
CNOT = np.array([[1, 0, 0, 0], [0, 1, 0, 0], [0, 0, 0, 1], [0, 0, 1, 0]], dtype=complex)
CZ = np.diag([1, 1, 1, -1]).astype(complex)
SWAP = np.array([[1, 0, 0, 0], [0, 0, 1, 0], [0, 1, 0, 0], [0, 0, 0, 1]], dtype=complex)
ISWAP = np.array([[1, 0, 0, 0], [0, 0, 1j, 0], [0, 1j, 0, 0], [0, 0, 0, 1]], dtype=complex)
SQRT_ISWAP = np.array(
    [[1, 0, 0, 0],
     [0, 1 / SQRT2, 1j / SQRT2, 0],
     [0, 1j / SQRT2, 1 / SQRT2, 0],
     [0, 0, 0, 1]], dtype=complex)

# XX, YY, ZZ are diagonal in the magic basis; rows: eigenvalue per column
_MAGIC_DIAG = np.real(np.array([
    np.diag(MAGIC.conj().T @ op @ MAGIC) for op in (XX, YY, ZZ)
]))

DET_FLOOR = 1e-8
WORST_CASE = 1.0


class InvariantsUndefined(ValueError):
    """Block too far from unitary (|det U| below the floor)."""


def to_magic(U):
    return MAGIC.conj().T @ U @ MAGIC


def from_magic(U):
    return MAGIC @ U @ MAGIC.conj().T


def canonical_gate(c1, c2, c3):
    return expm(0.5j * (c1 * XX + c2 * YY + c3 * ZZ))


def invariants_from_weyl(c1, c2, c3):
    g1 = (np.cos(c1) ** 2 * np.cos(c2) ** 2 * np.cos(c3) ** 2
          - np.sin(c1) ** 2 * np.sin(c2) ** 2 * np.sin(c3) ** 2)
    g2 = 0.25 * np.sin(2 * c1) * np.sin(2 * c2) * np.sin(2 * c3)
    g3 = 4 * g1 - np.cos(2 * c1) * np.cos(2 * c2) * np.cos(2 * c3)
    return g1 + 0.0, g2 + 0.0, g3 + 0.0


@dataclass(frozen=True)
class WeylCoordinates:
    c1: float
    c2: float
    c3: float

    def as_array(self):
        return np.array([self.c1, self.c2, self.c3])

    @property
    def swap_side(self) -> bool:
        return self.c2 + self.c3 > PI / 2 + 1e-12

    @property
    def is_perfect_entangler(self) -> bool:
        return in_pe_polyhedron(self.as_array())


@dataclass(frozen=True)
class LocalInvariants:
    g1: float
    g2: float
    g3: float
    det_u: complex
    weyl_region: str  # "identity-side" | "swap-side"
    raw: tuple[float, float, float]


def _raw_invariants(U):
    ub = to_magic(U)
    m = ub.T @ ub
    det = np.linalg.det(ub)
    if abs(det) <= DET_FLOOR:
        raise InvariantsUndefined(f"invariants undefined: |det U| = {abs(det):.2e}")
    tr = np.trace(m)
    tr2 = np.trace(m @ m)
    g12 = tr ** 2 / (16.0 * det)
    g3 = (tr ** 2 - tr2) / (4.0 * det)
    return g12, g3, det


def unitary_part(U):
    """Closest unitary (polar factor)."""
    u, _ = polar(np.asarray(U, dtype=complex))
    return u


def weyl_coordinates(U) -> WeylCoordinates:
    """Weyl-chamber coordinates (radians) after Childs et al. (2003)."""
    U = np.asarray(U, dtype=complex)
    det = np.linalg.det(U)
    U = U / det ** 0.25
    u_tilde = YY @ U.T @ YY
    ev = np.linalg.eigvals(U @ u_tilde)
    two_s = np.angle(ev) / PI
    # branch cut at -pi/2 with slack, so that sum(s) rounds to n >= 0
    two_s = np.where(two_s <= -0.5 + 1e-9, two_s + 2.0, two_s)
    s = np.sort(two_s / 2.0)[::-1]
    n = int(round(s.sum()))
    s = s - np.r_[np.ones(n), np.zeros(4 - n)]
    s = np.roll(s, -n)
    m = np.array([[1, 1, 0], [1, 0, 1], [0, 1, 1]])
    c1, c2, c3 = m @ s[:3]
    if c3 < 0:
        c1 = 1.0 - c1
        c3 = -c3
    c1, c2, c3 = (PI * x + 0.0 for x in (c1, c2, c3))
    return WeylCoordinates(float(c1), float(c2), float(c3))


def local_invariants(U) -> LocalInvariants:
    U = np.asarray(U, dtype=complex)
    g12, g3, det = _raw_invariants(U)
    if abs(det) <= DET_FLOOR:
        raise InvariantsUndefined(f"invariants undefined: |det U| = {abs(det):.2e}")
    raw = (float(g12.real) + 0.0, float(g12.imag) + 0.0, float(g3.real) + 0.0)
    swap_side = weyl_coordinates(unitary_part(U)).swap_side
    sign = -1.0 if swap_side else 1.0
    return LocalInvariants(
        g1=sign * raw[0] + 0.0,
        g2=sign * raw[1] + 0.0,
        g3=sign * raw[2] + 0.0,
        det_u=complex(det),
        weyl_region="swap-side" if swap_side else "identity-side",
        raw=raw,
    )


def unitarity_defect(U):
    U = np.asarray(U, dtype=complex)
    return 1.0 - float(np.real(np.trace(U.conj().T @ U))) / 4.0


def pe_functional_2q(U, mirror: bool = True) -> float:
    """Raw two-qubit PE functional (1/5)(g3 sqrt(g1^2+g2^2) - g1) + (4/5) Delta_U.

    With ``mirror=False`` the unmirrored invariants are used (diagnostics).
    """
    inv = local_invariants(U)
    g1, g2, g3 = (inv.g1, inv.g2, inv.g3) if mirror else inv.raw
    return 0.2 * (g3 * np.hypot(g1, g2) - g1) + 0.8 * unitarity_defect(U)


def pe_functional_2q_clamped(U) -> float:
    return max(0.0, pe_functional_2q(U))


def similarity(U0, U1) -> float:
    tau = np.trace(np.asarray(U0).conj().T @ np.asarray(U1)) / 4.0
    return 1.0 - float(abs(tau) ** 2)


def pe_functional_3q(U0, U1, clamped: bool = False) -> float:
    """Sum of the subspace PE functionals plus half the similarity term."""
    f = pe_functional_2q_clamped if clamped else pe_functional_2q
    return f(U0) + f(U1) + 0.5 * similarity(U0, U1)


def checkpoint_value(U0, U1, clamped=True):
    """PE value of one checkpoint; singular blocks score the worst case."""
    try:
        return pe_functional_3q(U0, U1, clamped=clamped), True
    except InvariantsUndefined:
        return WORST_CASE, False


@dataclass(frozen=True)
class SpectrumPoint:
    value: float
    t_min: float
    raw: float
    valid: bool


def pe_spectrum_value(traj) -> SpectrumPoint:
    """Minimum over checkpoints of the clamped three-qubit PE functional."""
    if len(traj.times) == 0:
        raise ValueError("trajectory has no checkpoints")
    best = (np.inf, 0.0, np.inf)
    any_valid = False
    for t, (u0, u1) in zip(traj.times, traj.blocks):
        value, ok = checkpoint_value(u0, u1, clamped=True)
        if not ok:
            continue
        any_valid = True
        if value < best[0]:
            best = (value, float(t), pe_functional_3q(u0, u1, clamped=False))
    if not any_valid:
        return SpectrumPoint(WORST_CASE, 0.0, WORST_CASE, False)
    return SpectrumPoint(float(best[0]), best[1], float(best[2]), True)


def avg_gate_error(U, O) -> float:
    U = np.asarray(U, dtype=complex)
    O = np.asarray(O, dtype=complex)
    a = np.trace(U.conj().T @ O)
    b = np.trace(U.conj().T @ O @ O.conj().T @ U)
    return float(1.0 - (abs(a) ** 2 + b.real) / 20.0)


# -- perfect-entangler polyhedron -------------------------------------------

# rows: normal n, bound b with n . c <= b
_PE_CONSTRAINTS = np.array([
    [-1.0, -1.0, 0.0, -PI / 2],  # c1 + c2 >= pi/2
    [1.0, -1.0, 0.0, PI / 2],    # c1 - c2 <= pi/2
    [0.0, 1.0, 1.0, PI / 2],     # c2 + c3 <= pi/2
    [-1.0, 1.0, 0.0, 0.0],       # c2 <= c1
    [0.0, -1.0, 1.0, 0.0],       # c3 <= c2
    [0.0, 0.0, -1.0, 0.0],       # c3 >= 0
    [1.0, 1.0, 0.0, PI],         # c2 <= pi - c1
])


def in_pe_polyhedron(c, tol=1e-12):
    c = np.asarray(c, dtype=float)
    return bool(np.all(_PE_CONSTRAINTS[:, :3] @ c <= _PE_CONSTRAINTS[:, 3] + tol))


def project_to_pe(c):
    """Euclidean projection of Weyl coordinates onto the PE polyhedron.

    Exact active-set enumeration over the seven half-spaces.
    """
    c = np.asarray(c, dtype=float)
    if in_pe_polyhedron(c):
        return c.copy()
    a_all, b_all = _PE_CONSTRAINTS[:, :3], _PE_CONSTRAINTS[:, 3]
    best, best_d = None, np.inf
    for r in (1, 2, 3):
        for active in itertools.combinations(range(len(a_all)), r):
            a = a_all[list(active)]
            if np.linalg.matrix_rank(a) < r:
                continue
            b = b_all[list(active)]
            x = c - a.T @ np.linalg.solve(a @ a.T, a @ c - b)
            if not in_pe_polyhedron(x, tol=1e-10):
                continue
            d = np.linalg.norm(x - c)
            if d < best_d - 1e-14:
                best, best_d = x, d
    return best


def _real_orthogonal_eigh(m):
    """Diagonalise a complex symmetric unitary m = P diag(w) P^T with P in SO(4)."""
    for r in (0.5772156649, 1.6180339887, 2.7182818284, 0.3183098862, 4.6692016091):
        _, p = np.linalg.eigh(m.real + r * m.imag)
        d = p.T @ m @ p
        if np.abs(d - np.diag(np.diag(d))).max() < 1e-9:
            if np.linalg.det(p) < 0:
                p[:, 0] *= -1
            return p, np.diag(d)
    raise np.linalg.LinAlgError("simultaneous diagonalisation failed")


def kak_magic(U):
    """U = e^{i phase} Q K1 D K2 Q^dag with K1, K2 in SO(4), D diagonal unitary.

    Returns ``(k1, d, k2, phase)``.
    """
    U = np.asarray(U, dtype=complex)
    det = np.linalg.det(U)
    phase = np.angle(det) / 4.0
    ub = to_magic(U * np.exp(-1j * phase))
    p, w = _real_orthogonal_eigh(ub.T @ ub)
    d = np.sqrt(w)
    k1 = ub @ p @ np.diag(1.0 / d)
    if np.linalg.det(k1.real) < 0:
        d[0] = -d[0]
        k1[:, 0] = -k1[:, 0]
    return k1.real, d, p.T, phase


def _canonical_diag(c):
    c = np.asarray(c, dtype=float)
    return np.exp(0.5j * (c @ _MAGIC_DIAG))


_PERMS = list(itertools.permutations(range(4)))
_SIGNS = sorted(itertools.product((1, -1), repeat=4), key=lambda s: s.count(-1) % 2)


def closest_perfect_entangler(U) -> np.ndarray:
    """Closest perfectly entangling unitary: KAK-decompose U, project its
    Weyl coordinates onto the PE polyhedron, reassemble with U's local
    factors."""
    U = np.asarray(U, dtype=complex)
    c = weyl_coordinates(U).as_array()
    target = project_to_pe(c)
    if np.allclose(target, c, atol=1e-14, rtol=0):
        return U.copy()
    k1, d, k2, phase = kak_magic(U)
    dc = _canonical_diag(c)
    dt = _canonical_diag(target)
    candidates = []
    for perm in _PERMS:
        for signs in _SIGNS:
            ref = np.array(signs) * dc[list(perm)]
            z = np.vdot(ref, d)
            if abs(z) < 1e-12:
                continue
            res = np.abs(d - z / abs(z) * ref).max()
            if res < 1e-6:
                new = np.array(signs) * dt[list(perm)] * z / abs(z)
                O = np.exp(1j * phase) * from_magic(k1 @ np.diag(new) @ k2)
                candidates.append((avg_gate_error(U, O), O))
    if not candidates:
        raise np.linalg.LinAlgError("canonical decomposition failed")
    return min(candidates, key=lambda x: x[0])[1]


def closest_pe_error(U) -> float:
    """avg_gate_error of a (possibly non-unitary) block against the closest
    perfect entangler of its unitary part."""
    try:
        O = closest_perfect_entangler(unitary_part(U))
    except (np.linalg.LinAlgError, ValueError):
        return WORST_CASE
    return avg_gate_error(U, O)


# -- analytic gradient -------------------------------------------------------

def _pe2q_wirtinger(U):
    """dJ2q/dU* (Wirtinger) of the mirrored raw two-qubit functional."""
    U = np.asarray(U, dtype=complex)
    ub = to_magic(U)
    m = ub.T @ ub
    det = np.linalg.det(ub)
    if abs(det) <= DET_FLOOR:
        raise InvariantsUndefined(f"invariants undefined: |det U| = {abs(det):.2e}")
    t = np.trace(m)
    t2 = np.trace(m @ m)
    g12 = t ** 2 / (16.0 * det)
    g3c = (t ** 2 - t2) / (4.0 * det)
    sign = -1.0 if weyl_coordinates(unitary_part(U)).swap_side else 1.0
    g1, g2, g3 = sign * g12.real, sign * g12.imag, sign * g3c.real
    r = np.hypot(g1, g2)
    if r > 0:
        d_g1 = 0.2 * (g3 * g1 / r - 1.0)
        d_g2 = 0.2 * g3 * g2 / r
    else:
        d_g1, d_g2 = -0.2, 0.0
    d_g3 = 0.2 * r
    # holomorphic differentials dh = tr(D_h dU)
    d_t = 2.0 * MAGIC @ ub.T @ MAGIC.conj().T
    d_t2 = 4.0 * MAGIC @ m @ ub.T @ MAGIC.conj().T
    d_det = det * np.linalg.inv(U)
    d_g12 = (2.0 * t * d_t) / (16.0 * det) - t ** 2 / (16.0 * det ** 2) * d_det
    d_g3c = (2.0 * t * d_t - d_t2) / (4.0 * det) - (t ** 2 - t2) / (4.0 * det ** 2) * d_det
    # dJ/dU_ij = 1/2 (phi_x - i phi_y) dh/dU_ij, dh/dU_ij = D_ji
    dj_du = 0.5 * sign * ((d_g1 - 1j * d_g2) * d_g12.T + d_g3 * d_g3c.T)
    return np.conj(dj_du) - 0.2 * U


def pe_gradient(U0, U1):
    """Wirtinger gradient dJ/dU* of the raw three-qubit functional for both
    blocks, shape (2, 4, 4).

    The real-coordinate gradient is 2 * dJ/dU*: its real part is dJ/dRe U,
    its imaginary part dJ/dIm U.
    """
    U0 = np.asarray(U0, dtype=complex)
    U1 = np.asarray(U1, dtype=complex)
    tau = np.trace(U0.conj().T @ U1) / 4.0
    g0 = _pe2q_wirtinger(U0) - 0.5 * np.conj(tau) * U1 / 4.0
    g1 = _pe2q_wirtinger(U1) - 0.5 * tau * U0 / 4.0
    return np.array([g0, g1])


# -- gate error up to local z phases ----------------------------------------

def local_z(a, b):
    """Rz(a) (x) Rz(b) up to a global phase: diag(1, e^ib, e^ia, e^i(a+b))."""
    return np.diag(np.exp(1j * np.array([0.0, b, a, a + b])))


def z_aligned_error(U, target):
    """min over local z rotations before and after ``target`` of avg_gate_error.

    Single-qubit z phases are free on hardware (frame updates), so a
    calibrated two-qubit gate only has to match ``target`` up to them.
    Returns ``(error, (a1, b1, a2, b2))``.
    """
    U = np.asarray(U, dtype=complex)
    target = np.asarray(target, dtype=complex)

    def cost(x):
        return avg_gate_error(U, local_z(x[0], x[1]) @ target @ local_z(x[2], x[3]))

    best = None
    for start in itertools.product((0.0, PI / 2), repeat=2):
        x0 = np.array([start[0], start[1], 0.0, 0.0])
        # phases of U relative to the target on its diagonal as a warm start
        d = np.angle(np.diag(U) / np.where(np.abs(np.diag(target)) > 1e-9,
                                          np.diag(target), 1.0))
        x0[2:] = [d[2] - d[0] - x0[0], d[1] - d[0] - x0[1]]
        res = minimize(cost, x0, method="BFGS", options={"gtol": 1e-10})
        if best is None or res.fun < best.fun:
            best = res
    return float(best.fun), tuple(float(v) for v in best.x)

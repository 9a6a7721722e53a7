from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from _oracles import near_unitary, random_local, random_unitary
from pesc.metrics import (
    CNOT,
    CZ,
    IDENTITY,
    ISWAP,
    MAGIC,
    SQRT_ISWAP,
    SWAP,
    InvariantsUndefined,
    avg_gate_error,
    canonical_gate,
    closest_pe_error,
    closest_perfect_entangler,
    invariants_from_weyl,
    local_invariants,
    local_z,
    pe_functional_2q,
    pe_functional_3q,
    pe_gradient,
    pe_spectrum_value,
    project_to_pe,
    similarity,
    unitarity_defect,
    weyl_coordinates,
    z_aligned_error,
)

PI = np.pi
seeds = st.integers(0, 2**32 - 1)


def invariants(U):
    inv = local_invariants(U)
    return np.array([inv.g1, inv.g2, inv.g3])


def test_magic_basis_is_fixed_and_unitary():
    expected = np.array([[1, 0, 0, 1j], [0, 1j, 1, 0], [0, 1j, -1, 0], [1, 0, 0, -1j]]) / np.sqrt(2)
    np.testing.assert_array_equal(MAGIC, expected)
    np.testing.assert_allclose(MAGIC.conj().T @ MAGIC, np.eye(4), atol=1e-15)


@pytest.mark.parametrize(
    "gate, expected",
    [(IDENTITY, (1, 0, 3)), (CNOT, (0, 0, 1)), (ISWAP, (0, 0, -1)), (CZ, (0, 0, 1))],
)
def test_invariants_of_standard_gates(gate, expected):
    np.testing.assert_allclose(invariants(gate), expected, atol=1e-10)


def test_swap_side_mirror():
    inv = local_invariants(SWAP)
    assert inv.weyl_region == "swap-side"
    np.testing.assert_allclose(inv.raw, (-1, 0, -3), atol=1e-12)
    np.testing.assert_allclose((inv.g1, inv.g2, inv.g3), (1, 0, 3), atol=1e-12)
    assert pe_functional_2q(SWAP, mirror=False) == pytest.approx(-0.4)
    assert pe_functional_2q(SWAP) == pytest.approx(0.4)


@given(seed=seeds)
def test_invariants_are_local(seed):
    rng = np.random.default_rng(seed)
    U = random_unitary(rng)
    V = random_local(rng) @ U @ random_local(rng)
    np.testing.assert_allclose(invariants(V), invariants(U), atol=1e-9)


@given(seed=seeds)
def test_weyl_coordinates_reproduce_invariants(seed):
    U = random_unitary(np.random.default_rng(seed))
    c = weyl_coordinates(U)
    # Weyl chamber: c1 in [0, pi), c2 <= min(c1, pi - c1), 0 <= c3 <= c2
    assert 0 <= c.c3 <= c.c2 + 1e-12 and c.c2 <= min(c.c1, PI - c.c1) + 1e-12 and c.c1 < PI
    np.testing.assert_allclose(invariants_from_weyl(*c.as_array()), local_invariants(U).raw, atol=1e-9)


@given(c=st.tuples(st.floats(0.05, 1.5), st.floats(0.05, 1.5), st.floats(0.05, 1.5)))
def test_canonical_gate_round_trip(c):
    c1, c2, c3 = sorted(c, reverse=True)
    w = weyl_coordinates(canonical_gate(c1, c2, c3)).as_array()
    np.testing.assert_allclose(invariants_from_weyl(*w), invariants_from_weyl(c1, c2, c3), atol=1e-9)


def test_weyl_coordinates_of_standard_gates():
    np.testing.assert_allclose(weyl_coordinates(IDENTITY).as_array(), 0, atol=1e-12)
    s = weyl_coordinates(SWAP).as_array()
    np.testing.assert_allclose(s, [PI / 2] * 3, atol=1e-7)
    np.testing.assert_allclose(weyl_coordinates(SQRT_ISWAP).as_array(), [PI / 4, PI / 4, 0], atol=1e-12)
    c = weyl_coordinates(CNOT).as_array()
    np.testing.assert_allclose(invariants_from_weyl(*c), (0, 0, 1), atol=1e-12)


def test_two_qubit_functional_values():
    assert pe_functional_2q(CNOT) == pytest.approx(0.0, abs=1e-10)
    assert pe_functional_2q(IDENTITY) == pytest.approx(0.4, abs=1e-10)
    leaky = np.sqrt(0.5) * IDENTITY
    assert unitarity_defect(leaky) == pytest.approx(0.5)
    assert pe_functional_2q(leaky) == pytest.approx(0.4 + 0.4, abs=1e-10)


def test_singular_block_raises():
    with pytest.raises(InvariantsUndefined):
        local_invariants(np.diag([1, 1, 0, 0]).astype(complex))


@given(theta=st.floats(-PI, PI), seed=seeds)
def test_similarity(theta, seed):
    U = random_unitary(np.random.default_rng(seed))
    assert similarity(U, U) == pytest.approx(0, abs=1e-12)
    assert similarity(U, np.exp(1j * theta) * U) == pytest.approx(0, abs=1e-12)


def test_similarity_identity_cz():
    assert similarity(IDENTITY, CZ) == pytest.approx(0.75, abs=1e-12)


@given(theta=st.floats(-PI, PI))
def test_three_qubit_functional(theta):
    assert pe_functional_3q(CNOT, CNOT) == pytest.approx(0, abs=1e-10)
    assert pe_functional_3q(IDENTITY, IDENTITY) == pytest.approx(0.8, abs=1e-10)
    assert pe_functional_3q(CNOT, np.exp(1j * theta) * CNOT) == pytest.approx(0, abs=1e-10)


def fake_trajectory(blocks, times=None):
    times = np.arange(len(blocks), dtype=float) if times is None else times
    return SimpleNamespace(times=np.asarray(times), blocks=np.asarray(blocks))


def test_spectrum_value_of_idle_and_entangling_trajectories():
    idle = fake_trajectory([[IDENTITY, IDENTITY]] * 4)
    sp = pe_spectrum_value(idle)
    assert (sp.value, sp.t_min) == (pytest.approx(0.8), 0.0)
    through = fake_trajectory([[IDENTITY, IDENTITY], [CNOT, CNOT], [IDENTITY, CZ]])
    sp = pe_spectrum_value(through)
    assert sp.value == pytest.approx(0, abs=1e-10) and sp.t_min == 1.0


@given(seed=seeds)
def test_spectrum_value_never_exceeds_final_value(seed):
    rng = np.random.default_rng(seed)
    blocks = [[random_unitary(rng), random_unitary(rng)] for _ in range(5)]
    sp = pe_spectrum_value(fake_trajectory(blocks))
    assert sp.value <= pe_functional_3q(*blocks[-1], clamped=True) + 1e-15
    assert sp.value >= 0


def test_all_leaked_trajectory_is_worst_case():
    zero = np.zeros((4, 4), dtype=complex)
    sp = pe_spectrum_value(fake_trajectory([[zero, zero]] * 3))
    assert sp.value == 1.0 and not sp.valid


def test_avg_gate_error():
    rng = np.random.default_rng(0)
    O = random_unitary(rng)
    assert avg_gate_error(O, O) == pytest.approx(0, abs=1e-12)
    assert avg_gate_error(np.exp(0.7j) * O, O) == pytest.approx(0, abs=1e-12)
    assert avg_gate_error(np.zeros((4, 4)), O) == pytest.approx(1.0)


def test_closest_pe_examples():
    assert closest_pe_error(CNOT) < 1e-9
    O = closest_perfect_entangler(IDENTITY)
    assert abs(pe_functional_2q(O)) < 1e-8
    assert weyl_coordinates(O).is_perfect_entangler


@given(seed=seeds)
def test_closest_pe_is_local_equivariant(seed):
    rng = np.random.default_rng(seed)
    U = random_unitary(rng)
    a = weyl_coordinates(closest_perfect_entangler(U)).as_array()
    b = weyl_coordinates(closest_perfect_entangler(random_local(rng) @ U)).as_array()
    np.testing.assert_allclose(a, b, atol=1e-7)


@given(seed=seeds)
def test_closest_pe_lies_in_polyhedron_and_is_a_projection(seed):
    U = random_unitary(np.random.default_rng(seed))
    c = weyl_coordinates(U).as_array()
    O = closest_perfect_entangler(U)
    assert weyl_coordinates(O).is_perfect_entangler
    p = project_to_pe(c)
    np.testing.assert_allclose(project_to_pe(p), p, atol=1e-12)


def test_gradient_matches_finite_differences_on_random_blocks():
    rng = np.random.default_rng(2024)
    h = 1e-6
    worst = 0.0
    checked = 0
    while checked < 100:
        U0, U1 = near_unitary(rng), near_unitary(rng)
        cs = [weyl_coordinates(np.linalg.qr(U)[0]) for U in (U0, U1)]
        if any(abs(c.c2 + c.c3 - PI / 2) < 0.05 for c in cs):
            continue  # mirror switches sign across this surface
        grad = pe_gradient(U0, U1)
        fd = np.zeros_like(grad)
        for b in range(2):
            for i in range(4):
                for j in range(4):
                    for unit in (1.0, 1j):
                        blocks = [U0.copy(), U1.copy()]
                        blocks[b][i, j] += h * unit
                        jp = pe_functional_3q(*blocks)
                        blocks[b][i, j] -= 2 * h * unit
                        jm = pe_functional_3q(*blocks)
                        d = (jp - jm) / (2 * h)
                        # dJ/dU* = (dJ/dRe + i dJ/dIm) / 2
                        fd[b, i, j] += 0.5 * d * (1.0 if unit == 1.0 else 1j)
        worst = max(worst, np.linalg.norm(fd - grad) / np.linalg.norm(grad))
        checked += 1
    assert worst < 1e-6


def test_similarity_is_stationary_at_its_maximum():
    rng = np.random.default_rng(9)
    U = random_unitary(rng)
    d = 1j * np.diag(rng.normal(size=4)) @ U  # tangent direction at U
    s = lambda x: similarity(U, U + x * d)  # noqa: E731
    assert abs((s(1e-5) - s(-1e-5)) / 2e-5) < 1e-9


def test_defect_gradient_is_linear():
    rng = np.random.default_rng(1)
    U = near_unitary(rng)
    h = 1e-6
    fd = np.zeros((4, 4), dtype=complex)
    for i in range(4):
        for j in range(4):
            for unit in (1.0, 1j):
                V = U.copy()
                V[i, j] += h * unit
                jp = unitarity_defect(V)
                V[i, j] -= 2 * h * unit
                fd[i, j] += 0.5 * (jp - unitarity_defect(V)) / (2 * h) * (1.0 if unit == 1.0 else 1j)
    np.testing.assert_allclose(fd, -U / 4, atol=1e-9)


@given(a=st.floats(-PI, PI), b=st.floats(-PI, PI), c=st.floats(-PI, PI), d=st.floats(-PI, PI))
def test_z_aligned_error_removes_local_phases(a, b, c, d):
    U = local_z(a, b) @ SQRT_ISWAP @ local_z(c, d)
    err, _ = z_aligned_error(U, SQRT_ISWAP)
    assert err < 1e-9

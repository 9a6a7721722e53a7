import numpy as np
import pytest

from _oracles import random_hermitian, short_pulse, small_model, small_params
from pesc.device import build_model
from pesc.flux import SampledControl, idle_modulation, sample, update_shape
from pesc.gradient import (
    KrotovConfig,
    _spectral_penalty,
    costate_boundary,
    evaluate_control,
    final_blocks,
    grape_gradient,
    krotov_iterate,
    two_stage_optimize,
)
from pesc.metrics import canonical_gate, pe_functional_3q

# the global minimum of the mirrored two-qubit functional (value -2/135)
C_STAR = (np.arccos(1 / np.sqrt(3)), np.arccos(1 / np.sqrt(3)), 0.0)


def j_of_states(model, states, T):
    b = final_blocks(model, states, T)
    return pe_functional_3q(b[0], b[1])


def states_with_blocks(model, u0, u1, T):
    m8 = np.zeros((8, 8), dtype=complex)
    m8[:4, :4], m8[4:, 4:] = u0, u1
    return model.basis.states @ (np.exp(-1j * model.basis.energies * T)[:, None] * m8)


@pytest.fixture(scope="module")
def model():
    return small_model()


def test_costate_directional_derivatives(model):
    rng = np.random.default_rng(11)
    T = 7.3
    h = 1e-6
    worst = 0.0
    for _ in range(100):
        psi = model.basis.states @ np.linalg.qr(rng.normal(size=(8, 8)) + 1j * rng.normal(size=(8, 8)))[0]
        psi = psi + 0.05 * (rng.normal(size=psi.shape) + 1j * rng.normal(size=psi.shape))
        chi = costate_boundary(model, final_blocks(model, psi, T), T)
        d = rng.normal(size=psi.shape) + 1j * rng.normal(size=psi.shape)
        fd = (j_of_states(model, psi + h * d, T) - j_of_states(model, psi - h * d, T)) / (2 * h)
        analytic = -2 * np.real(np.vdot(chi, d))
        worst = max(worst, abs(fd - analytic) / max(abs(analytic), 1e-12))
    assert worst < 1e-5


def test_costates_lie_in_computational_span(model):
    rng = np.random.default_rng(4)
    psi = rng.normal(size=(model.dim, 8)) + 1j * rng.normal(size=(model.dim, 8))
    chi = costate_boundary(model, final_blocks(model, psi, 2.0), 2.0)
    proj = model.basis.states @ (model.basis.states.conj().T @ chi)
    np.testing.assert_allclose(proj, chi, atol=1e-12)


def test_costates_have_no_tangent_component_at_the_minimum(model):
    T = 3.0
    u_star = canonical_gate(*C_STAR)
    psi = states_with_blocks(model, u_star, u_star, T)
    assert pe_functional_3q(u_star, u_star) == pytest.approx(-4 / 135, abs=1e-12)
    chi = costate_boundary(model, final_blocks(model, psi, T), T)
    rng = np.random.default_rng(0)
    for _ in range(10):
        d = 1j * psi @ random_hermitian(rng, 8)  # unitary (norm-preserving) direction
        assert abs(np.real(np.vdot(chi, d))) < 1e-8


def test_grape_gradient_matches_finite_differences(model):
    rng = np.random.default_rng(7)
    base = sample(short_pulse(), 0.05)
    h = 1e-4
    worst = 0.0
    cases = 0
    for _ in range(5):
        u = np.clip(base.u + 0.05 * rng.normal(size=len(base)), 0.02, 0.98)
        ctrl = base.with_values(u)
        grad = grape_gradient(model, ctrl)
        for k in rng.choice(len(u), 20, replace=False):
            up, dn = u.copy(), u.copy()
            up[k] += h
            dn[k] -= h
            fd = (evaluate_control(model, ctrl.with_values(up))[0] - evaluate_control(model, ctrl.with_values(dn))[0]) / (2 * h)
            worst = max(worst, abs(fd - grad[k]) / np.max(np.abs(grad)))
            cases += 1
    assert cases >= 100
    assert worst < 1e-4


def test_first_order_gradient_approaches_exact_for_small_steps(model):
    ctrl = sample(short_pulse(), 0.002)
    exact = grape_gradient(model, ctrl)
    approx = grape_gradient(model, ctrl, mode="first-order")
    assert np.max(np.abs(approx - exact)) / np.max(np.abs(exact)) < 0.2


def test_gradient_vanishes_without_couplings():
    p = small_params().with_couplings((0, 0, 0))
    pulse = short_pulse()
    m = build_model(p, idle_modulation(pulse))
    grad = grape_gradient(m, sample(pulse, 0.05))
    assert np.max(np.abs(grad)) < 1e-12


def test_gradient_independent_of_memory_budget(model):
    ctrl = sample(short_pulse(), 0.02)
    full = grape_gradient(model, ctrl)
    tight = grape_gradient(model, ctrl, memory_budget_mb=0.01)
    np.testing.assert_allclose(tight, full, atol=1e-13)


def test_spectral_penalty_gradient():
    rng = np.random.default_rng(2)
    du = rng.normal(size=12)
    dts = np.full(12, 0.1)
    value, grad = _spectral_penalty(du, dts, 0.3)
    h = 1e-6
    for k in range(12):
        e = np.zeros(12)
        e[k] = h
        fd = (_spectral_penalty(du + e, dts, 0.3)[0] - _spectral_penalty(du - e, dts, 0.3)[0]) / (2 * h)
        assert grad[k] == pytest.approx(fd, rel=1e-6)
    assert _spectral_penalty(du, dts, 0.0)[0] == 0.0


def test_krotov_large_lambda_or_zero_shape_leaves_control(model):
    ctrl = sample(short_pulse(), 0.05)
    cfg = KrotovConfig(dt=0.05)
    frozen = krotov_iterate(model, ctrl, cfg, shape=np.zeros(len(ctrl)))
    np.testing.assert_array_equal(frozen.control.u, ctrl.u)
    stiff = krotov_iterate(model, ctrl, cfg, lambda_a=1e12)
    assert np.max(np.abs(stiff.control.u - ctrl.u)) < 1e-9


def test_krotov_iteration_is_monotonic(model):
    pulse = short_pulse(T=12.0)
    ctrl = sample(pulse, 0.05)
    cfg = KrotovConfig(dt=0.05, lambda_a=0.5)
    shape = update_shape(ctrl, pulse.sigma_t)
    j_old = evaluate_control(model, ctrl)[0]
    totals = []
    for _ in range(4):
        step = krotov_iterate(model, ctrl, cfg, shape=shape, lambda_a=cfg.lambda_a, j_old=j_old)
        totals.append(step.j_t + step.running_cost)
        assert step.j_t + step.running_cost <= j_old + 1e-10
        assert np.all((step.control.u >= 0) & (step.control.u <= 1))
        ctrl, j_old = step.control, step.j_t
    assert totals[-1] < totals[0]


def test_guess_below_tolerance_stops_immediately(model):
    rec = two_stage_optimize(model, short_pulse(), KrotovConfig(dt=0.05, tol=10.0))
    assert rec.termination == "tolerance"
    assert rec.n_iterations == 0
    assert [r.stage for r in rec.rows] == ["guess"]


def test_two_stage_record_and_reevaluation(model):
    pulse = short_pulse(T=12.0)
    cfg = KrotovConfig(dt=0.05, stage1_max_iter=2, stage2_max_iter=3, tol=1e-12)
    rec = two_stage_optimize(model, pulse, cfg)
    stages = [r.stage for r in rec.rows]
    assert stages[0] == "guess" and stages.count("krotov") == 2
    assert rec.termination in ("iteration cap", "stagnation")
    assert [r.iteration for r in rec.rows] == list(range(len(rec.rows)))
    j_t, clamped, _, _ = evaluate_control(model, rec.final_control)
    assert clamped == pytest.approx(rec.final_value, abs=1e-12)
    assert rec.final_value <= rec.initial_value
    assert 0.0 <= rec.metadata["clip_fraction"] <= 1.0


def test_guess_outside_unit_interval_is_rejected(model):
    bad = SampledControl(dt=0.05, u=np.full(10, 1.2))
    with pytest.raises(Exception, match="outside"):
        two_stage_optimize(model, bad, KrotovConfig(dt=0.05))


@pytest.mark.parametrize(
    "kwargs", [dict(lambda_a=0.0), dict(stage1_max_iter=-1), dict(gradient="second-order"), dict(costate_frame="lab")]
)
def test_invalid_config(kwargs):
    with pytest.raises(ValueError):
        KrotovConfig(**kwargs)

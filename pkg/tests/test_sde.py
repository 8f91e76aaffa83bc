import numpy as np
import pytest
from hypothesis import given, settings, strategies as hst

from qtraj.linalg import fidelity
from qtraj.model import SIGMA_MINUS, ModelSpec
from qtraj.sde import (
    KernelInclusionError,
    PairState,
    SimConfig,
    StepSizeError,
    derive_M,
    fidelity_via_M,
    sample_steps,
    simulate_pair,
    simulate_pairs,
    simulate_reference,
    step,
    trajectory_rng,
)
from qtraj import structure as st

from .conftest import I2, PLUS, random_density, random_model, seeds


def test_simconfig_validation():
    with pytest.raises(ValueError):
        SimConfig(dt=0.0, horizon=1.0)
    with pytest.raises(ValueError):
        SimConfig(dt=2.0, horizon=1.0)
    with pytest.raises(ValueError, match="max_jump_prob"):
        SimConfig(dt=0.1, horizon=1.0, max_jump_prob=0.2)
    with pytest.raises(ValueError, match="multiple"):
        SimConfig(dt=0.3, horizon=1.0)
    assert SimConfig(dt=1e-3, horizon=5.0).n_steps == 5000


def test_sample_steps():
    cfg = SimConfig(dt=0.01, horizon=1.0)
    assert list(sample_steps(cfg, [0.0, 0.5, 1.0])) == [0, 50, 100]
    with pytest.raises(ValueError, match="grid"):
        sample_steps(cfg, [0.005])
    with pytest.raises(ValueError, match="grid"):
        sample_steps(cfg, [2.0])
    with pytest.raises(ValueError, match="ascending"):
        sample_steps(cfg, [0.5, 0.5])


def test_step_size_rejected(damping):
    big = ModelSpec(np.zeros((2, 2)), (), (2.0 * SIGMA_MINUS,))
    with pytest.raises(StepSizeError):
        simulate_pairs(big, np.eye(2) / 2, np.eye(2) / 2, SimConfig(dt=0.05, horizon=1.0), range(2))
    simulate_pairs(damping, np.eye(2) / 2, np.eye(2) / 2, SimConfig(dt=0.05, horizon=0.1), range(2))


def test_kernel_inclusion_required(qnd):
    with pytest.raises(KernelInclusionError) as info:
        simulate_pairs(qnd, np.eye(2) / 2, np.diag([1.0, 0.0]), SimConfig(dt=0.01, horizon=0.1), range(1))
    assert abs(info.value.witness[1]) == pytest.approx(1.0)


def test_trajectory_streams_are_independent_of_batching(mixed_model):
    cfg = SimConfig(dt=0.01, horizon=1.0, seed=7)
    times = [0.0, 0.5, 1.0]
    whole = simulate_pairs(mixed_model, np.diag([1.0, 0.0]), I2 / 2, cfg, range(6), sample_times=times)
    part = simulate_pairs(mixed_model, np.diag([1.0, 0.0]), I2 / 2, cfg, [3, 4], sample_times=times)
    assert np.array_equal(whole.fidelity[3:5], part.fidelity)
    assert np.array_equal(whole.rho[3:5], part.rho)
    assert np.array_equal(whole.jump_counts[3:5], part.jump_counts)


def test_workers_give_identical_results(mixed_model):
    cfg = SimConfig(dt=0.01, horizon=0.5, seed=11)
    a = simulate_pairs(mixed_model, PLUS, I2 / 2, cfg, range(8), workers=1)
    b = simulate_pairs(mixed_model, PLUS, I2 / 2, cfg, range(8), workers=3)
    assert np.array_equal(a.fidelity, b.fidelity)
    assert np.array_equal(a.propagator, b.propagator)
    assert np.array_equal(a.cesaro_rho, b.cesaro_rho)


def test_reruns_are_bit_identical(mixed_model):
    cfg = SimConfig(dt=0.01, horizon=0.5, seed=3)
    a = simulate_pair(mixed_model, PLUS, I2 / 2, cfg, index=5)
    b = simulate_pair(mixed_model, PLUS, I2 / 2, cfg, index=5)
    assert np.array_equal(a.fidelity, b.fidelity)
    c = simulate_pair(mixed_model, PLUS, I2 / 2, cfg, index=6)
    assert not np.array_equal(a.fidelity, c.fidelity)


def test_identical_initial_states_keep_fidelity_one(mixed_model):
    cfg = SimConfig(dt=0.01, horizon=2.0, seed=1)
    rho = np.array([[0.7, 0.2], [0.2, 0.3]])
    batch = simulate_pairs(mixed_model, rho, rho, cfg, range(5))
    assert np.allclose(batch.fidelity, 1.0, atol=1e-12)
    assert np.allclose(batch.cesaro_distance(), 0.0, atol=1e-12)


@settings(max_examples=10, deadline=None)
@given(seeds, hst.integers(2, 3))
def test_states_stay_physical_and_dual_fidelity_matches(seed, k):
    rng = np.random.default_rng(seed)
    spec = random_model(rng, k, 1, 1)
    lam = max(np.linalg.eigvalsh(C.conj().T @ C)[-1] for C in spec.jumps)
    dt = 0.5 ** np.ceil(np.log2(max(100.0, 20 * lam)))
    cfg = SimConfig(dt=dt, horizon=64 * dt, seed=seed)
    rho0, rho_hat0 = random_density(rng, k, rank=1), random_density(rng, k)
    batch = simulate_pairs(spec, rho0, rho_hat0, cfg, range(4), sample_times=np.arange(0, 65, 16) * dt)
    assert not batch.failed.any()
    eig = np.linalg.eigvalsh(batch.rho)
    assert eig.min() >= -1e-12
    assert np.allclose(np.trace(batch.rho, axis1=-2, axis2=-1), 1.0, atol=1e-12)
    assert np.max(np.abs(batch.fidelity - batch.fidelity_via_M)) <= 1e-8
    assert np.all((batch.fidelity >= 0) & (batch.fidelity <= 1))


def test_step_matches_batch_integrator(mixed_model):
    cfg = SimConfig(dt=0.01, horizon=0.5, seed=21)
    rho0 = np.diag([0.0, 1.0])
    state = PairState.initial(rho0, I2 / 2, mixed_model.n_jumps)
    rng = trajectory_rng(cfg.seed, 2)
    for _ in range(cfg.n_steps):
        state = step(mixed_model, state, cfg, rng)
    rec = simulate_pair(mixed_model, rho0, I2 / 2, cfg, index=2)
    batch = simulate_pairs(mixed_model, rho0, I2 / 2, cfg, [2])
    assert np.allclose(state.rho, batch.rho[0, -1], atol=1e-10)
    assert np.array_equal(state.jump_counts, batch.jump_counts[0, -1])
    assert fidelity_via_M(state, rho0, I2 / 2) == pytest.approx(rec.fidelity_via_M[-1], abs=1e-10)
    M = derive_M(state)
    assert np.trace(M).real == pytest.approx(1.0)
    assert np.linalg.eigvalsh(M)[0] >= -1e-12


def test_propagator_reconstructs_states(mixed_model):
    # rho_t = S rho0 S* / tr(S rho0 S*) for both filters
    cfg = SimConfig(dt=0.01, horizon=1.0, seed=2)
    rho0 = np.diag([0.0, 1.0])
    rho_hat0 = np.array([[0.6, 0.1], [0.1, 0.4]])
    rec = simulate_pair(mixed_model, rho0, rho_hat0, cfg)
    S = rec.final.propagator
    for r0, r in ((rho0, rec.final.rho), (rho_hat0, rec.final.rho_hat)):
        X = S @ r0 @ S.conj().T
        assert np.allclose(X / np.trace(X), r, atol=1e-9)


def test_qnd_pure_state_stays_pure(qnd):
    cfg = SimConfig(dt=1e-3, horizon=1.0, seed=0)
    rec = simulate_pair(qnd, np.diag([1.0, 0.0]), I2 / 2, cfg)
    assert np.allclose(rec.final.rho, np.diag([1.0, 0.0]), atol=1e-12)


def test_jump_times_recorded(damping):
    cfg = SimConfig(dt=1e-3, horizon=3.0, seed=4)
    batch = simulate_pairs(damping, np.diag([0.0, 1.0]), I2 / 2, cfg, range(20))
    for b in range(20):
        assert [len(t) for t in batch.jump_times[b]] == list(batch.jump_counts[b, -1])
        # one excitation can decay at most once
        assert batch.jump_counts[b, -1, 0] <= 1


def test_q_processes_bounded_and_sum_to_one(qnd):
    enc = st.minimal_enclosures(qnd)
    dual = st.dual_projectors(qnd, enc)
    cfg = SimConfig(dt=1e-3, horizon=2.0, seed=9)
    batch = simulate_pairs(qnd, PLUS, I2 / 2, cfg, range(10), dualprojs=dual, sample_times=[0.0, 1.0, 2.0])
    assert np.allclose(batch.q_rho.sum(axis=-1), 1.0)
    assert np.all((batch.q_rho >= -1e-12) & (batch.q_rho <= 1 + 1e-12))
    assert np.allclose(batch.q_rho[:, 0], [0.5, 0.5])


def test_cesaro_of_pathwise_constant_state(qnd):
    # |0><0| is left unchanged by every QND path, so its running mean is itself
    batch = simulate_pairs(qnd, np.diag([1.0, 0.0]), I2 / 2, SimConfig(dt=0.01, horizon=1.0), range(1))
    assert np.allclose(batch.cesaro_rho[0, -1], np.diag([1.0, 0.0]), atol=1e-12)


def test_reference_trivial_jump_model_has_unit_likelihood():
    spec = ModelSpec(np.zeros((2, 2)), (), (np.eye(2),))
    cfg = SimConfig(dt=0.01, horizon=2.0, seed=0)
    ref = simulate_reference(spec, [PLUS, np.diag([1.0, 0.0])], cfg, range(20), sample_times=[0.0, 1.0, 2.0])
    assert np.allclose(ref.z, 1.0, atol=1e-12)


def test_reference_workers_identical(damping):
    cfg = SimConfig(dt=0.01, horizon=1.0, seed=5)
    a = simulate_reference(damping, [I2 / 2], cfg, range(9), workers=1)
    b = simulate_reference(damping, [I2 / 2], cfg, range(9), workers=2)
    assert np.array_equal(a.z, b.z)
    assert np.all(a.z >= 0)


def test_fidelity_direct_agrees_with_state_fidelity(mixed_model):
    cfg = SimConfig(dt=0.01, horizon=0.5, seed=8)
    rec = simulate_pair(mixed_model, PLUS, I2 / 2, cfg)
    assert rec.fidelity[-1] == pytest.approx(fidelity(rec.final.rho, rec.final.rho_hat), abs=1e-7)

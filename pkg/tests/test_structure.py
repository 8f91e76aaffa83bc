import numpy as np
import pytest
from hypothesis import given, settings, strategies as hst

from qtraj import structure as st
from qtraj.model import SIGMA_X, SIGMA_Z, ModelSpec, apply_adjoint_lindbladian, apply_lindbladian
from qtraj.structure import Verdict

from .conftest import I2, blk, random_model, random_unitary, seeds

RHO_TILDE = np.array([[0.6, 0.2j], [-0.2j, 0.4]])


def test_hermitian_basis_is_orthonormal():
    for k in (1, 2, 3):
        B = st.hermitian_basis(k)
        assert np.allclose(B.conj().T @ B, np.eye(k * k))


def test_qnd_fixed_points_and_spectrum(qnd):
    basis = st.fixed_points(qnd)
    assert len(basis) == 2
    for X in basis:
        assert np.allclose(apply_lindbladian(qnd, X), 0)
        assert np.allclose(X, np.diag(np.diag(X)))
    ev = st.liouvillian_spectrum(qnd)
    assert np.allclose(ev, [0, 0, -2, -2], atol=1e-9)
    assert st.check_spectral(qnd)


def test_qnd_enclosures_and_dual_projectors(qnd):
    enc = st.minimal_enclosures(qnd)
    assert enc.unique
    states = sorted(enc.states, key=lambda r: -r[0, 0].real)
    assert np.allclose(states[0], np.diag([1, 0]), atol=1e-9)
    assert np.allclose(states[1], np.diag([0, 1]), atol=1e-9)
    Ms = st.dual_projectors(qnd, enc)
    assert np.allclose(sum(Ms), I2, atol=1e-8)
    for i, M in enumerate(Ms):
        assert np.allclose(M, enc.projectors[i], atol=1e-8)
        for j, rho in enumerate(enc.states):
            assert np.trace(M @ rho).real == pytest.approx(float(i == j), abs=1e-9)


def test_damping_is_rejected(damping):
    D = st.decaying_subspace(damping)
    assert np.allclose(D, np.diag([0, 1]), atol=1e-9)
    with pytest.raises(st.UnsupportedModelError):
        st.minimal_enclosures(damping)
    with pytest.raises(st.UnsupportedModelError) as info:
        st.analyze(damping)
    report = info.value.report
    assert np.allclose(report.liouvillian_spectrum, [0, -0.5, -0.5, -1], atol=1e-9)


def test_oscillating_model_fails_spectral(oscillating):
    assert not st.check_spectral(oscillating)
    ev = st.liouvillian_spectrum(oscillating)
    assert np.any(np.isclose(ev, 2j, atol=1e-9)) and np.any(np.isclose(ev, -2j, atol=1e-9))
    with pytest.warns(RuntimeWarning):
        D = st.decaying_subspace(oscillating)
    assert np.allclose(D, 0)


def test_zero_projector_is_time_average(oscillating):
    # the time average of exp(tL) applied to |+><+| kills the rotating coherence
    plus = 0.5 * np.ones((2, 2))
    assert np.allclose(st.zero_projector(oscillating)(plus), I2 / 2, atol=1e-10)


def test_block_model(block):
    basis = st.fixed_points(block)
    assert len(basis) == 4
    with pytest.warns(UserWarning):
        report = st.analyze(block)
    assert report.n_enclosures == 2
    assert not report.unique_decomposition
    assert not report.identifiable
    assert report.spectral_ok
    assert report.purification is Verdict.FAILS
    targets = [np.kron(np.diag([1, 0]), RHO_TILDE), np.kron(np.diag([0, 1]), RHO_TILDE)]
    for rho, target in zip(sorted(report.invariant_states, key=lambda r: -r[0, 0].real), targets):
        assert np.allclose(rho, target, atol=1e-9)
    for M in report.dual_projectors:
        assert np.allclose(apply_adjoint_lindbladian(block, M), 0, atol=1e-9)
    blocks = sorted(report.dual_projectors, key=lambda M: -M[0, 0].real)
    assert np.allclose(blocks[0], np.diag([1, 1, 0, 0]), atol=1e-8)


def test_identifiability_table(qnd):
    enc = st.minimal_enclosures(qnd)
    ok, table = st.check_identifiability(qnd, enc.states)
    assert ok
    assert sorted(table[:, 0]) == pytest.approx([-2.0, 2.0])
    assert st.channel_labels(qnd) == ["diffusive_1"]


def test_purification_verdicts(qnd, non_purifying, mixed_model):
    assert st.check_purification(qnd)[0] is Verdict.HOLDS
    verdict, witness = st.check_purification(non_purifying)
    assert verdict is Verdict.FAILS and "identity" in witness
    assert st.check_purification(mixed_model)[0] is Verdict.HOLDS


def test_scalar_compression_subspace_of_block_model(block):
    found = st.scalar_compression_subspaces(block)
    assert found
    P = found[0]
    assert np.allclose(P @ P, P, atol=1e-9)
    assert round(np.trace(P).real) >= 2


def test_purification_monte_carlo_on_generic_three_level():
    rng = np.random.default_rng(4)
    spec = random_model(rng, 3, 1, 0)
    verdict, witness = st.check_purification(spec, method="montecarlo", n_traj=8, horizon=10.0)
    assert verdict is Verdict.HOLDS, witness


def test_qnd_report(qnd):
    report = st.analyze(qnd)
    assert report.n_enclosures == 2
    assert report.spectral_ok and report.identifiable and report.unique_decomposition
    assert report.purification is Verdict.HOLDS
    assert report.notes == []


def test_unknown_purification_method(block):
    with pytest.raises(ValueError):
        st.check_purification(block, method="guess")


@settings(max_examples=15, deadline=None)
@given(seeds)
def test_generic_models_have_unique_faithful_state(seed):
    rng = np.random.default_rng(seed)
    spec = random_model(rng, 3, 1, 1)
    enc = st.minimal_enclosures(spec)
    assert len(enc.states) == 1
    rho = enc.states[0]
    assert np.trace(rho).real == pytest.approx(1.0)
    assert np.linalg.eigvalsh(rho)[0] > 0
    assert np.allclose(apply_lindbladian(spec, rho), 0, atol=1e-9)
    Ms = st.dual_projectors(spec, enc)
    assert np.allclose(Ms[0], np.eye(3), atol=1e-8)


@settings(max_examples=10, deadline=None)
@given(seeds, hst.sampled_from([0.3, 0.7, 1.5]))
def test_structure_is_basis_independent(seed, gamma):
    spec = ModelSpec(0.4 * SIGMA_X, (gamma * SIGMA_Z,), ())
    U = random_unitary(seed % 2**31, 2)
    rotated = spec.conjugated(U)
    a, b = st.analyze(spec), st.analyze(rotated)
    assert a.n_enclosures == b.n_enclosures
    assert a.spectral_ok == b.spectral_ok
    assert a.identifiable == b.identifiable
    for rho_a, rho_b in zip(a.invariant_states, b.invariant_states):
        assert np.allclose(U @ rho_a @ U.conj().T, rho_b, atol=1e-8)


def test_block_helper_is_blockdiagonal():
    X = blk(SIGMA_X)
    assert np.allclose(X[:2, 2:], 0) and np.allclose(X[:2, :2], SIGMA_X)

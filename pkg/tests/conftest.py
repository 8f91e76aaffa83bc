import numpy as np
import pytest
from hypothesis import strategies as hst
from scipy.stats import unitary_group

from qtraj.model import SIGMA_MINUS, SIGMA_X, SIGMA_Z, ModelSpec

I2 = np.eye(2, dtype=complex)
PLUS = 0.5 * np.ones((2, 2), dtype=complex)


def blk(X):
    return np.kron(I2, X)


@pytest.fixture
def qnd():
    return ModelSpec(np.zeros((2, 2)), (SIGMA_Z,), (), name="qnd")


@pytest.fixture
def damping():
    return ModelSpec(np.zeros((2, 2)), (), (SIGMA_MINUS,), name="damping")


@pytest.fixture
def oscillating():
    return ModelSpec(SIGMA_Z, (0.1 * I2,), (), name="oscillating")


@pytest.fixture
def block():
    return ModelSpec(blk(SIGMA_X), (blk(0.5 * SIGMA_Z),), (blk(SIGMA_MINUS),), name="block")


@pytest.fixture
def non_purifying():
    return ModelSpec(np.zeros((2, 2)), (1j * SIGMA_X,), (), name="non_purifying")


@pytest.fixture
def mixed_model():
    """Generic qubit model with both channel types and a Hamiltonian."""
    return ModelSpec(0.7 * SIGMA_X + 0.2 * SIGMA_Z, (0.8 * SIGMA_Z,), (0.6 * SIGMA_MINUS,), name="mixed")


def random_density(rng, k, rank=None):
    rank = k if rank is None else rank
    G = rng.normal(size=(k, rank)) + 1j * rng.normal(size=(k, rank))
    rho = G @ G.conj().T
    return rho / np.trace(rho).real


def random_matrix(rng, k):
    return rng.normal(size=(k, k)) + 1j * rng.normal(size=(k, k))


def random_model(rng, k, p=1, m=1):
    H = random_matrix(rng, k)
    H = 0.5 * (H + H.conj().T)
    L = tuple(0.5 * random_matrix(rng, k) for _ in range(p))
    C = tuple(0.3 * random_matrix(rng, k) for _ in range(m))
    return ModelSpec(H, L, C)


def random_unitary(seed, k):
    return unitary_group.rvs(k, random_state=seed)


seeds = hst.integers(min_value=0, max_value=2**32 - 1)
dims = hst.integers(min_value=1, max_value=4)

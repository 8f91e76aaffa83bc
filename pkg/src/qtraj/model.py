"""Measurement models and their Lindblad generators.

A model is a Hamiltonian ``H`` plus two families of monitored channels:
diffusive (homodyne-type) operators ``L_i`` and counting (jump) operators
``C_j``. Superoperators act on column-stacked matrices, so that
``vec(A X B) = (B.T kron A) vec(X)``.
"""

from dataclasses import dataclass, field

import numpy as np

from .linalg import check_matrix, dagger, expm, is_hermitian, project_to_density

SIGMA_X = np.array([[0, 1], [1, 0]], dtype=complex)
SIGMA_Y = np.array([[0, -1j], [1j, 0]], dtype=complex)
SIGMA_Z = np.array([[1, 0], [0, -1]], dtype=complex)
#: Lowering operator |0><1|; basis state |1> is the excited level.
SIGMA_MINUS = np.array([[0, 1], [0, 0]], dtype=complex)


def vec(X):
    """Column-stacking vectorization (works on stacks of matrices)."""
    X = np.asarray(X)
    return np.swapaxes(X, -1, -2).reshape(X.shape[:-2] + (-1,))


def unvec(v, dim):
    v = np.asarray(v)
    return np.swapaxes(v.reshape(v.shape[:-1] + (dim, dim)), -1, -2)


def _frozen(A):
    A = np.array(A, dtype=complex)
    A.setflags(write=False)
    return A


@dataclass(frozen=True, eq=False)
class ModelSpec:
    """Hamiltonian, diffusive operators and jump operators of one model."""

    hamiltonian: np.ndarray
    diffusive: tuple = ()
    jumps: tuple = ()
    name: str = field(default="", compare=False)

    def __post_init__(self):
        H = check_matrix(self.hamiltonian, "hamiltonian")
        if not is_hermitian(H, 1e-12):
            raise ValueError("hamiltonian is not Hermitian")
        k = H.shape[0]
        diff = []
        for i, L in enumerate(self.diffusive):
            L = check_matrix(L, f"diffusive[{i}]")
            if L.shape != (k, k):
                raise ValueError(f"diffusive[{i}] has shape {L.shape}, expected {(k, k)}")
            diff.append(_frozen(L))
        jumps = []
        for j, C in enumerate(self.jumps):
            C = check_matrix(C, f"jumps[{j}]")
            if C.shape != (k, k):
                raise ValueError(f"jumps[{j}] has shape {C.shape}, expected {(k, k)}")
            jumps.append(_frozen(C))
        if not diff and not jumps:
            raise ValueError("model needs at least one diffusive or jump channel")
        object.__setattr__(self, "hamiltonian", _frozen(0.5 * (H + dagger(H))))
        object.__setattr__(self, "diffusive", tuple(diff))
        object.__setattr__(self, "jumps", tuple(jumps))

    @property
    def dim(self):
        return self.hamiltonian.shape[0]

    @property
    def n_diffusive(self):
        return len(self.diffusive)

    @property
    def n_jumps(self):
        return len(self.jumps)

    def conjugated(self, U):
        """The same model in a rotated basis (``X -> U X U*`` for every operator)."""
        Ud = dagger(U)
        return ModelSpec(
            U @ self.hamiltonian @ Ud,
            tuple(U @ L @ Ud for L in self.diffusive),
            tuple(U @ C @ Ud for C in self.jumps),
            name=self.name,
        )

    def __eq__(self, other):
        if not isinstance(other, ModelSpec):
            return NotImplemented
        return (
            np.array_equal(self.hamiltonian, other.hamiltonian)
            and len(self.diffusive) == len(other.diffusive)
            and len(self.jumps) == len(other.jumps)
            and all(np.array_equal(a, b) for a, b in zip(self.diffusive, other.diffusive))
            and all(np.array_equal(a, b) for a, b in zip(self.jumps, other.jumps))
        )

    __hash__ = None


@dataclass(frozen=True)
class Superoperator:
    """Linear map on k x k matrices, stored as a k^2 x k^2 matrix."""

    dim: int
    matrix: np.ndarray

    def __call__(self, X):
        return unvec(self.matrix @ vec(X), self.dim)

    def eigenvalues(self):
        return np.linalg.eigvals(self.matrix)


def drift_K(spec):
    """``K = -iH - (sum L*L + sum C*C)/2``."""
    K = -1j * spec.hamiltonian
    for A in spec.diffusive + spec.jumps:
        K = K - 0.5 * dagger(A) @ A
    return K


def apply_lindbladian(spec, rho):
    """Direct (operator-by-operator) action of the Lindbladian on ``rho``."""
    H = spec.hamiltonian
    out = -1j * (H @ rho - rho @ H)
    for A in spec.diffusive + spec.jumps:
        AdA = dagger(A) @ A
        out = out + A @ rho @ dagger(A) - 0.5 * (AdA @ rho + rho @ AdA)
    return out


def apply_adjoint_lindbladian(spec, X):
    """Heisenberg-picture generator, dual to the Lindbladian under ``tr(X rho)``."""
    H = spec.hamiltonian
    out = 1j * (H @ X - X @ H)
    for A in spec.diffusive + spec.jumps:
        AdA = dagger(A) @ A
        out = out + dagger(A) @ X @ A - 0.5 * (AdA @ X + X @ AdA)
    return out


def _left(A):
    # vec(A X) = (I kron A) vec(X)
    return np.kron(np.eye(A.shape[0]), A)


def _right(B):
    # vec(X B) = (B.T kron I) vec(X)
    return np.kron(B.T, np.eye(B.shape[0]))


def lindbladian(spec):
    H = spec.hamiltonian
    mat = -1j * (_left(H) - _right(H))
    for A in spec.diffusive + spec.jumps:
        AdA = dagger(A) @ A
        mat = mat + np.kron(A.conj(), A) - 0.5 * (_left(AdA) + _right(AdA))
    return Superoperator(spec.dim, mat)


def adjoint_lindbladian(spec):
    H = spec.hamiltonian
    mat = 1j * (_left(H) - _right(H))
    for A in spec.diffusive + spec.jumps:
        AdA = dagger(A) @ A
        mat = mat + np.kron(A.T, dagger(A)) - 0.5 * (_left(AdA) + _right(AdA))
    return Superoperator(spec.dim, mat)


def evolve_master(spec, rho, t, generator=None):
    """Solve the master equation exactly: ``exp(t L)(rho)``.

    ``generator`` may carry a precomputed :func:`lindbladian` to avoid
    reassembling it in loops.
    """
    if t < 0:
        raise ValueError("t must be non-negative")
    rho = np.asarray(rho, dtype=complex)
    if t == 0:
        return rho.copy()
    gen = lindbladian(spec) if generator is None else generator
    out = unvec(expm(t * gen.matrix) @ vec(rho), spec.dim)
    return project_to_density(out)

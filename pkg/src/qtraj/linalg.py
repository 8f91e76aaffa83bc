"""Dense complex linear algebra for small density matrices.

Everything here works on plain ``numpy`` arrays. Functions that are used in
the trajectory integrator accept stacks of matrices (leading batch axes) so
that a whole batch of trajectories can be processed in one call.
"""

import numpy as np
import scipy.linalg

#: Eigenvalues above this (negative) value are treated as roundoff and clipped.
PSD_CLIP = 1e-10
#: Eigenvalues below this are a genuine violation of positivity.
PSD_REJECT = 1e-8


class NumericalError(ArithmeticError):
    """An eigen-solver or matrix function failed on the given input."""

    def __init__(self, message, matrix=None):
        super().__init__(message)
        self.matrix = matrix


class NotPSDError(ValueError):
    """A matrix that must be positive semidefinite has a negative eigenvalue."""


class DegenerateStateError(ValueError):
    """A matrix cannot be normalized into a density matrix (trace ~ 0)."""


def dagger(A):
    """Conjugate transpose over the last two axes."""
    return np.conj(np.swapaxes(A, -1, -2))


def hermitize(A):
    """Return (A + A*)/2."""
    A = np.asarray(A, dtype=complex)
    return 0.5 * (A + dagger(A))


def is_hermitian(A, tol=1e-12):
    A = np.asarray(A)
    return bool(np.max(np.abs(A - dagger(A)), initial=0.0) <= tol)


def check_matrix(A, name="matrix"):
    """Validate a square, finite, complex matrix and return it as an array."""
    A = np.asarray(A, dtype=complex)
    if A.ndim != 2 or A.shape[0] != A.shape[1] or A.shape[0] < 1:
        raise ValueError(f"{name} must be a non-empty square matrix, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise ValueError(f"{name} has non-finite entries")
    return A


def check_density(rho, name="rho", tol=1e-10):
    """Validate a density matrix and return it symmetrized.

    Raises ``ValueError`` when ``rho`` is not Hermitian, has an eigenvalue
    below ``-tol`` or a trace further than ``tol`` from one.
    """
    rho = check_matrix(rho, name)
    if not is_hermitian(rho, 1e-10):
        raise ValueError(f"{name} is not Hermitian")
    rho = hermitize(rho)
    tr = np.trace(rho).real
    if abs(tr - 1.0) > tol:
        raise ValueError(f"{name} has trace {tr!r}, expected 1")
    lam = np.linalg.eigvalsh(rho)
    if lam[0] < -tol:
        raise ValueError(f"{name} has negative eigenvalue {lam[0]!r}")
    return rho


def eig_hermitian(A):
    """Eigendecomposition of a Hermitian matrix (or stack of them).

    Returns
    -------
    w : ndarray
        Real eigenvalues in ascending order.
    V : ndarray
        Orthonormal eigenvectors as columns, ``A = V diag(w) V*``.
    """
    A = hermitize(A)
    try:
        w, V = np.linalg.eigh(A)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"Hermitian eigensolver failed: {exc}", A) from exc
    return w, V


def herm_sqrt(A):
    """Positive square root of a PSD Hermitian matrix (stacks allowed).

    Eigenvalues in ``[-PSD_REJECT, 0)`` are clipped to zero before taking
    the root; anything more negative raises :class:`NotPSDError`.
    """
    w, V = eig_hermitian(A)
    if np.any(w < -PSD_REJECT):
        raise NotPSDError(f"matrix is not PSD (min eigenvalue {w.min()!r})")
    r = np.sqrt(np.clip(w, 0.0, None))
    return (V * r[..., None, :]) @ dagger(V)


def psd_factor(rho, rel_tol=1e-12):
    """Return ``W`` with ``rho = W W*``, dropping numerically null directions.

    Eigenvalues below ``rel_tol * max eigenvalue`` are treated as exact
    zeros, so a pure state yields a single column.
    """
    w, V = eig_hermitian(rho)
    if w[-1] <= 0:
        raise DegenerateStateError("matrix has no positive eigenvalue")
    if w[0] < -PSD_REJECT:
        raise NotPSDError(f"matrix is not PSD (min eigenvalue {w[0]!r})")
    keep = w > rel_tol * w[-1]
    return V[:, keep] * np.sqrt(w[keep])


def fidelity(rho, sigma):
    """Quantum fidelity ``tr(sqrt(sqrt(rho) sigma sqrt(rho)))**2``.

    Negative roundoff eigenvalues of the inner matrix are clipped at zero.
    """
    s = herm_sqrt(rho)
    w, _ = eig_hermitian(s @ sigma @ s)
    f = np.sum(np.sqrt(np.clip(w, 0.0, None)), axis=-1) ** 2
    return np.clip(f, 0.0, 1.0)


def fidelity_factors(A, B):
    """Fidelity of ``A A*`` and ``B B*`` given their (normalized) factors.

    Uses ``F = ||A* B||_tr**2``, which never takes the square root of a
    roundoff-sized eigenvalue; this keeps near-pure states accurate to
    machine precision. Stacks of factors are accepted.
    """
    sv = np.linalg.svd(dagger(A) @ B, compute_uv=False)
    return np.clip(np.sum(sv, axis=-1) ** 2, 0.0, 1.0)


def expm(A):
    """Matrix exponential (Pade scaling and squaring via SciPy)."""
    A = np.asarray(A)
    if not np.all(np.isfinite(A)):
        raise NumericalError("expm input has non-finite entries", A)
    with np.errstate(over="raise", invalid="raise"):
        try:
            E = scipy.linalg.expm(A)
        except FloatingPointError as exc:
            raise NumericalError(f"expm overflow: {exc}", A) from exc
    if not np.all(np.isfinite(E)):
        raise NumericalError("expm overflow", A)
    return E


def project_to_density(A):
    """Clip negative eigenvalues and renormalize the trace to one.

    A matrix that is already a valid density matrix is returned unchanged
    (up to Hermitian symmetrization).
    """
    A = hermitize(A)
    tr = np.trace(A).real
    if tr <= 1e-12:
        raise DegenerateStateError(f"trace {tr!r} too small to normalize")
    w, V = eig_hermitian(A)
    if w[0] >= 0 and abs(tr - 1.0) <= 1e-12:
        return A
    w = np.clip(w, 0.0, None)
    if w.sum() <= 1e-12:
        raise DegenerateStateError("no positive spectrum left after clipping")
    out = (V * w) @ dagger(V)
    return hermitize(out / np.trace(out).real)


def kernel_inclusion(rho_hat, rho, tol=1e-10):
    """Check ``ker rho_hat ⊆ ker rho`` and the domination constant.

    Returns
    -------
    holds : bool
        True when every (numerically) null eigenvector ``v`` of ``rho_hat``
        has ``<v|rho|v> <= tol``.
    c : float
        Smallest ``c`` with ``rho <= c rho_hat`` on the support of
        ``rho_hat``, i.e. the top eigenvalue of
        ``rho_hat^{+1/2} rho rho_hat^{+1/2}`` (pseudo-inverse root).
        ``inf`` when the inclusion fails.
    witness : ndarray or None
        An offending null eigenvector of ``rho_hat`` when ``holds`` is False.
    """
    w, V = eig_hermitian(rho_hat)
    null = w <= tol
    for idx in np.flatnonzero(null):
        v = V[:, idx]
        if np.vdot(v, rho @ v).real > tol:
            return False, float("inf"), v
    Vs = V[:, ~null]
    inv_root = Vs / np.sqrt(w[~null])
    inner = dagger(inv_root) @ rho @ inv_root
    c = float(np.linalg.eigvalsh(hermitize(inner))[-1]) if inner.size else 0.0
    return True, c, None


def trace_distance(a, b):
    """Half the trace norm of ``a - b`` (stacks allowed)."""
    w = np.linalg.eigvalsh(hermitize(np.asarray(a) - np.asarray(b)))
    return 0.5 * np.sum(np.abs(w), axis=-1)

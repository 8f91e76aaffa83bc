"""Fixed-point structure of a Lindbladian and the stability assumptions.

Kernels are computed on the real vector space of Hermitian matrices (the
generators preserve Hermiticity), with an orthonormal basis aligned to the
matrix entries. Null spaces come from an SVD and are then brought to reduced
row echelon form, which makes the returned bases canonical: the same model
always gives the same basis, aligned with the computational basis whenever
the structure allows it.
"""

from dataclasses import dataclass, field
from enum import Enum
import math
from typing import NamedTuple
import warnings

import numpy as np

from .linalg import dagger, eig_hermitian, hermitize
from .model import (
    adjoint_lindbladian,
    apply_adjoint_lindbladian,
    apply_lindbladian,
    lindbladian,
    unvec,
    vec,
)

KERNEL_TOL = 1e-9
KERNEL_GAP = 10.0


class StructureError(ArithmeticError):
    """The fixed-point structure could not be resolved consistently."""


class UnsupportedModelError(ValueError):
    """The model has a non-trivial decaying subspace.

    ``report`` holds whatever was computed before the rejection.
    """

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class AmbiguousKernelWarning(UserWarning):
    pass


class Verdict(str, Enum):
    HOLDS = "Holds"
    FAILS = "Fails"
    UNKNOWN = "Unknown"


def hermitian_basis(k):
    """Orthonormal basis of Hermitian k x k matrices as columns of vec's."""
    cols = []
    s = 1 / math.sqrt(2)
    for i in range(k):
        for j in range(k):
            E = np.zeros((k, k), dtype=complex)
            if i == j:
                E[i, i] = 1
            elif i < j:
                E[i, j] = E[j, i] = s
            else:
                E[i, j] = 1j * s
                E[j, i] = -1j * s
            cols.append(vec(E))
    return np.stack(cols, axis=1)


def _real_rep(matrix, k):
    T = hermitian_basis(k)
    R = dagger(T) @ matrix @ T
    if np.max(np.abs(R.imag), initial=0.0) > 1e-9 * max(1.0, np.max(np.abs(R))):
        raise StructureError("superoperator does not preserve Hermiticity")
    return R.real, T


def _to_herm(coords, T, k):
    return hermitize(unvec(T @ coords, k))


def _rref(rows, tol=1e-10):
    """Reduced row echelon form of a full-row-rank real matrix."""
    X = np.array(rows, dtype=float)
    m, n = X.shape
    r = 0
    for c in range(n):
        if r == m:
            break
        piv = r + int(np.argmax(np.abs(X[r:, c])))
        if abs(X[piv, c]) <= tol:
            continue
        X[[r, piv]] = X[[piv, r]]
        X[r] /= X[r, c]
        for i in range(m):
            if i != r:
                X[i] -= X[i, c] * X[r]
        r += 1
    X[np.abs(X) < 1e-14] = 0.0
    return X[:r]


class _Kernel(NamedTuple):
    coords: np.ndarray  # (N, m) canonical basis, columns
    ambiguous: bool
    singular_values: np.ndarray


def _null(R, tol=KERNEL_TOL, gap=KERNEL_GAP):
    U, s, Vt = np.linalg.svd(R)
    scale = max(1.0, s[0]) if s.size else 1.0
    thr = tol * scale
    m = int(np.sum(s <= thr))
    ambiguous = False
    if m < len(s):
        nxt = s[len(s) - m - 1]
        ambiguous = nxt < gap * thr
    N = Vt[len(s) - m :].T
    return N, ambiguous, s


def _kernel(matrix, k):
    R, T = _real_rep(matrix, k)
    N, ambiguous, s = _null(R)
    if N.shape[1]:
        N = _rref(N.T).T
    return _Kernel(N, ambiguous, s), T


def _herm_list(coords, T, k):
    out = []
    for c in coords.T:
        A = _to_herm(c, T, k)
        out.append(A / np.linalg.norm(A))
    return out


def fixed_points(spec):
    """Hermitian basis of the kernel of the Lindbladian."""
    ker, T = _kernel(lindbladian(spec).matrix, spec.dim)
    if ker.ambiguous:
        warnings.warn("kernel of the Lindbladian is not well separated", AmbiguousKernelWarning)
    return _herm_list(ker.coords, T, spec.dim)


def conserved_observables(spec):
    """Hermitian basis of the kernel of the adjoint (Heisenberg) generator."""
    ker, T = _kernel(adjoint_lindbladian(spec).matrix, spec.dim)
    if ker.ambiguous:
        warnings.warn("kernel of the adjoint generator is not well separated", AmbiguousKernelWarning)
    return _herm_list(ker.coords, T, spec.dim)


def liouvillian_spectrum(spec):
    """Eigenvalues of the Lindbladian, sorted by real part (descending) then imaginary part."""
    ev = lindbladian(spec).eigenvalues()
    order = np.lexsort((ev.imag, -ev.real))
    return ev[order]


def zero_projector(spec):
    """Spectral projector onto the kernel of the Lindbladian, as a function.

    Applied to a state it gives the time average ``lim (1/t) int exp(sL) rho ds``.
    """
    k = spec.dim
    R, T = _real_rep(lindbladian(spec).matrix, k)
    right, _, _ = _null(R)
    left, _, _ = _null(R.T)
    if right.shape[1] != left.shape[1]:
        raise StructureError("left and right kernels of the Lindbladian differ in dimension")
    G = left.T @ right
    if np.linalg.cond(G) > 1e10:
        raise StructureError("zero eigenvalue of the Lindbladian is not semisimple")
    P = right @ np.linalg.solve(G, left.T)

    def project(rho):
        c = (dagger(T) @ vec(np.asarray(rho, dtype=complex))).real
        return _to_herm(P @ c, T, k)

    return project


def check_spectral(spec, tol=1e-9):
    """True iff the Lindbladian has no non-zero purely imaginary eigenvalue."""
    ev = lindbladian(spec).eigenvalues()
    bad = (np.abs(ev.real) <= tol) & (np.abs(ev.imag) > tol)
    return not bool(np.any(bad))


def decaying_subspace(spec, tol=1e-9):
    """Orthogonal projector onto the decaying subspace.

    The subspace is the kernel of the time-averaged evolution of ``I/k``,
    whose support is the span of the supports of all invariant states.
    """
    k = spec.dim
    if not check_spectral(spec):
        warnings.warn(
            "Lindbladian has purely imaginary eigenvalues; using the time-averaged (zero-mode) projection",
            RuntimeWarning,
        )
    bar = zero_projector(spec)(np.eye(k) / k)
    w, V = eig_hermitian(bar)
    null = V[:, w <= tol]
    return null @ dagger(null)


class Enclosures(NamedTuple):
    projectors: list
    states: list
    unique: bool


def _clusters(w, tol):
    groups = [[0]]
    for i in range(1, len(w)):
        if w[i] - w[i - 1] > tol:
            groups.append([i])
        else:
            groups[-1].append(i)
    return groups


def _split_minimal(basis, k, tol=1e-8):
    """Minimal projections of the algebra spanned by ``basis``.

    Starts from the identity and repeatedly splits a projection ``P`` by the
    spectral projections of ``P B P`` for the first basis element ``B`` whose
    compression is not a multiple of ``P``.
    """
    done = []
    todo = [np.eye(k, dtype=complex)]
    while todo:
        V = todo.pop(0)
        d = V.shape[1]
        split = None
        if d > 1:
            for B in basis:
                Y = hermitize(dagger(V) @ B @ V)
                off = Y - np.trace(Y).real / d * np.eye(d)
                if np.linalg.norm(off) > tol * max(1.0, np.linalg.norm(B)):
                    split = Y
                    break
        if split is None:
            done.append(V)
            continue
        w, U = eig_hermitian(split)
        scale = max(1.0, np.max(np.abs(w)))
        for g in _clusters(w, 1e-7 * scale):
            todo.append(V @ U[:, g])
    # order enclosures by their first basis vector's leading coordinate
    keyed = sorted(done, key=lambda V: tuple(np.argmax(np.abs(V) > 1e-8, axis=0).tolist()))
    return keyed


def _restricted_kernel_dim(spec, V):
    """Dimension of the fixed-point space of the model compressed to range(V)."""
    d = V.shape[1]
    cols = []
    for idx in range(d * d):
        E = np.zeros((d, d), dtype=complex)
        E.flat[idx] = 1
        cols.append(vec(dagger(V) @ apply_lindbladian(spec, V @ E @ dagger(V)) @ V))
    R, _ = _real_rep(np.stack(cols, axis=1), d)
    N, _, _ = _null(R)
    return N.shape[1]


def minimal_enclosures(spec, tol=1e-9):
    """Minimal enclosures and their invariant states.

    Returns :class:`Enclosures` with orthogonal projectors onto the supports,
    the invariant states on them, and whether the decomposition is unique
    (it is not when invariant states exist with support straddling blocks).
    """
    k = spec.dim
    D = decaying_subspace(spec, tol)
    if np.trace(D).real > 0.5:
        raise UnsupportedModelError(f"decaying subspace has dimension {round(np.trace(D).real)}")
    basis = conserved_observables(spec)
    blocks = _split_minimal(basis, k)
    project = zero_projector(spec)
    projectors, states = [], []
    for V in blocks:
        P = V @ dagger(V)
        if np.linalg.norm(apply_adjoint_lindbladian(spec, P)) > 1e-8:
            raise StructureError("enclosure projector is not conserved; decomposition is not unique")
        rho = project(P / np.trace(P).real)
        rho = hermitize(rho / np.trace(rho).real)
        if np.linalg.norm(apply_lindbladian(spec, rho)) > 1e-9:
            raise StructureError("invariant state on enclosure is not stationary")
        inside = np.linalg.eigvalsh(hermitize(dagger(V) @ rho @ V))
        if inside[0] <= tol or np.linalg.norm(rho - P @ rho @ P) > 1e-8:
            raise StructureError("invariant state is not faithful on its enclosure")
        if _restricted_kernel_dim(spec, V) != 1:
            raise StructureError("enclosure is not minimal")
        projectors.append(hermitize(P))
        states.append(rho)
    n_fixed = len(fixed_points(spec))
    return Enclosures(projectors, states, n_fixed == len(blocks))


def dual_projectors(spec, enclosures):
    """Conserved observables ``M_i`` with ``tr(M_k rho_i) = delta_ki``.

    Takes the minimum-norm combination of an orthonormal basis of the
    adjoint kernel satisfying the biorthogonality, then checks that the
    result is a resolution of the identity into orthogonal projectors.
    """
    k = spec.dim
    ker, T = _kernel(adjoint_lindbladian(spec).matrix, k)
    Q, _ = np.linalg.qr(ker.coords)
    basis = [_to_herm(c, T, k) for c in Q.T]
    states = enclosures.states
    G = np.array([[np.trace(B @ rho).real for B in basis] for rho in states])
    K = len(states)
    cond = np.linalg.cond(G) if G.size else math.inf
    if np.linalg.matrix_rank(G, tol=1e-10) < K or cond > 1e10:
        raise StructureError(f"biorthogonal system is singular (condition number {cond:.3g})")
    coef = np.linalg.pinv(G)
    Ms = [hermitize(sum(coef[l, i] * basis[l] for l in range(len(basis)))) for i in range(K)]
    total = sum(Ms)
    if np.max(np.abs(total - np.eye(k))) > 1e-8:
        raise StructureError("dual projectors do not sum to the identity")
    for i, M in enumerate(Ms):
        if np.max(np.abs(M @ M - M)) > 1e-7:
            raise StructureError(f"dual operator {i} is not an orthogonal projector")
    return Ms


def channel_statistics(spec, rho):
    """``tr((L_i + L_i*) rho)`` for diffusive channels then ``tr(C_j rho C_j*)`` for jumps."""
    stats = [np.trace((L + dagger(L)) @ rho).real for L in spec.diffusive]
    stats += [np.trace(C @ rho @ dagger(C)).real for C in spec.jumps]
    return np.array(stats)


def channel_labels(spec):
    return [f"diffusive_{i + 1}" for i in range(spec.n_diffusive)] + [
        f"jump_{j + 1}" for j in range(spec.n_jumps)
    ]


def check_identifiability(spec, states, tol=1e-6):
    """Whether every pair of minimal invariant states is told apart by some channel.

    Returns ``(identifiable, table)`` where ``table[u]`` holds the channel
    statistics of state ``u``.
    """
    table = np.array([channel_statistics(spec, rho) for rho in states])
    ok = True
    for u in range(len(states)):
        for v in range(u + 1, len(states)):
            if not np.any(np.abs(table[u] - table[v]) > tol):
                ok = False
    return ok, table


def _family(spec):
    return [hermitize(L + dagger(L)) for L in spec.diffusive] + [
        hermitize(dagger(C) @ C) for C in spec.jumps
    ]


def _is_scalar(A, tol):
    d = A.shape[0]
    return np.linalg.norm(A - np.trace(A).real / d * np.eye(d)) <= tol


def scalar_compression_subspaces(spec, tol=1e-8):
    """Subspaces of dimension >= 2 on which every measured observable compresses to a scalar.

    Refines the whole space by eigenspaces of compressions until stable. Any
    subspace returned violates purification (sound); an empty result proves
    nothing for dimension > 2.
    """
    family = _family(spec)
    k = spec.dim
    todo = [np.eye(k, dtype=complex)]
    found = []
    while todo:
        V = todo.pop()
        d = V.shape[1]
        if d < 2:
            continue
        for A in family:
            Y = hermitize(dagger(V) @ A @ V)
            if not _is_scalar(Y, tol * max(1.0, np.linalg.norm(A))):
                w, U = eig_hermitian(Y)
                scale = max(1.0, np.max(np.abs(w)))
                todo.extend(V @ U[:, g] for g in _clusters(w, 1e-7 * scale))
                break
        else:
            found.append(V @ dagger(V))
    return found


def _mc_rank_one(spec, n_traj, horizon, seed):
    from .sde import SimConfig, simulate_pairs

    worst = max([1.0] + [np.linalg.eigvalsh(dagger(C) @ C)[-1] for C in spec.jumps])
    dt = min(1e-2, 0.05 / worst)
    steps = max(1, int(math.ceil(horizon / dt)))
    cfg = SimConfig(dt=dt, horizon=steps * dt, seed=seed)
    chaos = np.eye(spec.dim) / spec.dim
    batch = simulate_pairs(spec, chaos, chaos, cfg, range(n_traj), workers=1)
    S = batch.propagator[~batch.failed]
    M = dagger(S) @ S
    M /= np.trace(M, axis1=-2, axis2=-1).real[:, None, None]
    second = np.linalg.eigvalsh(hermitize(M))[:, -2]
    return bool(np.all(second < 1e-4)), float(second.max())


def check_purification(spec, method="auto", tol=1e-8, n_traj=32, horizon=20.0, seed=0):
    """Verdict on the purification assumption, with a witness description.

    Qubits are decided exactly: purification fails iff every ``L_i + L_i*``
    and every ``C_j* C_j`` is a multiple of the identity. For larger
    dimension an algebraic search for scalar-compression subspaces is
    combined with a Monte Carlo check that ``M_T`` becomes rank one.
    """
    family = _family(spec)
    if spec.dim == 2:
        if all(_is_scalar(A, tol * max(1.0, np.linalg.norm(A))) for A in family):
            return Verdict.FAILS, "all measured observables are multiples of the identity"
        return Verdict.HOLDS, "some measured observable is not a multiple of the identity"
    if method not in ("auto", "algebraic", "montecarlo"):
        raise ValueError(f"unknown purification method {method!r}")
    found = scalar_compression_subspaces(spec, tol) if method != "montecarlo" else []
    if method == "algebraic":
        if found:
            rank = int(round(np.trace(found[0]).real))
            return Verdict.FAILS, f"rank-{rank} subspace with scalar compressions"
        return Verdict.UNKNOWN, "no scalar-compression subspace found"
    rank_one, second = _mc_rank_one(spec, n_traj, horizon, seed)
    mc = f"largest second eigenvalue of M_T over {n_traj} paths: {second:.3g}"
    if found:
        rank = int(round(np.trace(found[0]).real))
        if rank_one:
            return Verdict.UNKNOWN, f"rank-{rank} scalar-compression subspace but {mc}"
        return Verdict.FAILS, f"rank-{rank} subspace with scalar compressions; {mc}"
    if rank_one:
        return Verdict.HOLDS, mc
    return Verdict.UNKNOWN, f"no scalar-compression subspace found; {mc}"


@dataclass
class StructureReport:
    dim: int
    fixed_point_basis: list
    invariant_states: list
    enclosures: list
    dual_projectors: list
    liouvillian_spectrum: np.ndarray
    decaying_projector: np.ndarray
    spectral_ok: bool
    identifiable: bool
    identifiability_table: np.ndarray
    channel_labels: list
    purification: Verdict
    purification_witness: str
    unique_decomposition: bool
    notes: list = field(default_factory=list)

    @property
    def n_enclosures(self):
        return len(self.enclosures)


def analyze(spec, purification_method="auto", seed=0):
    """Full structure report for a model.

    Raises :class:`UnsupportedModelError` (with a partial report attached)
    when the decaying subspace is non-trivial.
    """
    notes = []
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        spectrum = liouvillian_spectrum(spec)
        spectral = check_spectral(spec)
        basis = fixed_points(spec)
        D = decaying_subspace(spec)
        purification, witness = check_purification(spec, purification_method, seed=seed)
        report = StructureReport(
            dim=spec.dim,
            fixed_point_basis=basis,
            invariant_states=[],
            enclosures=[],
            dual_projectors=[],
            liouvillian_spectrum=spectrum,
            decaying_projector=D,
            spectral_ok=spectral,
            identifiable=False,
            identifiability_table=np.zeros((0, spec.n_diffusive + spec.n_jumps)),
            channel_labels=channel_labels(spec),
            purification=purification,
            purification_witness=witness,
            unique_decomposition=False,
            notes=notes,
        )
        if np.trace(D).real > 0.5:
            notes.extend(dict.fromkeys(str(w.message) for w in caught))
            raise UnsupportedModelError(
                f"decaying subspace has dimension {round(np.trace(D).real)}", report
            )
        enc = minimal_enclosures(spec)
        report.enclosures = enc.projectors
        report.invariant_states = enc.states
        report.unique_decomposition = enc.unique
        report.dual_projectors = dual_projectors(spec, enc)
        report.identifiable, report.identifiability_table = check_identifiability(spec, enc.states)
    notes.extend(dict.fromkeys(str(w.message) for w in caught))
    if not enc.unique:
        notes.append(
            f"enclosure decomposition is not unique: {len(basis)} independent invariant "
            f"matrices for {len(enc.projectors)} enclosures"
        )
        warnings.warn(notes[-1], UserWarning, stacklevel=2)
    return report

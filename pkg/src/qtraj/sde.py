"""Jump-diffusion integration of a true trajectory and its estimated filter.

Both states are carried by one propagator ``S_t``, Euler-stepped from the
linear SDE

    dS = (K + m/2) S dt + sum_i L_i S dW_i + sum_j (C_j - I) S dN_j,

and the states are recovered by normalized congruence, ``rho_t = S rho S* /
tr(...)``. Internally each state is stored as a Gram factor ``A`` with
``rho_t = A A*`` (``A = S W`` for ``rho = W W*``), which keeps the states
exactly positive and the fidelity computation free of square roots of
roundoff.

Under the physical measure of the true state the diffusive increments are
``dW = dW~ + tr((L + L*) rho_t) dt`` with ``dW~`` Gaussian, and channel ``j``
jumps during a step with probability ``1 - exp(-tr(C_j rho_t C_j*) dt)``.
Under the reference measure ``dW`` is Gaussian and every channel is a unit
rate Poisson process.

Every trajectory draws from its own Philox stream keyed by ``(seed,
index)``; per step it consumes ``p + m`` uniforms, diffusive channels first.
Results therefore do not depend on how trajectories are batched or spread
over worker processes.
"""

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
import math
import os

import numpy as np
from scipy.special import ndtri

from .linalg import (
    dagger,
    fidelity_factors,
    herm_sqrt,
    kernel_inclusion,
    psd_factor,
    trace_distance,
)
from .model import drift_K

PHYSICAL = "physical"
REFERENCE = "reference"

# one uniform per channel per step, chunked to bound memory
_DRAW_BUDGET = 1 << 22
_DEATH = 1e-300


class StepSizeError(ValueError):
    """``intensity * dt`` exceeds the configured jump-probability cap."""


class KernelInclusionError(ValueError):
    """The estimated initial state does not dominate the true one."""

    def __init__(self, message, witness=None):
        super().__init__(message)
        self.witness = witness


class TrajectoryError(ArithmeticError):
    """A trajectory died (normalization trace underflow) or degenerated."""

    def __init__(self, message, time=None, index=None):
        super().__init__(message)
        self.time = time
        self.index = index


@dataclass(frozen=True)
class SimConfig:
    dt: float
    horizon: float
    seed: int = 0
    max_jump_prob: float = 0.1
    renorm_every: int = 1

    def __post_init__(self):
        if not (self.dt > 0 and math.isfinite(self.dt)):
            raise ValueError("dt must be positive")
        if not (self.horizon > 0 and math.isfinite(self.horizon)):
            raise ValueError("horizon must be positive")
        if self.dt > self.horizon:
            raise ValueError("dt must not exceed horizon")
        if not 0 < self.max_jump_prob <= 0.1:
            raise ValueError("max_jump_prob must lie in (0, 0.1]")
        if int(self.renorm_every) != self.renorm_every or self.renorm_every < 1:
            raise ValueError("renorm_every must be a positive integer")
        if int(self.seed) != self.seed or not 0 <= self.seed < 2**64:
            raise ValueError("seed must be an integer in [0, 2**64)")
        n = self.horizon / self.dt
        if abs(n - round(n)) > 1e-9 * max(1.0, n):
            raise ValueError("horizon must be an integer multiple of dt")

    @property
    def n_steps(self):
        return int(round(self.horizon / self.dt))


def trajectory_rng(seed, index):
    """Counter-based generator for trajectory ``index`` of a run."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(int(index),))))


def check_step_size(spec, cfg, measure=PHYSICAL):
    """Reject step sizes where a jump probability per step could exceed the cap."""
    if not spec.jumps:
        return
    if measure == REFERENCE:
        worst = 1.0
    else:
        worst = max(np.linalg.eigvalsh(dagger(C) @ C)[-1] for C in spec.jumps)
    if worst * cfg.dt > cfg.max_jump_prob:
        raise StepSizeError(
            f"max jump intensity {worst:.6g} times dt={cfg.dt:.6g} exceeds "
            f"max_jump_prob={cfg.max_jump_prob}"
        )


def sample_steps(cfg, times):
    """Map sample times onto step indices of the integration grid."""
    out = []
    for t in times:
        i = int(round(t / cfg.dt))
        if t < 0 or i > cfg.n_steps or abs(i * cfg.dt - t) > 1e-9 * max(1.0, abs(t)):
            raise ValueError(f"sample time {t!r} is not on the step grid of [0, {cfg.horizon}]")
        out.append(i)
    if any(b <= a for a, b in zip(out, out[1:])):
        raise ValueError("sample times must be strictly ascending")
    return np.array(out, dtype=np.int64)


@dataclass
class PairState:
    """Coupled state of one trajectory and its estimated filter."""

    propagator: np.ndarray
    log_norm: float
    rho_factor: np.ndarray
    rho_hat_factor: np.ndarray
    jump_counts: np.ndarray
    time: float = 0.0

    @classmethod
    def initial(cls, rho0, rho_hat0, n_jumps):
        k = np.shape(rho0)[0]
        return cls(
            propagator=np.eye(k, dtype=complex) / math.sqrt(k),
            log_norm=0.5 * math.log(k),
            rho_factor=psd_factor(rho0),
            rho_hat_factor=psd_factor(rho_hat0),
            jump_counts=np.zeros(n_jumps, dtype=np.int64),
        )

    @property
    def rho(self):
        A = self.rho_factor
        return A @ dagger(A) / np.vdot(A, A).real

    @property
    def rho_hat(self):
        A = self.rho_hat_factor
        return A @ dagger(A) / np.vdot(A, A).real

    @property
    def S(self):
        """The unnormalized propagator ``exp(log_norm) * propagator``."""
        return math.exp(self.log_norm) * self.propagator


def derive_M(state):
    """``M_t = S* S / tr(S* S)``."""
    S = state.propagator
    M = dagger(S) @ S
    M = 0.5 * (M + dagger(M))
    return M / np.trace(M).real


def _via_M_factors(M, W, What):
    """Normalized factors of ``sqrt(M) rho sqrt(M)`` and the same for rho_hat."""
    R = herm_sqrt(M)
    X = R @ W
    Y = R @ What
    nx = np.sum(np.abs(X) ** 2, axis=(-2, -1))
    ny = np.sum(np.abs(Y) ** 2, axis=(-2, -1))
    return X, Y, nx, ny


def fidelity_via_M(state, rho0, rho_hat0):
    """Fidelity of the two filters computed from ``M_t`` and the initial states only."""
    M = derive_M(state)
    X, Y, nx, ny = _via_M_factors(M, psd_factor(rho0), psd_factor(rho_hat0))
    if ny <= 1e-14:
        raise TrajectoryError("tr(M_t rho_hat) vanished", time=state.time)
    return float(fidelity_factors(X / math.sqrt(nx), Y / math.sqrt(ny)))


class _Integrator:
    """Vectorized Euler stepping of a batch of propagators."""

    def __init__(self, spec, cfg, measure=PHYSICAL):
        if measure not in (PHYSICAL, REFERENCE):
            raise ValueError(f"unknown measure {measure!r}")
        self.spec = spec
        self.cfg = cfg
        self.measure = measure
        k = spec.dim
        self.k = k
        self.p = spec.n_diffusive
        self.m = spec.n_jumps
        eye = np.eye(k, dtype=complex)
        base = (drift_K(spec) + 0.5 * self.m * eye) * cfg.dt
        self.ops = np.stack([base, *spec.diffusive, *(C - eye for C in spec.jumps)])
        self.eye = eye
        # tr(O rho) = vec(O.T) . vec(rho); flattened for BLAS products
        self.ops_flat = self.ops.reshape(len(self.ops), k * k)
        self.drift_obs = (
            np.stack([(L + dagger(L)).T for L in spec.diffusive]).reshape(self.p, k * k).T if self.p else None
        )
        self.rate_obs = np.stack([(dagger(C) @ C).T for C in spec.jumps]).reshape(self.m, k * k).T if self.m else None
        self.sqrt_dt = math.sqrt(cfg.dt)

    def increments(self, u, rho):
        """Build the one-step multipliers ``G`` and jump indicators from uniforms."""
        cfg = self.cfg
        B = u.shape[0]
        coef = np.empty((B, 1 + self.p + self.m))
        coef[:, 0] = 1.0
        if self.p:
            dW = self.sqrt_dt * ndtri(u[:, : self.p] + 2.0**-54)
            if self.measure == PHYSICAL:
                drift = (rho.reshape(B, -1) @ self.drift_obs).real
                dW = dW + drift * cfg.dt
            coef[:, 1 : 1 + self.p] = dW
        jumps = None
        if self.m:
            if self.measure == PHYSICAL:
                lam = (rho.reshape(B, -1) @ self.rate_obs).real
                lam = np.clip(lam, 0.0, None)
                if np.any(lam * cfg.dt > cfg.max_jump_prob):
                    raise StepSizeError(
                        f"jump intensity {lam.max():.6g} times dt exceeds max_jump_prob"
                    )
                prob = -np.expm1(-lam * cfg.dt)
            else:
                prob = -math.expm1(-cfg.dt)
            jumps = u[:, self.p :] < prob
            coef[:, 1 + self.p :] = jumps
        G = (coef @ self.ops_flat).reshape(B, self.k, self.k) + self.eye
        return G, jumps


def _sq_norm(A):
    return np.sum(A.real**2 + A.imag**2, axis=(-2, -1))


class _Draws:
    """Chunked per-trajectory uniform draws."""

    def __init__(self, seed, indices, width, n_steps):
        self.gens = [trajectory_rng(seed, i) for i in indices]
        self.width = width
        self.n_steps = n_steps
        self.chunk = max(1, min(n_steps, _DRAW_BUDGET // max(1, len(indices) * width)))
        self.buf = None
        self.pos = 0
        self.start = 0

    def __call__(self, step):
        if self.buf is None or step - self.start >= self.buf.shape[1]:
            n = min(self.chunk, self.n_steps - step)
            self.buf = np.stack([g.random((n, self.width)) for g in self.gens])
            self.start = step
        return self.buf[:, step - self.start]


@dataclass
class PathRecord:
    """Sampled time series of one trajectory and its estimated filter."""

    index: int
    times: np.ndarray
    fidelity: np.ndarray
    fidelity_via_M: np.ndarray
    q_rho: np.ndarray
    q_rho_hat: np.ndarray
    cesaro_rho: np.ndarray
    cesaro_rho_hat: np.ndarray
    jump_counts: np.ndarray
    jump_times: list
    final: PairState

    @property
    def cesaro_distance(self):
        return trace_distance(self.cesaro_rho, self.cesaro_rho_hat)


@dataclass
class PathBatch:
    """Sampled series for many trajectories, stacked along axis 0.

    ``q_rho``/``q_rho_hat`` are ``None`` when no dual projectors were given.
    Failed trajectories keep the values of their last good step; use
    ``failed`` to exclude them.
    """

    indices: np.ndarray
    times: np.ndarray
    fidelity: np.ndarray
    fidelity_via_M: np.ndarray
    q_rho: object
    q_rho_hat: object
    rho: np.ndarray
    cesaro_rho: np.ndarray
    cesaro_rho_hat: np.ndarray
    jump_counts: np.ndarray
    jump_times: list
    propagator: np.ndarray
    log_norm: np.ndarray
    rho_factor: np.ndarray
    rho_hat_factor: np.ndarray
    failed: np.ndarray
    fail_time: np.ndarray
    fail_reason: list = field(default_factory=list)

    def __len__(self):
        return len(self.indices)

    def record(self, b):
        """Per-trajectory view of row ``b``."""
        final = PairState(
            propagator=self.propagator[b],
            log_norm=float(self.log_norm[b]),
            rho_factor=self.rho_factor[b],
            rho_hat_factor=self.rho_hat_factor[b],
            jump_counts=self.jump_counts[b, -1].copy(),
            time=float(self.times[-1]),
        )
        return PathRecord(
            index=int(self.indices[b]),
            times=self.times,
            fidelity=self.fidelity[b],
            fidelity_via_M=self.fidelity_via_M[b],
            q_rho=None if self.q_rho is None else self.q_rho[b],
            q_rho_hat=None if self.q_rho_hat is None else self.q_rho_hat[b],
            cesaro_rho=self.cesaro_rho[b],
            cesaro_rho_hat=self.cesaro_rho_hat[b],
            jump_counts=self.jump_counts[b],
            jump_times=self.jump_times[b],
            final=final,
        )

    def cesaro_distance(self):
        return trace_distance(self.cesaro_rho, self.cesaro_rho_hat)

    @classmethod
    def concat(cls, parts):
        if len(parts) == 1:
            return parts[0]

        def cat(name):
            vals = [getattr(p, name) for p in parts]
            return None if vals[0] is None else np.concatenate(vals)

        return cls(
            indices=cat("indices"),
            times=parts[0].times,
            fidelity=cat("fidelity"),
            fidelity_via_M=cat("fidelity_via_M"),
            q_rho=cat("q_rho"),
            q_rho_hat=cat("q_rho_hat"),
            rho=cat("rho"),
            cesaro_rho=cat("cesaro_rho"),
            cesaro_rho_hat=cat("cesaro_rho_hat"),
            jump_counts=cat("jump_counts"),
            jump_times=[jt for p in parts for jt in p.jump_times],
            propagator=cat("propagator"),
            log_norm=cat("log_norm"),
            rho_factor=cat("rho_factor"),
            rho_hat_factor=cat("rho_hat_factor"),
            failed=cat("failed"),
            fail_time=cat("fail_time"),
            fail_reason=[r for p in parts for r in p.fail_reason],
        )


def step(spec, state, cfg, rng, measure=PHYSICAL):
    """Advance one trajectory by ``cfg.dt``.

    ``rng`` supplies ``p + m`` uniforms through ``rng.random``.
    """
    integ = _Integrator(spec, cfg, measure)
    u = np.asarray(rng.random(integ.p + integ.m), dtype=float)[None, :]
    A = state.rho_factor[None]
    rho = A @ dagger(A) / _sq_norm(A)[:, None, None]
    G, jumps = integ.increments(u, rho)
    S = (G @ state.propagator[None])[0]
    A = (G @ A)[0]
    Ah = (G @ state.rho_hat_factor[None])[0]
    nS = math.sqrt(_sq_norm(S))
    ta, th = _sq_norm(A), _sq_norm(Ah)
    if nS == 0 or ta <= _DEATH or th <= _DEATH:
        raise TrajectoryError("normalization trace underflow", time=state.time + cfg.dt)
    counts = state.jump_counts.copy()
    if jumps is not None:
        counts = counts + jumps[0]
    return PairState(
        propagator=S / nS,
        log_norm=state.log_norm + math.log(nS),
        rho_factor=A / math.sqrt(ta),
        rho_hat_factor=Ah / math.sqrt(th),
        jump_counts=counts,
        time=state.time + cfg.dt,
    )


def _integrate_pairs(spec, rho0, rho_hat0, cfg, indices, steps, dualprojs):
    indices = np.asarray(indices, dtype=np.int64)
    B = len(indices)
    k = spec.dim
    dt = cfg.dt
    integ = _Integrator(spec, cfg, PHYSICAL)
    p, m = integ.p, integ.m
    W = psd_factor(rho0)
    What = psd_factor(rho_hat0)
    r, rh = W.shape[1], What.shape[1]
    rho0 = W @ dagger(W)
    rho_hat0 = What @ dagger(What)
    T = len(steps)
    K = 0 if dualprojs is None else len(dualprojs)
    Mproj = None if dualprojs is None else np.stack(dualprojs)

    # columns: propagator | factor of rho | factor of rho_hat
    X = np.empty((B, k, k + r + rh), dtype=complex)
    X[:, :, :k] = np.eye(k) / math.sqrt(k)
    X[:, :, k : k + r] = W
    X[:, :, k + r :] = What
    seg = np.array([0, k, k + r])
    log_norm = np.full(B, 0.5 * math.log(k))
    rho = np.broadcast_to(rho0, (B, k, k)).copy()
    rho_hat = np.broadcast_to(rho_hat0, (B, k, k)).copy()
    # running sums of rho_1..rho_n for the trapezoid rule
    ssum = np.zeros((B, k, k), dtype=complex)
    ssum_hat = np.zeros((B, k, k), dtype=complex)
    counts = np.zeros((B, m), dtype=np.int64)
    failed = np.zeros(B, dtype=bool)
    fail_time = np.full(B, np.nan)
    fail_reason = [""] * B
    events = []

    out_F = np.empty((B, T))
    out_FM = np.empty((B, T))
    out_q = np.empty((B, T, K)) if K else None
    out_qh = np.empty((B, T, K)) if K else None
    out_rho = np.empty((B, T, k, k), dtype=complex)
    out_ces = np.empty((B, T, k, k), dtype=complex)
    out_ces_h = np.empty((B, T, k, k), dtype=complex)
    out_counts = np.empty((B, T, m), dtype=np.int64)

    def fail(mask, t, reason):
        for b in np.flatnonzero(mask):
            failed[b] = True
            fail_time[b] = t
            fail_reason[b] = reason

    def record(slot, n):
        S, A, Ah = X[:, :, :k], X[:, :, k : k + r], X[:, :, k + r :]
        out_F[:, slot] = fidelity_factors(A, Ah)
        M = dagger(S) @ S
        M = 0.5 * (M + dagger(M))
        M /= np.trace(M, axis1=-2, axis2=-1).real[:, None, None]
        Y, Yh, ny, nyh = _via_M_factors(M, W, What)
        bad = (nyh <= 1e-14) & ~failed
        if np.any(bad):
            fail(bad, n * dt, "tr(M_t rho_hat) vanished")
        ny = np.where(ny > 0, ny, 1.0)
        nyh = np.where(nyh > 0, nyh, 1.0)
        out_FM[:, slot] = fidelity_factors(Y / np.sqrt(ny)[:, None, None], Yh / np.sqrt(nyh)[:, None, None])
        if K:
            out_q[:, slot] = np.einsum("kij,bji->bk", Mproj, rho).real
            out_qh[:, slot] = np.einsum("kij,bji->bk", Mproj, rho_hat).real
        out_rho[:, slot] = rho
        if n == 0:
            out_ces[:, slot] = rho0
            out_ces_h[:, slot] = rho_hat0
        else:
            t = n * dt
            out_ces[:, slot] = dt * (0.5 * rho0 + ssum - 0.5 * rho) / t
            out_ces_h[:, slot] = dt * (0.5 * rho_hat0 + ssum_hat - 0.5 * rho_hat) / t
        out_counts[:, slot] = counts

    slot = 0
    if T and steps[0] == 0:
        record(0, 0)
        slot = 1
    draws = _Draws(cfg.seed, indices, p + m, cfg.n_steps)
    renorm = cfg.renorm_every
    for n in range(cfg.n_steps):
        G, jumps = integ.increments(draws(n), rho)
        X_new = G @ X
        norms = np.add.reduceat(np.sum(X_new.real**2 + X_new.imag**2, axis=1), seg, axis=1)
        ta, th = norms[:, 1], norms[:, 2]
        ok = (ta > _DEATH) & (th > _DEATH) & np.isfinite(ta) & np.isfinite(th)
        any_bad = not ok.all() or failed.any()
        if any_bad:
            newly = ~ok & ~failed
            if np.any(newly):
                fail(newly, (n + 1) * dt, "normalization trace underflow")
            norms[failed] = 1.0
        scale = np.empty((B, k + r + rh))
        scale[:, k : k + r] = np.sqrt(norms[:, 1:2])
        scale[:, k + r :] = np.sqrt(norms[:, 2:3])
        if (n + 1) % renorm == 0:
            nS = np.sqrt(norms[:, 0])
            scale[:, :k] = nS[:, None]
            if any_bad:
                log_norm = np.where(failed, log_norm, log_norm + np.log(np.where(failed, 1.0, nS)))
            else:
                log_norm += np.log(nS)
        else:
            scale[:, :k] = 1.0
        X_new /= scale[:, None, :]
        if any_bad:
            X_new[failed] = X[failed]
        X = X_new
        A, Ah = X[:, :, k : k + r], X[:, :, k + r :]
        rho = A @ dagger(A)
        rho_hat = Ah @ dagger(Ah)
        ssum += rho
        ssum_hat += rho_hat
        if m:
            if any_bad:
                jumps &= ~failed[:, None]
            if jumps.any():
                counts += jumps
                b_idx, ch = np.nonzero(jumps)
                events.append((n + 1, b_idx, ch))
        if slot < T and steps[slot] == n + 1:
            record(slot, n + 1)
            slot += 1

    jump_times = [[[] for _ in range(m)] for _ in range(B)]
    for n, b_idx, ch in events:
        t = n * dt
        for b, j in zip(b_idx.tolist(), ch.tolist()):
            jump_times[b][j].append(t)
    jump_times = [[np.array(ts) for ts in row] for row in jump_times]

    return PathBatch(
        indices=indices,
        times=steps * dt,
        fidelity=out_F,
        fidelity_via_M=out_FM,
        q_rho=out_q,
        q_rho_hat=out_qh,
        rho=out_rho,
        cesaro_rho=out_ces,
        cesaro_rho_hat=out_ces_h,
        jump_counts=out_counts,
        jump_times=jump_times,
        propagator=X[:, :, :k].copy(),
        log_norm=log_norm,
        rho_factor=X[:, :, k : k + r].copy(),
        rho_hat_factor=X[:, :, k + r :].copy(),
        failed=failed,
        fail_time=fail_time,
        fail_reason=fail_reason,
    )


def default_workers():
    """Worker count from ``QTRAJ_WORKERS`` (default 1)."""
    try:
        return max(1, int(os.environ.get("QTRAJ_WORKERS", "1")))
    except ValueError:
        return 1


def _split(indices, workers):
    indices = np.asarray(indices, dtype=np.int64)
    n = min(max(1, workers), max(1, len(indices)))
    return [c for c in np.array_split(indices, n) if len(c)]


def _dispatch(fn, indices, workers, args):
    chunks = _split(indices, workers)
    if len(chunks) == 1:
        return [fn(*args, chunks[0])]
    with ProcessPoolExecutor(max_workers=len(chunks)) as pool:
        futures = [pool.submit(fn, *args, c) for c in chunks]
        return [f.result() for f in futures]


def _pairs_job(spec, rho0, rho_hat0, cfg, steps, dualprojs, indices):
    return _integrate_pairs(spec, rho0, rho_hat0, cfg, indices, steps, dualprojs)


def _prepare_pairs(spec, rho0, rho_hat0, cfg, sample_times):
    holds, _, witness = kernel_inclusion(rho_hat0, rho0)
    if not holds:
        raise KernelInclusionError(
            "ker(rho_hat0) is not contained in ker(rho0)", witness=witness
        )
    check_step_size(spec, cfg, PHYSICAL)
    if sample_times is None:
        sample_times = [0.0, cfg.horizon]
    return sample_steps(cfg, sample_times)


def simulate_pairs(spec, rho0, rho_hat0, cfg, indices, dualprojs=None, sample_times=None, workers=None):
    """Simulate trajectories ``indices`` of the true/estimated pair under P^rho0.

    Trajectory ``i`` depends only on ``(cfg.seed, i)``, so any split of
    ``indices`` over ``workers`` processes gives identical results.
    """
    steps = _prepare_pairs(spec, rho0, rho_hat0, cfg, sample_times)
    dual = None if dualprojs is None else [np.asarray(M, dtype=complex) for M in dualprojs]
    workers = default_workers() if workers is None else workers
    parts = _dispatch(_pairs_job, indices, workers, (spec, rho0, rho_hat0, cfg, steps, dual))
    return PathBatch.concat(parts)


def simulate_pair(spec, rho0, rho_hat0, cfg, dualprojs=None, sample_times=None, index=0):
    """Single-trajectory convenience wrapper around :func:`simulate_pairs`."""
    batch = simulate_pairs(spec, rho0, rho_hat0, cfg, [index], dualprojs, sample_times, workers=1)
    if batch.failed[0]:
        raise TrajectoryError(batch.fail_reason[0], time=float(batch.fail_time[0]), index=index)
    return batch.record(0)


@dataclass
class ReferenceBatch:
    """Likelihood processes ``Z_t^rho`` under the reference measure.

    ``z`` has shape ``(n_traj, n_times, n_states)``.
    """

    indices: np.ndarray
    times: np.ndarray
    z: np.ndarray

    @classmethod
    def concat(cls, parts):
        return cls(
            np.concatenate([p.indices for p in parts]),
            parts[0].times,
            np.concatenate([p.z for p in parts]),
        )


def _integrate_reference(spec, rhos, cfg, indices, steps):
    indices = np.asarray(indices, dtype=np.int64)
    B = len(indices)
    k = spec.dim
    integ = _Integrator(spec, cfg, REFERENCE)
    R = np.stack([np.asarray(r, dtype=complex) for r in rhos])
    S = np.broadcast_to(np.eye(k, dtype=complex) / math.sqrt(k), (B, k, k)).copy()
    log_norm = np.full(B, 0.5 * math.log(k))
    out = np.empty((B, len(steps), len(R)))

    def record(slot):
        SS = dagger(S) @ S
        tr = np.einsum("bij,rji->br", SS, R).real
        with np.errstate(invalid="ignore"):
            out[:, slot] = np.where(np.isfinite(log_norm)[:, None], np.exp(2 * log_norm)[:, None] * tr, 0.0)

    slot = 0
    if len(steps) and steps[0] == 0:
        record(0)
        slot = 1
    draws = _Draws(cfg.seed, indices, integ.p + integ.m, cfg.n_steps)
    for n in range(cfg.n_steps):
        G, _ = integ.increments(draws(n), None)
        S_new = G @ S
        if (n + 1) % cfg.renorm_every == 0:
            nS = np.sqrt(_sq_norm(S_new))
            dead = nS == 0
            with np.errstate(divide="ignore", invalid="ignore"):
                log_norm = log_norm + np.log(nS)
                S_new = np.where(dead[:, None, None], S, S_new / nS[:, None, None])
        S = S_new
        if slot < len(steps) and steps[slot] == n + 1:
            record(slot)
            slot += 1
    return ReferenceBatch(indices, steps * cfg.dt, out)


def _reference_job(spec, rhos, cfg, steps, indices):
    return _integrate_reference(spec, rhos, cfg, indices, steps)


def simulate_reference(spec, rhos, cfg, indices, sample_times=None, workers=None):
    """Simulate ``S_t`` under the reference measure and record ``Z_t^rho``.

    Brownian increments carry no drift and every jump channel is a unit-rate
    Poisson process. A propagator annihilated by a jump gives ``Z = 0`` from
    then on, which is a legitimate outcome under this measure.
    """
    check_step_size(spec, cfg, REFERENCE)
    if sample_times is None:
        sample_times = [0.0, cfg.horizon]
    steps = sample_steps(cfg, sample_times)
    workers = default_workers() if workers is None else workers
    parts = _dispatch(_reference_job, indices, workers, (spec, list(rhos), cfg, steps))
    return ReferenceBatch.concat(parts)

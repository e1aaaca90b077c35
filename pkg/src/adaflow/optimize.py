"""Discrete stochastic algorithms: the general adaptive/momentum iteration,
its momentum-free variant, and stochastic Nesterov (decreasing steps).

The x-update deliberately uses the *new* momentum and second-moment
states (semi-implicit order); that ordering is part of the contract and
is frozen in tests.  Runs are reproducible bit-for-bit from
(master seed, run index) regardless of batching or thread count: every
run owns a counter-based stream, and the vectorized batch engine applies
only elementwise updates, so batch composition never changes a run's
trajectory.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .problems import GradientSample, Problem, make_rng, sample_grad, second_moment
from .schedules import ScheduleSpec, eval_schedule

__all__ = [
    "IterateState",
    "StepsizeSpec",
    "RunRecord",
    "BatchResult",
    "GuardViolationError",
    "DivergenceError",
    "step_general",
    "step_adagrad",
    "step_nag",
    "lyapunov_diag",
    "run",
    "run_many",
]

DIVERGENCE_THRESHOLD = 1e12

ALGORITHMS = ("general", "adagrad", "nag")


class GuardViolationError(ValueError):
    """1 - gamma_{n+1} q_n went negative: the stepsize/schedule pair is invalid."""


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class IterateState:
    """Full algorithm state (v, m, x); v and m may be empty for reduced variants."""

    v: np.ndarray
    m: np.ndarray
    x: np.ndarray

    def __post_init__(self):
        for name in ("v", "m", "x"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if self.v.size and np.any(self.v < 0):
            raise ValueError("v must be >= 0 componentwise")

    @classmethod
    def zeros(cls, dim: int, algorithm: str = "general", x0=None) -> "IterateState":
        x = np.zeros(dim) if x0 is None else np.asarray(x0, dtype=float)
        if algorithm == "general":
            return cls(np.zeros(dim), np.zeros(dim), x)
        if algorithm == "adagrad":
            return cls(np.zeros(dim), np.zeros(0), x)
        if algorithm == "nag":
            return cls(np.zeros(0), np.zeros(dim), x)
        raise ValueError(f"unknown algorithm {algorithm!r}")


@dataclass(frozen=True)
class StepsizeSpec:
    """Polynomially decaying stepsizes gamma_n = gamma0 / n^alpha, n >= 1."""

    gamma0: float
    alpha: float

    def __post_init__(self):
        if self.gamma0 <= 0:
            raise ValueError("gamma0 must be > 0")
        if not (0 < self.alpha <= 1):
            raise ValueError("alpha must lie in (0, 1]")

    def gamma(self, n):
        """gamma_n for scalar or array n >= 1."""
        n_arr = np.asarray(n, dtype=float)
        if np.any(n_arr < 1):
            raise ValueError("stepsize index starts at n = 1")
        out = self.gamma0 / n_arr ** self.alpha
        return float(out) if out.ndim == 0 else out

    def tau(self, n: int) -> float:
        """tau_n = sum_{k=1}^{n} gamma_k (tau_0 = 0)."""
        if n < 0:
            raise ValueError("n must be >= 0")
        if n == 0:
            return 0.0
        return float(np.sum(self.gamma(np.arange(1, n + 1))))


@dataclass(frozen=True)
class RunRecord:
    """Stride-subsampled trace of one run plus its final state."""

    algorithm: str
    steps: np.ndarray          # recorded iteration indices, strictly increasing
    taus: np.ndarray           # tau_n at the recorded indices
    v: np.ndarray              # (n_rec, dim_v)
    m: np.ndarray              # (n_rec, dim_m)
    x: np.ndarray              # (n_rec, dim)
    lyapunov: np.ndarray       # V_n at the recorded indices
    residual: np.ndarray       # distance-to-equilibrium surrogate at records
    final: IterateState
    n_iter: int
    reason: str                # "completed" | "diverged"
    diverged_at: int           # -1 if the run completed


@dataclass(frozen=True)
class BatchResult:
    """Lockstep results for a batch of independent runs (leading axis = run)."""

    algorithm: str
    run_indices: np.ndarray
    final_v: np.ndarray
    final_m: np.ndarray
    final_x: np.ndarray
    diverged_at: np.ndarray    # (R,) step index of divergence, -1 if none
    steps: np.ndarray
    taus: np.ndarray
    rec_v: np.ndarray          # (n_rec, R, dim_v)
    rec_m: np.ndarray
    rec_x: np.ndarray
    rec_lyapunov: np.ndarray   # (n_rec, R)
    rec_residual: np.ndarray   # (n_rec, R)
    n_iter: int

    @property
    def n_runs(self) -> int:
        return len(self.run_indices)

    def reasons(self) -> list:
        return ["diverged" if d >= 0 else "completed" for d in self.diverged_at]

    def record(self, i: int) -> RunRecord:
        """Extract the RunRecord of the i-th run in this batch."""
        div = int(self.diverged_at[i])
        return RunRecord(
            algorithm=self.algorithm,
            steps=self.steps.copy(),
            taus=self.taus.copy(),
            v=self.rec_v[:, i, :].copy(),
            m=self.rec_m[:, i, :].copy(),
            x=self.rec_x[:, i, :].copy(),
            lyapunov=self.rec_lyapunov[:, i].copy(),
            residual=self.rec_residual[:, i].copy(),
            final=IterateState(self.final_v[i], self.final_m[i], self.final_x[i]),
            n_iter=self.n_iter,
            reason="diverged" if div >= 0 else "completed",
            diverged_at=div,
        )


# -- single-step operations ---------------------------------------------------


def _schedule_time(gamma: StepsizeSpec, n: int, tau_n: Optional[float]) -> float:
    # tau_0 = 0 lies outside the schedule domain; the first step samples at tau_1
    if tau_n is None:
        tau_n = gamma.tau(n)
    return tau_n if n >= 1 else gamma.gamma(1)


def step_general(z: IterateState, n: int, spec: ScheduleSpec, gamma: StepsizeSpec,
                 sample: GradientSample, eps: float, tau_n: Optional[float] = None) -> IterateState:
    """One iteration of the general algorithm from state z_n to z_{n+1}.

    The schedule is sampled at tau_n, the stepsize is gamma_{n+1}, and the
    x-update uses the freshly computed v_{n+1} and m_{n+1}.
    """
    sched = eval_schedule(spec, _schedule_time(gamma, n, tau_n))
    g_next = gamma.gamma(n + 1)
    if 1.0 - g_next * sched.q < 0:
        raise GuardViolationError(
            f"1 - gamma_{n + 1} * q_n = {1.0 - g_next * sched.q:.6g} < 0 at n={n}")
    v_new = (1.0 - g_next * sched.q) * z.v + g_next * sched.p * sample.g_sq
    m_new = (1.0 - g_next * sched.r) * z.m + g_next * sched.h * sample.g
    x_new = z.x - g_next * m_new / np.sqrt(v_new + eps)
    return IterateState(v_new, m_new, x_new)


def step_adagrad(z: IterateState, n: int, spec: ScheduleSpec, gamma: StepsizeSpec,
                 sample: GradientSample, eps: float, tau_n: Optional[float] = None) -> IterateState:
    """One iteration of the momentum-free variant (adaptive step only)."""
    sched = eval_schedule(spec, _schedule_time(gamma, n, tau_n))
    g_next = gamma.gamma(n + 1)
    if 1.0 - g_next * sched.q < 0:
        raise GuardViolationError(
            f"1 - gamma_{n + 1} * q_n = {1.0 - g_next * sched.q:.6g} < 0 at n={n}")
    v_new = (1.0 - g_next * sched.q) * z.v + g_next * sched.p * sample.g_sq
    x_new = z.x - g_next * sample.g / np.sqrt(v_new + eps)
    return IterateState(v_new, z.m, x_new)


def step_nag(y: tuple, n: int, alpha: float, gamma: StepsizeSpec,
             sample: GradientSample, tau_n: float) -> tuple:
    """One stochastic Nesterov iteration on (m, x); requires tau_n > 0."""
    if not tau_n > 0:
        raise ValueError("step_nag needs tau_n > 0")
    m, x = (np.asarray(a, dtype=float) for a in y)
    g_next = gamma.gamma(n + 1)
    m_new = (1.0 - alpha * g_next / tau_n) * m + g_next * sample.g
    x_new = x - g_next * m_new
    return (m_new, x_new)


def lyapunov_diag(z: IterateState, h_prev: float, problem: Problem, eps: float):
    """Stability diagnostic h_{n-1} F(x_n) + 0.5 <m_n^2, 1/sqrt(v_n + eps)>.

    Along a converging run this quantity settles to a finite value; it is
    the discrete counterpart of the trajectory energy.
    """
    if z.v.size and np.any(z.v < 0):
        raise ValueError("v must be >= 0")
    quad = 0.0
    if z.m.size:
        vv = z.v if z.v.size else np.zeros_like(z.m)
        quad = 0.5 * np.sum(z.m ** 2 / np.sqrt(vv + eps), axis=-1)
    return h_prev * problem.fun(z.x) + quad


# -- batched engine -----------------------------------------------------------


def _residual_batch(algorithm: str, problem: Problem, limits, v, m, x) -> np.ndarray:
    grad_norm = np.linalg.norm(problem.grad(x), axis=-1)
    m_norm = np.linalg.norm(m, axis=-1) if m.shape[-1] else np.zeros(grad_norm.shape)
    if algorithm == "nag":
        return np.maximum(grad_norm, m_norm)
    v_gap = np.linalg.norm(limits.q * v - limits.p * second_moment(problem, x), axis=-1)
    return np.maximum(np.maximum(grad_norm, m_norm), v_gap)


def _init_states(algorithm: str, problem: Problem, init, rngs) -> tuple:
    d = problem.dim
    n_runs = len(rngs)
    dims = {"general": (d, d), "adagrad": (d, 0), "nag": (0, d)}[algorithm]
    dv, dm = dims

    def check(state: IterateState):
        if state.v.shape[-1] != dv or state.m.shape[-1] != dm or state.x.shape[-1] != d:
            raise ValueError(f"bad state shape for algorithm {algorithm!r}")
        return state

    if callable(init):
        states = [check(init(rng)) for rng in rngs]
        v = np.stack([s.v for s in states])
        m = np.stack([s.m for s in states])
        x = np.stack([s.x for s in states])
    else:
        state = check(init)
        v = np.tile(state.v, (n_runs, 1))
        m = np.tile(state.m, (n_runs, 1))
        x = np.tile(state.x, (n_runs, 1))
    if algorithm == "nag" and np.any(m != 0.0):
        raise ValueError("the nag algorithm starts from m_0 = 0")
    return v, m, x


def _advance_batch(algorithm, problem, spec, gamma, n_iter, master_seed, run_indices,
                   init, record_stride, eps, nag_alpha) -> BatchResult:
    d = problem.dim
    rngs = [make_rng(master_seed, int(i)) for i in run_indices]
    n_runs = len(rngs)
    v, m, x = _init_states(algorithm, problem, init, rngs)

    gammas = gamma.gamma(np.arange(1, n_iter + 1))           # gamma_{n+1} for step n
    taus = np.cumsum(gammas)                                 # tau_{n+1}
    tau_prev = np.concatenate([[0.0], taus[:-1]])            # tau_n
    sched_t = np.concatenate([[taus[0]], taus[:-1]])         # first step samples at tau_1
    hs, rs, ps, qs = spec.values_on(sched_t)

    if algorithm in ("general", "adagrad"):
        bad = np.nonzero(1.0 - gammas * qs < 0)[0]
        if bad.size:
            raise GuardViolationError(
                f"1 - gamma_{bad[0] + 1} * q_{bad[0]} < 0 (gamma0/alpha incompatible with schedule)")

    noise = problem.noise
    limits = spec.limits
    record_idx = []
    if record_stride and record_stride > 0:
        record_idx = list(range(record_stride, n_iter + 1, record_stride))
        if not record_idx or record_idx[-1] != n_iter:
            record_idx.append(n_iter)
    record_set = set(record_idx)
    rec = {"v": [], "m": [], "x": [], "lyap": [], "resid": []}

    active = np.ones(n_runs, dtype=bool)
    diverged_at = np.full(n_runs, -1, dtype=int)

    block = max(128, int(2_000_000 / max(1, n_runs * max(d, 1))))
    step = 0
    with np.errstate(over="ignore", invalid="ignore"):
        while step < n_iter:
            b_len = min(block, n_iter - step)
            if noise.kind == "additive_gaussian":
                zeta = np.stack([rng.standard_normal((b_len, d)) for rng in rngs], axis=1)
            for s in range(b_len):
                n = step + s
                if noise.kind == "none":
                    g = problem.grad(x)
                elif noise.kind == "additive_gaussian":
                    g = problem.grad(x) + noise.sigma * zeta[s]
                else:  # finite_sum: per-run index draws keep the stream order per run
                    g = np.empty_like(x)
                    for i, rng in enumerate(rngs):
                        idx = rng.choice(len(noise.components), size=noise.batch, replace=False)
                        g[i] = np.mean([noise.components[j](x[i]) for j in idx], axis=0)

                gam = gammas[n]
                if algorithm == "general":
                    v_new = (1.0 - gam * qs[n]) * v + (gam * ps[n]) * (g * g)
                    m_new = (1.0 - gam * rs[n]) * m + (gam * hs[n]) * g
                    x_new = x - gam * m_new / np.sqrt(v_new + eps)
                elif algorithm == "adagrad":
                    v_new = (1.0 - gam * qs[n]) * v + (gam * ps[n]) * (g * g)
                    m_new = m
                    x_new = x - gam * g / np.sqrt(v_new + eps)
                else:  # nag
                    coef = 1.0 - nag_alpha * gam / tau_prev[n] if n >= 1 else 0.0
                    v_new = v
                    m_new = coef * m + gam * g
                    x_new = x - gam * m_new

                norm = np.abs(x_new).max(axis=-1)
                if m_new.shape[-1]:
                    norm = np.maximum(norm, np.abs(m_new).max(axis=-1))
                if v_new.shape[-1]:
                    norm = np.maximum(norm, np.abs(v_new).max(axis=-1))
                bad = active & ~(np.isfinite(norm) & (norm <= DIVERGENCE_THRESHOLD))
                if bad.any():
                    diverged_at[bad] = n + 1
                    active = active & ~bad
                upd = active
                v = np.where(upd[:, None], v_new, v) if v.shape[-1] else v
                m = np.where(upd[:, None], m_new, m) if m.shape[-1] else m
                x = np.where(upd[:, None], x_new, x)

                if (n + 1) in record_set:
                    rec["v"].append(v.copy())
                    rec["m"].append(m.copy())
                    rec["x"].append(x.copy())
                    if m.shape[-1] and v.shape[-1]:
                        quad = 0.5 * np.sum(m ** 2 / np.sqrt(v + eps), axis=-1)
                    elif m.shape[-1]:
                        quad = 0.5 * np.sum(m ** 2, axis=-1)
                    else:
                        quad = np.zeros(n_runs)
                    rec["lyap"].append(hs[n] * problem.fun(x) + quad)
                    rec["resid"].append(_residual_batch(algorithm, problem, limits, v, m, x))
            step += b_len

    n_rec = len(record_idx)
    return BatchResult(
        algorithm=algorithm,
        run_indices=np.asarray(run_indices, dtype=int),
        final_v=v, final_m=m, final_x=x,
        diverged_at=diverged_at,
        steps=np.asarray(record_idx, dtype=int),
        taus=taus[np.asarray(record_idx, dtype=int) - 1] if n_rec else np.zeros(0),
        rec_v=np.stack(rec["v"]) if n_rec else np.zeros((0, n_runs, v.shape[-1])),
        rec_m=np.stack(rec["m"]) if n_rec else np.zeros((0, n_runs, m.shape[-1])),
        rec_x=np.stack(rec["x"]) if n_rec else np.zeros((0, n_runs, d)),
        rec_lyapunov=np.stack(rec["lyap"]) if n_rec else np.zeros((0, n_runs)),
        rec_residual=np.stack(rec["resid"]) if n_rec else np.zeros((0, n_runs)),
        n_iter=n_iter,
    )


def _concat_batches(parts: Sequence[BatchResult]) -> BatchResult:
    if len(parts) == 1:
        return parts[0]
    first = parts[0]
    return BatchResult(
        algorithm=first.algorithm,
        run_indices=np.concatenate([p.run_indices for p in parts]),
        final_v=np.concatenate([p.final_v for p in parts]),
        final_m=np.concatenate([p.final_m for p in parts]),
        final_x=np.concatenate([p.final_x for p in parts]),
        diverged_at=np.concatenate([p.diverged_at for p in parts]),
        steps=first.steps,
        taus=first.taus,
        rec_v=np.concatenate([p.rec_v for p in parts], axis=1),
        rec_m=np.concatenate([p.rec_m for p in parts], axis=1),
        rec_x=np.concatenate([p.rec_x for p in parts], axis=1),
        rec_lyapunov=np.concatenate([p.rec_lyapunov for p in parts], axis=1),
        rec_residual=np.concatenate([p.rec_residual for p in parts], axis=1),
        n_iter=first.n_iter,
    )


def run_many(algorithm: str, problem: Problem, spec: ScheduleSpec, gamma: StepsizeSpec,
             n_iter: int, master_seed: int, n_runs: int, init,
             *, eps: float = 1e-8, record_stride: int = 0, run_offset: int = 0,
             threads: int = 1) -> BatchResult:
    """Advance n_runs independent runs and gather them by run index.

    ``init`` is either an IterateState shared by every run or a callable
    rng -> IterateState evaluated per run (its draws come first in the
    run's stream).  Scheduling across threads cannot change any run's
    trajectory; results are concatenated in run-index order.
    """
    if algorithm not in ALGORITHMS:
        raise ValueError(f"algorithm must be one of {ALGORITHMS}")
    if n_iter < 1:
        raise ValueError("n_iter must be >= 1")
    nag_alpha = spec.nag_alpha if algorithm == "nag" else None
    indices = list(range(run_offset, run_offset + n_runs))
    threads = max(1, int(threads))
    chunk = math.ceil(n_runs / threads)
    chunks = [indices[i:i + chunk] for i in range(0, n_runs, chunk)]

    def job(ids):
        return _advance_batch(algorithm, problem, spec, gamma, n_iter, master_seed,
                              ids, init, record_stride, eps, nag_alpha)

    if threads == 1 or len(chunks) == 1:
        parts = [job(ids) for ids in chunks]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(job, chunks))
    return _concat_batches(parts)


def run(algorithm: str, problem: Problem, spec: ScheduleSpec, gamma: StepsizeSpec,
        n_iter: int, seed: int, record_stride: int = 0, eps: float = 1e-8,
        init: Union[IterateState, Callable, None] = None, run_index: int = 0) -> RunRecord:
    """Execute a single run and return its record.

    With ``init=None`` the run starts from the zero state.  The run's
    stream is derived from (seed, run_index); identical inputs reproduce
    the record bit-for-bit.
    """
    if init is None:
        init = IterateState.zeros(problem.dim, algorithm)
    batch = run_many(algorithm, problem, spec, gamma, n_iter, seed, 1, init,
                     eps=eps, record_stride=record_stride, run_offset=run_index)
    return batch.record(0)

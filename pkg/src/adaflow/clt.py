"""Asymptotic covariance of the rescaled iterates at a strict local minimum.

Two independent routes to the x-block covariance are provided: the
closed-form expression in the preconditioned eigenbasis, and the
numerical solution of the shifted Lyapunov equation.  They must agree to
relative 1e-8; the Monte-Carlo estimator gives a third, statistical
check.  The closed form evaluates the noise matrix as Cov(g(x*, xi)),
which equals E[g g^T] at x* because the mean gradient vanishes there.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import optimize
from .integrate import residual_to_equilibrium
from .problems import Problem, noise_covariance, second_moment
from .schedules import ScheduleSpec, ScheduleValues
from .spectral import NonHurwitzError, lyapunov_solve, momentum_block_margin, sym_eigen

__all__ = [
    "CltInputs",
    "CltResult",
    "EmpiricalClt",
    "StepsizeConstraintError",
    "DegenerateDenominatorError",
    "v_star",
    "v_matrix",
    "rate_L",
    "theta",
    "gamma_lyapunov",
    "gamma2_closed_form",
    "analyze",
    "empirical_clt",
]


class StepsizeConstraintError(ValueError):
    """gamma_0 violates the alpha = 1 lower bound 1 / (2 (L ^ q_inf))."""


class DegenerateDenominatorError(ValueError):
    pass


@dataclass(frozen=True)
class CltInputs:
    """Everything the covariance formulas need at a strict local minimum."""

    hess: np.ndarray           # positive definite Hessian at x*
    s_star: np.ndarray         # componentwise second moment S(x*)
    noise_cov: np.ndarray      # Cov of the stochastic gradient at x*
    limits: ScheduleValues     # (h_inf, r_inf, p_inf, q_inf), all but p required > 0
    gamma0: float
    alpha: float
    eps: float
    x_star: Optional[np.ndarray] = None

    def __post_init__(self):
        hess = np.asarray(self.hess, dtype=float)
        object.__setattr__(self, "hess", hess)
        object.__setattr__(self, "s_star", np.asarray(self.s_star, dtype=float))
        object.__setattr__(self, "noise_cov", np.asarray(self.noise_cov, dtype=float))
        if np.linalg.norm(hess - hess.T) > 1e-10 * max(np.linalg.norm(hess), 1e-300):
            raise ValueError("hess must be symmetric")
        if self.limits.h <= 0 or self.limits.r <= 0 or self.limits.q <= 0:
            raise ValueError("limits h, r, q must be positive")
        if not (0 < self.alpha <= 1) or self.gamma0 <= 0:
            raise ValueError("need gamma0 > 0 and alpha in (0, 1]")
        if self.eps <= 0:
            raise ValueError("eps must be > 0")

    @property
    def dim(self) -> int:
        return self.hess.shape[0]

    @classmethod
    def from_problem(cls, problem: Problem, spec: ScheduleSpec, gamma: "optimize.StepsizeSpec",
                     x_star, eps: float) -> "CltInputs":
        x_star = np.asarray(x_star, dtype=float)
        if problem.hess is None:
            raise ValueError(f"problem {problem.name!r} provides no Hessian")
        return cls(
            hess=problem.hess(x_star),
            s_star=second_moment(problem, x_star),
            noise_cov=noise_covariance(problem, x_star),
            limits=spec.limits,
            gamma0=gamma.gamma0,
            alpha=gamma.alpha,
            eps=eps,
            x_star=x_star,
        )


@dataclass(frozen=True)
class CltResult:
    v_star: np.ndarray
    v_matrix: np.ndarray
    eigenvalues: np.ndarray    # pi_1 <= ... <= pi_d of V^{1/2} H V^{1/2}
    vectors: np.ndarray        # orthogonal P, columns matching eigenvalues
    rate: float                # L
    theta: float
    gamma: np.ndarray          # full 2d x 2d covariance
    gamma2: np.ndarray         # x-block, closed form
    c_matrix: np.ndarray


def v_star(inputs: CltInputs) -> np.ndarray:
    """Second-moment fixed point p_inf S(x*) / q_inf."""
    if inputs.limits.q <= 0:
        raise ValueError("q_inf must be positive")
    return inputs.limits.p * inputs.s_star / inputs.limits.q


def v_matrix(inputs: CltInputs) -> np.ndarray:
    """Preconditioner diag((eps + v*)^{-1/2})."""
    return np.diag((inputs.eps + v_star(inputs)) ** -0.5)


def rate_L(inputs: CltInputs, pi1: float) -> float:
    """Convergence rate L = (r/2) (1 - sqrt((1 - 4 h pi_1 / r^2) v 0))."""
    r, h = inputs.limits.r, inputs.limits.h
    if r <= 0 or pi1 <= 0:
        raise ValueError("need r_inf > 0 and pi_1 > 0")
    inner = max(1.0 - 4.0 * h * pi1 / (r * r), 0.0)
    return 0.5 * r * (1.0 - np.sqrt(inner))


def theta(gamma0: float, alpha: float, rate_cap: Optional[float] = None) -> float:
    """Shift 0 for alpha < 1, 1/(2 gamma0) for alpha = 1.

    With ``rate_cap`` = L ^ q_inf given and alpha = 1, the bound
    gamma0 > 1 / (2 rate_cap) is enforced.
    """
    if not (0 < alpha <= 1):
        raise ValueError("alpha must lie in (0, 1]")
    if gamma0 <= 0:
        raise ValueError("gamma0 must be > 0")
    if alpha < 1:
        return 0.0
    if rate_cap is not None and gamma0 <= 1.0 / (2.0 * rate_cap):
        raise StepsizeConstraintError(
            f"alpha = 1 requires gamma0 > {1.0 / (2.0 * rate_cap):.6g}, got {gamma0:.6g}")
    return 1.0 / (2.0 * gamma0)


def _theta_of(inputs: CltInputs) -> float:
    vm = v_matrix(inputs)
    pi1 = float(sym_eigen(np.sqrt(vm) @ inputs.hess @ np.sqrt(vm)).eigenvalues[0])
    cap = min(rate_L(inputs, pi1), inputs.limits.q)
    return theta(inputs.gamma0, inputs.alpha, cap)


def _h_cal(inputs: CltInputs) -> np.ndarray:
    d = inputs.dim
    vm = v_matrix(inputs)
    top = np.hstack([-inputs.limits.r * np.eye(d), inputs.limits.h * inputs.hess])
    bottom = np.hstack([-vm, np.zeros((d, d))])
    return np.vstack([top, bottom])


def gamma_lyapunov(inputs: CltInputs) -> np.ndarray:
    """Full 2d covariance from the shifted Lyapunov equation.

    Solves (H + theta I) G + G (H + theta I)^T = -blockdiag(h^2 Q, 0)
    where H stacks the momentum/position linearization at the minimum.
    """
    d = inputs.dim
    th = _theta_of(inputs)
    h_mat = _h_cal(inputs) + th * np.eye(2 * d)
    margin = momentum_block_margin(inputs.limits.r, inputs.limits.h, inputs.hess,
                                   (inputs.eps + v_star(inputs)) ** -0.5) - th
    if margin <= 0:
        raise NonHurwitzError("shifted system matrix is not Hurwitz")
    forcing = np.zeros((2 * d, 2 * d))
    forcing[:d, :d] = inputs.limits.h ** 2 * inputs.noise_cov
    return lyapunov_solve(h_mat, forcing)


def gamma2_closed_form(inputs: CltInputs) -> np.ndarray:
    """x-block covariance in closed form via the preconditioned eigenbasis."""
    r, h = inputs.limits.r, inputs.limits.h
    th = _theta_of(inputs)
    if r - 2.0 * th <= 0:
        raise DegenerateDenominatorError("need r_inf - 2 theta > 0")
    vm = v_matrix(inputs)
    v_half = np.sqrt(vm)
    eig = sym_eigen(v_half @ inputs.hess @ v_half)
    pi, p_mat = eig.eigenvalues, eig.vectors
    c_mat = p_mat.T @ v_half @ inputs.noise_cov @ v_half @ p_mat
    pk = pi[:, None]
    pl = pi[None, :]
    denom = (r - 2.0 * th) / h * (pk + pl + 2.0 * th * (th - r) / h) \
        + (pk - pl) ** 2 / (2.0 * (r - 2.0 * th))
    if np.any(denom <= 0):
        raise DegenerateDenominatorError("closed-form denominator not positive")
    return v_half @ p_mat @ (c_mat / denom) @ p_mat.T @ v_half


def analyze(inputs: CltInputs) -> CltResult:
    """Compute every covariance object for the given minimum."""
    vm = v_matrix(inputs)
    v_half = np.sqrt(vm)
    eig = sym_eigen(v_half @ inputs.hess @ v_half)
    pi, p_mat = eig.eigenvalues, eig.vectors
    if pi[0] <= 0:
        raise ValueError("the Hessian must be positive definite at the minimum")
    rate = rate_L(inputs, float(pi[0]))
    th = theta(inputs.gamma0, inputs.alpha, min(rate, inputs.limits.q))
    c_mat = p_mat.T @ v_half @ inputs.noise_cov @ v_half @ p_mat
    return CltResult(
        v_star=v_star(inputs),
        v_matrix=vm,
        eigenvalues=pi,
        vectors=p_mat,
        rate=rate,
        theta=th,
        gamma=gamma_lyapunov(inputs),
        gamma2=gamma2_closed_form(inputs),
        c_matrix=c_mat,
    )


@dataclass(frozen=True)
class EmpiricalClt:
    """Monte-Carlo covariance of the rescaled final iterates."""

    rescaled: np.ndarray       # (n_kept, 2d) rows gamma_n^{-1/2} (m_n, x_n - x*)
    kept_indices: np.ndarray   # run indices contributing to the estimate
    cov: np.ndarray            # (2d, 2d) second moment about zero
    x_block: np.ndarray        # (d, d)
    rel_err_full: float        # Frobenius distance to Gamma, relative
    rel_err_x: float           # Frobenius distance to Gamma2, relative
    gamma_n: float
    n_runs: int
    n_diverged: int
    n_filtered: int            # runs excluded by the convergence-event filter

    @property
    def n_kept(self) -> int:
        return self.n_runs - self.n_diverged - self.n_filtered


def empirical_clt(problem: Problem, spec: ScheduleSpec, gamma: "optimize.StepsizeSpec",
                  x_star, n_iter: int, n_runs: int, master_seed: int,
                  eps: float = 1e-8, threads: int = 1,
                  filter_residual: float = 0.1) -> EmpiricalClt:
    """Run the algorithm n_runs times and compare with the predicted covariance.

    Runs start at the equilibrium state (v*, 0, x*).  Diverged runs are
    excluded with a count; so are runs whose final equilibrium residual
    exceeds ``filter_residual`` -- a pragmatic surrogate for conditioning
    on the convergence event, reported rather than hidden.
    """
    x_star = np.asarray(x_star, dtype=float)
    inputs = CltInputs.from_problem(problem, spec, gamma, x_star, eps)
    result = analyze(inputs)
    d = problem.dim

    init = optimize.IterateState(result.v_star, np.zeros(d), x_star)
    batch = optimize.run_many("general", problem, spec, gamma, n_iter, master_seed,
                              n_runs, init, eps=eps, threads=threads)
    gamma_n = gamma.gamma(n_iter)

    keep = batch.diverged_at < 0
    n_diverged = int(n_runs - keep.sum())
    resid = residual_to_equilibrium("general", problem,
                                    (batch.final_v, batch.final_m, batch.final_x),
                                    spec.limits)
    filt = keep & (resid <= filter_residual)
    n_filtered = int(keep.sum() - filt.sum())

    rows = np.hstack([batch.final_m[filt], batch.final_x[filt] - x_star]) / np.sqrt(gamma_n)
    if rows.shape[0] == 0:
        raise RuntimeError("every run was excluded; cannot estimate the covariance")
    cov = rows.T @ rows / rows.shape[0]
    x_block = cov[d:, d:]
    rel_full = float(np.linalg.norm(cov - result.gamma) / max(np.linalg.norm(result.gamma), 1e-300))
    rel_x = float(np.linalg.norm(x_block - result.gamma2) / max(np.linalg.norm(result.gamma2), 1e-300))
    return EmpiricalClt(
        rescaled=rows,
        kept_indices=np.nonzero(filt)[0],
        cov=cov,
        x_block=x_block,
        rel_err_full=rel_full,
        rel_err_x=rel_x,
        gamma_n=float(gamma_n),
        n_runs=n_runs,
        n_diverged=n_diverged,
        n_filtered=n_filtered,
    )

"""Spectral analysis of critical points and Monte-Carlo escape experiments.

A critical point is a trap when the preconditioned Hessian has negative
eigenvalues; the drift linearization then has as many unstable directions,
each a real eigenvalue ζ solving ζ² + r ζ + β = 0 for a negative β.  With
noise exciting the unstable eigenspace, the iterates leave such points
with probability one, which the escape experiment checks statistically.

For the Nesterov variant the damping block is zero, so the substitution
prescribed for that case gives ζ = sqrt(-β) with β the negative Hessian
eigenvalues; the projector acts in the plain (unpreconditioned) metric.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import optimize
from .problems import NoiseModel, Problem, grad_second_moment_jacobian, noise_covariance, second_moment
from .schedules import ScheduleSpec, ScheduleValues
from .spectral import sym_eigen

__all__ = [
    "TrapAnalysis",
    "EscapeRow",
    "EscapeReport",
    "AvtReport",
    "linearize_D",
    "unstable_spectrum",
    "noise_excitation",
    "analyze_trap",
    "nag_trap_analysis",
    "escape_experiment",
    "check_avt_assumptions",
]


@dataclass(frozen=True)
class TrapAnalysis:
    """Unstable spectrum of the drift linearization at a critical point."""

    kind: str                  # "general" | "nag"
    d_matrix: np.ndarray       # 3d x 3d linearization (2d x 2d for nag)
    betas: np.ndarray          # eigenvalues of the (scaled) preconditioned Hessian, ascending
    unstable_betas: np.ndarray  # the negative ones, paired with zetas
    zetas: np.ndarray          # positive eigenvalues of the linearization
    a_plus: np.ndarray         # (d_plus, 3d) left unstable eigenvectors (2d for nag)
    projector_u: np.ndarray    # orthogonal projector on the unstable eigenspace
    excitation: float          # Frobenius norm of the projected noise covariance
    v_diag: np.ndarray         # diagonal of the preconditioner (empty for nag)

    @property
    def d_plus(self) -> int:
        return len(self.zetas)


def linearize_D(problem: Problem, x_star, limits: ScheduleValues, eps: float) -> np.ndarray:
    """Drift Jacobian at the equilibrium attached to a critical point.

    Blocks (rows v, m, x): [[-q I, 0, p dS], [0, -r I, h H], [0, -V, 0]].
    For zero/additive noise dS(x*) vanishes analytically; other noise
    kinds must supply a second-moment Jacobian through the problem.
    """
    x_star = np.asarray(x_star, dtype=float)
    d = problem.dim
    if problem.hess is None:
        raise ValueError(f"problem {problem.name!r} provides no Hessian")
    if limits.q <= 0 or limits.r <= 0 or limits.h <= 0:
        raise ValueError("limits h, r, q must be positive for the general linearization")
    vstar = limits.p * second_moment(problem, x_star) / limits.q
    v_diag = (eps + vstar) ** -0.5
    ds = grad_second_moment_jacobian(problem, x_star)
    hess = problem.hess(x_star)
    zero = np.zeros((d, d))
    return np.block([
        [-limits.q * np.eye(d), zero, limits.p * ds],
        [zero, -limits.r * np.eye(d), limits.h * hess],
        [zero, -np.diag(v_diag), zero],
    ])


def unstable_spectrum(hess, v_diag, limits: ScheduleValues) -> tuple:
    """Quadratic-root construction of the unstable part of the linearization.

    Returns (betas, unstable_betas, zetas, a_plus, projector) where betas
    are the ascending eigenvalues of h V^{1/2} H V^{1/2}, each negative
    beta contributes zeta = (-r + sqrt(r^2 - 4 beta))/2 > 0, and the rows
    of a_plus are the matching left eigenvectors
    [0, w V^{1/2}, -(r + zeta) w V^{-1/2}] of the 3d linearization.
    """
    hess = np.asarray(hess, dtype=float)
    v_diag = np.asarray(v_diag, dtype=float)
    if np.any(v_diag <= 0):
        raise ValueError("the preconditioner diagonal must be positive")
    d = hess.shape[0]
    v_half = np.sqrt(v_diag)
    eig = sym_eigen(v_half[:, None] * hess * v_half[None, :])
    betas = limits.h * eig.eigenvalues
    neg = betas < 0
    unstable = betas[neg]
    zetas = 0.5 * (-limits.r + np.sqrt(limits.r ** 2 - 4.0 * unstable))
    w_rows = eig.vectors[:, neg].T
    a_plus = np.zeros((int(neg.sum()), 3 * d))
    for k in range(a_plus.shape[0]):
        a_plus[k, d:2 * d] = w_rows[k] * v_half
        a_plus[k, 2 * d:] = -(limits.r + zetas[k]) * w_rows[k] / v_half
    projector = w_rows.T @ w_rows if w_rows.size else np.zeros((d, d))
    return betas, unstable, zetas, a_plus, projector


def noise_excitation(problem: Problem, x_star, v_diag) -> float:
    """|| Pi_u V^{1/2} Q V^{1/2} Pi_u ||_F: noise energy in the unstable space.

    Positive value certifies that the gradient noise excites every escape
    direction; zero means the trap may be reachable.
    """
    x_star = np.asarray(x_star, dtype=float)
    v_diag = np.asarray(v_diag, dtype=float)
    if problem.hess is None:
        raise ValueError(f"problem {problem.name!r} provides no Hessian")
    v_half = np.sqrt(v_diag)
    eig = sym_eigen(v_half[:, None] * problem.hess(x_star) * v_half[None, :])
    neg = eig.eigenvalues < 0
    w = eig.vectors[:, neg]
    proj = w @ w.T
    q_cov = noise_covariance(problem, x_star)
    mid = v_half[:, None] * q_cov * v_half[None, :]
    return float(np.linalg.norm(proj @ mid @ proj))


def analyze_trap(problem: Problem, x_star, limits: ScheduleValues, eps: float) -> TrapAnalysis:
    """Full spectral trap analysis for the general algorithm at x_star."""
    x_star = np.asarray(x_star, dtype=float)
    vstar = limits.p * second_moment(problem, x_star) / limits.q
    v_diag = (eps + vstar) ** -0.5
    hess = problem.hess(x_star)
    betas, unstable, zetas, a_plus, projector = unstable_spectrum(hess, v_diag, limits)
    q_cov = noise_covariance(problem, x_star)
    v_half = np.sqrt(v_diag)
    mid = v_half[:, None] * q_cov * v_half[None, :]
    excitation = float(np.linalg.norm(projector @ mid @ projector))
    return TrapAnalysis(
        kind="general",
        d_matrix=linearize_D(problem, x_star, limits, eps),
        betas=betas,
        unstable_betas=unstable,
        zetas=zetas,
        a_plus=a_plus,
        projector_u=projector,
        excitation=excitation,
        v_diag=v_diag,
    )


def nag_trap_analysis(problem: Problem, x_star) -> TrapAnalysis:
    """Trap analysis for the Nesterov variant: zero damping block.

    The linearization is [[0, H], [-I, 0]]; unstable eigenvalues are
    zeta = sqrt(-beta) for the negative Hessian eigenvalues beta, and the
    noise projector acts on the plain Hessian eigenspace.
    """
    x_star = np.asarray(x_star, dtype=float)
    if problem.hess is None:
        raise ValueError(f"problem {problem.name!r} provides no Hessian")
    d = problem.dim
    hess = problem.hess(x_star)
    eig = sym_eigen(hess)
    betas = eig.eigenvalues
    neg = betas < 0
    unstable = betas[neg]
    zetas = np.sqrt(-unstable)
    w_rows = eig.vectors[:, neg].T
    a_plus = np.zeros((int(neg.sum()), 2 * d))
    for k in range(a_plus.shape[0]):
        a_plus[k, :d] = w_rows[k]
        a_plus[k, d:] = -zetas[k] * w_rows[k]
    projector = w_rows.T @ w_rows if w_rows.size else np.zeros((d, d))
    q_cov = noise_covariance(problem, x_star)
    excitation = float(np.linalg.norm(projector @ q_cov @ projector))
    d_matrix = np.block([[np.zeros((d, d)), hess], [-np.eye(d), np.zeros((d, d))]])
    return TrapAnalysis(
        kind="nag",
        d_matrix=d_matrix,
        betas=betas,
        unstable_betas=unstable,
        zetas=zetas,
        a_plus=a_plus,
        projector_u=projector,
        excitation=excitation,
        v_diag=np.zeros(0),
    )


# -- escape experiments ---------------------------------------------------------


@dataclass(frozen=True)
class EscapeRow:
    run: int
    x_end: np.ndarray
    nearest: int               # index into problem.critical_points
    nearest_kind: str
    distance: float
    label: str                 # nearest kind if within the radius, else "unclassified"


@dataclass(frozen=True)
class EscapeReport:
    rows: tuple
    fraction_saddle: float
    fraction_min: float
    fraction_unclassified: float
    control_stayed: bool
    excitation: float
    d_plus: int
    n_diverged: int
    classify_radius: float

    def counts(self) -> dict:
        out: dict = {}
        for row in self.rows:
            out[row.label] = out.get(row.label, 0) + 1
        return out


def _classify(problem: Problem, x_end: np.ndarray, radius: float) -> tuple:
    dists = [float(np.linalg.norm(x_end - cp.x)) for cp in problem.critical_points]
    nearest = int(np.argmin(dists))
    kind = problem.critical_points[nearest].kind
    dist = dists[nearest]
    label = kind if dist <= radius else "unclassified"
    return nearest, kind, dist, label


def escape_experiment(algorithm: str, problem: Problem, spec: ScheduleSpec,
                      gamma: "optimize.StepsizeSpec", x_star, n_runs: int, n_iter: int,
                      init_radius: float, master_seed: int, *, eps: float = 1e-8,
                      classify_radius: float = 1e-2, threads: int = 1) -> EscapeReport:
    """Escape statistics from a perturbed saddle, plus the zero-noise control.

    Noisy runs start at the saddle-adapted state with x perturbed
    uniformly within ``init_radius``; each endpoint is classified by its
    nearest declared critical point.  The control run, with the noise
    switched off and the exact saddle-adapted state, must stay put: that
    state is a fixed point of the iteration.
    """
    if not problem.critical_points:
        raise ValueError("escape experiment needs declared critical points")
    if gamma.alpha <= 0.5:
        raise ValueError("escape analysis requires square-summable steps (alpha > 1/2)")
    x_star = np.asarray(x_star, dtype=float)
    d = problem.dim

    if algorithm == "nag":
        analysis = nag_trap_analysis(problem, x_star)
    else:
        analysis = analyze_trap(problem, x_star, spec.limits, eps)

    vstar = spec.limits.p * second_moment(problem, x_star) / spec.limits.q \
        if algorithm != "nag" else np.zeros(0)

    def init(rng: np.random.Generator) -> optimize.IterateState:
        direction = rng.standard_normal(d)
        direction /= max(np.linalg.norm(direction), 1e-300)
        radius = init_radius * rng.random() ** (1.0 / d)
        x0 = x_star + radius * direction
        if algorithm == "general":
            return optimize.IterateState(vstar, np.zeros(d), x0)
        if algorithm == "adagrad":
            return optimize.IterateState(vstar, np.zeros(0), x0)
        return optimize.IterateState(np.zeros(0), np.zeros(d), x0)

    batch = optimize.run_many(algorithm, problem, spec, gamma, n_iter, master_seed,
                              n_runs, init, eps=eps, threads=threads)

    rows = []
    for i in range(n_runs):
        nearest, kind, dist, label = _classify(problem, batch.final_x[i], classify_radius)
        if batch.diverged_at[i] >= 0:
            label = "diverged"
        rows.append(EscapeRow(run=i, x_end=batch.final_x[i].copy(), nearest=nearest,
                              nearest_kind=kind, distance=dist, label=label))
    n_div = int((batch.diverged_at >= 0).sum())
    frac_saddle = sum(r.label in ("saddle", "max") for r in rows) / n_runs
    frac_min = sum(r.label == "min" for r in rows) / n_runs
    frac_un = sum(r.label == "unclassified" for r in rows) / n_runs

    # zero-noise control at the exact saddle-adapted state
    quiet = problem.with_noise(NoiseModel.none())
    v_quiet = spec.limits.p * second_moment(quiet, x_star) / spec.limits.q \
        if algorithm != "nag" else np.zeros(0)
    if algorithm == "general":
        control_init = optimize.IterateState(v_quiet, np.zeros(d), x_star)
    elif algorithm == "adagrad":
        control_init = optimize.IterateState(v_quiet, np.zeros(0), x_star)
    else:
        control_init = optimize.IterateState(np.zeros(0), np.zeros(d), x_star)
    control = optimize.run(algorithm, quiet, spec, gamma, n_iter, master_seed,
                           eps=eps, init=control_init)
    control_stayed = bool(np.linalg.norm(control.final.x - x_star) <= 1e-10)

    return EscapeReport(
        rows=tuple(rows),
        fraction_saddle=frac_saddle,
        fraction_min=frac_min,
        fraction_unclassified=frac_un,
        control_stayed=control_stayed,
        excitation=analysis.excitation,
        d_plus=analysis.d_plus,
        n_diverged=n_div,
        classify_radius=classify_radius,
    )


# -- stepsize / schedule summability diagnostics --------------------------------


@dataclass(frozen=True)
class AvtReport:
    schedule_mismatch_sum: float   # sum of (q_inf p_n - p_inf q_n)^2
    schedule_verdict: str
    gamma_sq_sum: float
    gamma_sq_verdict: str
    n_terms: int


def _tail_verdict(partial: np.ndarray) -> str:
    total = partial[-1]
    if total == 0.0:
        return "converging"
    n = len(partial)
    last = partial[-1] - partial[n // 2 - 1]
    prev = partial[n // 2 - 1] - partial[n // 4 - 1]
    if last == 0.0:
        return "converging"
    if prev == 0.0:
        return "inconclusive"
    ratio = last / prev
    if ratio <= 0.9:
        return "converging"
    if ratio >= 0.98:
        return "diverging"
    return "inconclusive"


def check_avt_assumptions(spec: ScheduleSpec, gamma: "optimize.StepsizeSpec",
                          n_max: int = 10 ** 6) -> AvtReport:
    """Partial-sum diagnostics for the two summability hypotheses.

    Checks sum (q_inf p_n - p_inf q_n)^2 (schedule compatibility) and
    sum gamma_n^2 (stepsize side) over n <= n_max, with a dyadic
    tail-trend verdict: converging / diverging / inconclusive.
    """
    n_grid = np.arange(1, n_max + 1)
    gammas = gamma.gamma(n_grid)
    taus = np.cumsum(gammas)
    _, _, p_n, q_n = spec.values_on(taus)
    lim = spec.limits
    mismatch = (lim.q * p_n - lim.p * q_n) ** 2
    mism_partial = np.cumsum(mismatch)
    gamma_partial = np.cumsum(gammas ** 2)
    return AvtReport(
        schedule_mismatch_sum=float(mism_partial[-1]),
        schedule_verdict=_tail_verdict(mism_partial),
        gamma_sq_sum=float(gamma_partial[-1]),
        gamma_sq_verdict=_tail_verdict(gamma_partial),
        n_terms=n_max,
    )

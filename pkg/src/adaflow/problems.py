"""Objective functions with exact derivatives and stochastic gradient oracles.

Every noise model here has a closed-form componentwise second moment
S(x) = E[g(x, xi)^2], so equilibria, preconditioners and asymptotic
covariances all have exact reference values.  Problems are immutable and
shareable; random streams are per run and never shared.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "NoiseModel",
    "CriticalPoint",
    "Problem",
    "GradientSample",
    "UnsupportedNoiseError",
    "make_rng",
    "sample_grad",
    "second_moment",
    "noise_covariance",
    "quadratic_diag",
    "saddle_quartic",
    "finite_sum_ls",
    "builtin_problems",
]


class UnsupportedNoiseError(ValueError):
    """The requested quantity has no closed form for this noise kind."""


def make_rng(master_seed: int, run_index: int = 0) -> np.random.Generator:
    """Independent per-run stream: Philox keyed by (master_seed, run_index).

    This is the splitting rule used everywhere: counter-based, so runs are
    reproducible bit-for-bit regardless of how they are scheduled across
    workers.
    """
    return np.random.Generator(np.random.Philox(np.random.SeedSequence((master_seed, run_index))))


@dataclass(frozen=True)
class NoiseModel:
    """Gradient noise specification with a closed-form second moment.

    kind is one of ``none``, ``additive_gaussian`` (per-coordinate std
    vector sigma) or ``finite_sum`` (component gradients averaged over a
    uniform minibatch drawn without replacement).
    """

    kind: str
    sigma: Optional[np.ndarray] = None
    components: tuple = ()
    batch: int = 0

    @classmethod
    def none(cls) -> "NoiseModel":
        return cls(kind="none")

    @classmethod
    def gaussian(cls, sigma) -> "NoiseModel":
        sig = np.atleast_1d(np.asarray(sigma, dtype=float))
        if np.any(sig < 0):
            raise ValueError("sigma must be >= 0 componentwise")
        return cls(kind="additive_gaussian", sigma=sig)

    @classmethod
    def finite_sum(cls, components: Sequence[Callable], batch: int) -> "NoiseModel":
        if not components:
            raise ValueError("finite_sum needs at least one component gradient")
        if not (1 <= batch <= len(components)):
            raise ValueError("batch size must lie in [1, n_components]")
        return cls(kind="finite_sum", components=tuple(components), batch=int(batch))


@dataclass(frozen=True)
class CriticalPoint:
    x: np.ndarray
    kind: str  # "min" | "saddle" | "max"

    def __post_init__(self):
        object.__setattr__(self, "x", np.asarray(self.x, dtype=float))
        if self.kind not in ("min", "saddle", "max"):
            raise ValueError(f"unknown critical point kind {self.kind!r}")


@dataclass(frozen=True)
class Problem:
    """Objective with exact gradient, optional Hessian, and noise model.

    ``fun``/``grad`` must broadcast over leading axes: ``grad`` maps
    (..., dim) -> (..., dim) and ``fun`` maps (..., dim) -> (...).
    Declared critical points are part of the definition (they anchor the
    covariance and trap analyses); they are not searched for numerically.
    """

    dim: int
    fun: Callable[[np.ndarray], np.ndarray]
    grad: Callable[[np.ndarray], np.ndarray]
    hess: Optional[Callable[[np.ndarray], np.ndarray]] = None
    noise: NoiseModel = field(default_factory=NoiseModel.none)
    critical_points: tuple = ()
    f_star: Optional[float] = None
    name: str = "problem"

    def minima(self) -> list[CriticalPoint]:
        return [c for c in self.critical_points if c.kind == "min"]

    def with_noise(self, noise: NoiseModel) -> "Problem":
        return Problem(self.dim, self.fun, self.grad, self.hess, noise,
                       self.critical_points, self.f_star, self.name)


@dataclass(frozen=True)
class GradientSample:
    """One draw of the stochastic gradient and its componentwise square."""

    g: np.ndarray
    g_sq: np.ndarray

    @classmethod
    def of(cls, g: np.ndarray) -> "GradientSample":
        g = np.asarray(g, dtype=float)
        return cls(g=g, g_sq=g * g)


# -- sampling and moments -----------------------------------------------------


def sample_grad(problem: Problem, x, rng: np.random.Generator) -> GradientSample:
    """Unbiased stochastic gradient draw at x from the given stream."""
    x = np.asarray(x, dtype=float)
    noise = problem.noise
    if noise.kind == "none":
        return GradientSample.of(problem.grad(x))
    if noise.kind == "additive_gaussian":
        zeta = rng.standard_normal(x.shape)
        return GradientSample.of(problem.grad(x) + noise.sigma * zeta)
    if noise.kind == "finite_sum":
        idx = rng.choice(len(noise.components), size=noise.batch, replace=False)
        g = np.mean([noise.components[i](x) for i in idx], axis=0)
        return GradientSample.of(g)
    raise UnsupportedNoiseError(f"unknown noise kind {noise.kind!r}")


def _finite_sum_scale(noise: NoiseModel) -> float:
    # variance of a size-b uniform minibatch mean without replacement
    m, b = len(noise.components), noise.batch
    if m == 1 or b == m:
        return 0.0
    return (m - b) / (b * (m - 1))


def second_moment(problem: Problem, x) -> np.ndarray:
    """Componentwise S(x) = E[g(x, xi)^2].  Broadcasts over leading axes."""
    x = np.asarray(x, dtype=float)
    g = problem.grad(x)
    noise = problem.noise
    if noise.kind == "none":
        return g * g
    if noise.kind == "additive_gaussian":
        return g * g + noise.sigma ** 2
    if noise.kind == "finite_sum":
        comps = np.stack([c(x) for c in noise.components], axis=0)
        pop_var = np.mean(comps * comps, axis=0) - g * g
        return g * g + _finite_sum_scale(noise) * pop_var
    raise UnsupportedNoiseError(f"no closed-form second moment for noise kind {noise.kind!r}")


def noise_covariance(problem: Problem, x) -> np.ndarray:
    """Full covariance matrix of the stochastic gradient at a single point x."""
    x = np.asarray(x, dtype=float)
    d = problem.dim
    noise = problem.noise
    if noise.kind == "none":
        return np.zeros((d, d))
    if noise.kind == "additive_gaussian":
        return np.diag(np.broadcast_to(noise.sigma ** 2, (d,)).astype(float))
    if noise.kind == "finite_sum":
        comps = np.stack([c(x) for c in noise.components], axis=0)
        centered = comps - problem.grad(x)
        pop_cov = centered.T @ centered / len(noise.components)
        return _finite_sum_scale(noise) * pop_cov
    raise UnsupportedNoiseError(f"no closed-form covariance for noise kind {noise.kind!r}")


def grad_second_moment_jacobian(problem: Problem, x) -> np.ndarray:
    """Jacobian of S at a single point, for noise with closed-form S.

    For zero/additive noise S(x) = grad(x)^2 (+ const), so
    dS/dx = 2 diag(grad(x)) hess(x); it vanishes at critical points.
    """
    x = np.asarray(x, dtype=float)
    if problem.noise.kind in ("none", "additive_gaussian"):
        if problem.hess is None:
            raise ValueError(f"problem {problem.name!r} has no Hessian")
        return 2.0 * np.diag(problem.grad(x)) @ problem.hess(x)
    raise UnsupportedNoiseError(
        f"second-moment Jacobian for noise kind {problem.noise.kind!r} must be supplied by the caller")


# -- builtin problems ---------------------------------------------------------


def quadratic_diag(dim: int, eigenvalues, sigma=None) -> Problem:
    """F(x) = 0.5 <x, Lambda x> with Lambda = diag(eigenvalues) > 0."""
    lam = np.asarray(eigenvalues, dtype=float)
    if lam.shape != (dim,) or np.any(lam <= 0):
        raise ValueError("need dim positive eigenvalues")
    noise = NoiseModel.none() if sigma is None else NoiseModel.gaussian(np.broadcast_to(sigma, (dim,)))
    return Problem(
        dim=dim,
        fun=lambda x: 0.5 * np.sum(lam * np.asarray(x, float) ** 2, axis=-1),
        grad=lambda x: lam * np.asarray(x, float),
        hess=lambda x: np.diag(lam),
        noise=noise,
        critical_points=(CriticalPoint(np.zeros(dim), "min"),),
        f_star=0.0,
        name="quadratic_diag",
    )


def saddle_quartic(sigma=None) -> Problem:
    """F(x, y) = (x^4 + y^4)/4 + (x^2 - y^2)/2: one saddle, two minima.

    Coercive, with critical points (0, 0) (saddle, Hessian diag(1, -1))
    and (0, +-1) (minima, Hessian diag(1, 2)).
    """
    noise = NoiseModel.none() if sigma is None else NoiseModel.gaussian(np.broadcast_to(sigma, (2,)))

    def fun(z):
        z = np.asarray(z, dtype=float)
        x, y = z[..., 0], z[..., 1]
        return (x ** 4 + y ** 4) / 4.0 + (x ** 2 - y ** 2) / 2.0

    def grad(z):
        z = np.asarray(z, dtype=float)
        x, y = z[..., 0], z[..., 1]
        return np.stack([x ** 3 + x, y ** 3 - y], axis=-1)

    def hess(z):
        z = np.asarray(z, dtype=float)
        return np.diag(np.stack([3.0 * z[0] ** 2 + 1.0, 3.0 * z[1] ** 2 - 1.0]))

    return Problem(
        dim=2,
        fun=fun,
        grad=grad,
        hess=hess,
        noise=noise,
        critical_points=(
            CriticalPoint([0.0, 0.0], "saddle"),
            CriticalPoint([0.0, 1.0], "min"),
            CriticalPoint([0.0, -1.0], "min"),
        ),
        f_star=-0.25,
        name="saddle_quartic",
    )


def finite_sum_ls(n_points: int = 8, dim: int = 3, batch: int = 1, data_seed: int = 7) -> Problem:
    """Least squares over k data rows, with minibatch component noise.

    F(x) = (1/2k) sum_i (<a_i, x> - b_i)^2; the stochastic gradient
    averages ``batch`` component gradients drawn uniformly without
    replacement.  The declared minimum is the normal-equations solution.
    """
    rng = make_rng(data_seed)
    a_mat = rng.standard_normal((n_points, dim))
    b_vec = rng.standard_normal(n_points)
    x_opt = np.linalg.solve(a_mat.T @ a_mat, a_mat.T @ b_vec)
    f_opt = 0.5 * np.mean((a_mat @ x_opt - b_vec) ** 2)

    def fun(x):
        x = np.asarray(x, dtype=float)
        resid = np.tensordot(x, a_mat, axes=([-1], [1])) - b_vec
        return 0.5 * np.mean(resid * resid, axis=-1)

    def grad(x):
        x = np.asarray(x, dtype=float)
        resid = np.tensordot(x, a_mat, axes=([-1], [1])) - b_vec
        return np.tensordot(resid, a_mat, axes=([-1], [0])) / n_points

    hess_mat = a_mat.T @ a_mat / n_points

    def component(i):
        a_i, b_i = a_mat[i], b_vec[i]
        return lambda x: a_i * (np.sum(a_i * np.asarray(x, float), axis=-1, keepdims=True) - b_i)

    comps = tuple(component(i) for i in range(n_points))
    return Problem(
        dim=dim,
        fun=fun,
        grad=grad,
        hess=lambda x: hess_mat,
        noise=NoiseModel.finite_sum(comps, batch),
        critical_points=(CriticalPoint(x_opt, "min"),),
        f_star=float(f_opt),
        name="finite_sum_ls",
    )


def builtin_problems() -> dict:
    """Catalog of builtin problem factories, keyed by name."""
    return {
        "quadratic_diag": quadratic_diag,
        "saddle_quartic": saddle_quartic,
        "finite_sum_ls": finite_sum_ls,
    }

"""Reference integrators for the three limiting ODEs plus trajectory
diagnostics (energies, Lyapunov surrogates, equilibrium residuals).

The integrator is a classic fixed-base-step RK4 with step-halving error
control: simple, verifiable by an order check, and plenty at desk scale.
The second-moment component is clipped at zero when roundoff produces
values in (-1e-14, 0); anything more negative raises, because it signals
a genuine constraint violation rather than floating-point dust.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.interpolate import CubicHermiteSpline

from .optimize import IterateState
from .problems import Problem, second_moment
from .schedules import ScheduleSpec, ScheduleValues

__all__ = [
    "Trajectory",
    "StateDerivative",
    "BlowUpError",
    "ChangeOfVarReport",
    "ODE_KINDS",
    "rhs",
    "integrate",
    "energy",
    "energy_nesterov",
    "w_delta",
    "residual_to_equilibrium",
    "nesterov_change_of_variable",
    "compatible_state",
    "trajectory_to_csv",
]

ODE_KINDS = ("general", "adagrad", "nesterov")

_V_CLIP = 1e-14
_BLOWUP = 1e12


class BlowUpError(RuntimeError):
    """The trajectory left the ball of radius 1e12: assumptions are violated."""


@dataclass(frozen=True)
class StateDerivative:
    """Time derivative of (v, m, x); unlike a state, dv may be negative."""

    dv: np.ndarray
    dm: np.ndarray
    dx: np.ndarray

    def __post_init__(self):
        for name in ("dv", "dm", "dx"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))


@dataclass(frozen=True)
class Trajectory:
    """Accepted integration steps: times, states and the energy diagnostic.

    The v block is empty for the nesterov kind and the m block is empty
    for the adagrad kind.
    """

    kind: str
    times: np.ndarray
    v: np.ndarray          # (n, dim_v)
    m: np.ndarray          # (n, dim_m)
    x: np.ndarray          # (n, dim)
    energies: np.ndarray   # (n,)

    def __post_init__(self):
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("trajectory times must be strictly increasing")
        if self.v.size and np.any(self.v < 0):
            raise ValueError("v must stay >= 0 along the trajectory")

    def state(self, i: int) -> IterateState:
        return IterateState(self.v[i], self.m[i], self.x[i])

    @property
    def final(self) -> IterateState:
        return self.state(len(self.times) - 1)


def _check_kind(kind: str, spec: ScheduleSpec):
    if kind not in ODE_KINDS:
        raise ValueError(f"kind must be one of {ODE_KINDS}")
    if kind == "nesterov" and spec.kind != "nag":
        raise ValueError("the nesterov ODE takes a nag-kind schedule (it supplies alpha)")


def rhs(kind: str, spec: ScheduleSpec, problem: Problem, z: IterateState, t: float,
        eps: float) -> StateDerivative:
    """Time derivative of the state for the chosen dynamics at time t > 0."""
    _check_kind(kind, spec)
    if not t > 0:
        raise ValueError("rhs is defined for t > 0")
    if z.v.size and np.any(z.v < -eps):
        raise ValueError("v + eps must stay positive")
    if kind == "nesterov":
        alpha = spec.nag_alpha
        dm = problem.grad(z.x) - (alpha / t) * z.m
        return StateDerivative(np.zeros(0), dm, -z.m)
    h, r, p, q = (float(np.asarray(fn(t))) for fn in (spec.h_fn, spec.r_fn, spec.p_fn, spec.q_fn))
    dv = p * second_moment(problem, z.x) - q * z.v
    if kind == "adagrad":
        dx = -problem.grad(z.x) / np.sqrt(z.v + eps)
        return StateDerivative(dv, np.zeros(0), dx)
    dm = h * problem.grad(z.x) - r * z.m
    dx = -z.m / np.sqrt(z.v + eps)
    return StateDerivative(dv, dm, dx)


# -- energies and residuals ---------------------------------------------------


def energy(problem: Problem, h: float, z: IterateState, eps: float, f_star: float):
    """h (F(x) - F_star) + 0.5 || m / (v + eps)^{1/4} ||^2 (nonincreasing
    along the general dynamics under the validated schedule assumptions)."""
    if z.v.size and np.any(z.v < 0):
        raise ValueError("energy needs v >= 0")
    quad = 0.0
    if z.m.size:
        vv = z.v if z.v.size else np.zeros_like(z.m)
        quad = 0.5 * float(np.sum(z.m ** 2 / np.sqrt(vv + eps)))
    return h * (float(problem.fun(z.x)) - f_star) + quad


def energy_nesterov(problem: Problem, z: IterateState) -> float:
    """F(x) + 0.5 ||m||^2, nonincreasing along the nesterov dynamics."""
    return float(problem.fun(z.x)) + 0.5 * float(np.sum(z.m ** 2))


def _limit_energy(problem: Problem, limits: ScheduleValues, z: IterateState,
                  eps: float, f_star: float) -> float:
    return energy(problem, limits.h, z, eps, f_star)


def w_delta(problem: Problem, z: IterateState, delta: float, limits: ScheduleValues,
            eps: float, f_star: float) -> float:
    """Strict-Lyapunov candidate for the limiting autonomous dynamics.

    E_inf(z) - delta <grad F(x), m> + delta || q_inf v - p_inf S(x) ||^2;
    at an equilibrium it reduces to h_inf (F(x*) - F_star).
    """
    if delta < 0:
        raise ValueError("delta must be >= 0")
    base = _limit_energy(problem, limits, z, eps, f_star)
    m = z.m if z.m.size else np.zeros(problem.dim)
    v = z.v if z.v.size else np.zeros(problem.dim)
    cross = float(np.dot(problem.grad(z.x), m))
    gap = float(np.sum((limits.q * v - limits.p * second_moment(problem, z.x)) ** 2))
    return base - delta * cross + delta * gap


def residual_to_equilibrium(kind: str, problem: Problem, z, limits: ScheduleValues):
    """max(||grad F(x)||, ||m||, ||q_inf v - p_inf S(x)||); the v term is
    dropped for the nesterov kind.  Batch-aware over leading axes."""
    if isinstance(z, IterateState):
        v, m, x = z.v, z.m, z.x
    else:
        v, m, x = (np.asarray(a, dtype=float) for a in z)
    grad_norm = np.linalg.norm(problem.grad(x), axis=-1)
    m_norm = np.linalg.norm(m, axis=-1) if m.shape[-1] else np.zeros_like(grad_norm)
    out = np.maximum(grad_norm, m_norm)
    if kind not in ("nesterov", "nag"):
        gap = np.linalg.norm(limits.q * v - limits.p * second_moment(problem, x), axis=-1)
        out = np.maximum(out, gap)
    return float(out) if out.ndim == 0 else out


# -- the integrator -----------------------------------------------------------


def _pack(z: IterateState) -> np.ndarray:
    return np.concatenate([z.v, z.m, z.x])


def _state_dims(kind: str, dim: int) -> tuple[int, int]:
    return {"general": (dim, dim), "adagrad": (dim, 0), "nesterov": (0, dim)}[kind]


def _unpack(y: np.ndarray, dv: int, dm: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    return y[:dv], y[dv:dv + dm], y[dv + dm:]


def integrate(kind: str, spec: ScheduleSpec, problem: Problem, z0: IterateState,
              t0: float, t_final: float, eps: float = 1e-8, tol: Optional[float] = 1e-9,
              base_step: float = 0.05) -> Trajectory:
    """Integrate from t0 to t_final with RK4 and step-halving control.

    ``tol`` bounds the per-step Richardson error estimate; ``tol=None``
    runs plain fixed steps (useful for order checks).  Energies are
    recorded at every accepted step.  Raises BlowUpError when the state
    norm exceeds 1e12.
    """
    _check_kind(kind, spec)
    if not (t_final >= t0 > 0):
        raise ValueError("need t_final >= t0 > 0")
    dim = problem.dim
    dv, dm = _state_dims(kind, dim)
    if z0.v.shape != (dv,) or z0.m.shape != (dm,) or z0.x.shape != (dim,):
        raise ValueError(f"initial state has wrong shape for kind {kind!r}")
    f_star = problem.f_star if problem.f_star is not None else 0.0

    def f(t, y):
        v, m, x = _unpack(y, dv, dm)
        dz = rhs(kind, spec, problem, IterateState(np.maximum(v, 0.0), m, x), t, eps)
        return np.concatenate([dz.dv, dz.dm, dz.dx])

    def rk4_step(t, y, h):
        k1 = f(t, y)
        k2 = f(t + 0.5 * h, y + 0.5 * h * k1)
        k3 = f(t + 0.5 * h, y + 0.5 * h * k2)
        k4 = f(t + h, y + h * k3)
        return y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)

    def record_energy(t, v, m, x) -> float:
        state = IterateState(v, m, x)
        if kind == "nesterov":
            return energy_nesterov(problem, state)
        h_t = float(np.asarray(spec.h_fn(t)))
        return energy(problem, h_t, state, eps, f_star)

    t = float(t0)
    y = _pack(z0)
    times = [t]
    states = [y.copy()]
    energies = [record_energy(t, *_unpack(y, dv, dm))]

    while t < t_final - 1e-14 * max(1.0, t_final):
        h = min(base_step, t_final - t)
        if tol is None:
            y_new = rk4_step(t, y, h)
        else:
            while True:
                y_full = rk4_step(t, y, h)
                y_mid = rk4_step(t, y, 0.5 * h)
                y_new = rk4_step(t + 0.5 * h, y_mid, 0.5 * h)
                err = np.max(np.abs(y_full - y_new)) / 15.0
                if err <= tol or h <= base_step * 2.0 ** -40:
                    break
                h *= 0.5
        t = t + h
        v, m, x = _unpack(y_new, dv, dm)
        if dv:
            low = v.min()
            if low < -_V_CLIP:
                raise ValueError(f"v component reached {low:.3e} < -{_V_CLIP}: constraint violated")
            v = np.maximum(v, 0.0)
            y_new = np.concatenate([v, m, x])
        if not np.all(np.isfinite(y_new)) or np.max(np.abs(y_new)) > _BLOWUP:
            raise BlowUpError(f"state norm exceeded {_BLOWUP:.0e} at t={t:.6g}")
        y = y_new
        times.append(t)
        states.append(y.copy())
        energies.append(record_energy(t, v, m, x))

    arr = np.asarray(states)
    return Trajectory(
        kind=kind,
        times=np.asarray(times),
        v=arr[:, :dv],
        m=arr[:, dv:dv + dm],
        x=arr[:, dv + dm:],
        energies=np.asarray(energies),
    )


def compatible_state(spec: ScheduleSpec, problem: Problem, x0, eps: float = 1e-8) -> IterateState:
    """The compatible initial condition m0 = grad F(x0) lim h/r,
    v0 = S(x0) lim p/q, with the limits taken at t -> 0+.

    Ratios with a vanishing denominator are taken as 0 (the matching
    component is inert for such schedules).
    """
    x0 = np.asarray(x0, dtype=float)
    t_small = 1e-6
    h, r, p, q = (float(np.asarray(fn(t_small))) for fn in (spec.h_fn, spec.r_fn, spec.p_fn, spec.q_fn))
    hr = h / r if r > 0 else 0.0
    pq = p / q if q > 0 else 0.0
    return IterateState(pq * second_moment(problem, x0), hr * problem.grad(x0), x0)


# -- change of variable for the nesterov dynamics ------------------------------


@dataclass(frozen=True)
class ChangeOfVarReport:
    kappa: float
    beta: float
    max_residual: float
    times: np.ndarray


def nesterov_change_of_variable(traj: Trajectory, problem: Problem, alpha: float,
                                n_check: int = 200) -> ChangeOfVarReport:
    """Check the time-rescaled trajectory against the averaged-gradient flow.

    With kappa = sqrt(2 alpha + 2) and beta = kappa^2 / 4, the rescaled
    pair y(t) = kappa m(kappa sqrt(t)) / (2 sqrt(t)), u(t) = x(kappa
    sqrt(t)) must satisfy dy/dt = (beta/t)(grad F(u) - y), du/dt = -y.
    Returns the max residual of both equations on a grid inside the
    transformed time range.
    """
    if traj.kind != "nesterov":
        raise ValueError("change of variable applies to nesterov trajectories")
    kappa = float(np.sqrt(2.0 * alpha + 2.0))
    beta = kappa * kappa / 4.0

    s_lo, s_hi = traj.times[0], traj.times[-1]
    t_lo, t_hi = (s_lo / kappa) ** 2, (s_hi / kappa) ** 2
    if not t_hi > t_lo:
        raise ValueError("trajectory too short for the transformed time range")
    pad = 1e-9 * (t_hi - t_lo)
    times = np.linspace(t_lo + pad, t_hi - pad, n_check)
    s_times = kappa * np.sqrt(times)
    if s_times[0] < s_lo - 1e-12 or s_times[-1] > s_hi + 1e-12:
        raise ValueError("transformed times exit the integrated range")

    # Hermite interpolation with the exact ODE derivatives at the nodes
    dm = np.stack([problem.grad(traj.x[i]) - (alpha / traj.times[i]) * traj.m[i]
                   for i in range(len(traj.times))])
    dx = -traj.m
    m_spline = CubicHermiteSpline(traj.times, traj.m, dm, axis=0)
    x_spline = CubicHermiteSpline(traj.times, traj.x, dx, axis=0)
    m_der = m_spline.derivative()
    x_der = x_spline.derivative()

    m_s = m_spline(s_times)
    sqrt_t = np.sqrt(times)[:, None]
    y = kappa * m_s / (2.0 * sqrt_t)
    u = x_spline(s_times)
    dy = (kappa ** 2 / (4.0 * times))[:, None] * m_der(s_times) \
        - (kappa / (4.0 * times ** 1.5))[:, None] * m_s
    du = (kappa / (2.0 * np.sqrt(times)))[:, None] * x_der(s_times)

    grad_u = np.stack([problem.grad(u[i]) for i in range(len(times))])
    res_y = dy - (beta / times)[:, None] * (grad_u - y)
    res_u = du + y
    max_res = max(float(np.abs(res_y).max()), float(np.abs(res_u).max()))
    return ChangeOfVarReport(kappa=kappa, beta=beta, max_residual=max_res, times=times)


# -- CSV export ---------------------------------------------------------------


def trajectory_to_csv(traj: Trajectory, path) -> None:
    """Columns: t, v_1..v_dv, m_1..m_dm, x_1..x_d, energy (17 significant digits)."""
    dv, dm, d = traj.v.shape[1], traj.m.shape[1], traj.x.shape[1]
    header = (["t"] + [f"v_{i + 1}" for i in range(dv)] + [f"m_{i + 1}" for i in range(dm)]
              + [f"x_{i + 1}" for i in range(d)] + ["energy"])
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for i in range(len(traj.times)):
            row = np.concatenate([[traj.times[i]], traj.v[i], traj.m[i], traj.x[i],
                                  [traj.energies[i]]])
            fh.write(",".join(f"{val:.17g}" for val in row) + "\n")

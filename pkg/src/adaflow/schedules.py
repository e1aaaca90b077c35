"""Time-varying coefficient schedules (h, r, p, q) and their sanity checks.

The four nonnegative functions of time weight, respectively, gradient
injection (h), momentum damping (r), squared-gradient injection (p) and
squared-gradient damping (q) in the continuous dynamics, and are sampled
at the cumulated stepsizes by the discrete algorithms.  Specs are
immutable and safe to share across threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

__all__ = [
    "ScheduleValues",
    "ScheduleSpec",
    "AssumptionReport",
    "adam_a",
    "eval_schedule",
    "validate_assumptions",
    "default_validation_grid",
]

#: below this time the nag damping alpha/t overflows; treated as a domain error
_NAG_MIN_TIME = 1e-12


def adam_a(t, lam: float, alpha: float):
    """Adam coefficient a(t) = (1 - exp(-lam*alpha)) / (lam * (1 - exp(-alpha*t))).

    Nonincreasing in t with limit (1 - exp(-lam*alpha))/lam, and t*a(t)
    stays bounded as t -> 0+.  Accepts a scalar or an ndarray of times.
    """
    if lam <= 0 or alpha <= 0:
        raise ValueError(f"adam_a needs lam > 0 and alpha > 0, got {lam}, {alpha}")
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr <= 0):
        raise ValueError("adam_a is defined for t > 0 only")
    # -expm1(-x) = 1 - exp(-x), accurate for small arguments
    num = -np.expm1(-lam * alpha) / lam
    out = num / (-np.expm1(-alpha * t_arr))
    return float(out) if np.isscalar(t) or out.ndim == 0 else out


@dataclass(frozen=True)
class ScheduleValues:
    """The four schedule values at a single time."""

    h: float
    r: float
    p: float
    q: float

    def __post_init__(self):
        for name in ("h", "r", "p", "q"):
            val = getattr(self, name)
            if not math.isfinite(val) or val < 0:
                raise ValueError(f"schedule value {name}={val} must be finite and >= 0")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.h, self.r, self.p, self.q)


@dataclass(frozen=True)
class ScheduleSpec:
    """One choice of the four coefficient functions plus their declared limits.

    Use the factory classmethods (``adam``, ``constant``, ``heavy_ball``,
    ``nag``, ``custom``); the constructor itself is an implementation
    detail.  Limits are always declared, never extrapolated: they feed the
    equilibrium set, the CLT matrices and the trap linearization exactly.
    """

    kind: str
    h_fn: Callable[[np.ndarray], np.ndarray] = field(repr=False)
    r_fn: Callable[[np.ndarray], np.ndarray] = field(repr=False)
    p_fn: Callable[[np.ndarray], np.ndarray] = field(repr=False)
    q_fn: Callable[[np.ndarray], np.ndarray] = field(repr=False)
    limits: ScheduleValues = field(default=None)  # type: ignore[assignment]
    params: tuple = ()

    # -- factories ----------------------------------------------------------

    @classmethod
    def adam(cls, lam: float, alpha1: float, alpha2: float) -> "ScheduleSpec":
        """h = r = a(t, lam, alpha1) and p = q = a(t, lam, alpha2)."""
        if min(lam, alpha1, alpha2) <= 0:
            raise ValueError("adam kind needs lam, alpha1, alpha2 > 0")
        a1_inf = -math.expm1(-lam * alpha1) / lam
        a2_inf = -math.expm1(-lam * alpha2) / lam
        return cls(
            kind="adam",
            h_fn=lambda t: adam_a(t, lam, alpha1),
            r_fn=lambda t: adam_a(t, lam, alpha1),
            p_fn=lambda t: adam_a(t, lam, alpha2),
            q_fn=lambda t: adam_a(t, lam, alpha2),
            limits=ScheduleValues(a1_inf, a1_inf, a2_inf, a2_inf),
            params=(("lam", lam), ("alpha1", alpha1), ("alpha2", alpha2)),
        )

    @classmethod
    def constant(cls, h0: float, r0: float, p0: float, q0: float) -> "ScheduleSpec":
        vals = ScheduleValues(h0, r0, p0, q0)
        return cls(
            kind="constant",
            h_fn=lambda t: np.full_like(np.asarray(t, float), h0),
            r_fn=lambda t: np.full_like(np.asarray(t, float), r0),
            p_fn=lambda t: np.full_like(np.asarray(t, float), p0),
            q_fn=lambda t: np.full_like(np.asarray(t, float), q0),
            limits=vals,
            params=(("h0", h0), ("r0", r0), ("p0", p0), ("q0", q0)),
        )

    @classmethod
    def heavy_ball(cls, r: float) -> "ScheduleSpec":
        """h = r constant, p = q = 0: the second-moment state is frozen."""
        if r <= 0:
            raise ValueError("heavy_ball kind needs r > 0")
        spec = cls.constant(r, r, 0.0, 0.0)
        return cls(
            kind="heavy_ball",
            h_fn=spec.h_fn,
            r_fn=spec.r_fn,
            p_fn=spec.p_fn,
            q_fn=spec.q_fn,
            limits=spec.limits,
            params=(("r", r),),
        )

    @classmethod
    def nag(cls, alpha: float) -> "ScheduleSpec":
        """h = 1, r = alpha/t, p = q = 0 (Nesterov-type vanishing damping)."""
        if alpha <= 0:
            raise ValueError("nag kind needs alpha > 0")

        def r_fn(t):
            t_arr = np.asarray(t, dtype=float)
            if np.any(t_arr < _NAG_MIN_TIME):
                raise ValueError(f"nag schedule undefined below t={_NAG_MIN_TIME}")
            return alpha / t_arr

        return cls(
            kind="nag",
            h_fn=lambda t: np.ones_like(np.asarray(t, float)),
            r_fn=r_fn,
            p_fn=lambda t: np.zeros_like(np.asarray(t, float)),
            q_fn=lambda t: np.zeros_like(np.asarray(t, float)),
            limits=ScheduleValues(1.0, 0.0, 0.0, 0.0),
            params=(("alpha", alpha),),
        )

    @classmethod
    def custom(cls, h_fn, r_fn, p_fn, q_fn, limits: tuple[float, float, float, float]) -> "ScheduleSpec":
        """Four scalar functions of t with explicitly declared limits."""
        return cls(
            kind="custom",
            h_fn=lambda t: np.asarray(h_fn(t), dtype=float),
            r_fn=lambda t: np.asarray(r_fn(t), dtype=float),
            p_fn=lambda t: np.asarray(p_fn(t), dtype=float),
            q_fn=lambda t: np.asarray(q_fn(t), dtype=float),
            limits=ScheduleValues(*limits),
        )

    # -- evaluation ----------------------------------------------------------

    @property
    def nag_alpha(self) -> float:
        if self.kind != "nag":
            raise ValueError("nag_alpha is only defined for the nag kind")
        return dict(self.params)["alpha"]

    def values_on(self, grid) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Vectorized (h, r, p, q) on an array of positive times."""
        t = np.asarray(grid, dtype=float)
        if np.any(t <= 0):
            raise ValueError("schedules are defined for t > 0 only")
        out = tuple(np.broadcast_to(fn(t), t.shape).astype(float, copy=False)
                    for fn in (self.h_fn, self.r_fn, self.p_fn, self.q_fn))
        for name, arr in zip("hrpq", out):
            if not np.all(np.isfinite(arr)) or np.any(arr < 0):
                raise ValueError(f"schedule function {name} produced a non-finite or negative value")
        return out


def eval_schedule(spec: ScheduleSpec, t: float) -> ScheduleValues:
    """Evaluate the four schedule values at one positive time."""
    if not (t > 0):
        raise ValueError(f"schedule time must be > 0, got {t}")
    h, r, p, q = (float(np.asarray(fn(t))) for fn in (spec.h_fn, spec.r_fn, spec.p_fn, spec.q_fn))
    return ScheduleValues(h, r, p, q)


def default_validation_grid() -> np.ndarray:
    """64 log-spaced sample times in [1e-3, 1e6]."""
    return np.logspace(-3, 6, 64)


@dataclass(frozen=True)
class AssumptionReport:
    """Grid-sampled check of the long-run stability conditions.

    Each flag certifies one clause *on the sampled grid only* -- a
    necessary-condition check, not a proof.  ``p_convergent`` in
    particular is a heuristic stabilization test on the grid tail.
    """

    clauses: dict
    notes: dict

    @property
    def ok(self) -> bool:
        return all(self.clauses.values())

    def failed(self) -> list[str]:
        return [k for k, v in self.clauses.items() if not v]


def _nonincreasing(values: np.ndarray) -> bool:
    slack = 1e-12 * (1.0 + np.abs(values[:-1]))
    return bool(np.all(values[1:] <= values[:-1] + slack))


def validate_assumptions(spec: ScheduleSpec, grid=None) -> AssumptionReport:
    """Check the clauses of the stability assumption on a sample grid.

    Clauses: h nonincreasing with positive limit; r and q nonincreasing
    with positive limits; p convergent; r(t) >= q(t)/4 on the grid;
    r_inf > q_inf / 4.  Violations are reported, never raised.
    """
    if grid is None:
        grid = default_validation_grid()
    grid = np.asarray(grid, dtype=float)
    if grid.size == 0 or np.any(grid <= 0) or np.any(np.diff(grid) <= 0):
        raise ValueError("validation grid must be nonempty, positive and strictly increasing")

    try:
        h, r, p, q = spec.values_on(grid)
    except ValueError as exc:
        # a schedule that cannot even be evaluated fails every clause
        clauses = {name: False for name in (
            "h_nonincreasing_positive_limit",
            "rq_nonincreasing_positive_limits",
            "p_convergent",
            "r_ge_q_over_4_on_grid",
            "r_inf_gt_q_inf_over_4",
        )}
        return AssumptionReport(clauses, {"evaluation": str(exc)})

    lim = spec.limits
    notes: dict = {}

    h_ok = _nonincreasing(h) and lim.h > 0
    rq_ok = _nonincreasing(r) and _nonincreasing(q) and lim.r > 0 and lim.q > 0

    # Cauchy-type stabilization on the tail of the grid (heuristic)
    tail = p[-max(2, grid.size // 4):]
    p_tol = 1e-6 * (1.0 + abs(lim.p))
    p_ok = bool(tail.max() - tail.min() <= p_tol and abs(tail[-1] - lim.p) <= p_tol)
    notes["p_convergent"] = "tail stabilization heuristic, not a proof of convergence"

    ratio_ok = bool(np.all(r >= q / 4.0 - 1e-12 * (1.0 + np.abs(q))))
    ratio_inf_ok = lim.r > lim.q / 4.0

    clauses = {
        "h_nonincreasing_positive_limit": bool(h_ok),
        "rq_nonincreasing_positive_limits": bool(rq_ok),
        "p_convergent": p_ok,
        "r_ge_q_over_4_on_grid": ratio_ok,
        "r_inf_gt_q_inf_over_4": bool(ratio_inf_ok),
    }
    notes["scope"] = "sampled necessary-condition check on the supplied grid"
    return AssumptionReport(clauses, notes)

"""Batch experiment runner: ``adaflow {ode|optimize|clt|traps}``.

Every subcommand is pure in (config, master seed): rerunning reproduces
all CSV outputs byte-for-byte, for any worker count.  Configs are JSON
with a versioned schema; unknown keys are rejected so typos fail loudly.
Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .clt import (CltInputs, DegenerateDenominatorError, StepsizeConstraintError,
                  analyze, empirical_clt)
from .integrate import (BlowUpError, compatible_state, integrate,
                        nesterov_change_of_variable, residual_to_equilibrium,
                        trajectory_to_csv)
from .optimize import (GuardViolationError, IterateState, StepsizeSpec, run_many)
from .problems import Problem, builtin_problems
from .schedules import ScheduleSpec, validate_assumptions
from .spectral import NonHurwitzError
from .traps import analyze_trap, check_avt_assumptions, escape_experiment, nag_trap_analysis

CONFIG_VERSION = 1

__all__ = ["ConfigError", "ExperimentConfig", "main",
           "cmd_ode", "cmd_optimize", "cmd_clt", "cmd_traps"]


class ConfigError(ValueError):
    pass


def _fmt(x: float) -> str:
    return f"{float(x):.17g}"


# -- config schema --------------------------------------------------------------

_NUM = (int, float)

_PROBLEM_KEYS = {
    "quadratic_diag": {"dim": (True, int), "eigenvalues": (True, list), "sigma": (False, object)},
    "saddle_quartic": {"sigma": (False, object)},
    "finite_sum_ls": {"n_points": (False, int), "dim": (False, int),
                      "batch": (False, int), "data_seed": (False, int)},
}

_SCHEDULE_KEYS = {
    "adam": {"lam": (True, _NUM), "alpha1": (True, _NUM), "alpha2": (True, _NUM)},
    "constant": {"h0": (True, _NUM), "r0": (True, _NUM), "p0": (True, _NUM), "q0": (True, _NUM)},
    "heavy_ball": {"r": (True, _NUM)},
    "nag": {"alpha": (True, _NUM)},
}

_SECTION_KEYS = {
    "ode": {"kind": (True, str), "t0": (False, _NUM), "t_final": (True, _NUM),
            "tol": (False, _NUM), "base_step": (False, _NUM), "epsilon": (False, _NUM),
            "x0": (True, list), "init": (False, str),
            "check_change_of_variable": (False, bool)},
    "optimize": {"algorithm": (True, str), "n_iter": (True, int), "n_runs": (True, int),
                 "seed": (True, int), "record_stride": (False, int),
                 "epsilon": (False, _NUM), "x0": (True, list)},
    "clt": {"n_iter": (True, int), "n_runs": (True, int), "seed": (True, int),
            "epsilon": (False, _NUM), "critical_point": (False, int),
            "filter_residual": (False, _NUM)},
    "traps": {"algorithm": (True, str), "n_iter": (True, int), "n_runs": (True, int),
              "seed": (True, int), "init_radius": (True, _NUM),
              "classify_radius": (False, _NUM), "epsilon": (False, _NUM),
              "critical_point": (False, int), "avt_n_max": (False, int)},
}

_NEEDS_STEPSIZE = {"optimize", "clt", "traps"}


def _check_keys(table: dict, allowed: dict, where: str):
    if not isinstance(table, dict):
        raise ConfigError(f"{where} must be an object")
    for key in table:
        if key not in allowed:
            raise ConfigError(f"unknown key {key!r} in {where}")
    for key, (required, typ) in allowed.items():
        if key in table:
            if typ is object:
                continue
            if typ is int and isinstance(table[key], bool):
                raise ConfigError(f"{where}.{key} must be an integer")
            if not isinstance(table[key], typ):
                raise ConfigError(f"{where}.{key} has the wrong type")
        elif required:
            raise ConfigError(f"missing key {key!r} in {where}")


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated, canonically serializable experiment description."""

    subcommand: str
    data: dict

    @classmethod
    def from_dict(cls, raw: dict, subcommand: str) -> "ExperimentConfig":
        if subcommand not in _SECTION_KEYS:
            raise ConfigError(f"unknown subcommand {subcommand!r}")
        if not isinstance(raw, dict):
            raise ConfigError("config root must be an object")
        allowed_top = {"version", "problem", "schedule", subcommand}
        if subcommand in _NEEDS_STEPSIZE or "stepsize" in raw:
            allowed_top.add("stepsize")
        for key in raw:
            if key not in allowed_top:
                raise ConfigError(f"unknown top-level key {key!r}")
        version = raw.get("version")
        if version != CONFIG_VERSION:
            raise ConfigError(f"config version must be {CONFIG_VERSION}, got {version!r}")

        problem = raw.get("problem")
        if not isinstance(problem, dict) or "name" not in problem:
            raise ConfigError("config needs a problem object with a name")
        name = problem["name"]
        if name not in _PROBLEM_KEYS:
            raise ConfigError(f"unknown problem {name!r}")
        _check_keys({k: v for k, v in problem.items() if k != "name"},
                    _PROBLEM_KEYS[name], f"problem({name})")

        schedule = raw.get("schedule")
        if not isinstance(schedule, dict) or "kind" not in schedule:
            raise ConfigError("config needs a schedule object with a kind")
        kind = schedule["kind"]
        if kind not in _SCHEDULE_KEYS:
            raise ConfigError(f"unknown schedule kind {kind!r} (custom kinds are API-only)")
        _check_keys({k: v for k, v in schedule.items() if k != "kind"},
                    _SCHEDULE_KEYS[kind], f"schedule({kind})")

        if subcommand in _NEEDS_STEPSIZE:
            _check_keys(raw.get("stepsize", {}), {"gamma0": (True, _NUM), "alpha": (True, _NUM)},
                        "stepsize")
        if subcommand not in raw:
            raise ConfigError(f"missing section {subcommand!r}")
        _check_keys(raw[subcommand], _SECTION_KEYS[subcommand], subcommand)
        return cls(subcommand=subcommand, data=raw)

    @classmethod
    def from_str(cls, text: str, subcommand: str) -> "ExperimentConfig":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc}") from exc
        return cls.from_dict(raw, subcommand)

    @classmethod
    def load(cls, path, subcommand: str) -> "ExperimentConfig":
        with open(path, "r") as fh:
            return cls.from_str(fh.read(), subcommand)

    def to_json_str(self) -> str:
        return json.dumps(self.data, sort_keys=True, indent=2) + "\n"

    # -- builders -----------------------------------------------------------

    def problem(self) -> Problem:
        spec = dict(self.data["problem"])
        name = spec.pop("name")
        try:
            return builtin_problems()[name](**spec)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad problem parameters: {exc}") from exc

    def schedule(self) -> ScheduleSpec:
        spec = dict(self.data["schedule"])
        kind = spec.pop("kind")
        try:
            return getattr(ScheduleSpec, kind)(**spec)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad schedule parameters: {exc}") from exc

    def stepsize(self) -> StepsizeSpec:
        spec = self.data["stepsize"]
        try:
            return StepsizeSpec(gamma0=float(spec["gamma0"]), alpha=float(spec["alpha"]))
        except ValueError as exc:
            raise ConfigError(f"bad stepsize: {exc}") from exc

    def section(self) -> dict:
        return self.data[self.subcommand]


def _pick_critical_point(problem: Problem, section: dict, want: str):
    if "critical_point" in section:
        idx = section["critical_point"]
        if not (0 <= idx < len(problem.critical_points)):
            raise ConfigError(f"critical_point index {idx} out of range")
        return problem.critical_points[idx]
    for cp in problem.critical_points:
        if cp.kind == want:
            return cp
    raise ConfigError(f"problem {problem.name!r} declares no {want!r} critical point")


def _write_json(path: Path, payload: dict):
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")


# -- subcommands ------------------------------------------------------------------


def cmd_ode(config: ExperimentConfig, out_dir: Path, threads: int) -> dict:
    """Integrate the selected dynamics, write the trajectory and a summary."""
    section = config.section()
    problem = config.problem()
    spec = config.schedule()
    kind = section["kind"]
    t0 = float(section.get("t0", 0.1))
    t_final = float(section["t_final"])
    tol = float(section.get("tol", 1e-9))
    base_step = float(section.get("base_step", 0.05))
    eps = float(section.get("epsilon", 1e-8))
    x0 = np.asarray(section["x0"], dtype=float)
    if x0.shape != (problem.dim,):
        raise ConfigError(f"x0 must have dimension {problem.dim}")

    init_mode = section.get("init", "zeros")
    if init_mode == "compatible":
        z0 = compatible_state(spec, problem, x0, eps)
        if kind == "adagrad":
            z0 = IterateState(z0.v, np.zeros(0), z0.x)
        elif kind == "nesterov":
            z0 = IterateState(np.zeros(0), np.zeros(problem.dim), z0.x)
    elif init_mode == "zeros":
        dims = {"general": (problem.dim, problem.dim),
                "adagrad": (problem.dim, 0), "nesterov": (0, problem.dim)}
        if kind not in dims:
            raise ConfigError(f"unknown ode kind {kind!r}")
        dv, dm = dims[kind]
        z0 = IterateState(np.zeros(dv), np.zeros(dm), x0)
    else:
        raise ConfigError(f"unknown init mode {init_mode!r}")

    traj = integrate(kind, spec, problem, z0, t0, t_final, eps=eps, tol=tol,
                     base_step=base_step)
    trajectory_to_csv(traj, out_dir / "trajectory.csv")

    final_residual = float(residual_to_equilibrium(kind, problem, traj.final, spec.limits))
    rises = np.diff(traj.energies)
    summary = {
        "kind": kind,
        "t0": t0,
        "t_final": t_final,
        "steps": int(len(traj.times)),
        "final_residual": final_residual,
        "energy_initial": float(traj.energies[0]),
        "energy_final": float(traj.energies[-1]),
        "energy_max_rise": float(rises.max()) if rises.size else 0.0,
        "assumptions": validate_assumptions(spec).clauses,
    }
    if kind == "nesterov" and section.get("check_change_of_variable", False):
        report = nesterov_change_of_variable(traj, problem, spec.nag_alpha)
        summary["change_of_variable_residual"] = report.max_residual
        print(f"change-of-variable residual: {report.max_residual:.3e} "
              f"(kappa={report.kappa:.6g}, beta={report.beta:.6g})")
    _write_json(out_dir / "summary.json", summary)
    print(f"ode {kind}: {len(traj.times)} steps, final residual {final_residual:.3e}")
    return summary


def _write_run_csv(path: Path, record) -> None:
    dv, dm, d = record.v.shape[1], record.m.shape[1], record.x.shape[1]
    header = (["n", "tau_n"] + [f"x_{i + 1}" for i in range(d)]
              + [f"m_{i + 1}" for i in range(dm)] + [f"v_{i + 1}" for i in range(dv)]
              + ["V_n", "residual"])
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for k in range(len(record.steps)):
            row = [str(int(record.steps[k])), _fmt(record.taus[k])]
            row += [_fmt(val) for val in record.x[k]]
            row += [_fmt(val) for val in record.m[k]]
            row += [_fmt(val) for val in record.v[k]]
            row += [_fmt(record.lyapunov[k]), _fmt(record.residual[k])]
            fh.write(",".join(row) + "\n")


def cmd_optimize(config: ExperimentConfig, out_dir: Path, threads: int) -> dict:
    """Monte-Carlo optimizer runs with per-run CSVs and a quantile summary."""
    section = config.section()
    problem = config.problem()
    spec = config.schedule()
    gamma = config.stepsize()
    algorithm = section["algorithm"]
    n_iter, n_runs = section["n_iter"], section["n_runs"]
    seed = section["seed"]
    stride = section.get("record_stride", max(1, n_iter // 20))
    eps = float(section.get("epsilon", 1e-8))
    x0 = np.asarray(section["x0"], dtype=float)
    if x0.shape != (problem.dim,):
        raise ConfigError(f"x0 must have dimension {problem.dim}")
    init = IterateState.zeros(problem.dim, algorithm, x0)

    batch = run_many(algorithm, problem, spec, gamma, n_iter, seed, n_runs, init,
                     eps=eps, record_stride=stride, threads=threads)

    runs_dir = out_dir / "runs"
    runs_dir.mkdir(exist_ok=True)
    for i in range(n_runs):
        _write_run_csv(runs_dir / f"run_{i:05d}.csv", batch.record(i))

    finals = residual_to_equilibrium(algorithm, problem,
                                     (batch.final_v, batch.final_m, batch.final_x),
                                     spec.limits)
    completed = batch.diverged_at < 0
    reasons = {"completed": int(completed.sum()), "diverged": int((~completed).sum())}
    quantiles = {}
    if completed.any():
        qs = np.quantile(finals[completed], [0.1, 0.25, 0.5, 0.75, 0.9])
        quantiles = {"q10": qs[0], "q25": qs[1], "median": qs[2], "q75": qs[3], "q90": qs[4]}
    summary = {
        "algorithm": algorithm,
        "n_iter": n_iter,
        "n_runs": n_runs,
        "reasons": reasons,
        "final_residual_quantiles": quantiles,
    }
    _write_json(out_dir / "summary.json", summary)
    if reasons["diverged"]:
        print(f"warning: {reasons['diverged']}/{n_runs} runs diverged", file=sys.stderr)
    med = quantiles.get("median")
    if med is not None:
        print(f"optimize {algorithm}: median final residual {med:.3e}")
    else:
        print(f"optimize {algorithm}: all runs diverged")
    return summary


def _write_matrix_rows(fh, name: str, mat: np.ndarray):
    for i in range(mat.shape[0]):
        for j in range(mat.shape[1]):
            fh.write(f"{name},{i},{j},{_fmt(mat[i, j])}\n")


def cmd_clt(config: ExperimentConfig, out_dir: Path, threads: int) -> dict:
    """Closed-form vs solver vs Monte-Carlo covariance at a minimum."""
    section = config.section()
    problem = config.problem()
    spec = config.schedule()
    gamma = config.stepsize()
    eps = float(section.get("epsilon", 1e-8))
    cp = _pick_critical_point(problem, section, "min")
    if cp.kind != "min":
        raise ConfigError("the covariance analysis needs a strict local minimum")
    inputs = CltInputs.from_problem(problem, spec, gamma, cp.x, eps)
    result = analyze(inputs)
    emp = empirical_clt(problem, spec, gamma, cp.x, section["n_iter"], section["n_runs"],
                        section["seed"], eps=eps, threads=threads,
                        filter_residual=float(section.get("filter_residual", 0.1)))

    d = problem.dim
    with open(out_dir / "matrices.csv", "w", newline="") as fh:
        fh.write("matrix,row,col,value\n")
        _write_matrix_rows(fh, "gamma", result.gamma)
        _write_matrix_rows(fh, "gamma2_closed_form", result.gamma2)
        _write_matrix_rows(fh, "gamma_x_block", result.gamma[d:, d:])
        _write_matrix_rows(fh, "empirical", emp.cov)
        _write_matrix_rows(fh, "empirical_x_block", emp.x_block)
    with open(out_dir / "finals.csv", "w", newline="") as fh:
        header = ["run"] + [f"m_{i + 1}" for i in range(d)] + [f"dx_{i + 1}" for i in range(d)]
        fh.write(",".join(header) + "\n")
        for idx, row in zip(emp.kept_indices, emp.rescaled):
            fh.write(",".join([str(int(idx))] + [_fmt(val) for val in row]) + "\n")

    block_gap = float(np.linalg.norm(result.gamma2 - result.gamma[d:, d:]))
    summary = {
        "v_star": [float(v) for v in result.v_star],
        "rate_L": float(result.rate),
        "theta": float(result.theta),
        "closed_form_vs_solver_gap": block_gap,
        "empirical_rel_err_full": emp.rel_err_full,
        "empirical_rel_err_x": emp.rel_err_x,
        "n_runs": emp.n_runs,
        "n_diverged": emp.n_diverged,
        "n_filtered_nonconverged": emp.n_filtered,
        "convergence_filter_note":
            "runs with final residual above the filter are excluded (surrogate "
            "for conditioning on convergence to the minimum)",
    }
    _write_json(out_dir / "summary.json", summary)
    print(f"clt: closed form vs solver gap {block_gap:.3e}, "
          f"empirical x-block error {emp.rel_err_x:.1%}")
    return summary


def cmd_traps(config: ExperimentConfig, out_dir: Path, threads: int) -> dict:
    """Trap spectrum at a critical point plus the escape experiment."""
    section = config.section()
    problem = config.problem()
    spec = config.schedule()
    gamma = config.stepsize()
    eps = float(section.get("epsilon", 1e-8))
    algorithm = section["algorithm"]
    if algorithm not in ("general", "adagrad", "nag"):
        raise ConfigError(f"unknown algorithm {algorithm!r}")
    cp = _pick_critical_point(problem, section, "saddle")

    if algorithm == "nag":
        analysis = nag_trap_analysis(problem, cp.x)
    else:
        analysis = analyze_trap(problem, cp.x, spec.limits, eps)
    avt = check_avt_assumptions(spec, gamma, n_max=section.get("avt_n_max", 10 ** 6))

    summary = {
        "algorithm": algorithm,
        "critical_point": [float(v) for v in cp.x],
        "critical_point_kind": cp.kind,
        "d_plus": analysis.d_plus,
        "zetas": [float(z) for z in analysis.zetas],
        "betas": [float(b) for b in analysis.betas],
        "excitation": analysis.excitation,
        "stepsize_sq_verdict": avt.gamma_sq_verdict,
        "schedule_mismatch_sum": avt.schedule_mismatch_sum,
        "schedule_mismatch_verdict": avt.schedule_verdict,
    }

    if analysis.d_plus == 0:
        summary["escape"] = "skipped: no unstable direction at this point"
        print("traps: d+ = 0, escape experiment skipped")
    else:
        report = escape_experiment(algorithm, problem, spec, gamma, cp.x,
                                   section["n_runs"], section["n_iter"],
                                   float(section["init_radius"]), section["seed"],
                                   eps=eps,
                                   classify_radius=float(section.get("classify_radius", 1e-2)),
                                   threads=threads)
        with open(out_dir / "escape.csv", "w", newline="") as fh:
            d = problem.dim
            header = ["run"] + [f"x_{i + 1}" for i in range(d)] + \
                ["nearest", "nearest_kind", "distance", "classification"]
            fh.write(",".join(header) + "\n")
            for row in report.rows:
                cells = [str(row.run)] + [_fmt(val) for val in row.x_end]
                cells += [str(row.nearest), row.nearest_kind, _fmt(row.distance), row.label]
                fh.write(",".join(cells) + "\n")
        summary["escape"] = {
            "n_runs": section["n_runs"],
            "fraction_saddle": report.fraction_saddle,
            "fraction_min": report.fraction_min,
            "fraction_unclassified": report.fraction_unclassified,
            "n_diverged": report.n_diverged,
            "control_stayed": report.control_stayed,
        }
        print(f"traps: d+ = {analysis.d_plus}, excitation {analysis.excitation:.3e}, "
              f"saddle fraction {report.fraction_saddle:.3f}, "
              f"min fraction {report.fraction_min:.3f}")
    _write_json(out_dir / "summary.json", summary)
    return summary


_COMMANDS = {"ode": cmd_ode, "optimize": cmd_optimize, "clt": cmd_clt, "traps": cmd_traps}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="adaflow",
        description="Batch experiments for adaptive stochastic optimizers and their ODEs")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON experiment config")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--threads", type=int, default=None,
                       help="worker threads (fallback: ADAFLOW_THREADS, default 1)")
    args = parser.parse_args(argv)

    try:
        config = ExperimentConfig.load(args.config, args.command)
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    if args.threads is not None:
        threads = args.threads
    else:
        threads = int(os.environ.get("ADAFLOW_THREADS", "1"))

    out_dir = Path(args.out)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        _COMMANDS[args.command](config, out_dir, max(1, threads))
    except (ConfigError, StepsizeConstraintError, GuardViolationError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (BlowUpError, NonHurwitzError, DegenerateDenominatorError,
            np.linalg.LinAlgError, RuntimeError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())

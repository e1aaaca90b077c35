"""adaflow: stochastic momentum/adaptive optimizers, their limiting ODEs,
asymptotic covariances, and saddle-escape experiments."""

from .schedules import (
    ScheduleSpec,
    ScheduleValues,
    AssumptionReport,
    adam_a,
    eval_schedule,
    validate_assumptions,
)
from .problems import (
    NoiseModel,
    CriticalPoint,
    Problem,
    GradientSample,
    make_rng,
    sample_grad,
    second_moment,
    noise_covariance,
    quadratic_diag,
    saddle_quartic,
    finite_sum_ls,
    builtin_problems,
)
from .optimize import (
    IterateState,
    StepsizeSpec,
    RunRecord,
    BatchResult,
    GuardViolationError,
    step_general,
    step_adagrad,
    step_nag,
    lyapunov_diag,
    run,
    run_many,
)
from .integrate import (
    Trajectory,
    BlowUpError,
    rhs,
    integrate,
    energy,
    energy_nesterov,
    w_delta,
    residual_to_equilibrium,
    nesterov_change_of_variable,
    compatible_state,
    trajectory_to_csv,
)
from .spectral import (
    SymmetricEigen,
    sym_eigen,
    lyapunov_solve,
    hurwitz_margin,
    momentum_block_margin,
)
from .clt import (
    CltInputs,
    CltResult,
    EmpiricalClt,
    StepsizeConstraintError,
    v_star,
    v_matrix,
    rate_L,
    theta,
    gamma_lyapunov,
    gamma2_closed_form,
    analyze,
    empirical_clt,
)
from .traps import (
    TrapAnalysis,
    EscapeReport,
    linearize_D,
    unstable_spectrum,
    noise_excitation,
    analyze_trap,
    nag_trap_analysis,
    escape_experiment,
    check_avt_assumptions,
)

__version__ = "0.1.0"

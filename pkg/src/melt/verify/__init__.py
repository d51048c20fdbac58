from .lab import (
    CheckResult,
    JacobianReport,
    MiswiredMeltLM,
    SaturationError,
    equivalence_suite,
    full_loop_jacobian,
    gate_jacobian,
    jacobian_suite,
    run_suite,
    spectral_radius,
    superhighway_check,
    superhighway_suite,
)

__all__ = [
    "CheckResult",
    "JacobianReport",
    "MiswiredMeltLM",
    "SaturationError",
    "equivalence_suite",
    "full_loop_jacobian",
    "gate_jacobian",
    "jacobian_suite",
    "run_suite",
    "spectral_radius",
    "superhighway_check",
    "superhighway_suite",
]

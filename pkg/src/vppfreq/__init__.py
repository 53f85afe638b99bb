"""Reduced-order aggregation of distributed energy resources, delay-aware
frequency-security constraints, and joint energy / inertia / primary
frequency response market clearing."""

__version__ = "0.1.0"

from .aggregation import (
    AggregateVpp,
    FitConfig,
    aggregate_inertia,
    assemble_heterogeneous,
    evaluate_mape,
    fit_reduced_model,
)
from .dynamics import (
    FrequencyModel,
    nadir,
    simulate_full_order,
    simulate_staged,
    stage_coefficients,
)
from .market import (
    ClearingSolution,
    PriceSchedule,
    Scenario,
    Settlement,
    build_clearing_problem,
    build_period_surfaces,
    frequency_audit,
    scenario_from_system,
    scenario_without_vpps,
    settle,
    solve_pipeline,
)
from .models import (
    SystemScenario,
    TransferFunction,
    VppPortfolio,
    build_der_tf,
    validate_scenario,
)
from .security import (
    PwlNadirSurface,
    SurfaceDomain,
    build_pwl_surface,
    check_point,
    closed_form_nadir,
    export_surface,
    import_surface,
    scale_surface,
)

__all__ = [
    "__version__",
    "AggregateVpp",
    "FitConfig",
    "aggregate_inertia",
    "assemble_heterogeneous",
    "evaluate_mape",
    "fit_reduced_model",
    "FrequencyModel",
    "nadir",
    "simulate_full_order",
    "simulate_staged",
    "stage_coefficients",
    "ClearingSolution",
    "PriceSchedule",
    "Scenario",
    "Settlement",
    "build_clearing_problem",
    "build_period_surfaces",
    "frequency_audit",
    "scenario_from_system",
    "scenario_without_vpps",
    "settle",
    "solve_pipeline",
    "SystemScenario",
    "TransferFunction",
    "VppPortfolio",
    "build_der_tf",
    "validate_scenario",
    "PwlNadirSurface",
    "SurfaceDomain",
    "build_pwl_surface",
    "check_point",
    "closed_form_nadir",
    "export_surface",
    "import_surface",
    "scale_surface",
]

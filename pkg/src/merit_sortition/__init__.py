"""Merit-based sortition: EMA-ranked active-set selection and its simulation harness."""

__version__ = "0.1.0"

from .core import (
    EpochContributions,
    ParticipantState,
    SortitionError,
    SortitionParams,
    SystemState,
    apply_targets,
    compute_targets,
    ema_update,
    percentile,
    select_active,
    step,
)
from .population import SimConfig, SimParticipant
from .experiments import (
    Mode,
    RunSummary,
    ScenarioConfig,
    activity_quality_correlation,
    percentile_sweep,
    run_paired,
    run_scenario,
    z_score,
)

__all__ = [
    "EpochContributions",
    "Mode",
    "ParticipantState",
    "RunSummary",
    "ScenarioConfig",
    "SimConfig",
    "SimParticipant",
    "SortitionError",
    "SortitionParams",
    "SystemState",
    "activity_quality_correlation",
    "apply_targets",
    "compute_targets",
    "ema_update",
    "percentile",
    "percentile_sweep",
    "run_paired",
    "run_scenario",
    "select_active",
    "step",
    "z_score",
]

"""Variable impedance control lab: stiffness estimation from demonstrated
motion, SPD-aware stiffness models, and energy-tank tracking control."""

from .errors import (
    ConfigurationError,
    DecompositionError,
    DegenerateWindowError,
    DivergenceError,
    EstimationError,
    FormatVersionError,
    InvalidInputError,
    ParseError,
    StepSizeError,
    ViclabError,
)
from .spd import (
    SPD_EIG_FLOOR,
    chol_unvec,
    chol_vec,
    is_spd,
    lift_spd,
    nearest_spd,
    spd_distance,
    sym_basis,
)
from .demos import (
    Demonstration,
    ImpedanceParams,
    load_demo,
    rotating_ellipse_schedule,
    save_demo,
    simulate_msd,
)
from .estimation import (
    CriticalDamping,
    EstimationResult,
    KnownDamping,
    UnknownScalarDamping,
    WindowConfig,
    estimate_sequence,
    estimate_unknown_damping,
    estimate_critical_damping,
    load_result,
    save_result,
)
from .stiffness_model import (
    KernelStiffnessModel,
    build_training_set,
    load_model,
    train,
)
from .tank_control import (
    ControllerConfig,
    PlantParams,
    SimLog,
    TrackingProfile,
    passivity_audit,
    run_simulation,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError",
    "ControllerConfig",
    "CriticalDamping",
    "DecompositionError",
    "DegenerateWindowError",
    "Demonstration",
    "DivergenceError",
    "EstimationError",
    "EstimationResult",
    "FormatVersionError",
    "ImpedanceParams",
    "InvalidInputError",
    "KernelStiffnessModel",
    "KnownDamping",
    "ParseError",
    "PlantParams",
    "SPD_EIG_FLOOR",
    "SimLog",
    "StepSizeError",
    "TrackingProfile",
    "UnknownScalarDamping",
    "ViclabError",
    "WindowConfig",
    "build_training_set",
    "chol_unvec",
    "chol_vec",
    "estimate_critical_damping",
    "estimate_sequence",
    "estimate_unknown_damping",
    "is_spd",
    "lift_spd",
    "load_demo",
    "load_model",
    "load_result",
    "nearest_spd",
    "passivity_audit",
    "rotating_ellipse_schedule",
    "run_simulation",
    "save_demo",
    "save_result",
    "simulate_msd",
    "spd_distance",
    "sym_basis",
    "train",
]

"""Chemical master equations solved three ways: exact truncated-space
propagation, Gillespie simulation, and prompt-conditioned autoregressive
neural models trained by reinforcement learning against variational
reward models."""

from .model import (
    RateMap,
    Reaction,
    ReactionNetwork,
    Species,
    apply_jump,
    load_model,
    parse_model,
    propensity,
    serialize_model,
)
from .statespace import (
    GeneratorMatrix,
    ProbabilityVector,
    TruncatedStateSpace,
    apply_kernel_at_state,
    build_generator,
    evolve_exact,
)

__version__ = "0.1.0"

__all__ = [
    "RateMap",
    "Reaction",
    "ReactionNetwork",
    "Species",
    "apply_jump",
    "load_model",
    "parse_model",
    "propensity",
    "serialize_model",
    "GeneratorMatrix",
    "ProbabilityVector",
    "TruncatedStateSpace",
    "apply_kernel_at_state",
    "build_generator",
    "evolve_exact",
    "__version__",
]

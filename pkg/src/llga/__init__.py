"""Parameter control for the (1+(lambda,lambda)) GA on match-count fitness."""

from .bitstrings import (
    BitVector,
    ContractViolationError,
    RngStream,
    Target,
    fitness,
    sample_uniform,
)
from .engine import (
    GaState,
    IterationOutcome,
    ParameterSet,
    RunResult,
    biased_crossover,
    default_cutoff,
    flip_exact,
    run_episode,
    run_iteration,
    sample_conditional_binomial,
)

__version__ = "0.1.0"

"""Desk-scale lab for codebook-factorized soft prompt tuning.

Soft prompts are factorized into shared per-subspace codebooks and
per-position mixing weights, trained against a small frozen transformer
backbone.  See README.md for the layout and the command line interface.
"""

from .factorization import (
    Codebook,
    PromptDims,
    WeightSet,
    codeword_capacity,
    compose,
    init_random,
    one_hot_weights,
    param_count,
    solve_rank,
)
from .training import (
    DirectPrompt,
    FactorizedPrompt,
    InitStrategy,
    PromptSet,
    RunConfig,
    apply_init,
    evaluate,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "Codebook",
    "WeightSet",
    "PromptDims",
    "compose",
    "param_count",
    "solve_rank",
    "codeword_capacity",
    "init_random",
    "one_hot_weights",
    "FactorizedPrompt",
    "DirectPrompt",
    "PromptSet",
    "RunConfig",
    "InitStrategy",
    "apply_init",
    "train",
    "evaluate",
    "__version__",
]

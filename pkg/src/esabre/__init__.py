"""Latent pair-mean spike-and-slab mixed-effects regression.

Library and CLI for Bayesian variable selection on pairwise assay data:
collapsed MCMC over inclusion indicators, information criteria and
cross-validation for random-effect selection, simulation-study generators,
convergence/selection diagnostics, and divide-and-conquer sub-posterior
combination with prior correction.
"""

from .data import (
    Dataset,
    Hyperparameters,
    ModelState,
    ObservationTable,
    PairDesign,
    RandomEffectsLayout,
    Truth,
    load_dataset,
    write_dataset,
)
from .sampler import ChainStore, SamplerConfig, run_chains

__all__ = [
    "Dataset",
    "Hyperparameters",
    "ModelState",
    "ObservationTable",
    "PairDesign",
    "RandomEffectsLayout",
    "Truth",
    "load_dataset",
    "write_dataset",
    "ChainStore",
    "SamplerConfig",
    "run_chains",
]

__version__ = "0.1.0"

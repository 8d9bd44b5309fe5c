"""Bayesian inference for stochastic reaction networks with a Bayesian-updating LNA and MALA."""

from __future__ import annotations

from .data import Dataset, ObservationModel, observe, read_dataset, write_dataset
from .lna import (
    BAYESIAN_UPDATING,
    ORIGINAL_LNA,
    LnaPosterior,
    LnaState,
    Priors,
    SolverConfig,
    Uniform,
    log_likelihood,
)
from .network import Reaction, ReactionNetwork, birth_death, build_network, load_network, michaelis_menten
from .sampler import Chain, SamplerConfig, run_chain, sample
from .ssa import Trajectory, ssa_simulate

__all__ = [
    "BAYESIAN_UPDATING",
    "ORIGINAL_LNA",
    "Chain",
    "Dataset",
    "LnaPosterior",
    "LnaState",
    "ObservationModel",
    "Priors",
    "Reaction",
    "ReactionNetwork",
    "SamplerConfig",
    "SolverConfig",
    "Trajectory",
    "Uniform",
    "birth_death",
    "build_network",
    "load_network",
    "log_likelihood",
    "michaelis_menten",
    "observe",
    "read_dataset",
    "run_chain",
    "sample",
    "ssa_simulate",
    "write_dataset",
]

"""Bayesian mixture cure models for several end-points."""

from .data import TrialDataset, apply_datacut, kaplan_meier, load_dataset
from .model import CureModel, ModelSpec, Priors
from .posterior import fit
from .sampler import SamplerConfig, sample

__version__ = "0.1.0"

__all__ = [
    "CureModel",
    "ModelSpec",
    "Priors",
    "SamplerConfig",
    "TrialDataset",
    "apply_datacut",
    "fit",
    "kaplan_meier",
    "load_dataset",
    "sample",
]

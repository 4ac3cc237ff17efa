"""Beamspace channel estimation for lens-array mmWave MIMO.

Model-based estimators (AMP, OMP), unfolded networks with soft-threshold or
Gaussian-mixture shrinkage (LAMP, GM-LAMP), their training, and an NMSE
sweep harness.
"""

from .channel import ArrayGeometry, sample_sv_channel, sample_sv_channels, to_beamspace
from .estimators import (
    AmpConfig,
    NetworkKind,
    UnfoldedNetwork,
    amp_estimate,
    count_multiplies,
    network_forward,
    omp_estimate,
)
from .evaluation import ExperimentConfig, nmse, nmse_db, run_sweep
from .measurement import SensingSystem, SnrPolicy, build_dataset, gen_sensing, measure
from .models import AMPEstimator, GMLAMPEstimator, LAMPEstimator, OMPEstimator
from .shrinkage import GmParams, SoftThresholdParams, gm_shrinkage, soft_threshold
from .training import TrainConfig, train_layer_by_layer

__version__ = "0.1.0"

__all__ = [
    "AMPEstimator",
    "AmpConfig",
    "ArrayGeometry",
    "ExperimentConfig",
    "GMLAMPEstimator",
    "GmParams",
    "LAMPEstimator",
    "NetworkKind",
    "OMPEstimator",
    "SensingSystem",
    "SnrPolicy",
    "SoftThresholdParams",
    "TrainConfig",
    "UnfoldedNetwork",
    "amp_estimate",
    "build_dataset",
    "count_multiplies",
    "gen_sensing",
    "gm_shrinkage",
    "measure",
    "network_forward",
    "nmse",
    "nmse_db",
    "omp_estimate",
    "run_sweep",
    "sample_sv_channel",
    "sample_sv_channels",
    "soft_threshold",
    "to_beamspace",
    "train_layer_by_layer",
]

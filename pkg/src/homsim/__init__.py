"""Simulation and analysis of two-photon interference with a single dephased emitter."""
from .params import (ConfigError, DetectorParams, EmitterParams, ExperimentConfig,
                     InterferometerParams, PumpParams, config_from_dict, load_config)

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DetectorParams", "EmitterParams", "ExperimentConfig",
    "InterferometerParams", "PumpParams", "config_from_dict", "load_config",
]

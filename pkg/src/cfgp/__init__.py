"""Stochastic car-following: recurrent mean model with a Gaussian-process residual."""

__version__ = "0.1.0"

from .data import CovariateWindow, DatasetSplit, Trajectory, filter_and_split, load_trajectories
from .errors import ArgumentError, CfgpError, ConfigError, DataError, FormatError, NumericalError
from .meanmodel import ModelParams, init_params, load_params, save_params
from .metrics import EvalProtocol, ScoreTable, crps_samples, energy_score, evaluate_testset, rmse
from .sim import PlatoonConfig, Rollout, simulate_ensemble, simulate_platoon, simulate_round
from .train import TrainConfig, TrainReport, train

__all__ = [
    "ArgumentError", "CfgpError", "ConfigError", "CovariateWindow", "DataError", "DatasetSplit",
    "EvalProtocol", "FormatError", "ModelParams", "NumericalError", "PlatoonConfig", "Rollout",
    "ScoreTable", "TrainConfig", "TrainReport", "Trajectory", "crps_samples", "energy_score",
    "evaluate_testset", "filter_and_split", "init_params", "load_params", "load_trajectories",
    "rmse", "save_params", "simulate_ensemble", "simulate_platoon", "simulate_round", "train",
]

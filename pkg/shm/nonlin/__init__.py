from shm.nonlin.simulator import (
    ExcitationConfig,
    IntegrationDiverged,
    NonlinearityConfig,
    StructureConfig,
    TimeSeriesRecord,
    simulate,
    simulate_batch,
)
from shm.nonlin.dataset import LaggedDataset, Normalization, make_lagged, normalize, split
from shm.nonlin.neuralnet import FitReport, MlpModel, TrainConfig, nmse, recalibrate, train
from shm.nonlin.gradients import GradientSampleSet, fd_gradient, gradient_field, input_gradient
from shm.nonlin.gradstats import Moment, StateMetricReport, kde, metric, moments, state_report
from shm.nonlin.osa import OSAPredictor

__all__ = [
    "ExcitationConfig",
    "IntegrationDiverged",
    "NonlinearityConfig",
    "StructureConfig",
    "TimeSeriesRecord",
    "simulate",
    "simulate_batch",
    "LaggedDataset",
    "Normalization",
    "make_lagged",
    "normalize",
    "split",
    "FitReport",
    "MlpModel",
    "TrainConfig",
    "nmse",
    "recalibrate",
    "train",
    "GradientSampleSet",
    "fd_gradient",
    "gradient_field",
    "input_gradient",
    "Moment",
    "StateMetricReport",
    "kde",
    "metric",
    "moments",
    "state_report",
    "OSAPredictor",
]

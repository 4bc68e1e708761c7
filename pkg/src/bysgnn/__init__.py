"""Hourly POI visit forecasting over per-window dynamic busyness graphs."""

__version__ = "0.1.0"

from .autodiff import Parameter, Tensor, backward, no_grad  # noqa: F401
from .data import SynthSpec, VisitSeriesDataset, generate_synthetic  # noqa: F401
from .model import ABLATIONS, BusynessForecaster, ModelConfig, prepare_inputs  # noqa: F401
from .training import TrainConfig, train  # noqa: F401

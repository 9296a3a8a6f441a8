"""Data-aware, noise-informed flow matching for linear inverse problems."""
from .config import DatasetConfig, ExperimentConfig, OperatorConfig
from .errors import (ConfigError, DawnFMError, FormatError, InferenceError, ParameterError,
                     ShapeError, StateError, TrainingError)
from .flow import antithetic_batch, inject_noise, interpolate, recover_x1
from .inference import InferenceConfig, PosteriorEnsemble, posterior_ensemble, posterior_ensembles, rk4_integrate
from .metrics import MetricReport, evaluate, misfit_metric, mse, psnr, ssim
from .model import ModelConfig, VelocityModel, parameter_count
from .operators import (DenseOperator, GaussianBlurOperator, LinearOperator, RadonOperator, SumOperator,
                        adjoint_dot_test, make_operator, top_singular_value)
from .training import LossBreakdown, TrainBatch, TrainConfig, Trainer, compute_loss, load_checkpoint, load_model

__all__ = [
    "DatasetConfig", "ExperimentConfig", "OperatorConfig",
    "ConfigError", "DawnFMError", "FormatError", "InferenceError", "ParameterError",
    "ShapeError", "StateError", "TrainingError",
    "antithetic_batch", "inject_noise", "interpolate", "recover_x1",
    "InferenceConfig", "PosteriorEnsemble", "posterior_ensemble", "posterior_ensembles", "rk4_integrate",
    "MetricReport", "evaluate", "misfit_metric", "mse", "psnr", "ssim",
    "ModelConfig", "VelocityModel", "parameter_count",
    "DenseOperator", "GaussianBlurOperator", "LinearOperator", "RadonOperator", "SumOperator",
    "adjoint_dot_test", "make_operator", "top_singular_value",
    "LossBreakdown", "TrainBatch", "TrainConfig", "Trainer", "compute_loss", "load_checkpoint", "load_model",
]
__version__ = "0.1.0"

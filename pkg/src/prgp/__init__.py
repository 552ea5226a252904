"""Multi-output GP trajectory models regularized by car-following physics."""

from .errors import (CalibrationError, EmptyDataError, IllConditionedKernelError,
                     InputDomainError, InternalStateError, ModelDomainError, PRGPError,
                     RegularizerDegeneracyError, SchemaError)
from .gp import OUTPUT_DIMS, GPModel, fit_gp, posterior_predict
from .inference import ShadowGP, TrainConfig, TrainResult, train
from .kernels import KernelHyperparams
from .physics import ModelKind, PhysicsModel, calibrate

__version__ = "0.1.0"

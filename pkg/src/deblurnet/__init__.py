"""deblurnet: trainable blind deconvolution.

A stack of learned feature extractors feeds closed-form, Fourier-domain
least-squares layers that estimate the blur kernel and the sharp image in
turn; stages are chained per scale and scales are chained coarse to fine.
"""

from .errors import (ConfigError, CorruptModelError, DeblurError, DimensionError,
                     ModelFileError, ModelInvariantError, ModelVersionError, NumericError,
                     ShapeError)
from .estimator import BlindDeblurrer
from .evaluation import kernel_mse, psnr, runtime_table
from .imaging import barthann_border_window, convolve_circular, fft2, ifft2
from .modelio import load_model, save_model
from .pipeline import build_model, estimate_kernel, multiscale_deblur
from .quotient import image_estimate_forward, kernel_estimate_forward
from .synth import TrajectoryConfig, sample_kernel
from .training import OptimizerConfig, TrainSchedule, Trainer, train

__version__ = "0.1.0"

__all__ = [
    "BlindDeblurrer", "ConfigError", "CorruptModelError", "DeblurError", "DimensionError",
    "ModelFileError", "ModelInvariantError", "ModelVersionError", "NumericError",
    "OptimizerConfig", "ShapeError", "TrainSchedule", "Trainer", "TrajectoryConfig",
    "barthann_border_window", "build_model", "convolve_circular", "estimate_kernel", "fft2",
    "ifft2", "image_estimate_forward", "kernel_estimate_forward", "kernel_mse", "load_model",
    "multiscale_deblur", "psnr", "runtime_table", "sample_kernel", "save_model", "train",
]

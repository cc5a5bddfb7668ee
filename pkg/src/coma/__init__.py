"""Complementary masked autoencoder pre-training with a hierarchical
multi-window vision transformer, built on a small numpy autodiff core."""

import os as _os

# COMA_THREADS caps BLAS worker threads; must be set before numpy loads.
if "COMA_THREADS" in _os.environ:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _os.environ["COMA_THREADS"])

from .config import ModelConfig, RunConfig, TrainConfig, preset  # noqa: E402
from .errors import ComaError, ConfigError, FormatError, InvariantError, NumericalError, UsageError  # noqa: E402
from .tensor import Tensor, backward, no_grad  # noqa: E402

__version__ = "0.1.0"

__all__ = [
    "ComaError", "ConfigError", "FormatError", "InvariantError", "ModelConfig", "NumericalError",
    "RunConfig", "Tensor", "TrainConfig", "UsageError", "backward", "no_grad", "preset",
]

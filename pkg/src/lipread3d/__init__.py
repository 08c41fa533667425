"""Visual word recognition from mouth-region video with numpy autodiff.

Front-ends (Res2D, Shallow3D_Res2D, I3D, two-stream) turn a clip into one
feature vector per time step; back-ends (TC1D, BiLSTM) turn that sequence into
word scores. 2D front-ends can be inflated into 3D ones.
"""

from .errors import (ConfigError, ContractError, DivergenceError, FormatError, IngestionError, LipreadError,
                     MappingError, ShapeError)
from .tensor import Rng, Tape, Tensor, backward, no_grad, tensor_create

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "ContractError", "DivergenceError", "FormatError", "IngestionError", "LipreadError",
    "MappingError", "ShapeError", "Rng", "Tape", "Tensor", "backward", "no_grad", "tensor_create",
]

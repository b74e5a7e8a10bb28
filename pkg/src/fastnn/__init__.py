"""fastnn: CPU-first neural networks in single precision.

Convolutions run on several interchangeable backends (direct loops, im2col +
GEMM, FFT, padded valid) picked per shape by a calibratable dispatcher.
Kernels are numba-compiled; ``FASTNN_NUMBA=0`` selects pure numpy.
"""

from . import bench, conv, data, energy, kernels, layers, network, optim
from ._jit import USE_NUMBA
from .conv import ConvBackend, ConvShape, conv_full, conv_valid
from .errors import (ConsistencyError, DataMissingError, FormatError, LabelError, ShapeError, SpecError,
                     TruncatedFileError)
from .network import (Network, activation, avgpool, batchnorm, build_network, conv as conv_layer, dense,
                      dropout, load_checkpoint, maxpool, save_checkpoint)

__version__ = "0.1.0"

__all__ = [
    "bench", "conv", "data", "energy", "kernels", "layers", "network", "optim",
    "USE_NUMBA", "ConvBackend", "ConvShape", "conv_full", "conv_valid",
    "ConsistencyError", "DataMissingError", "FormatError", "LabelError", "ShapeError", "SpecError",
    "TruncatedFileError",
    "Network", "activation", "avgpool", "batchnorm", "build_network", "conv_layer", "dense", "dropout",
    "load_checkpoint", "maxpool", "save_checkpoint",
]

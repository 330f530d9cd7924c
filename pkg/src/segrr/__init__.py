"""Feature recombination and spatially adaptive recalibration blocks for
fully convolutional segmentation networks, with a self-contained numpy
autodiff engine, synthetic phantom data, and an evaluation harness.
"""

from .blocks import BlockConfig, RecalibrationBlock, parameter_count
from .network import NetworkConfig, SegmentationFCN, build_network
from .tensor import Tensor, finite_diff_check

__all__ = [
    "BlockConfig",
    "NetworkConfig",
    "RecalibrationBlock",
    "SegmentationFCN",
    "Tensor",
    "build_network",
    "finite_diff_check",
    "parameter_count",
]

__version__ = "0.1.0"

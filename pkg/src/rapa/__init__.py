"""RAPA convolution simulator: ConvNets whose conv layers replicate the
kernel matrix across analog-array tiles with permuted patch assignment."""

from .convkernel import ConvGeometry, KernelMatrix, PatchMatrix, im2col, mac_count
from .network import Network, NetworkConfig, Prediction, count_parameters
from .numcore import SeededRng
from .tiling import TiledKernelBank, TilePartition, TilingScheme
from .training import DatasetSplit, TrainConfig

__version__ = "0.1.0"

__all__ = [
    "ConvGeometry",
    "KernelMatrix",
    "PatchMatrix",
    "im2col",
    "mac_count",
    "Network",
    "NetworkConfig",
    "Prediction",
    "count_parameters",
    "SeededRng",
    "TiledKernelBank",
    "TilePartition",
    "TilingScheme",
    "DatasetSplit",
    "TrainConfig",
    "__version__",
]

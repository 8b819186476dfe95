"""Parallel dynamic routing capsule networks in numpy, with a cost analyzer and CLI."""
from importlib.metadata import PackageNotFoundError, version as _version

try:
    __version__ = _version("artifact")
except PackageNotFoundError:  # running from a source tree
    __version__ = "0.0.0"

from .analyzer import CostReport, analyze, network_complexity, NCParams
from .capsules import MarginLossConfig, dynamic_routing, margin_loss, squash
from .data import Dataset, load_cifar10_binary, load_idx, make_synthetic
from .errors import PDRError
from .kernels import BACKEND
from .model import ArchConfig, BranchSpec, LayerSpec, PDRCapsNet, build_model
from .train import TrainConfig, evaluate, train

__all__ = [
    "ArchConfig", "BranchSpec", "LayerSpec", "PDRCapsNet", "build_model", "MarginLossConfig",
    "dynamic_routing", "margin_loss", "squash", "CostReport", "analyze", "network_complexity",
    "NCParams", "Dataset", "load_idx", "load_cifar10_binary", "make_synthetic", "TrainConfig", "train",
    "evaluate", "PDRError", "BACKEND", "__version__",
]

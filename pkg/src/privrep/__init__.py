"""Local differential privacy for neural text representations."""

from importlib import metadata

from .dp import PrivacyParams, epsilon_effective
from .kernels import BACKEND
from .model import ModelBundle
from .pipeline import PrivatizedRepresentation, dpnr, privatize_batch

try:
    __version__ = metadata.version("artifact")
except metadata.PackageNotFoundError:
    __version__ = "0+unknown"

__all__ = ["BACKEND", "ModelBundle", "PrivacyParams", "PrivatizedRepresentation", "dpnr",
           "epsilon_effective", "privatize_batch", "__version__"]

"""Video semantic segmentation with multi-resolution cross-frame affinity, on numpy."""

from mrcfa.model import MRCFA, ModelConfig

__version__ = "0.1.0"

__all__ = ["MRCFA", "ModelConfig", "__version__"]

"""Auto-regressive toy-video diffusion with a learned static/dynamic noise mask."""

from .config import Config
from .errors import MaskDiffError

__all__ = ["Config", "MaskDiffError"]
__version__ = "0.1.0"

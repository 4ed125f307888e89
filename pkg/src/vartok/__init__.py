"""Variable-length video tokenization.

A prefix-maskable patch-transformer autoencoder: any left-aligned prefix of a
block's latent tokens decodes to an acceptable reconstruction, and a search
engine picks the shortest prefix meeting a reconstruction threshold, block by
block, with KV caching.
"""

from .errors import (
    CacheError,
    ConfigError,
    ContractError,
    DataError,
    FormatError,
    IntegrityError,
    QuantizationError,
    ShapeError,
    TrainingError,
    UndefinedCorrelationError,
    VartokError,
)
from .model import Autoencoder, ModelConfig, apply_mask, patchify_rearrange, unpatchify
from .tensor import Tensor, no_grad

__version__ = "0.1.0"

__all__ = [
    "Autoencoder",
    "ModelConfig",
    "Tensor",
    "apply_mask",
    "no_grad",
    "patchify_rearrange",
    "unpatchify",
    "VartokError",
    "CacheError",
    "ConfigError",
    "ContractError",
    "DataError",
    "FormatError",
    "IntegrityError",
    "QuantizationError",
    "ShapeError",
    "TrainingError",
    "UndefinedCorrelationError",
    "__version__",
]

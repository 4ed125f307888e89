"""Exception hierarchy.

Every failure mode the library can signal deliberately maps to one of these
classes, so callers (and the CLI exit-code mapping) can tell configuration
mistakes, bad data, numeric blowups and malformed files apart.
"""


class VartokError(Exception):
    """Base class for all library errors."""


class ShapeError(VartokError):
    """Array extents do not match what an operation requires."""


class ContractError(VartokError):
    """An operation was called outside its contract (e.g. non-scalar loss)."""


class ConfigError(VartokError):
    """Invalid or inconsistent configuration."""


class DataError(VartokError):
    """Input data is unusable (empty dataset, unreadable file, ...)."""


class TrainingError(VartokError):
    """Numeric failure during training (non-finite loss/gradient)."""


class QuantizationError(VartokError):
    """Non-finite or otherwise unquantizable latent input."""


class CacheError(VartokError):
    """A KV cache does not line up with the model or request."""


class FormatError(VartokError):
    """Malformed serialized container (bad magic, truncation, version...)."""


class IntegrityError(FormatError):
    """A stored blob failed its checksum; message names the tensor."""


class UndefinedCorrelationError(VartokError):
    """Correlation requested on a zero-variance sample."""

"""
Exception types shared across neuralcache.

All errors derive from NeuralCacheError and from the builtin exception a
caller would naturally catch (ValueError for bad inputs, RuntimeError for
training failures), so `except ValueError` keeps working for library users.
"""

from typing import Optional


class NeuralCacheError(Exception):
    """Base class for all neuralcache errors."""


class DomainError(NeuralCacheError, ValueError):
    """A coordinate lies outside the extent it is being mapped into."""


class ConfigurationError(NeuralCacheError, ValueError):
    """Invalid configuration, layout or workflow graph."""


class ShapeMismatchError(NeuralCacheError, ValueError):
    """Array widths, lengths or dims do not match."""


class FieldTypeError(NeuralCacheError, TypeError):
    """Operation applied to the wrong kind of field (scalar vs vector)."""


class FormatError(NeuralCacheError, ValueError):
    """Malformed volume file, manifest, checkpoint or bundle."""


class TrainingError(NeuralCacheError, RuntimeError):
    def __init__(self, message: str, step: Optional[int] = None, rank: Optional[int] = None):
        super().__init__(message)
        self.step = step
        self.rank = rank


class DistributedTrainingError(TrainingError):
    def __init__(self, message: str, rank: int, step: Optional[int] = None,
                 timestep: Optional[int] = None):
        super().__init__(message, step=step, rank=rank)
        self.timestep = timestep


class ConstantFieldWarning(UserWarning):
    """Emitted when a value range collapses (vmax == vmin) for some channel."""

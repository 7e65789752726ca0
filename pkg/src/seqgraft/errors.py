"""Exception types shared across the package.

The CLI maps these onto its exit-code contract: CheckpointError -> 2,
ConfigError -> 3, NumericsError -> 4, EvaluationError -> 5.
"""


class ConfigError(ValueError):
    """Invalid configuration value or unresolvable run config."""


class ShapeError(ValueError):
    """Tensor shapes incompatible with the requested operation."""


class VocabError(ValueError):
    """Token id outside the vocabulary."""


class GraftError(ValueError):
    """Decoder layout inconsistent with the encoder it grafts from."""


class CheckpointError(ValueError):
    """Malformed or truncated checkpoint file."""


class NumericsError(RuntimeError):
    """Non-finite loss or gradient encountered during training."""


class EvaluationError(ValueError):
    """Evaluation requested on an empty example set."""

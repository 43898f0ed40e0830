"""Exception hierarchy shared across the toolkit."""


class AsckitError(Exception):
    """Base class for all toolkit errors."""


class DecodeError(AsckitError):
    """Malformed audio container (bad RIFF structure, truncated data)."""


class UnsupportedFormat(AsckitError):
    """Valid container but an encoding we do not decode."""


class ManifestError(AsckitError):
    """Bad dataset manifest (duplicate paths, unknown split, empty)."""


class IoError(AsckitError):
    """Filesystem failure while writing artifacts."""


class TooShort(AsckitError):
    """Clip shorter than one analysis window."""


class ConfigError(AsckitError):
    """Invalid parameter combination."""


class KindError(AsckitError):
    """Unknown or mismatched spectrogram kind."""


class ShapeError(AsckitError):
    """Tensor shape mismatch."""


class BatchError(AsckitError):
    """Invalid batch (odd size where pairing is required)."""


class BalanceError(AsckitError):
    """A class with no patches cannot be oversampled."""


class LossError(AsckitError):
    """Loss inputs off the probability simplex."""


class TrainError(AsckitError):
    """Training diverged or could not proceed."""


class CheckpointError(AsckitError):
    """Corrupt or incompatible checkpoint file."""


class EmptyError(AsckitError):
    """An aggregation received no inputs."""


class AlignError(AsckitError):
    """Posterior vectors are not aligned on the same category order."""


class FormatError(AsckitError):
    """Malformed probability CSV or feature file."""

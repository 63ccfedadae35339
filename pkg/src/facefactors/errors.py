"""Exception types shared across the pipeline.

The CLI maps these onto distinct exit codes, so keep the hierarchy flat and
explicit rather than reusing ValueError everywhere.
"""


class ConfigError(ValueError):
    """Invalid configuration (bad ranges, missing keys, frozen-state misuse)."""


class DataError(RuntimeError):
    """Dataset-level failure (missing files, corruption, version mismatch)."""


class FactorRangeError(ConfigError):
    """A factor value lies outside its declared range."""


class AudioRangeError(ConfigError):
    """Lip trajectory handed to the audio synthesizer is out of [0, 1]."""


class DatasetIntegrityError(DataError):
    """A stored clip fails its manifest hash check."""


class DatasetVersionError(DataError):
    """Dataset was written by an incompatible world version."""


class CheckpointMismatchError(RuntimeError):
    """Checkpoint config hash does not match the requested configuration."""


class NumericGuardError(ValueError):
    """A loss received degenerate numeric input (zero-norm vector etc.)."""


class InsufficientSamplesError(ValueError):
    """Not enough rows to estimate a correlation."""


class DegeneratePairError(RuntimeError):
    """Augmentation pair cannot be built (zero-area eye mask); skip it."""


class UndefinedMetricError(ValueError):
    """Metric is undefined for the given reference (e.g. non-positive ground truth)."""

"""Exception types shared across the package."""


class SemaskError(Exception):
    """Base class for all package errors."""


class InputTooShort(SemaskError):
    """Waveform shorter than one analysis window."""


class ShapeError(SemaskError):
    """Operand shapes are inconsistent."""


class MaskRangeError(SemaskError):
    """Spectral mask entries fall outside (0, 1)."""


class DegenerateSignal(SemaskError):
    """Signal has zero energy where nonzero energy is required."""


class VocabError(SemaskError):
    """Token id outside the embedding table."""


class InputError(SemaskError):
    """Malformed input to a forward pass."""


class EmptyText(SemaskError):
    """No real tokens available for alignment."""


class DegenerateEmbedding(SemaskError):
    """Zero-norm embedding row; cosine similarity undefined."""


class NumericsError(SemaskError):
    """Non-finite value encountered during optimization."""


class CheckpointError(SemaskError):
    """Checkpoint file malformed or inconsistent."""


class IngestError(SemaskError):
    """A manifest entry could not be resolved to data."""


class ConfigError(SemaskError):
    """Invalid configuration value."""


class IoError(SemaskError):
    """Filesystem failure."""

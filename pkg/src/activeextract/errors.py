"""Exception types shared across the package."""


class ActiveExtractError(Exception):
    """Base class for all errors raised by this package."""


class LengthMismatch(ActiveExtractError):
    """Two sequences that must be equally long are not."""


class SampleRateMismatch(ActiveExtractError):
    """Operands carry different sample rates (all audio is 16 kHz mono)."""


class SilentReference(ActiveExtractError):
    """Reference signal has (near-)zero energy; score the clip by Power instead."""


class EmptySignal(ActiveExtractError):
    """Zero-length waveform where samples are required."""


class ZeroEnergySource(ActiveExtractError):
    """A mixing source has no energy over its active region."""


class AllSilent(ActiveExtractError):
    """Clip contains no speech at all; overlap ratio is undefined."""


class OutOfRange(ActiveExtractError):
    """Value outside its documented domain."""


class PlacementOverflow(ActiveExtractError):
    """Utterance placement does not fit inside the clip."""


class UnsatisfiableHistogram(ActiveExtractError):
    """Requested per-category clip counts cannot be generated."""


class EmptyBatch(ActiveExtractError):
    """Batch-level operation received zero items."""


class AllReferencesSilent(ActiveExtractError):
    """Every reference in the batch is silent; the aggregated ratio is undefined."""


class EmptySegmentation(ActiveExtractError):
    """Segmentation does not cover any samples."""


class NonFiniteGradient(ActiveExtractError):
    """Gradient check encountered NaN/Inf gradients."""


class TooShort(ActiveExtractError):
    """Input shorter than one analysis window / encoder kernel."""


class DurationMismatch(ActiveExtractError):
    """Audio and visual streams disagree in duration beyond one video frame."""


class LabelLengthMismatch(ActiveExtractError):
    """Frame labels do not line up with the model output frames."""


class ShapeMismatch(ActiveExtractError):
    """Tensor shapes inconsistent with the separator contract."""


class MissingPrerequisiteCheckpoint(ActiveExtractError):
    """Training stage started without the checkpoint of the stage before it."""


class DivergedLoss(ActiveExtractError):
    """Training loss became non-finite."""


class EmptyManifest(ActiveExtractError):
    """Manifest contains no clips."""


class ConfigError(ActiveExtractError):
    """Invalid configuration file or field."""

"""Exception types raised by the toolkit."""


class RtcSpoofError(Exception):
    """Base class for all toolkit errors."""


class FormatError(RtcSpoofError):
    """Malformed container or header."""


class UnsupportedError(RtcSpoofError):
    """Well-formed file using an encoding we do not handle."""


class IoError(RtcSpoofError):
    """Path not readable or writable."""


class TooShortError(RtcSpoofError):
    """Signal shorter than one analysis window."""


class AlignmentError(RtcSpoofError):
    """Lag estimation or boundary alignment failed."""


class ConfigError(RtcSpoofError):
    """Invalid parameter bundle."""


class SnrUndefinedError(RtcSpoofError):
    """SNR requested against a silent signal."""


class EmptyBatchError(RtcSpoofError):
    """Batch operation invoked with no items."""


class SegmentationError(RtcSpoofError):
    """Timestamps fall outside the received signal."""


class SchemeError(RtcSpoofError):
    """Partition scheme inconsistent with the records."""


class BoundsError(RtcSpoofError):
    """Segment indices outside the feature range."""


class EmptyError(RtcSpoofError):
    """Operation requires at least one element."""


class ShapeError(RtcSpoofError):
    """Matrix dimensions do not match."""


class PairingError(RtcSpoofError):
    """Paired training requested but no resolvable pairs exist."""


class UndefinedMetricError(RtcSpoofError):
    """Metric requires both classes to be present."""

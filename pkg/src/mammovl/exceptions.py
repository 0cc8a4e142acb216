"""Exception hierarchy shared across the package."""


class MammoVLError(Exception):
    """Base class for all package errors."""


class ParseError(MammoVLError):
    """A manifest or bank row could not be parsed."""


class ValidationError(MammoVLError):
    """A record parsed but violates a domain invariant."""


class ConfigError(ValidationError):
    """Invalid or unknown configuration key."""

    def __init__(self, key: str, message: str = "unknown configuration key"):
        self.key = key
        super().__init__(f"{message}: {key!r}")


class DegenerateImage(MammoVLError):
    """Image has no foreground left after background removal."""


class MissingTemplate(MammoVLError):
    """No prompt template covers an (attribute, value) pair."""


class UnfilledSlot(MammoVLError):
    """A template slot has no metadata to fill it."""


class Unbuildable(MammoVLError):
    """A study lacks the images or text needed for a training example."""


class ShapeMismatch(MammoVLError, ValueError):
    pass


class ZeroVector(MammoVLError, ValueError):
    pass


class NonNormalizedInput(MammoVLError, ValueError):
    pass


class UnknownMode(MammoVLError, ValueError):
    pass


class EmptyNegativeSet(MammoVLError):
    """An active attribute has no negative image in the batch."""


class DegenerateSplit(MammoVLError):
    pass


class SingleClass(MammoVLError, ValueError):
    pass


class NoGroundTruth(MammoVLError):
    pass

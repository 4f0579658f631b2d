"""Exception hierarchy shared across the package.

Every error raised by the core modules derives from PromptError so the
service layer can map them to HTTP responses in one place.
"""


class PromptError(Exception):
    """Base class for all package errors."""


class InvalidSpecError(PromptError):
    """A patch/prior/target specification violates its invariants."""


class ConfigurationError(PromptError):
    """A run configuration is inconsistent or unusable (e.g. no valid
    insertion location exists for the given image and patch sizes)."""


class BoundaryError(PromptError):
    """A placement would push the patch outside the image."""


class ContractError(PromptError):
    """An operation was called with arguments violating its contract
    (shape mismatch, invalid layer index, malformed distribution...)."""


class CheckpointLoadError(PromptError):
    """A tensor container could not be loaded into the declared layout."""


class DatasetError(PromptError):
    """No usable items could be produced from a dataset manifest."""

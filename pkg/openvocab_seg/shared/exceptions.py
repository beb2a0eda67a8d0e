"""Exception hierarchy shared by every tier of the segmentation stack."""

from typing import List, Optional, Sequence


class OpenVocabSegError(Exception):
    """Base class for all errors raised by openvocab_seg."""


class ShapeError(OpenVocabSegError, ValueError):
    """Tensor extents violate an operation's shape contract."""


class ConfigurationError(OpenVocabSegError, ValueError):
    """Configuration failed validation.

    Attributes:
        issues: Every violated constraint, each naming the fields in conflict
    """

    def __init__(self, issues: Sequence["object"], message: Optional[str] = None):
        self.issues: List[object] = list(issues)
        if message is None:
            message = "; ".join(str(issue) for issue in self.issues) or "invalid configuration"
        super().__init__(message)


class EmbeddingFormatError(OpenVocabSegError, ValueError):
    """An LGSE container could not be decoded."""


class BadMagicError(EmbeddingFormatError):
    """File does not start with the LGSE magic bytes."""


class VersionMismatchError(EmbeddingFormatError):
    """File was written by an unsupported container version."""


class TruncatedPayloadError(EmbeddingFormatError):
    """File ends before the declared content."""


class ShapeMismatchError(EmbeddingFormatError):
    """Declared extents or dtype disagree with the stored payload."""


class NumericalError(OpenVocabSegError, RuntimeError):
    """A tensor, gradient or loss became NaN or infinite.

    Attributes:
        message: Description without the dump location
        dump_path: Where the offending inputs were written, if anywhere
    """

    def __init__(self, message: str, dump_path: Optional[str] = None):
        self.message = message
        self.dump_path = dump_path
        if dump_path:
            message = f"{message} (diagnostic dump: {dump_path})"
        super().__init__(message)

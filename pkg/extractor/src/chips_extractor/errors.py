"""Typed failures with stable process exit codes.

Codes mirror the scoring pipeline's taxonomy where the meaning overlaps:
2 = configuration/model misuse, 3 = dataset problems, 4 = shape contract
violations.  Everything fails loudly; nothing is clamped or skipped.
"""


class ExtractorError(Exception):
    exit_code = 1


class ModelError(ExtractorError):
    """Unknown model id, unloadable checkpoint, or unsupported device."""

    exit_code = 2


class DatasetError(ExtractorError):
    """Malformed manifest, unreadable image, or unusable caption."""

    exit_code = 3


class DimMismatch(ExtractorError):
    """Model backbone widths differ from the widths the job declared."""

    exit_code = 4

"""Error taxonomy shared across the package.

Every failure the pipeline can diagnose maps to one class here so the CLI
can translate it into a stable exit code. Anything *not* derived from
ChipsError escaping to the top level is a bug, and the CLI lets it
traceback.
"""

from __future__ import annotations


class ChipsError(Exception):
    """Base class; `exit_code` is what the CLI returns for this failure."""

    exit_code = 1


class ConfigError(ChipsError):
    """Bad, missing, or out-of-range configuration (always names the key)."""

    exit_code = 2


class FormatError(ChipsError):
    """File does not carry the expected magic/version."""

    exit_code = 3


class CorruptShard(ChipsError):
    """Well-identified file is truncated or internally inconsistent."""

    exit_code = 3


class DuplicateSample(ChipsError):
    """Same sample id seen twice where ids must be unique."""

    exit_code = 3


class ShapeError(ChipsError):
    """Operands disagree on dimensions."""

    exit_code = 4


class SketchMismatch(ChipsError):
    """Sketched vectors from different projection operators were combined."""

    exit_code = 4


class NumericalBreakdown(ChipsError):
    """Non-finite value produced inside an iterative kernel."""

    exit_code = 5


class IndefiniteSurrogate(ChipsError):
    """Preconditioner is indefinite beyond tolerance; retry with larger ridge."""

    exit_code = 5


class Overflow(ChipsError):
    """Cost accounting exceeded the supported integer range."""

    exit_code = 5


class DegenerateEmbedding(ChipsError):
    """A sample projected to the zero vector and cannot be normalized."""

    exit_code = 6


class MarginUndefined(ChipsError):
    """Hardest-negative margin needs at least one negative (batch of one)."""

    exit_code = 6


class InsufficientBatch(ChipsError):
    """Cross-sample statistic requested from a batch too small to form pairs."""

    exit_code = 6


class DegenerateDistribution(ChipsError):
    """All base weights vanished; no distribution to renormalize."""

    exit_code = 6


class EmptyPool(ChipsError):
    """No sample survives filtering, or fewer survive than were requested."""

    exit_code = 6


class DegenerateWorld(ChipsError):
    """A synthetic verification world violates its own well-posedness."""

    exit_code = 6

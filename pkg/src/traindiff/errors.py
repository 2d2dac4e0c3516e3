"""Exception types shared across the toolkit.

Every error that can cross a module boundary gets a named type here so
callers (and the CLI exit-code mapping) can branch on class rather than
message text.
"""


class TraindiffError(Exception):
    """Base class for all toolkit errors."""


class ShapeMismatch(TraindiffError):
    """Operands disagree on shape where agreement is required."""


class NonFinite(TraindiffError):
    """A NaN or infinity appeared where only finite values are allowed."""


class MappingInvalid(TraindiffError):
    """A shard mapping is structurally inconsistent (extent or bounds)."""


class MergeConflict(TraindiffError):
    """Shards overlap or leave gaps when reassembled into a full tensor."""

    def __init__(self, message: str, witness: tuple[int, ...] | None = None):
        super().__init__(message)
        self.witness = witness


class ReplicaMismatch(TraindiffError):
    """Copies that must be bit-equivalent within tolerance are not."""

    def __init__(self, message: str, max_rel_err: float = float("inf"),
                 witness: tuple[int, int] | None = None):
        super().__init__(message)
        self.max_rel_err = max_rel_err
        self.witness = witness


class FormatError(TraindiffError):
    """A trace file violates the binary format."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DigestMismatch(TraindiffError):
    """Two traces were produced from different run setups."""


class ConfigInvalid(TraindiffError):
    """A run configuration fails validation."""


class UnknownBugId(TraindiffError):
    """A fault injection names a bug that is not in the catalog."""


class MissingTape(TraindiffError):
    """backward was called without a retained forward tape."""


class SpecMissing(TraindiffError):
    """Input rewrite requested for a module with no generator spec."""

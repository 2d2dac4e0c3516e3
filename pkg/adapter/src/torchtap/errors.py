class TapError(Exception):
    """Base for everything this package raises on purpose."""


class PatternUnmatched(TapError):
    """A module pattern matched nothing, so the tap would be silent."""


class WriteError(TapError):
    """The trace could not be serialized or written."""

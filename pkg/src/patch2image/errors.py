"""Exception hierarchy.

Every failure mode callers are expected to handle gets its own class so the
CLI can map them onto distinct exit codes and tests can assert on type rather
than message text.
"""


class Patch2ImageError(Exception):
    """Base class for everything raised deliberately by this package."""


class DimensionError(Patch2ImageError):
    """Array rank/shape mismatch, window larger than map, wrong channel count."""


class NumericError(Patch2ImageError):
    """A kernel produced NaN or Inf. Always a hard error, never a warning."""


class DegenerateBatchError(Patch2ImageError):
    """Batch statistics are undefined: single-element normalization axis,
    all-zero sample weights, empty batch."""


class UsageError(Patch2ImageError):
    """API misuse: backward before forward, double-registered parameter,
    converting a network that has no head, resuming with a mismatched topology."""


class ConfigError(Patch2ImageError):
    """Bad run configuration: unknown key, wrong type, out-of-range value."""


class ParseError(ConfigError):
    """Malformed block-spec string. Carries the offending position."""

    def __init__(self, text: str, pos: int, reason: str):
        self.text = text
        self.pos = pos
        self.reason = reason
        super().__init__(f"cannot parse {text!r} at position {pos}: {reason}")


class DataError(Patch2ImageError):
    """Problems with the image corpus: missing files, bad label tags,
    patch sampling exhausted its rejection budget."""


class CheckpointError(Patch2ImageError):
    """Corrupt or incompatible checkpoint file (bad magic, CRC mismatch,
    missing section, topology mismatch on load-into-graph)."""


class EquivalenceError(Patch2ImageError):
    """Converted network disagrees with the sliding-window reference beyond
    tolerance. Carries the worst offending cell."""

    def __init__(self, max_abs_diff: float, where: tuple, tol: float):
        self.max_abs_diff = max_abs_diff
        self.where = where
        self.tol = tol
        super().__init__(
            f"max |converted - sliding| = {max_abs_diff:.3e} at {where}, "
            f"tolerance {tol:.1e}"
        )

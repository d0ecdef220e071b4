"""Exception types raised across slicecrack."""


class SliceCrackError(Exception):
    """Base class for every error raised by slicecrack."""


class GeometryError(SliceCrackError, ValueError):
    """Cache geometry parameters are inconsistent."""


class AddressRangeError(SliceCrackError, ValueError):
    """Physical address does not fit in the configured address width."""


class ArgumentError(SliceCrackError, ValueError):
    """An operation was called with an invalid argument."""


class UnmappedAddressError(SliceCrackError, LookupError):
    """A table-based hash has no entry for the requested A2 value."""

    def __init__(self, a2, set_index=None):
        self.a2 = a2
        self.set_index = set_index
        where = '' if set_index is None else f' at set index {set_index}'
        super().__init__(f'A2 value {a2:#x} is not covered by the mapping table{where}')


class TraceParseError(SliceCrackError, ValueError):
    """A trace CSV row could not be parsed."""

    def __init__(self, row, message):
        self.row = row
        super().__init__(f"row {row}: {message}")


class NeedsMoreDataError(SliceCrackError):
    """A GF(2) system is underdetermined."""

    def __init__(self, free_bits):
        self.free_bits = tuple(free_bits)
        listed = ', '.join(str(b) for b in self.free_bits)
        super().__init__(f'underdetermined system, free bit positions: {listed}')


class InvariantViolationError(SliceCrackError):
    """An internal invariant failed; signals a classification bug."""


class InsufficientPoolError(SliceCrackError):
    """The probe pool cannot seed a single eviction set."""


class CapacityError(SliceCrackError):
    """Requested color quotas exceed the available colors."""


class ConfigError(SliceCrackError):
    """A run config is missing a section or holds an invalid value."""


class PipelineError(SliceCrackError):
    """The crack pipeline could not produce a result."""

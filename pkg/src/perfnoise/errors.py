"""Exception types raised across the toolchain.

Everything derives from NoiseError so callers can catch the whole family.
The CLI maps subfamilies to exit codes: plan problems -> 2, build problems
-> 3, run problems -> 4.
"""


class NoiseError(Exception):
    """Base class for all errors raised by this package."""


class UnsupportedIsa(NoiseError):
    """Requested ISA has no pattern or register table."""


class InsufficientRegisterPool(NoiseError):
    """Register pool is too small for the requested pattern."""


class RegisterPressureTooHigh(NoiseError):
    """Not enough free or saveable registers in the target function."""


class MalformedAssembly(NoiseError):
    """Assembly text could not be parsed into functions and loops."""


class AnchorOutsideLoop(NoiseError):
    """An anchor comment is not enclosed by any loop."""


class AnchorMissing(NoiseError):
    """A region named by the plan has no anchor in the emitted assembly."""


class DuplicateRegionId(NoiseError):
    """The same region id is anchored more than once."""


class AuditMismatch(NoiseError):
    """Post-injection recount disagrees with the injection report."""


class NestedRegion(NoiseError):
    """A region was begun twice without an intervening end."""


class OrphanEnd(NoiseError):
    """A region end arrived without a matching begin."""


class IoFailure(NoiseError):
    """A file could not be read or written."""


class PlanError(NoiseError):
    """Experiment plan is missing fields or contains bad values."""


class BuildFailure(NoiseError):
    """A compile, assemble, or link step failed."""


class RunFailure(NoiseError):
    """A measured program exited abnormally or produced no samples."""


class CacheCorrupt(NoiseError):
    """Build cache contents do not match their recorded digests."""


class TooFewPoints(NoiseError):
    """A timing series is too short to fit the three-phase model."""


class ZeroLoopSize(NoiseError):
    """Loop body size of zero makes relative payload undefined."""


class ZeroReference(NoiseError):
    """Reference duration of zero makes saturation undefined."""


class InvalidProbability(NoiseError):
    """A probability parameter lies outside [0, 1]."""


class ChecksumMismatch(NoiseError):
    """Kernel output deviates from the stored reference checksum."""

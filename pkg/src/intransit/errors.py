"""Exception hierarchy shared by every layer of the package."""
from __future__ import annotations


class IntransitError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(IntransitError, ValueError):
    """Invalid study, statistics or solver configuration."""


# -- statistics ----------------------------------------------------------------


class DataQualityError(IntransitError, ValueError):
    """A non-finite sample reached a statistics accumulator."""

    def __init__(self, value: float, *, cell: int | None = None, timestep: int | None = None) -> None:
        self.value = value
        self.cell = cell
        self.timestep = timestep
        where = ""
        if cell is not None:
            where = f" at cell {cell}, timestep {timestep}"
        super().__init__(f"non-finite sample {value!r}{where}")


class InsufficientDataError(IntransitError, ValueError):
    """A statistic was queried before enough samples were seen."""


class ThresholdError(IntransitError, ValueError):
    """Unknown exceedance threshold or mismatched threshold lists."""


# -- wire protocol -------------------------------------------------------------


class ProtocolError(IntransitError):
    """Base class for frame decoding failures."""


class BadMagicError(ProtocolError):
    pass


class VersionMismatchError(ProtocolError):
    pass


class TruncatedFrameError(ProtocolError):
    pass


class LengthOverflowError(ProtocolError):
    pass


class MalformedFrameError(ProtocolError):
    """Frame header is valid but the body does not parse."""


class ProtocolViolationError(IntransitError):
    """A well-formed message that the receiver cannot accept (bad range, unknown field...)."""


# -- checkpoints ---------------------------------------------------------------


class CheckpointError(IntransitError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointChecksumError(CheckpointError):
    pass


# -- client / launcher -----------------------------------------------------------


class ClientError(IntransitError):
    pass


class SessionClosedError(ClientError):
    pass


class ConnectError(ClientError):
    """Server rank could not be reached within the retry budget."""


class StudyMismatchError(ClientError):
    pass


class StudyFailedError(IntransitError):
    """The launcher gave up on a study (retry budget or server restarts exhausted)."""


class CFLViolationError(ConfigError):
    """Requested time step breaks the advection or diffusion stability bound."""


class ExportError(IntransitError):
    """Missing, incomplete or unreadable export."""

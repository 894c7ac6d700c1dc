"""Exception types shared across the package."""


class FlowTrackError(Exception):
    """Base class for all package errors."""


class DataFormatError(FlowTrackError):
    """A file or in-memory record does not match its documented format."""


class ConfigError(DataFormatError):
    """A run-configuration file is malformed or names an unknown key."""


class NumericalError(FlowTrackError):
    """A numerical invariant broke: non-finite cost, divergence, bad flow."""


class InfeasibleAssignmentError(FlowTrackError):
    """A binary assignment violates a flow-conservation equality.

    Carries the offending detection and which side of its constraint
    pair (incoming or outgoing) failed.
    """

    def __init__(self, det_id, side, message=None):
        self.det_id = det_id
        self.side = side
        super().__init__(
            message
            or f"flow conservation violated at detection {det_id} ({side} equality)"
        )

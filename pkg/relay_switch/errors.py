"""Exception hierarchy shared by every relay_switch module."""
from __future__ import annotations

from typing import Optional


class RelaySwitchError(Exception):
    """Root of every error raised on purpose by this package."""


class ConfigError(RelaySwitchError, ValueError):
    pass


# --- margins and traces -----------------------------------------------------

class MalformedRecord(RelaySwitchError, ValueError):
    """A token record whose top-k list cannot yield a margin."""

    def __init__(self, message: str, position: Optional[int] = None) -> None:
        self.position = position
        if position is not None:
            message = f"position {position}: {message}"
        super().__init__(message)


class InsufficientData(RelaySwitchError):
    pass


class BadWindow(RelaySwitchError, ValueError):
    pass


class MisalignedInputs(RelaySwitchError, ValueError):
    pass


# --- cues ---------------------------------------------------------------------

class BadCue(RelaySwitchError, ValueError):
    pass


class BadPosition(RelaySwitchError, IndexError):
    pass


class EmptySelection(UserWarning):
    """No cue statistics were available; the resulting cue set is empty."""


# --- switching ----------------------------------------------------------------

class BadRequest(RelaySwitchError, ValueError):
    pass


class SessionClosed(RelaySwitchError):
    pass


class ProtocolViolation(RelaySwitchError):
    pass


# --- endpoints ------------------------------------------------------------------

class EndpointError(RelaySwitchError, RuntimeError):
    pass


class MalformedResponse(EndpointError):
    pass


class UnsupportedCapability(EndpointError):
    pass


class ModelNotFound(EndpointError):
    pass


# --- mock backend and accounting ----------------------------------------------

class ScriptMiss(RelaySwitchError, LookupError):
    pass


class BadCostModel(RelaySwitchError, ValueError):
    pass


class EmptyTranscript(RelaySwitchError, ValueError):
    pass


class EmptyInput(RelaySwitchError, ValueError):
    pass

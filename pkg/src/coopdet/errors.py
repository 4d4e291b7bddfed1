"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """An operation was called with arguments that break its preconditions."""


class PacketDecodeError(ValueError):
    """A byte stream could not be decoded into a packet.

    Carries the byte offset at which decoding failed.
    """

    def __init__(self, offset: int, reason: str):
        self.offset = offset
        self.reason = reason
        super().__init__(f"packet decode failed at byte {offset}: {reason}")


class GenerationError(RuntimeError):
    """Scene generation could not satisfy its placement constraints."""


class ScenarioFormatError(ValueError):
    """A scenario file is malformed or violates scene invariants."""


class ComparisonError(ValueError):
    """Metric reports cannot be aligned row-by-row."""

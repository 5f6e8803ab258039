"""Exception hierarchy shared by every module."""


class DDPError(Exception):
    """Base class for all library errors."""


class DimensionError(DDPError, ValueError):
    """A state vector does not match the coalition it is evaluated against."""


class InfeasibleScenarioError(DDPError):
    """Capacity is below the load that clamped users already consume."""


class SizeError(DDPError, ValueError):
    pass


class ProtocolError(DDPError):
    pass


class CodecError(DDPError, ValueError):
    """Raised for malformed wire messages."""


class ScenarioError(DDPError, ValueError):
    """Invalid scenario data or a fault that references unknown entities."""


class CommandError(DDPError, ValueError):
    pass


class GenerationError(DDPError, ValueError):
    pass

"""Exception hierarchy shared by all modules."""

from __future__ import annotations


class MesoptError(Exception):
    """Base class for every error raised by this package."""

    exit_code = 1


class ConfigError(MesoptError):
    exit_code = 2


class ValidationError(MesoptError):
    exit_code = 3


class NumericError(MesoptError):
    exit_code = 4


# bom-network
class CycleDetected(ValidationError):
    def __init__(self, cycle: list[int]):
        self.cycle = list(cycle)
        path = " -> ".join(str(c) for c in self.cycle + self.cycle[:1])
        super().__init__(f"directed cycle in BOM: {path}")


class NegativeWeight(ValidationError):
    pass


class DanglingNodeId(ValidationError):
    pass


class DegenerateSize(ValidationError):
    pass


class InfeasibleSpec(ConfigError):
    pass


class DimensionMismatch(ValidationError):
    pass


# stochastic
class UnsupportedDistribution(ConfigError):
    pass


# simulator / gradients
class InvalidPolicy(ValidationError):
    pass


class NonFiniteState(NumericError):
    pass


class NonFiniteJacobian(NumericError):
    pass


class OutOfRange(ValidationError):
    pass


class TapeCorrupt(NumericError):
    pass


# optimizer
class Diverged(NumericError):
    pass


class EmptySupport(NumericError):
    pass

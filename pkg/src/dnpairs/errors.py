"""Exception hierarchy. Every failure mode of the pipelines has its own type."""


class DnPairsError(Exception):
    """Base class for all package errors."""


class DegenerateCoefficientError(DnPairsError):
    pass


class UnsupportedDimensionError(DnPairsError):
    pass


class InversionError(DnPairsError):
    def __init__(self, msg, point=None):
        super().__init__(msg)
        self.point = point


class EvaluationError(DnPairsError):
    pass


class NonQuasianalyticError(DnPairsError):
    """Bump order sigma <= 1 admits no compactly supported profile."""


class RadiusOrderError(DnPairsError):
    pass


class BoundInapplicableError(DnPairsError):
    pass


class MeanConstraintError(DnPairsError):
    pass


class SupportError(DnPairsError):
    pass


class DensityPositivityError(DnPairsError):
    pass


class ResolutionError(DnPairsError):
    pass


class DivisionError(DnPairsError):
    pass


class ForbiddenSlopeError(DnPairsError):
    pass


class EnergyThresholdError(DnPairsError):
    """Target energy does not exceed the low-energy candidate."""


class BasisError(DnPairsError):
    pass


class OscillationBudgetError(DnPairsError):
    pass


class PathError(DnPairsError):
    pass


class PositivityError(DnPairsError):
    pass


class DegenerateFrequencyError(DnPairsError):
    pass


class SignError(DnPairsError):
    pass


class ConstantPotentialError(DnPairsError):
    pass


class ChartError(DnPairsError):
    pass


class SolverError(DnPairsError):
    pass


class SpectrumError(DnPairsError):
    pass


class EigenError(DnPairsError):
    pass


class ConfigError(DnPairsError):
    pass


class ParseError(ConfigError):
    def __init__(self, msg, line=None):
        super().__init__(msg if line is None else f"line {line}: {msg}")
        self.line = line

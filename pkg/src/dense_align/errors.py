"""Exception types raised across the package."""


class InvalidTrajectoryError(ValueError):
    pass


class InvalidCoefficientError(ValueError):
    pass


class UndefinedRatioError(ValueError):
    """A log density ratio was requested where the reference policy has zero mass."""


class EnumerationTooLargeError(ValueError):
    pass


class ShapingInfeasibleError(ValueError):
    pass


class AmbiguousOrderingError(ValueError):
    pass


class UnsolvedMdpError(ValueError):
    pass


class EmptyPoolError(ValueError):
    """No strictly ordered pair can be formed from the stored trajectories."""


class DegenerateDensityError(ValueError):
    pass


class SamplingDivergedError(RuntimeError):
    pass


class TrainingDivergenceError(RuntimeError):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class IntegrityError(ValueError):
    pass


class ConfigError(ValueError):
    """Configuration problems; ``problems`` lists (field path, message) pairs."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [("", problems)]
        self.problems = list(problems)
        lines = [f"{path}: {msg}" if path else msg for path, msg in self.problems]
        super().__init__("; ".join(lines))


class FormatVersionError(IntegrityError):
    pass

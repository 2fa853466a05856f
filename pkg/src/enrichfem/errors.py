"""Exception hierarchy.

ConfigError, FormatError and UnsupportedError are usage/input problems (CLI
exit code 2); NumericalError and its subclasses are runtime failures of the
numerics (exit code 3).
"""


class EnrichFemError(Exception):
    pass


class ConfigError(EnrichFemError):
    """Bad run configuration: unknown keys, invalid values, missing files."""


class FormatError(EnrichFemError):
    """Malformed or inconsistent weights/prior file."""


class UnsupportedError(EnrichFemError):
    """Requested capability outside the supported envelope."""


class NumericalError(EnrichFemError):
    pass


class SolverError(NumericalError):
    """Linear solve failed or residual check exceeded tolerance."""


class CoefficientError(NumericalError):
    """Problem coefficients violate assumptions (e.g. D not SPD)."""


class LiftingError(NumericalError):
    """Lifted prior u_theta + M not strictly positive where required."""


class TrainingError(NumericalError):
    """Non-finite loss or diverged optimization."""

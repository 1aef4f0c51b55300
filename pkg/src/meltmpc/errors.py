"""Exception types shared across the workbench."""


class MeltMpcError(Exception):
    """Base class for all workbench errors."""


class ConfigError(MeltMpcError):
    """Invalid or inconsistent configuration value."""


class InvalidMaterialError(ConfigError):
    """Material property table violates its invariants."""


class NumericalDivergenceError(MeltMpcError):
    """Thermal solve produced a non-finite temperature."""

    def __init__(self, step_index: int):
        super().__init__(f"non-finite temperature at plant step {step_index}")
        self.step_index = step_index


class InsufficientSupportError(MeltMpcError):
    """Too few support points for a feature-extraction fit."""


class DegenerateGeometryError(MeltMpcError):
    """Interpolation system is singular (coincident or degenerate points)."""


class TuningFailedError(MeltMpcError):
    """Every candidate evaluated by the tuner diverged."""


class SolverAbortError(MeltMpcError):
    """Optimizer encountered a non-finite objective or prediction."""


class TrainingAbortError(MeltMpcError):
    """Training loss became non-finite."""


class RunAbortedError(MeltMpcError):
    """Closed-loop run aborted; carries the partial log."""

    def __init__(self, message: str, partial_log=None):
        super().__init__(message)
        self.partial_log = partial_log

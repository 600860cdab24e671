"""Error taxonomy shared by all modules.

Every error carries a machine-readable record so the CLI can emit it as JSON
and map it onto an exit code.
"""

VALIDATION = 2
NUMERICAL = 3
CONFIG = 4


class FWBICError(Exception):
    """Base class. ``exit_code`` groups errors for the command line."""

    exit_code = NUMERICAL
    module = "fwbic"

    def __init__(self, message, module=None, **details):
        super().__init__(message)
        if module is not None:
            self.module = module
        self.details = details

    def record(self):
        return {
            "error": type(self).__name__,
            "module": self.module,
            "message": str(self),
            "details": {k: _jsonable(v) for k, v in self.details.items()},
        }


def _jsonable(value):
    try:
        import numpy as np

        if isinstance(value, np.ndarray):
            return value.tolist()
        if isinstance(value, np.generic):
            return value.item()
    except ImportError:  # pragma: no cover
        pass
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, complex):
        return [value.real, value.imag]
    return value


class ConfigError(FWBICError):
    exit_code = CONFIG
    module = "problem"


# problem
class ValidationError(FWBICError):
    exit_code = VALIDATION
    module = "problem"


class ClearZoneViolation(ValidationError):
    pass


class MultiModeBand(ValidationError):
    pass


class BadIndexBounds(ValidationError):
    pass


class DegenerateGeometry(ValidationError):
    pass


# cavity_fem
class SnapFailure(FWBICError):
    module = "cavity_fem"


class NoConvergence(FWBICError):
    module = "cavity_fem"


class AmbiguousAssignment(FWBICError):
    module = "cavity_fem"


# modematch
class BandViolation(FWBICError):
    module = "modematch"


class NearZeroCoupling(FWBICError):
    module = "modematch"


class IllConditioned(FWBICError):
    module = "modematch"


# bic_search
class NoRootInBand(FWBICError):
    module = "bic_search"


class NoCrossing(FWBICError):
    module = "bic_search"


class NoSignChange(FWBICError):
    module = "bic_search"


class ParityViolation(FWBICError):
    exit_code = VALIDATION
    module = "bic_search"


# resonance (NoConvergence is reused with module="resonance")
class EscapedBand(FWBICError):
    module = "resonance"


class BranchJump(FWBICError):
    module = "resonance"

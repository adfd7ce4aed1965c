"""Exception hierarchy shared by all modules."""


class WaveguideError(Exception):
    """Base class for every error raised by the package."""

    kind = "error"

    def __init__(self, message, **diagnostics):
        super().__init__(message)
        self.diagnostics = diagnostics

    def report(self):
        return {"error": self.kind, "message": str(self), "diagnostics": _plain(self.diagnostics)}


class InvalidArgument(WaveguideError, ValueError):
    kind = "invalid-argument"


class OutOfDomain(WaveguideError, ValueError):
    kind = "out-of-domain"


class ThresholdProximity(WaveguideError, ValueError):
    kind = "threshold-proximity"


class SolverFailure(WaveguideError, RuntimeError):
    kind = "solver-failure"


class AccuracyFailure(WaveguideError, RuntimeError):
    kind = "accuracy-failure"


class CoverageError(WaveguideError, ValueError):
    kind = "coverage"


class StencilError(WaveguideError, ValueError):
    kind = "stencil"


class AdmissibilityError(WaveguideError, ValueError):
    kind = "admissibility"


class DomainTooSmall(WaveguideError, RuntimeError):
    kind = "domain-too-small"


class IntegratorFailure(WaveguideError, RuntimeError):
    kind = "integrator-failure"


class WindowTooShort(WaveguideError, RuntimeError):
    kind = "window-too-short"


class ConfigError(WaveguideError, ValueError):
    kind = "config-validation"


def _plain(obj):
    # numpy scalars/arrays -> JSON-friendly values
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if hasattr(obj, "tolist"):
        return obj.tolist()
    return obj

"""Exception hierarchy shared by all qflux modules."""


class QFluxError(Exception):
    """Base class; ``kind`` is the machine-readable error name."""

    kind = "qflux-error"


class InvalidParameter(QFluxError, ValueError):
    kind = "invalid-parameter"


class TruncationError(QFluxError):
    kind = "truncation-error"


class OutOfDomain(QFluxError, ValueError):
    kind = "out-of-domain"


class InvalidState(QFluxError, ValueError):
    kind = "invalid-state"


class InvalidSetup(QFluxError, ValueError):
    kind = "invalid-setup"


class ResolutionError(QFluxError):
    kind = "resolution-error"


class NodeProximity(QFluxError):
    kind = "node-proximity"


class EnsembleError(QFluxError):
    kind = "ensemble-error"


class DegenerateInput(QFluxError, ValueError):
    kind = "degenerate-input"


class IncompatibleBinning(QFluxError, ValueError):
    kind = "incompatible-binning"


class ConfigError(QFluxError, ValueError):
    """Config parse failure; ``line`` is 1-based when known."""

    kind = "config-error"

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)

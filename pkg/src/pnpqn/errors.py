"""Exception hierarchy shared across the package."""


class PnPError(Exception):
    """Base class for all errors raised by pnpqn."""


class DimensionError(PnPError, ValueError):
    """Operands have incompatible shapes."""


class ParameterError(PnPError, ValueError):
    """A parameter lies outside its admissible range."""


class NumericalError(PnPError, ArithmeticError):
    """An iterative routine failed to converge or produced non-finite values."""


class ProtocolError(PnPError, IOError):
    """Malformed frame on the external denoiser wire protocol."""


class TransportError(PnPError, IOError):
    """The external denoiser connection failed or closed unexpectedly."""

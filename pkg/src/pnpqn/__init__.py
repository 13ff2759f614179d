"""Quasi-Newton Plug-and-Play restoration on the forward-backward envelope."""
from .denoisers import CosineGradStep, GradStepDenoiser, QuadraticGradStep, SoftThreshold, make_regularizer
from .errors import DimensionError, NumericalError, ParameterError, PnPError, ProtocolError, TransportError
from .fidelity import Fidelity
from .operators import CircularConvolution, Composition, Downsample, Identity, LinearOp, op_norm
from .solvers import SOLVERS, RunRecord, SolverParams, minfbe, pnp_lbfgs, solve

__version__ = "0.1.0"

__all__ = [
    "CircularConvolution", "Composition", "CosineGradStep", "DimensionError", "Downsample", "Fidelity",
    "GradStepDenoiser", "Identity", "LinearOp", "NumericalError", "ParameterError", "PnPError",
    "ProtocolError", "QuadraticGradStep", "RunRecord", "SOLVERS", "SoftThreshold", "SolverParams",
    "TransportError", "make_regularizer", "minfbe", "op_norm", "pnp_lbfgs", "solve",
]

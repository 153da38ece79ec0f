"""Numerical laboratory for random block matrices ``H + Lambda``."""

from .model import (
    CouplingSpec,
    InteractionMatrix,
    LambdaSpectrum,
    WignerDraw,
    assemble,
    build_lambda,
    lambda_spectrum,
    make_coupling,
    sample_wigner,
)

__version__ = "0.1.0"

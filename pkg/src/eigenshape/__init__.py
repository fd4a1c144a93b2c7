"""eigenshape: Dirichlet eigenpairs of random 2D domains.

Generates random polygonal and Bezier-bounded domains, canonicalizes and
rasterizes them, computes reference eigenpairs with a P1 finite-element
solver, and trains/serves a CNN eigenvalue predictor and an FNO
eigenfunction predictor.
"""

__version__ = "0.1.0"

from . import dataset, fem, geometry, metrics, models, netcore, pixelize, training

__all__ = [
    "__version__",
    "dataset",
    "fem",
    "geometry",
    "metrics",
    "models",
    "netcore",
    "pixelize",
    "training",
]

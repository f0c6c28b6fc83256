"""Dyadic machinery for bi-parameter singular integrals with compact kernels.

Modules
-------
grid      exact dyadic cubes, Haar functions, shifted grids, families
kernels   admissible bound triples, envelopes, kernel models
quad      adaptive Gauss-Legendre pairings and the integral quantities
coeffs    Haar matrix elements, regimes, bounds, paraproduct symbols
analysis  expansions, projections, paraproducts, BMO, compactness curves
cli       command line front end

The hot loops (cell Galerkin matrices) live in the compiled ``_core``
extension when it is available and in ``_pycore`` otherwise; ``BACKEND``
names the one in use.
"""
from ._backend import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]

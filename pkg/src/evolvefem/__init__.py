"""Evolving-surface finite elements with linearly implicit BDF time stepping.

The package discretizes surface evolution laws in which the velocity is
defined through a regularized mean-curvature relation, a dynamic velocity
equation, or a coupling with a surface PDE.  Surfaces are closed simplicial
surfaces with curved elements of degree 1 or 2; each time step solves a single
symmetric positive definite linear system.
"""

__version__ = "0.1.0"

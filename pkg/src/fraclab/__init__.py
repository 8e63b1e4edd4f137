"""Numerical experiments on layer solutions of the fractional Allen-Cahn equation.

Modules: ``model`` (reaction terms), ``fracop`` (discrete fractional
Laplacian with tails), ``extension`` (weighted extension to the half-space),
``energy`` (renormalized energies), ``solver`` (1D layers and 2D monotone
solutions), ``analysis`` (stability, minimality, sliding, symmetry fits),
``io`` and ``cli``.
"""

__version__ = "0.1.0"

"""
Layer solutions and their limits
================================

Monotone layers of (-Delta)^s u = u - u^3 on the line, for a few values of
s.  The tails are algebraic, so smaller s means a heavier tail.
"""

# %%
# Solve the layers.  The flow runs first, then Newton polishes the result.
import numpy as np

from fraclab.analysis import g_balance
from fraclab.model import make_cubic_nonlinearity
from fraclab.solver import limit_trichotomy, solve_layer

nl = make_cubic_nonlinearity()
layers = {s: solve_layer(nl, s, X_max=40.0, N=801) for s in (0.25, 0.5, 0.75)}

for s, lay in layers.items():
    print(f"s = {s:.2f}: residual {lay.residual_norm:.1e}, min slope {lay.min_slope:.3e}, "
          f"{len(lay.history)} solver steps")

# %%
# Distance to the well at a few points.  For a tail C|x|^(-2s) doubling x
# divides the distance by 2^(2s).
xs = np.array([5.0, 10.0, 20.0])
for s, lay in layers.items():
    gap = 1 - lay(xs)
    print(f"s = {s:.2f}: 1 - u = {np.array2string(gap, precision=4)}, "
          f"ratio {gap[1] / gap[2]:.2f} vs {2 ** (2 * s):.2f}")

# %%
# Limits at -+infinity, from a fit of the outer half of each side, snapped
# to the zeros of f.
for s, lay in layers.items():
    lim = limit_trichotomy(lay, nl)
    print(f"s = {s:.2f}: raw limits ({lim.raw_minus:+.4f}, {lim.raw_plus:+.4f}) -> {tuple(lim)}")

# %%
# Neither half-branch can carry a layer on its own: the integral of f over
# [-1, 0] and over [0, 1] is nonzero.
print("int_{-1}^0 f =", g_balance(nl, "minus"), " int_0^1 f =", g_balance(nl, "plus"))

"""
Energy differences for a state of infinite energy
=================================================

The layer has infinite energy on the whole line, but the change caused by a
compact perturbation is finite.  We compute it three ways: from the
nonlocal double integral, from the extension to the half-plane, and as the
minimum over extensions that vanish on the outer boundary of a half-ball.
"""

# %%
import numpy as np

from fraclab.energy import standard_bump, verify_renormalization
from fraclab.fracop import GridFunction, TailModel
from fraclab.model import make_cubic_nonlinearity
from fraclab.solver import solve_layer

s = 0.25
layer = solve_layer(make_cubic_nonlinearity(), s, 40.0, 801)
v = layer.grid
phi = GridFunction(standard_bump([layer.x], center=0.5, radius=1.0), v.spacing, v.origin,
                   TailModel.constant(0.0))

# %%
# The nonlocal value is converted to extension units with a constant that is
# calibrated on a bump, on the same mesh.
tab = verify_renormalization(v, phi, s, (4.0, 8.0, 16.0, 32.0), zmesh=48)
print(f"calibrated ratio {tab.calibration.ratio:.4f} (continuum value {tab.calibration.theory:.4f})")
print(f"{'R':>5} {'nonlocal':>10} {'extension':>10} {'infimum':>10} {'gap12':>8} {'gap13':>8}")
for r in tab.rows:
    print(f"{r['R']:5.0f} {r['gagliardo']:10.5f} {r['extension']:10.5f} {r['extension_inf']:10.5f} "
          f"{r['gap12']:8.2%} {r['gap13']:8.2%}")

# %%
# The gap between the last two shrinks with R.  Its rate is set by the
# Poisson extension of phi on the outer boundary, which is of size R^(-n).
R = np.array([r["R"] for r in tab.rows])
slope = np.polyfit(np.log(R), np.log(np.abs(tab.gap23())), 1)[0]
print(f"fitted decay exponent of the gap: {slope:.2f}   (n + 2s = {1 + 2 * s:.2f})")

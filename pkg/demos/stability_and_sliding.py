"""
Stability of the layer, instability of zero
===========================================

The second variation of the extended energy at the layer is nonnegative,
with the translation direction as a null mode.  At u = 0 it turns negative
on concentrated test functions.  Sliding the layer along itself shows the
comparison step: no positive shift ever touches.
"""

# %%
import numpy as np

from fraclab.analysis import (harmonic_test_field, make_stability_form, random_test_fields,
                              rescaling_instability_test, sliding_verify, stability_parts, translation_mode)
from fraclab.model import make_cubic_nonlinearity
from fraclab.solver import solve_layer

s, R, zmesh = 0.5, 16.0, 24
nl = make_cubic_nonlinearity()
layer = solve_layer(nl, s, 40.0, 801)
form = make_stability_form(layer.grid, s, nl, R=R, zmesh=zmesh)

# %%
# The derivative of the layer, cut off smoothly and extended harmonically.
mode = harmonic_test_field(translation_mode(layer.grid, R), s, R, zmesh)
kin, pot, norm = stability_parts(form, mode)
print(f"translation mode: kinetic {kin:.4f}, potential {pot:.4f}, normalized form {(kin + pot) / norm:.2e}")

values = [(k + p) / n for k, p, n in (stability_parts(form, z) for z in random_test_fields(form, R, 20, seed=1,
                                                                                          zmesh=zmesh))]
print(f"20 random test fields: normalized form in [{min(values):.3f}, {max(values):.3f}]")

# %%
# At u = 0 the kinetic part grows like eps^(2s-1) while the potential part
# falls like -eps^(-1), so small scales win.
tab = rescaling_instability_test(0.25, nl=nl)
for eps, form_value, kin, pot in tab.rows:
    print(f"eps {eps:5.2f}: form {form_value:10.3f} = {kin:9.3f} + ({pot:9.3f})")
print("fitted exponents", np.round(tab.exponents, 3), "expected", tab.expected)

# %%
# Slide the layer against itself.
rep = sliding_verify(layer.grid, layer.grid, np.linspace(0, 4, 41))
print(f"k_star = {rep.k_star}, dominated for all k > 0: {all(r[2] for r in rep.rows if r[0] > 0)}")

"""From the 3D phase law to the plate law: completion, reduced moduli, dissipation.

Run: python demos/01_reduced_law.py
"""
# %%
import numpy as np

from artifact import tensorkit as tk
from artifact.materials import PhaseMaterial, YieldSet
from artifact.reduction import (InterfaceJump, complete_strain, interface_dissipation, reduced_ball_constants,
                                reduced_dissipation, reduced_elasticity, single_phase_jump_integral)

soft = PhaseMaterial(mu=1.0, k=1.0, h_kin=0.5, h_iso=0.2, yield_set=YieldSet("von_mises", 0.01))
stiff = PhaseMaterial(mu=2.0, k=1.5, h_kin=0.3, h_iso=0.1, yield_set=YieldSet("von_mises", 0.02))

# %% A membrane strain xi is completed by the out-of-plane entries that make
# the transverse stresses vanish.  For mu = k = 1 an equibiaxial stretch
# contracts the thickness by 2/7.
A = complete_strain(soft, tk.I2)
print("completed strain (11, 22, 33, 12, 13, 23):", np.round(A, 6))

# %% Reduced elasticity in packed (11, 22, 12) form.  Only plane stress moduli survive.
for name, m in (("soft", soft), ("stiff", stiff)):
    print(name, "C_red =\n", np.round(reduced_elasticity(m).c_red, 6))

# %% The reduced dissipation lives between two balls; we sample the ratio.
rng = np.random.default_rng(0)
p = rng.normal(size=(2000, 3))
ratio = reduced_dissipation(soft, p) / tk.norm(p)
r_H, R_H = reduced_ball_constants(soft)
print(f"R_red(p)/|p| in [{ratio.min():.4f}, {ratio.max():.4f}], bounds [{r_H:.4f}, {R_H:.4f}]")

# %% Across an interface the jump of p is split between the two phases in
# the cheapest way, so it never costs more than charging one phase alone.
# Here the soft phase is cheaper and takes the whole jump.
nu = (np.cos(0.4), np.sin(0.4))
J = InterfaceJump(nu, c_bar=(0.01, -0.005), c_hat=0.02)
both = interface_dissipation(soft, stiff, J)
print(f"interface cost {both:.4e}; soft only {single_phase_jump_integral(soft, J):.4e}; "
      f"stiff only {single_phase_jump_integral(stiff, J):.4e}")

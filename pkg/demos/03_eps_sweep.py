"""Shrinking the microstructure: eps-sweep with delta = eps on stripes.

Run: python demos/03_eps_sweep.py   (about 3 s)
"""
# %%
import numpy as np

from artifact.cli import build_problem, load_config
from artifact.homogenize import SweepPlan, epsilon_sweep

cfg = load_config("stripes_eps")
plan = SweepPlan(cfg["sweep"]["eps_values"], build_problem(cfg), delta_law="eps", stability_probes=4)
rep = epsilon_sweep(plan)

# %% Macroscopic observables per period length. Energies settle, hardening fades with delta.
for r in rep["runs"]:
    print(f"eps={r['eps']:<6g} delta={r['delta']:<6g} energy={r['energy']:.5e} "
          f"delta*Q_hard={r['dq_hard']:.3e} <s>={np.round(r['avg_stress'], 5)}")
print("successive energy differences:", np.round(rep["energy_differences"], 8))
print("nonincreasing:", rep["energy_differences_nonincreasing"], rep["stress_differences_nonincreasing"])
print(f"all runs below the datum bound {rep['datum_bound']:.3e}: {rep['bounded']}")

# %% Unfolded stress: pixel averages of the stress over every eps-cell,
# i.e. the microscopic profile seen through the torus.  The stripes are
# normal to e1, so s11 (normal traction) is continuous while s22 jumps.
for r in rep["runs"]:
    u = np.asarray(r["unfolded_stress"])
    print(f"eps={r['eps']:<6g} s11 per stripe:", np.round(u[:, 0, 0], 5), " s22 per stripe:", np.round(u[:, 0, 1], 5))

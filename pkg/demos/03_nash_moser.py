"""Nash-Moser iteration on a small Clifford-torus problem.

Each level solves a linearized degenerate wave equation with the residual
smoothed at the dyadic cutoff N_l = 2^l. The residual norms fall like
K d^(2^l); the limit is then checked against an independent RK4 solver.

Run: python demos/03_nash_moser.py   (about 10 s)
"""

import numpy as np

from lcmembrane.nash_moser import NashMoser
from lcmembrane.oracle import compare, direct_solve
from lcmembrane.presets import load_preset
from lcmembrane.rescale import from_W

pre = load_preset("nondegenerate-small").override(grid=16, T=0.1, dt=5e-4, epsilon=1e-2)
prob = pre.problem()
solver = NashMoser(prob, pre.schedule(6), pre.dt, **pre.nash_moser_kwargs())
W, rep = solver.run()

print(" l   N_l   |||h|||      |||E|||")
for r in rep.levels:
    print(f"{r.l:2d}  {r.N_l:4d}   {r.norm_h:.3e}   {r.norm_E:.3e}")
print("status:", rep.status, " fitted d:", rep.d_fit, " slope of loglog(1/E):", rep.slope_fit, "(log 2 =", np.log(2), ")")

v = from_W(W, prob.v0, prob.v1)
ref = direct_solve(prob, pre.dt)
print("relative L2 distance to the direct solver:", compare(v, ref.v).aggregate["rel_l2"])

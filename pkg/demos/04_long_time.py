"""From the rescaled window [0, T] to the long horizon T / sqrt(eps).

The iteration solves the rescaled system; v(t) -> eps^2 v(sqrt(eps) t) maps
its limit to a solution of the original equations on a horizon that grows
as eps shrinks. A direct long-horizon solve confirms the mapped solution.

Run: python demos/04_long_time.py   (about 15 s)
"""

from lcmembrane.nash_moser import run
from lcmembrane.oracle import compare, direct_solve
from lcmembrane.presets import load_preset
from lcmembrane.rescale import from_W, physical_problem, rescale_forward

for eps in (4e-2, 1e-2):
    pre = load_preset("nondegenerate-small").override(grid=16, T=0.1, dt=5e-4, epsilon=eps)
    prob = pre.problem()
    W, rep = run(prob, pre.schedule(6), dt=pre.dt, **pre.nash_moser_kwargs())
    mapped = rescale_forward(from_W(W, prob.v0, prob.v1), eps)
    phys = physical_problem(prob)
    direct = direct_solve(phys, mapped.dt)
    gap = compare(mapped, direct.v).aggregate["rel_l2"]
    print(f"eps={eps:g}: iteration {rep.status}, horizon {phys.T:.2f}, relative L2 gap {gap:.2e}, blown up: {direct.blown_up}")

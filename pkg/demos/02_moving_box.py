"""
Penalization against freezing on the moving interval [sin(pi t) - 1, sin(pi t) + 1].

The penalized scheme lets Y leave the region by about 1/n, so doubling n
should roughly halve the worst containment violation. The piecewise scheme
stays inside by construction and converges as the segments shrink.
"""

from rbsde import parse_scenario
from rbsde import verification as ver
from rbsde.experiments import solve
from rbsde.region import uniform_gap, discretize
from rbsde.scenario import bundled

sc = parse_scenario(bundled("moving-box-1d"), {"paths": 4000, "steps": 128})
grid = sc.make_grid()
backend = sc.make_backend(sc.make_ensemble(grid))

print("penalized")
prev, prev_cont = None, None
for n in (32, 64, 128, 256):
    sol = solve(sc, "penalized", n, grid, backend)
    cont = ver.check_containment(sol).checks[0].statistic
    line = f"  n={n:<4} containment {cont:.5f}"
    if prev_cont:
        line += f"  ratio {cont / prev_cont:.3f}"
    if prev is not None:
        line += "  dY {:.4f} dZ {:.5f} dK {:.4f}".format(*ver.solution_distance(prev, sol))
    print(line)
    prev, prev_cont = sol, cont
pen = prev

print("piecewise")
prev = None
for j in (8, 16, 32, 64):
    sol = solve(sc, "piecewise", j, grid, backend)
    gap = uniform_gap(sc.region, discretize(sc.region, j), grid)
    line = f"  j={j:<3} region gap {gap:.4f}"
    if prev is not None:
        line += "  dY {:.4f}".format(ver.solution_distance(prev, sol)[0])
    print(line)
    prev = sol

print("piecewise j=64 vs penalized n=256: dY {:.4f}".format(ver.solution_distance(prev, pen)[0]))
print("Skorokhod (piecewise):", ver.check_skorokhod(prev).checks[0].statistic)

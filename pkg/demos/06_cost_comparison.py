"""Cost comparison: standard MC vs multilevel MC at matched accuracy.

For each finest mesh, pilot samples estimate the level variances; sample
counts then follow the optimal allocations for the same sampling-error
target and the modeled machine-independent costs are compared.
"""

from flowcell import harness, qoi
from flowcell import randfield as rf

spec = rf.CovarianceSpec(kind="exponential", sigma2=1.0, lam=0.3)
rows = harness.run_cost_comparison(
    qoi.QoiKind(qoi.K_EFF), spec, eps=0.01, finest_ns=[8, 16, 32, 64],
    n0=8, seed=3, pilot=40)

print("finest n |  MC cost units | MLMC cost units | ratio")
for r in rows:
    ratio = r["mlmc_cost_units"] / r["mc_cost_units"]
    print(f"{r['finest_n']:>8} | {r['mc_cost_units']:>14.3e} | "
          f"{r['mlmc_cost_units']:>15.3e} | {ratio:.3f}")
path = harness.write_cost_csv(rows, ".", seed=3)
print(f"written to {path}")

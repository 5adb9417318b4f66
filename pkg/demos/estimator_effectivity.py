"""Error bounds of the reduced model against true errors while the basis grows."""
import numpy as np

from mfopt.harness import ExperimentConfig, build_problem
from mfopt.rb import RbModel
from mfopt.validation import rb_domination

fom = build_problem(ExperimentConfig.load(), reduced=True).fom
rng = np.random.default_rng(0)

rb = RbModel.empty(fom)
for mu in rng.uniform(0.02, 0.09, size=(3, 2)):
    rb = rb.extend(mu)
print(f"basis size {rb.n_rb}")

test_mu = rng.uniform(0.015, 0.095, size=(4, 2))
sizes = [rb.n_rb // 8, rb.n_rb // 4, rb.n_rb // 2, rb.n_rb]
print(f"{'N':>4} {'true J error':>13} {'bound':>11} {'effectivity':>12}")
for r in rb_domination(fom, rb, test_mu, sizes):
    eff = r["bounds"].delta_J / r["e_J"] if r["e_J"] > 0 else np.inf
    print(f"{r['N']:4d} {r['e_J']:13.3e} {r['bounds'].delta_J:11.3e} {eff:12.3g}")

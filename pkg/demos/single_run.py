"""Run the multi-fidelity optimizer once on the small validation problem and
print the accepted iterates."""
import numpy as np

from mfopt.harness import ExperimentConfig, build_problem
from mfopt.optimizer import run_variant

cfg = ExperimentConfig.load()
fom = build_problem(cfg, reduced=True).fom

rec = run_variant(fom, "RelaxedTrRbMlOpt", np.array([0.026, 0.02]), cfg.tr)
print(f"{'i':>3} {'l':>4} {'model':>5} {'J':>12} {'criticality':>12}")
for h in rec.history:
    print(f"{h['i']:3d} {h['l']:4d} {h['fidelity']:>5} {h['J']:12.4e} {h['criticality']:12.3e}")
print(f"\nstatus {rec.status}, mu = {rec.mu}, J = {rec.J:.3e}")
print(f"evaluations: FOM {rec.count('FOM')}, RB {rec.count('RB')}, ML {rec.count('ML')}")

"""Training residual of the kernel surrogate for several kernel widths.

With ridge parameter eta the training residual equals eta * alpha, so it grows
with the coefficient size, which grows as the Gaussian flattens.
"""
import dataclasses

import numpy as np

from mfopt.harness import ExperimentConfig, build_problem
from mfopt.rb import RbModel
from mfopt.validation import spread_kernel_model

fom = build_problem(ExperimentConfig.load(), reduced=True).fom
rb = RbModel.empty(fom).extend([0.03, 0.07]).extend([0.07, 0.03])

print(f"{'width':>8} {'max |alpha|':>12} {'train error':>12}")
for width in (0.01, 0.1, 1.0, 10.0):
    km = spread_kernel_model(rb, seed=0, width=width)
    print(f"{width:8g} {np.abs(km.coeffs).max():12.3e} {km.train_error:12.3e}")

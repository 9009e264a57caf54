"""Poincare constants of the tempered joint law: grid oracle against the bound.

Run:  python demos/poincare_constants.py
"""
import numpy as np

from ctld import schedule_for, symmetric_mixture
from ctld import poincare as pc

# Two unit-variance components at +-mu.  The clean mixture's constant blows
# up like exp(mu^2 / 2); tempering trades that for something polynomial.
print(f"{'mu':>4} {'mixture':>10} {'joint':>10} {'bound':>12} {'beta_max':>9}")
for sep in (2.0, 4.0, 6.0):
    m = symmetric_mixture(sep)
    s = schedule_for(m)
    clean = pc.spectral_oracle(*pc.mixture_target(m))
    joint = pc.spectral_oracle(*pc.ctld_target(m, s))
    bound = pc.total_bound(m, s)
    print(f"{sep / 2:4.1f} {clean:10.3f} {joint:10.3f} {bound.c_total:12.4g} {s.beta_max:9.1f}")

# where the bound spends its budget, for the widest pair
print()
for k, v in bound.to_dict().items():
    if np.isscalar(v):
        print(f"  {k:24s} {v:.4g}")

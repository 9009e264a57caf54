"""Tempered Langevin against plain Langevin on a well separated pair.

Both chains start in the right-hand mode.  Plain Langevin has to climb the
barrier; the tempered chain widens the modes whenever beta is large.

Run:  python demos/tempered_sampler.py
"""
import numpy as np

from ctld import schedule_for, symmetric_mixture
from ctld.sde import ChainState, run_chain

m = symmetric_mixture(6.0)
s = schedule_for(m)
rng = np.random.default_rng(3)
steps, dt = 100_000, 1e-2

traj, rep = run_chain(ChainState.single([3.0]), steps, dt, 100, m, s, rng)
_, plain = run_chain(ChainState.single([3.0]), steps, dt, 100, m, s, rng, frozen_beta=True)

print("beta_max:", s.beta_max)
print("tempered occupancy (left, right):", np.round(rep.mode_occupancy, 3))
print("plain    occupancy (left, right):", np.round(plain.mode_occupancy, 3))
print("autocorrelation time of x (thinned draws):", round(rep.autocorrelation_time, 1))

# mode switches happen at high temperature
x, beta = traj[:, 3], traj[:, 2]
switch = np.flatnonzero(np.sign(x[1:]) != np.sign(x[:-1]))
if len(switch):
    print(f"{len(switch)} sign changes, median beta at a change {np.median(beta[switch]):.1f}")

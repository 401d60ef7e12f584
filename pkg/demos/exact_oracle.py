"""Exact dropout law of a tiny network, against the closed form and Monte Carlo.

Run: python demos/exact_oracle.py
"""
import numpy as np

from dropout_gp import NetworkSpec, init_iid_gaussian, mc_sample
from dropout_gp import dropout_oracle as oracle

spec = NetworkSpec(3, (4, 4), 2, activation="tanh", keep_rate=0.8)
ws = init_iid_gaussian(spec, seed=11)
x = np.array([0.3, -0.7, 0.5])

for layer in (2, 3):
    exact = oracle.enumerate_exact(ws, x, layer)
    prev = oracle.enumerate_exact(ws, x, layer - 1)
    cf = oracle.covariance_closed_form(ws, layer, oracle.PhiMoments.from_exact(prev))
    mc = oracle.covariance_mc(mc_sample(ws, x, layer, 200_000, seed=3))
    print(f"layer {layer}: {exact.n_atoms} atoms")
    print(f"  closed form vs enumeration  {np.abs(cf.matrix - exact.covariance).max():.2e}")
    print(f"  Monte Carlo vs enumeration  {np.abs(mc.matrix - exact.covariance).max():.2e}")

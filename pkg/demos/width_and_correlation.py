"""Gaussianity with width for i.i.d. weights, and heavy tails once weights are correlated.

Run: python demos/width_and_correlation.py   (about a minute)
"""
import numpy as np
from scipy import stats

from dropout_gp import NetworkSpec, init_iid_gaussian, mc_sample
from dropout_gp import stats_lab as sl
from dropout_gp.net_core import init_correlated, mc_sample_layers
from dropout_gp.rng import stream

x = stream(0, "input").random(50)
for h in (20, 100, 400):
    spec = NetworkSpec(50, (h,) * 3, 10, bias_scheme="zero")
    b = mc_sample(init_iid_gaussian(spec, 0), x, 3, 20000, seed=0, neurons=np.arange(min(h, 50)))
    corr = sl.preact_correlations(b)
    print(f"i.i.d. h={h:4d}: JB pass {sl.jb_pass_fraction(b.samples):.2f}, "
          f"mean |corr| {corr.mean_abs:.3f}")

h = 300
spec = NetworkSpec(h, (h,) * 20, h, "tanh", 0.8, "zero")
ws = init_correlated(spec, 0.1, seed=0)
xc = stream(0, "input").uniform(-1, 1, h)
batches = mc_sample_layers(ws, xc, [2, 5, 10, 14, 20], 20000, seed=0, neurons=np.arange(10))
for nu, b in batches.items():
    k = np.mean(stats.kurtosis(b.samples, axis=0))
    print(f"correlated c=0.1, hidden layer {nu - 1:2d}: mean excess kurtosis {k:.2f}")

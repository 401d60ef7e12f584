"""Monte Carlo dropout in wide networks: sampling, exact oracles and diagnostics."""
__version__ = "0.1.0"

from .net_core import (  # noqa: E402
    DropoutMask, ForwardTrace, InputError, NetworkSpec, SampleBatch, SpecError, WeightSet, forward,
    init_correlated, init_iid_gaussian, make_superposition_input, mc_sample, mc_sample_layers, sample_mask,
    shuffle_weights,
)
from .serialization import load_weights, save_weights  # noqa: E402

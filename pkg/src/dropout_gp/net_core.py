"""Fully connected networks with Bernoulli dropout on hidden activations.

Layer ``nu`` (1-based) computes

    f[nu] = W[nu] @ g[nu-1] / sqrt(h[nu-1]) + b[nu]
    g[nu] = z[nu] * phi(f[nu])        (hidden layers only)

with ``g[0] = x``.  The mask ``z`` multiplies the activations directly; there
is no inverted-dropout ``1/q`` rescaling anywhere, and the input and output
layers carry no mask.
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .rng import stream

__all__ = [
    "ACTIVATIONS",
    "DropoutMask",
    "ForwardTrace",
    "InputError",
    "NetworkSpec",
    "SampleBatch",
    "SpecError",
    "WeightSet",
    "correlated_covariance",
    "forward",
    "init_correlated",
    "init_iid_gaussian",
    "make_superposition_input",
    "mc_sample",
    "mc_sample_layers",
    "sample_mask",
    "shuffle_weights",
]

PASS_BLOCK = 1024


class SpecError(ValueError):
    """Invalid network description or weight set."""


class InputError(ValueError):
    """Input vector has the wrong dimension or violates the norm bound."""


def _sigmoid(u):
    return 0.5 * (1.0 + np.tanh(0.5 * u))


def _dsigmoid(u):
    s = _sigmoid(u)
    return s * (1.0 - s)


ACTIVATIONS = {
    "tanh": (np.tanh, lambda u: 1.0 - np.tanh(u) ** 2),
    "sigmoid": (_sigmoid, _dsigmoid),
    "relu": (lambda u: np.maximum(u, 0.0), lambda u: (u > 0).astype(float)),
    "linear": (lambda u: u, lambda u: np.ones_like(u)),
}

BIAS_SCHEMES = ("standard_normal", "zero")


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture of a network with ``k`` hidden layers.

    ``input_bound`` is the constant alpha of the admissible input set
    ``||x||^2 <= alpha * d``.
    """

    input_dim: int
    hidden_widths: tuple
    output_dim: int
    activation: str = "tanh"
    keep_rate: float = 0.8
    bias_scheme: str = "standard_normal"
    input_bound: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(h) for h in self.hidden_widths))
        if int(self.input_dim) < 1 or int(self.output_dim) < 1:
            raise SpecError("input and output dimensions must be positive")
        if any(h < 1 for h in self.hidden_widths):
            raise SpecError("all hidden widths must be >= 1")
        if not 0.0 < self.keep_rate <= 1.0:
            raise SpecError(f"keep rate must lie in (0, 1], got {self.keep_rate}")
        if self.activation not in ACTIVATIONS:
            raise SpecError(f"unknown activation {self.activation!r}")
        if self.bias_scheme not in BIAS_SCHEMES:
            raise SpecError(f"unknown bias scheme {self.bias_scheme!r}")
        if self.input_bound <= 0:
            raise SpecError("input bound must be positive")

    @property
    def depth(self):
        """Number of hidden layers k."""
        return len(self.hidden_widths)

    @property
    def widths(self):
        """(d, h_1, ..., h_k, L)."""
        return (int(self.input_dim),) + self.hidden_widths + (int(self.output_dim),)

    @property
    def n_layers(self):
        """Number of weight layers, k + 1."""
        return self.depth + 1

    def layer_shape(self, layer):
        w = self.widths
        return w[layer], w[layer - 1]

    def to_dict(self):
        return {
            "input_dim": int(self.input_dim),
            "hidden_widths": list(self.hidden_widths),
            "output_dim": int(self.output_dim),
            "activation": self.activation,
            "keep_rate": float(self.keep_rate),
            "bias_scheme": self.bias_scheme,
            "input_bound": float(self.input_bound),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class WeightSet:
    """Realized weights and biases; immutable once built."""

    spec: NetworkSpec
    weights: tuple
    biases: tuple

    def __post_init__(self):
        ws = tuple(_frozen(w) for w in self.weights)
        bs = tuple(_frozen(b) for b in self.biases)
        if len(ws) != self.spec.n_layers or len(bs) != self.spec.n_layers:
            raise SpecError(f"expected {self.spec.n_layers} layers, got {len(ws)} weights / {len(bs)} biases")
        for nu, (w, b) in enumerate(zip(ws, bs), start=1):
            if w.shape != self.spec.layer_shape(nu):
                raise SpecError(f"layer {nu}: weight shape {w.shape} != {self.spec.layer_shape(nu)}")
            if b.shape != (w.shape[0],):
                raise SpecError(f"layer {nu}: bias shape {b.shape} != {(w.shape[0],)}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise SpecError(f"layer {nu}: non-finite entries")
        object.__setattr__(self, "weights", ws)
        object.__setattr__(self, "biases", bs)

    def weight(self, layer):
        return self.weights[layer - 1]

    def bias(self, layer):
        return self.biases[layer - 1]

    @cached_property
    def effective(self):
        """Weight matrices with the 1/sqrt(fan_in) factor folded in."""
        out = []
        for w in self.weights:
            e = w / np.sqrt(w.shape[1])
            e.setflags(write=False)
            out.append(e)
        return tuple(out)

    def replace(self, weights=None, biases=None, spec=None):
        return WeightSet(spec or self.spec,
                         self.weights if weights is None else weights,
                         self.biases if biases is None else biases)


@dataclass(frozen=True)
class DropoutMask:
    """One Bernoulli realization per hidden layer (index 0 is layer 1)."""

    masks: tuple

    def layer(self, nu):
        return self.masks[nu - 1]


@dataclass(frozen=True)
class ForwardTrace:
    """Pre-activations f[1..k+1] and masked activations g[0..k] of one pass."""

    x: np.ndarray
    pre: tuple
    post: tuple

    def f(self, nu):
        return self.pre[nu - 1]

    def g(self, nu):
        return self.post[nu]

    @property
    def output(self):
        return self.pre[-1]


@dataclass(frozen=True)
class SampleBatch:
    """Pre-activation samples of one layer, ``(n_passes, n_neurons)``.

    ``neurons`` lists the recorded neuron indices (all of them when None).
    When requested, ``prev_activations`` holds the masked activations of the
    previous layer for every pass and ``weights`` the layer's effective
    weight matrix, so that per-term decompositions can be formed.
    """

    layer: int
    samples: np.ndarray
    seed: int
    input_id: str = ""
    neurons: np.ndarray = None
    prev_activations: np.ndarray = None
    weights: np.ndarray = None
    keep_rate: float = None
    meta: dict = field(default_factory=dict)

    @property
    def n_passes(self):
        return self.samples.shape[0]

    @property
    def n_neurons(self):
        return self.samples.shape[1]


def _check_input(spec, x):
    x = np.asarray(x, dtype=float)
    if x.shape != (spec.input_dim,):
        raise InputError(f"input has shape {x.shape}, expected ({spec.input_dim},)")
    sq = float(x @ x)
    limit = spec.input_bound * spec.input_dim
    if sq > limit * (1 + 1e-12):
        raise InputError(f"||x||^2 = {sq:.6g} exceeds alpha*d = {limit:.6g}")
    return x


def _biases(spec, rng, rows):
    if spec.bias_scheme == "zero":
        return np.zeros(rows)
    return rng.standard_normal(rows)


def init_iid_gaussian(spec, seed):
    """Draw every weight i.i.d. from N(0, 1); biases per ``spec.bias_scheme``."""
    weights, biases = [], []
    for nu in range(1, spec.n_layers + 1):
        rng = stream(seed, "init", nu)
        rows, cols = spec.layer_shape(nu)
        weights.append(rng.standard_normal((rows, cols)))
        biases.append(_biases(spec, rng, rows))
    return WeightSet(spec, weights, biases)


def correlated_covariance(h, c):
    """Equicorrelation matrix: ones on the diagonal, ``c`` elsewhere."""
    s = np.full((h, h), float(c))
    np.fill_diagonal(s, 1.0)
    return s


def _equicorrelated_rows(rng, n_rows, n_cols, c):
    # Each row ~ N(0, (1-c) I + c 11^T) via a shared factor; exact for every
    # c in [0, 1] including the rank-one case c = 1.
    shared = rng.standard_normal((n_rows, 1))
    if c == 1.0:
        return np.repeat(shared, n_cols, axis=1)
    return np.sqrt(c) * shared + np.sqrt(1.0 - c) * rng.standard_normal((n_rows, n_cols))


def init_correlated(spec, c, seed):
    """Correlated weights ``W = (A + B^T) / (2 sqrt(q h))``.

    Rows of ``A`` and of ``B`` are equicorrelated Gaussian vectors with
    correlation ``c``, so ``W`` carries correlations along both rows and
    columns.  ``h`` is the fan-in of the layer.  All hidden layers must share
    one width.
    """
    c = float(c)
    if not 0.0 <= c <= 1.0:
        raise SpecError(f"correlation c must lie in [0, 1], got {c}")
    if len(set(spec.hidden_widths)) > 1:
        raise SpecError("correlated init needs square hidden-to-hidden layers (equal widths)")
    q = spec.keep_rate
    weights, biases = [], []
    for nu in range(1, spec.n_layers + 1):
        rng = stream(seed, "init-correlated", nu)
        rows, cols = spec.layer_shape(nu)
        a = _equicorrelated_rows(rng, rows, cols, c)
        b = _equicorrelated_rows(rng, cols, rows, c)
        weights.append((a + b.T) / (2.0 * np.sqrt(q * cols)))
        biases.append(_biases(spec, rng, rows))
    return WeightSet(spec, weights, biases)


def shuffle_weights(ws, seed):
    """Permute the entries of each weight matrix independently; biases untouched."""
    out = []
    for nu, w in enumerate(ws.weights, start=1):
        rng = stream(seed, "shuffle", nu)
        flat = w.ravel()
        out.append(flat[rng.permutation(flat.size)].reshape(w.shape))
    return ws.replace(weights=out)


def sample_mask(spec, seed, index=0):
    """Independent Bernoulli(q) keep-variables for every hidden neuron."""
    masks = []
    for nu, h in enumerate(spec.hidden_widths, start=1):
        z = stream(seed, "mask", index, nu).random(h) < spec.keep_rate
        z.setflags(write=False)
        masks.append(z)
    return DropoutMask(tuple(masks))


def forward(ws, x, mask):
    """Single forward pass under a fixed dropout mask."""
    spec = ws.spec
    x = _check_input(spec, x)
    phi = ACTIVATIONS[spec.activation][0]
    if len(mask.masks) != spec.depth:
        raise SpecError("mask depth does not match the network")
    pre, post = [], [x]
    g = x
    for nu in range(1, spec.n_layers + 1):
        f = ws.effective[nu - 1] @ g + ws.bias(nu)
        pre.append(f)
        if nu <= spec.depth:
            z = np.asarray(mask.layer(nu))
            if z.shape != f.shape:
                raise SpecError(f"mask of layer {nu} has shape {z.shape}")
            g = z * phi(f)
            post.append(g)
    return ForwardTrace(x, tuple(pre), tuple(post))


def _run_block(ws, x, block, n_rows, layers, seed, neurons, keep_inputs):
    spec = ws.spec
    phi = ACTIVATIONS[spec.activation][0]
    q = spec.keep_rate
    top = max(layers)
    out, prev = {}, {}
    g = np.broadcast_to(x, (n_rows, x.size))
    for nu in range(1, top + 1):
        if keep_inputs and nu in layers:
            prev[nu] = np.array(g)
        if nu == 1:
            # no dropout on the input: the first layer is the same for every pass
            f = np.broadcast_to(ws.effective[0] @ x + ws.bias(1), (n_rows, spec.widths[1]))
        else:
            f = g @ ws.effective[nu - 1].T + ws.bias(nu)
        if nu in layers:
            sel = f if neurons.get(nu) is None else f[:, neurons[nu]]
            out[nu] = np.array(sel)
        if nu < top and nu <= spec.depth:
            z = stream(seed, "mask", block, nu).random((n_rows, f.shape[1])) < q
            g = z * phi(f)
    return out, prev


def mc_sample_layers(ws, x, layers, n_passes, seed, neurons=None, keep_inputs=False,
                     workers=1, input_id=""):
    """Monte Carlo dropout samples of several layers from the same passes.

    Passes are generated in fixed blocks of ``PASS_BLOCK`` rows whose masks
    come from the stream ``(seed, "mask", block, layer)``; the result is
    bitwise identical for any ``workers`` count.

    Returns
    -------
    dict
        ``{layer: SampleBatch}``.
    """
    spec = ws.spec
    x = _check_input(spec, x)
    layers = sorted(set(int(l) for l in layers))
    if not layers or layers[0] < 1 or layers[-1] > spec.n_layers:
        raise ValueError(f"layers must lie in 1..{spec.n_layers}")
    if n_passes < 1:
        raise ValueError("n_passes must be >= 1")
    if neurons is None or not isinstance(neurons, dict):
        neurons = {nu: neurons for nu in layers}
    neurons = {nu: (None if v is None else np.asarray(v, dtype=int)) for nu, v in neurons.items()}

    n_blocks = -(-n_passes // PASS_BLOCK)
    sizes = [min(PASS_BLOCK, n_passes - b * PASS_BLOCK) for b in range(n_blocks)]

    def job(b):
        return _run_block(ws, x, b, sizes[b], layers, seed, neurons, keep_inputs)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(job, range(n_blocks)))
    else:
        parts = [job(b) for b in range(n_blocks)]

    result = {}
    for nu in layers:
        samples = np.concatenate([p[0][nu] for p in parts])
        prev = np.concatenate([p[1][nu] for p in parts]) if keep_inputs else None
        result[nu] = SampleBatch(
            layer=nu,
            samples=samples,
            seed=int(seed),
            input_id=input_id,
            neurons=neurons.get(nu),
            prev_activations=prev,
            weights=ws.effective[nu - 1] if keep_inputs else None,
            keep_rate=spec.keep_rate,
        )
    return result


def mc_sample(ws, x, layer, n_passes, seed, neurons=None, keep_inputs=False, workers=1,
              input_id=""):
    """``n_passes`` dropout forward passes, recording layer ``layer``."""
    return mc_sample_layers(ws, x, [layer], n_passes, seed, neurons=neurons,
                            keep_inputs=keep_inputs, workers=workers,
                            input_id=input_id)[layer]


def make_superposition_input(a, b, bounds=(0.0, 1.0)):
    """Pixel-wise mean of two inputs, clipped to ``bounds``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise InputError(f"shape mismatch {a.shape} vs {b.shape}")
    return np.clip(0.5 * (a + b), *bounds)

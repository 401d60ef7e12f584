"""Exact dropout distributions for tiny networks and the closed-form covariance.

Pre-activations of layer ``nu`` depend on the masks of layers ``1..nu-1`` only,
so for small networks the distribution over dropout is a finite mixture with
at most ``2**sum(h[1..nu-1])`` atoms.  :func:`enumerate_exact` walks all of
them in chunks and accumulates moments without materializing the mixture.
"""
import csv
import io
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .net_core import ACTIVATIONS, NetworkSpec, _check_input, init_correlated, init_iid_gaussian, mc_sample
from .rng import stream

__all__ = [
    "CovarianceReport",
    "EnumerationBudgetError",
    "ExactDistribution",
    "PhiMoments",
    "ScalingTable",
    "covariance_closed_form",
    "covariance_mc",
    "covariance_scaling_sweep",
    "enumerate_exact",
    "estimate_phi_moments",
    "projection_variance",
]

MAX_MASK_BITS = 24
_CHUNK = 1 << 14


class EnumerationBudgetError(ValueError):
    pass


@dataclass(frozen=True)
class ExactDistribution:
    """Exact law of ``f[layer]`` over all dropout masks of earlier layers.

    ``phi_mean`` / ``phi_second`` are the exact ``E[phi(f)]`` and
    ``E[phi(f) phi(f)^T]`` of the same layer.  ``atoms`` is a list of
    ``(probability, f)`` pairs and is only kept for small mixtures.
    """

    layer: int
    n_atoms: int
    total_probability: float
    mean: np.ndarray
    covariance: np.ndarray
    phi_mean: np.ndarray
    phi_second: np.ndarray
    atoms: list = None

    @property
    def second_moment(self):
        return self.covariance + np.outer(self.mean, self.mean)


@dataclass(frozen=True)
class PhiMoments:
    """``E[phi_k]`` and ``E[phi_k phi_l]`` of one layer, with optional standard errors."""

    layer: int
    mean: np.ndarray
    second: np.ndarray
    mean_se: np.ndarray = None
    second_se: np.ndarray = None
    source: str = "exact_enumeration"

    @classmethod
    def from_exact(cls, dist):
        return cls(dist.layer, dist.phi_mean, dist.phi_second)


@dataclass(frozen=True)
class CovarianceReport:
    """Covariance matrix of a layer's pre-activations and where it came from."""

    layer: int
    matrix: np.ndarray
    source: str
    phi_mean: np.ndarray = None
    phi_second: np.ndarray = None

    def to_csv(self, path=None):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["i", "j", "value", "source"])
        n = self.matrix.shape[0]
        for i in range(n):
            for j in range(n):
                w.writerow([i, j, repr(float(self.matrix[i, j])), self.source])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text

    def to_json(self):
        d = {"layer": self.layer, "source": self.source, "matrix": self.matrix.tolist()}
        if self.phi_mean is not None:
            d["phi_mean"] = np.asarray(self.phi_mean).tolist()
            d["phi_second"] = np.asarray(self.phi_second).tolist()
        return json.dumps(d)


def _masked_layers(spec, layer):
    return [mu for mu in range(1, layer) if mu <= spec.depth]


def _chunk_moments(ws, x, layer, start, stop, shift, phi_shift, keep_atoms):
    spec = ws.spec
    phi = ACTIVATIONS[spec.activation][0]
    q = spec.keep_rate
    n_bits = sum(spec.widths[mu] for mu in _masked_layers(spec, layer))
    codes = np.arange(start, stop, dtype=np.int64)
    ones = np.zeros(codes.size, dtype=np.int64)
    for b in range(n_bits):
        ones += (codes >> b) & 1
    prob = q ** ones * (1.0 - q) ** (n_bits - ones)
    f = _forward_codes(ws, x, layer, codes)
    keep = prob > 0
    prob, f = prob[keep], f[keep]
    df = f - shift
    dp = phi(f) - phi_shift
    moments = (
        prob.sum(),
        prob @ df,
        (df * prob[:, None]).T @ df,
        prob @ dp,
        (dp * prob[:, None]).T @ dp,
        int(keep.sum()),
    )
    atoms = list(zip(prob.tolist(), [row.copy() for row in f])) if keep_atoms else None
    return moments, atoms


def enumerate_exact(ws, x, layer, keep_atoms=None, max_bits=MAX_MASK_BITS, workers=1):
    """Exact mixture over all dropout masks feeding layer ``layer``.

    Parameters
    ----------
    ws : WeightSet
    x : array_like
        Network input.
    layer : int
        Target layer in ``1..k+1``.
    keep_atoms : bool, optional
        Store the ``(probability, f)`` list.  Defaults to True for at most
        4096 atoms.
    max_bits : int
        Enumeration budget in mask bits (``2**max_bits`` atoms).
    workers : int
        Threads over mask-code chunks; the reduction order is fixed.
    """
    spec = ws.spec
    x = _check_input(spec, x)
    if not 1 <= layer <= spec.n_layers:
        raise ValueError(f"layer must lie in 1..{spec.n_layers}")
    n_bits = sum(spec.widths[mu] for mu in _masked_layers(spec, layer))
    if n_bits > max_bits:
        raise EnumerationBudgetError(f"{n_bits} mask bits exceed the budget of {max_bits}")
    total = 1 << n_bits
    if keep_atoms is None:
        keep_atoms = total <= 4096

    # moments are accumulated around the all-kept configuration to avoid cancellation
    phi = ACTIVATIONS[spec.activation][0]
    shift = _forward_codes(ws, x, layer, np.array([total - 1]))[0]
    phi_shift = phi(shift)

    bounds = [(s, min(s + _CHUNK, total)) for s in range(0, total, _CHUNK)]

    def job(b):
        return _chunk_moments(ws, x, layer, b[0], b[1], shift, phi_shift, keep_atoms)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(job, bounds))
    else:
        parts = [job(b) for b in bounds]

    p_tot = sum(m[0] for m, _ in parts)
    s1 = sum(m[1] for m, _ in parts)
    s2 = sum(m[2] for m, _ in parts)
    t1 = sum(m[3] for m, _ in parts)
    t2 = sum(m[4] for m, _ in parts)
    n_atoms = sum(m[5] for m, _ in parts)

    d_mean = s1 / p_tot
    cov = s2 / p_tot - np.outer(d_mean, d_mean)
    cov = 0.5 * (cov + cov.T)
    mean = shift + d_mean
    dphi = t1 / p_tot
    phi_mean = phi_shift + dphi
    # E[phi phi^T] = E[(d+s)(d+s)^T]
    phi_second = (t2 / p_tot + np.outer(dphi, phi_shift) + np.outer(phi_shift, dphi)
                  + np.outer(phi_shift, phi_shift))
    phi_second = 0.5 * (phi_second + phi_second.T)
    atoms = None
    if keep_atoms:
        atoms = [a for _, chunk in parts for a in chunk]
    return ExactDistribution(layer, n_atoms, float(p_tot), mean, cov, phi_mean, phi_second, atoms)


def _forward_codes(ws, x, layer, codes):
    spec = ws.spec
    phi = ACTIVATIONS[spec.activation][0]
    n_bits = sum(spec.widths[mu] for mu in _masked_layers(spec, layer))
    bits = ((codes[:, None] >> np.arange(n_bits, dtype=np.int64)) & 1).astype(bool)
    f = np.broadcast_to(ws.effective[0] @ x + ws.bias(1), (codes.size, spec.widths[1]))
    offset = 0
    for mu in range(2, layer + 1):
        h = spec.widths[mu - 1]
        f = (bits[:, offset:offset + h] * phi(f)) @ ws.effective[mu - 1].T + ws.bias(mu)
        offset += h
    return np.asarray(f)


def covariance_closed_form(ws, layer, phi_moments):
    """Closed-form covariance of ``f[layer]`` from the moments of ``phi(f[layer-1])``.

    ``Cov(f_i, f_j) = q/h * sum_kl w_il w_jk * ((delta_kl + q (1 - delta_kl)) E[phi_k phi_l]
    - q E[phi_k] E[phi_l])`` with ``h`` the fan-in.  Layer 1 sees no dropout and
    gets the zero matrix.
    """
    spec = ws.spec
    if not 1 <= layer <= spec.n_layers:
        raise ValueError(f"layer must lie in 1..{spec.n_layers}")
    rows, cols = spec.layer_shape(layer)
    if layer == 1:
        return CovarianceReport(1, np.zeros((rows, rows)), "closed_form")
    if phi_moments is None or phi_moments.mean is None or phi_moments.second is None:
        raise ValueError("phi moments are required for layers beyond the first")
    m1 = np.asarray(phi_moments.mean, dtype=float)
    m2 = np.asarray(phi_moments.second, dtype=float)
    if m1.shape != (cols,) or m2.shape != (cols, cols):
        raise ValueError(f"phi moments have shapes {m1.shape}, {m2.shape}; expected ({cols},), ({cols}, {cols})")
    q = spec.keep_rate
    factor = np.full((cols, cols), q)
    np.fill_diagonal(factor, 1.0)
    inner = factor * m2 - q * np.outer(m1, m1)
    w = ws.weight(layer)
    cov = (q / cols) * (w @ inner @ w.T)
    cov = 0.5 * (cov + cov.T)
    return CovarianceReport(layer, cov, "closed_form", m1, m2)


def covariance_mc(batch):
    """Sample covariance of a SampleBatch."""
    return CovarianceReport(batch.layer, np.cov(batch.samples, rowvar=False, ddof=1).reshape(
        batch.n_neurons, batch.n_neurons), "monte_carlo")


def projection_variance(ws, layer, subset, t, phi_moments):
    """Sum of per-term variances of a projection of ``f[layer]`` onto ``t``.

    ``sum_j (sum_u t_u w_uj)^2 / h * (q E[phi_j^2] - q^2 E[phi_j]^2)``; the
    diagonal-in-``j`` part of the covariance, neglecting cross terms.
    """
    spec = ws.spec
    q = spec.keep_rate
    _, cols = spec.layer_shape(layer)
    coef = np.asarray(t, dtype=float) @ ws.weight(layer)[np.asarray(subset)]
    m1 = np.asarray(phi_moments.mean)
    m2 = np.diag(np.asarray(phi_moments.second))
    return float(np.sum(coef ** 2 / cols * (q * m2 - q * q * m1 ** 2)))


def estimate_phi_moments(ws, x, layer, n_passes, seed):
    """Monte Carlo ``E[phi(f)]``, ``E[phi(f) phi(f)^T]`` of ``layer`` with standard errors."""
    phi = ACTIVATIONS[ws.spec.activation][0]
    p = phi(mc_sample(ws, x, layer, n_passes, seed).samples)
    n = p.shape[0]
    mean = p.mean(axis=0)
    second = p.T @ p / n
    mean_se = p.std(axis=0, ddof=1) / np.sqrt(n)
    # per-entry standard error of a mean of products
    prod_sq = (p ** 2).T @ (p ** 2) / n
    second_se = np.sqrt(np.maximum(prod_sq - second ** 2, 0.0) / (n - 1))
    return PhiMoments(layer, mean, second, mean_se, second_se, "monte_carlo")


@dataclass(frozen=True)
class ScalingTable:
    """Rows of ``(width, statistic, spread over seeds, number of pairs)``."""

    widths: np.ndarray
    values: np.ndarray
    spread: np.ndarray
    n_pairs: np.ndarray
    label: str = "mean_abs_offdiag_corr"

    @property
    def empty(self):
        return np.isnan(self.values)

    def loglog_slope(self):
        """Least-squares slope of ``log(value)`` on ``log(width)`` with its standard error."""
        from scipy import stats

        ok = ~self.empty & (self.values > 0)
        fit = stats.linregress(np.log(self.widths[ok]), np.log(self.values[ok]))
        return fit.slope, fit.stderr

    def rows(self):
        return [(int(h), float(v), float(s), int(n))
                for h, v, s, n in zip(self.widths, self.values, self.spread, self.n_pairs)]


def sweep_network(h, init, seed, depth=3, input_dim=50, c=0.1, keep_rate=0.8,
                  activation="tanh", bias_scheme="zero"):
    spec = NetworkSpec(input_dim, (h,) * depth, 10, activation=activation,
                       keep_rate=keep_rate, bias_scheme=bias_scheme)
    if init == "iid":
        return init_iid_gaussian(spec, seed)
    if init == "correlated":
        return init_correlated(spec, c, seed)
    raise ValueError(f"unknown init {init!r}")


def sweep_input(input_dim, seed):
    return stream(seed, "sweep-input").uniform(0.0, 1.0, input_dim)


def covariance_scaling_sweep(widths, init="iid", seeds=(0, 1, 2), layer=3, n_passes=20000,
                             n_neurons=100, c=0.1, input_dim=50, input_seed=0, **net_kw):
    """Mean absolute off-diagonal pre-activation correlation versus width.

    For each width and seed a network with three equal hidden layers is drawn,
    ``n_passes`` dropout passes are run on one fixed input, and the Pearson
    correlations between ``n_neurons`` randomly chosen neurons of ``layer`` are
    averaged in absolute value.  Widths with a single neuron yield NaN.
    """
    from .stats_lab import StatisticsError, preact_correlations

    x = sweep_input(input_dim, input_seed)
    vals, spread, pairs = [], [], []
    for h in widths:
        if h < 2:
            vals.append(np.nan)
            spread.append(np.nan)
            pairs.append(0)
            continue
        per_seed = []
        for s in seeds:
            ws = sweep_network(h, init, s, input_dim=input_dim, c=c, **net_kw)
            sub = stream(s, "sweep-neurons", h).choice(h, min(n_neurons, h), replace=False)
            batch = mc_sample(ws, x, layer, n_passes, s, neurons=np.sort(sub))
            try:
                per_seed.append(preact_correlations(batch).mean_abs)
            except StatisticsError:
                per_seed.append(np.nan)
        m = min(n_neurons, h)
        vals.append(float(np.nanmean(per_seed)))
        spread.append(float(np.nanstd(per_seed)))
        pairs.append(m * (m - 1) // 2)
    return ScalingTable(np.asarray(widths, dtype=float), np.asarray(vals), np.asarray(spread),
                        np.asarray(pairs))

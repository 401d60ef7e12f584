"""Distributional diagnostics for Monte Carlo dropout samples.

Normality is judged primarily by Jarque-Bera (moment based) with a
Kolmogorov-Smirnov distance to N(0, 1) on z-scored data as a secondary
statistic.  Tails are summarized by a stretch exponent ``beta`` fitted to the
folded log-density, ``log p(|xi|) = const - lam*log|xi| - kappa*|xi|**beta``
with ``lam`` fixed by the caller (0 by default).
"""
import csv
import io
import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy import optimize, stats

__all__ = [
    "CorrelationSummary",
    "DistributionReport",
    "Histogram",
    "ProjectionDiagnostics",
    "StatisticsError",
    "TailFit",
    "classify_neuron",
    "cramer_wold_projection",
    "histogram",
    "jb_pass_fraction",
    "lyapunov_scaling_sweep",
    "normality_report",
    "normalize",
    "pearson_matrix",
    "pearson_offdiag",
    "preact_correlations",
    "reports_to_csv",
    "reports_to_json",
    "tail_fit",
]

CLASSES = ("gaussian", "skewed_gaussian", "exponential_tail")


class StatisticsError(ValueError):
    pass


def _is_constant(x):
    sd = np.std(x)
    return sd == 0 or sd <= 1e-12 * np.max(np.abs(x))


def normalize(samples):
    """Z-score with the ``n - 1`` sample standard deviation."""
    x = np.asarray(samples, dtype=float).ravel()
    if x.size < 2:
        raise StatisticsError("need at least two samples")
    if _is_constant(x):
        raise StatisticsError("zero variance: samples are constant")
    return (x - x.mean()) / x.std(ddof=1)


@dataclass(frozen=True)
class TailFit:
    beta: float
    kappa: float
    window: tuple
    r2: float
    n_bins: int
    prefactor: float = 0.0


@dataclass(frozen=True)
class DistributionReport:
    neuron: int
    n: int
    mean: float
    variance: float
    skewness: float
    excess_kurtosis: float
    ks_stat: float
    ks_pvalue: float
    jb_stat: float
    jb_pvalue: float
    tail: TailFit = None
    label: str = None

    def with_label(self, label):
        d = asdict(self)
        d["tail"] = self.tail
        d["label"] = label
        return DistributionReport(**d)

    def row(self):
        t = self.tail
        return {
            "neuron": self.neuron, "n": self.n, "mean": self.mean, "variance": self.variance,
            "skewness": self.skewness, "excess_kurtosis": self.excess_kurtosis,
            "ks_stat": self.ks_stat, "ks_pvalue": self.ks_pvalue,
            "jb_stat": self.jb_stat, "jb_pvalue": self.jb_pvalue,
            "tail_beta": None if t is None else t.beta,
            "tail_kappa": None if t is None else t.kappa,
            "tail_r2": None if t is None else t.r2,
            "label": self.label,
        }


def _tail_bins(a, lo, hi, min_count, min_bins):
    q75, q25 = np.quantile(a, [0.75, 0.25])
    width = 2.0 * (q75 - q25) * a.size ** (-1.0 / 3.0)
    if not width > 0:
        raise StatisticsError("degenerate sample spread")
    n_raw = max(int(np.ceil((hi - lo) / width)), 2 * min_bins)
    edges = np.linspace(lo, hi, n_raw + 1)
    counts, _ = np.histogram(a, edges)
    # merge from the sparse outer end until every bin holds min_count samples
    merged_edges, merged = [edges[-1]], []
    acc = 0
    for i in range(n_raw - 1, -1, -1):
        acc += counts[i]
        if acc >= min_count:
            merged.append(acc)
            merged_edges.append(edges[i])
            acc = 0
    if acc and merged:
        merged[-1] += acc
        merged_edges[-1] = edges[0]
    if len(merged) < min_bins:
        raise StatisticsError(f"insufficient tail mass: {len(merged)} bins with >= {min_count} counts "
                              f"(need {min_bins})")
    return np.array(merged_edges[::-1]), np.array(merged[::-1], dtype=float)


def tail_fit(samples, window=(0.95, 0.999), absolute=False, zscore=True, prefactor=0.0,
             min_count=5, min_bins=20, min_samples=10_000):
    """Fit a stretched-exponential tail to the folded empirical density.

    Parameters
    ----------
    samples : array_like
    window : (float, float)
        Tail window on ``|xi|``; quantiles of ``|xi|`` unless ``absolute``.
    absolute : bool
        Interpret ``window`` as absolute ``|xi|`` bounds.
    zscore : bool
        Z-score the samples first.
    prefactor : float
        Fixed power ``lam`` of the ``|xi|**-lam`` prefactor in the model.
    min_count, min_bins : int
        Every merged bin needs ``min_count`` samples and the window at
        least ``min_bins`` bins.

    Returns
    -------
    TailFit
    """
    x = np.asarray(samples, dtype=float).ravel()
    if x.size < min_samples:
        raise StatisticsError(f"tail fit needs >= {min_samples} samples, got {x.size}")
    if zscore:
        x = normalize(x)
    a = np.abs(x)
    lo, hi = window if absolute else np.quantile(a, window)
    if not 0 <= lo < hi or hi > a.max():
        raise StatisticsError(f"tail window [{lo}, {hi}] outside the sample support")
    edges, counts = _tail_bins(a, lo, hi, min_count, min_bins)
    inside = a[(a >= edges[0]) & (a < edges[-1])]
    idx = np.searchsorted(edges, inside, side="right") - 1
    centers = np.bincount(idx, weights=inside, minlength=counts.size) / counts
    logd = np.log(counts / (2.0 * a.size * np.diff(edges))) + prefactor * np.log(centers)

    def model(u, c0, kappa, beta):
        return c0 - kappa * u ** beta

    sigma = 1.0 / np.sqrt(counts)
    p0 = (logd[0] + centers[0], 1.0, 1.0)
    try:
        popt, _ = optimize.curve_fit(model, centers, logd, p0=p0, sigma=sigma,
                                     bounds=([-np.inf, 1e-10, 0.02], [np.inf, np.inf, 10.0]),
                                     maxfev=20000)
    except RuntimeError as exc:
        raise StatisticsError(f"tail fit did not converge: {exc}") from exc
    resid = logd - model(centers, *popt)
    w = counts
    ss_tot = np.sum(w * (logd - np.average(logd, weights=w)) ** 2)
    r2 = 1.0 - np.sum(w * resid ** 2) / ss_tot if ss_tot > 0 else 0.0
    return TailFit(float(popt[2]), float(popt[1]), (float(lo), float(hi)), float(r2),
                   int(counts.size), float(prefactor))


def normality_report(samples, neuron=-1, with_tail=True, min_samples=1000):
    """Moments, KS distance to N(0,1) after z-scoring, Jarque-Bera, and a tail fit."""
    x = np.asarray(samples, dtype=float).ravel()
    if x.size < min_samples:
        raise StatisticsError(f"normality report needs >= {min_samples} samples, got {x.size}")
    z = normalize(x)
    ks = stats.kstest(z, "norm")
    jb = stats.jarque_bera(z)
    tail = None
    if with_tail and x.size >= 10_000:
        try:
            tail = tail_fit(z, zscore=False)
        except StatisticsError:
            tail = None
    return DistributionReport(
        neuron=int(neuron), n=int(x.size), mean=float(x.mean()), variance=float(x.var(ddof=1)),
        skewness=float(stats.skew(z)), excess_kurtosis=float(stats.kurtosis(z)),
        ks_stat=float(ks.statistic), ks_pvalue=float(ks.pvalue),
        jb_stat=float(jb.statistic), jb_pvalue=float(jb.pvalue), tail=tail,
    )


def classify_neuron(report, beta_max=1.4, kurtosis_min=1.0, skew_min=0.3):
    """Label a neuron ``exponential_tail``, ``skewed_gaussian`` or ``gaussian``.

    Exponential tail: fitted ``beta < beta_max`` and excess kurtosis above
    ``kurtosis_min`` (kurtosis alone decides when no tail fit exists).
    Otherwise skewed when ``|skewness| > skew_min``.
    """
    heavy = report.excess_kurtosis > kurtosis_min
    if report.tail is not None:
        heavy = heavy and report.tail.beta < beta_max
    if heavy:
        return "exponential_tail"
    if abs(report.skewness) > skew_min:
        return "skewed_gaussian"
    return "gaussian"


def jb_pass_fraction(samples, alpha=0.01):
    """Fraction of columns whose Jarque-Bera p-value exceeds ``alpha``."""
    s = np.asarray(samples, dtype=float)
    p = np.array([stats.jarque_bera(normalize(s[:, i])).pvalue for i in range(s.shape[1])])
    return float(np.mean(p > alpha))


@dataclass(frozen=True)
class Histogram:
    edges: np.ndarray
    density: np.ndarray

    def to_csv(self, path=None):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bin_left", "bin_right", "density"])
        for l, r, d in zip(self.edges[:-1], self.edges[1:], self.density):
            w.writerow([repr(float(l)), repr(float(r)), repr(float(d))])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text

    @property
    def mass(self):
        return float(np.sum(self.density * np.diff(self.edges)))


def histogram(samples, bins="fd", range=None):
    """Density histogram; the bin masses sum to one."""
    d, e = np.histogram(np.asarray(samples, dtype=float).ravel(), bins=bins, range=range, density=True)
    return Histogram(e, d)


@dataclass(frozen=True)
class CorrelationSummary:
    layer: int
    kind: str
    coefficients: np.ndarray
    histogram: Histogram
    mean: float
    mean_abs: float
    variance: float


def pearson_matrix(vectors):
    """Pearson matrix of the rows of ``vectors``, exactly symmetric."""
    v = np.asarray(vectors, dtype=float)
    if v.ndim != 2 or v.shape[0] < 2 or v.shape[1] < 3:
        raise StatisticsError("need >= 2 vectors of length >= 3")
    bad = [i for i in range(v.shape[0]) if _is_constant(v[i])]
    if bad:
        raise StatisticsError(f"zero-variance vectors at positions {bad[:10]}")
    c = np.corrcoef(v)
    return np.clip(0.5 * (c + c.T), -1.0, 1.0)


def _offdiag_summary(vectors, layer, kind, bins):
    v = np.asarray(vectors, dtype=float)
    c = pearson_matrix(v)
    coef = c[np.triu_indices(v.shape[0], 1)]
    return CorrelationSummary(layer, kind, coef, histogram(coef, bins=bins, range=(-1.0, 1.0)),
                              float(coef.mean()), float(np.abs(coef).mean()), float(coef.var()))


def pearson_offdiag(matrix, axis="rows", layer=-1, bins=100):
    """Pearson coefficients between all distinct rows (or columns) of a matrix."""
    m = np.asarray(matrix, dtype=float)
    if axis == "rows":
        return _offdiag_summary(m, layer, "weight_rows", bins)
    if axis == "cols":
        return _offdiag_summary(m.T, layer, "weight_cols", bins)
    raise ValueError("axis must be 'rows' or 'cols'")


def preact_correlations(batch, min_passes=1000, bins=100):
    """Pearson coefficients between the neuron columns of a SampleBatch."""
    if batch.n_passes < min_passes:
        raise StatisticsError(f"need >= {min_passes} passes, got {batch.n_passes}")
    return _offdiag_summary(batch.samples.T, batch.layer, "pre_activations", bins)


@dataclass(frozen=True)
class ProjectionDiagnostics:
    """One-dimensional projection ``psi`` of a layer's pre-activations.

    ``s_n`` is the square root of the summed per-term variances when per-pass
    terms are available, else the sample standard deviation of the
    projection; ``lyapunov_ratio`` is ``sum_j E|gamma_j|^4 / s_n^4`` and is None
    without per-term data.
    """

    subset: np.ndarray
    t: np.ndarray
    psi: np.ndarray
    s_n: float
    lyapunov_ratio: float = None


def cramer_wold_projection(batch, subset, t):
    """Project ``batch`` onto ``t`` over neuron ids ``subset``."""
    subset = np.atleast_1d(np.asarray(subset, dtype=int))
    t = np.atleast_1d(np.asarray(t, dtype=float))
    if subset.shape != t.shape:
        raise ValueError("t and subset must have equal length")
    if batch.neurons is None:
        cols = subset
    else:
        pos = {int(n): i for i, n in enumerate(batch.neurons)}
        missing = [int(s) for s in subset if int(s) not in pos]
        if missing:
            raise ValueError(f"neurons {missing} were not recorded")
        cols = np.array([pos[int(s)] for s in subset])
    combo = batch.samples[:, cols] @ t
    centered = combo - combo.mean()

    ratio = None
    if batch.prev_activations is not None and batch.weights is not None:
        a = batch.prev_activations
        coef = t @ batch.weights[subset]
        gamma = (a - a.mean(axis=0)) * coef
        var_terms = np.mean(gamma ** 2, axis=0)
        s_n = float(np.sqrt(np.sum(var_terms)))
        if s_n > 0:
            ratio = float(np.sum(np.mean(gamma ** 4, axis=0)) / s_n ** 4)
    else:
        s_n = float(combo.std(ddof=1))
    scale = max(abs(float(combo.mean())), 1e-300)
    if not s_n > 1e-10 * scale:
        raise StatisticsError(f"projection variance vanishes (s_n = {s_n:.3g})")
    return ProjectionDiagnostics(subset, t, centered / s_n, s_n, ratio)


def lyapunov_scaling_sweep(widths, seeds=(0, 1, 2), layer=3, subset_size=5, n_passes=20000,
                           input_dim=50, input_seed=0, init="iid", **net_kw):
    """Lyapunov ratio of a random projection versus width, averaged over seeds."""
    from .dropout_oracle import ScalingTable, sweep_input, sweep_network
    from .net_core import mc_sample
    from .rng import stream

    x = sweep_input(input_dim, input_seed)
    vals, spread = [], []
    for h in widths:
        per_seed = []
        for s in seeds:
            ws = sweep_network(h, init, s, input_dim=input_dim, **net_kw)
            r = stream(s, "projection", h)
            subset = np.sort(r.choice(h, min(subset_size, h), replace=False))
            t = r.standard_normal(subset.size)
            batch = mc_sample(ws, x, layer, n_passes, s, neurons=subset, keep_inputs=True)
            per_seed.append(cramer_wold_projection(batch, subset, t).lyapunov_ratio)
        vals.append(float(np.mean(per_seed)))
        spread.append(float(np.std(per_seed)))
    return ScalingTable(np.asarray(widths, dtype=float), np.asarray(vals), np.asarray(spread),
                        np.full(len(widths), subset_size), label="lyapunov_ratio")


def reports_to_csv(reports, path=None):
    rows = [r.row() for r in reports]
    buf = io.StringIO()
    if rows:
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return text


def reports_to_json(reports):
    return json.dumps([r.row() for r in reports], indent=1)

"""Toy models for products and correlated sums of Gaussian variables.

The product ``Z = X*Y`` of two independent standard normals has density
``K0(|xi|)/pi`` with exponential tails ``exp(-|xi|)/sqrt(2*pi*|xi|)``.  Feeding
a variable with stretched tails ``exp(-alpha*|xi|**(2/n))`` through such a
product gives a tail exponent ``2/(n+1)``.  Sums ``sum_i X_i Y_i`` with a shared
global component keep a non-Gaussian piece at any width.
"""
import csv
import io
import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate, interpolate, special

from .rng import stream

__all__ = [
    "CorrelatedSumParams",
    "ProductModelParams",
    "QuadratureError",
    "SpectrumParams",
    "TailFamilyParams",
    "besselk0",
    "decompose_correlated_sum",
    "erfc",
    "erfc_approx_pdf",
    "laplace_mixture_pdf",
    "pdf_grid_csv",
    "product_cdf",
    "product_pdf",
    "product_pdf_asymptotic",
    "sample_correlated_sum",
    "sample_product",
    "sample_stretched",
    "saddle_kappa",
    "spectrum_pdf_quadrature",
    "tail_propagation_asymptotic",
]

EULER_GAMMA = 0.57721566490153286061


class QuadratureError(RuntimeError):
    pass


@dataclass(frozen=True)
class ProductModelParams:
    mu_x: float = 0.0
    mu_y: float = 0.0
    sigma_x: float = 1.0
    sigma_y: float = 1.0

    def __post_init__(self):
        if not (self.sigma_x > 0 and self.sigma_y > 0):
            raise ValueError("sigma_x and sigma_y must be positive")


@dataclass(frozen=True)
class CorrelatedSumParams:
    h: int
    c: float

    def __post_init__(self):
        if int(self.h) != self.h or self.h < 1:
            raise ValueError("h must be a positive integer")
        if not 0.0 <= self.c <= 1.0:
            raise ValueError("c must lie in [0, 1]")


@dataclass(frozen=True)
class TailFamilyParams:
    n: int
    alpha: float = 0.5

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 1:
            raise ValueError("n must be a positive integer")
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")


@dataclass(frozen=True)
class SpectrumParams:
    """Eigenvalues ``sigma_i**2`` of the inverse-covariance product."""

    eigenvalues: tuple

    def __post_init__(self):
        ev = np.asarray(self.eigenvalues, dtype=float)
        if ev.ndim != 1 or ev.size < 2:
            raise ValueError("need at least two eigenvalues")
        if not np.all(ev > 0):
            raise ValueError("eigenvalues must be positive")
        object.__setattr__(self, "eigenvalues", tuple(float(e) for e in ev))

    @classmethod
    def doubly_degenerate(cls, sigmas):
        s = np.asarray(sigmas, dtype=float)
        return cls(tuple(np.repeat(s ** 2, 2)))


# ---------------------------------------------------------------- special functions

def _k0_series(x):
    # K0 = -(ln(x/2) + gamma) I0 + sum_k (x^2/4)^k / (k!)^2 * H_k
    y = 0.25 * x * x
    term = np.ones_like(x)
    i0 = np.ones_like(x)
    acc = np.zeros_like(x)
    harmonic = 0.0
    for k in range(1, 30):
        term = term * y / (k * k)
        harmonic += 1.0 / k
        i0 = i0 + term
        acc = acc + term * harmonic
    return -(np.log(0.5 * x) + EULER_GAMMA) * i0 + acc


def _k0_cf2(x):
    # Steed's continued fraction for the confluent hypergeometric ratio (order 0)
    b = 2.0 * (1.0 + x)
    d = 1.0 / b
    delh = d.copy()
    q1 = np.zeros_like(x)
    q2 = np.ones_like(x)
    a1 = 0.25
    q = np.full_like(x, a1)
    c = np.full_like(x, a1)
    a = -a1
    s = 1.0 + q * delh
    done = np.zeros(x.shape, dtype=bool)
    for i in range(2, 10000):
        a -= 2 * (i - 1)
        c = -a * c / i
        qnew = (q1 - b * q2) / a
        q1, q2 = q2, qnew
        q = q + c * qnew
        b = b + 2.0
        d = 1.0 / (b + a * d)
        delh = (b * d - 1.0) * delh
        dels = np.where(done, 0.0, q * delh)
        s = s + dels
        done |= np.abs(dels) < 1e-17 * np.abs(s)
        if done.all():
            break
    return np.sqrt(np.pi / (2.0 * x)) * np.exp(-x) / s


def besselk0(x):
    """Modified Bessel function of the second kind, order zero.

    Power series for ``x <= 2`` and Steed's continued fraction above.

    Raises
    ------
    ValueError
        If any ``x <= 0``.
    """
    arr = np.asarray(x, dtype=float)
    if np.any(~(arr > 0)):
        raise ValueError("besselk0 requires x > 0")
    flat = np.atleast_1d(arr).ravel()
    out = np.empty_like(flat)
    small = flat <= 2.0
    if small.any():
        out[small] = _k0_series(flat[small])
    if (~small).any():
        out[~small] = _k0_cf2(flat[~small])
    out = out.reshape(np.shape(arr))
    return float(out) if np.ndim(x) == 0 else out


def erfc(x):
    """Complementary error function (underflows gracefully to 0)."""
    return special.erfc(x)


# ---------------------------------------------------------------- product law

def _xi_array(xi):
    return np.asarray(xi, dtype=float)


def _maybe_scalar(out, xi):
    return float(out) if np.ndim(xi) == 0 else out


def product_pdf(xi, sigma_x=1.0, sigma_y=1.0):
    """Density of ``X*Y`` for independent centred normals: ``K0(|xi|/s)/(pi*s)``, ``s = sigma_x*sigma_y``.

    Diverges logarithmically at ``xi = 0``, which is rejected.
    """
    s = sigma_x * sigma_y
    a = np.abs(_xi_array(xi))
    if np.any(a == 0):
        raise ValueError("product density diverges at xi = 0")
    return _maybe_scalar(besselk0(a / s) / (np.pi * s), xi)


def product_pdf_asymptotic(xi):
    """Large-``|xi|`` form ``exp(-|xi|)/sqrt(2*pi*|xi|)``, valid for ``|xi| >= 3``."""
    a = np.abs(_xi_array(xi))
    if np.any(a < 3):
        raise ValueError("asymptotic form only for |xi| >= 3")
    return _maybe_scalar(np.exp(-a) / np.sqrt(2 * np.pi * a), xi)


_CDF_CACHE = {}


def _half_mass_interp():
    if "k0" not in _CDF_CACHE:
        # Gauss-Legendre on a geometric grid; the first cell uses the small-x expansion
        grid = np.geomspace(1e-10, 60.0, 3000)
        nodes, weights = np.polynomial.legendre.leggauss(12)
        lo, hi = grid[:-1, None], grid[1:, None]
        t = 0.5 * (hi - lo) * nodes + 0.5 * (hi + lo)
        pieces = 0.5 * (hi - lo)[:, 0] * (besselk0(t) @ weights) / np.pi
        x0 = grid[0]
        first = x0 * (1.0 - np.log(0.5 * x0) - EULER_GAMMA) / np.pi
        cum = np.concatenate([[0.0, first], first + np.cumsum(pieces)])
        _CDF_CACHE["k0"] = interpolate.PchipInterpolator(np.concatenate([[0.0], grid]), cum)
    return _CDF_CACHE["k0"]


def product_cdf(xi, sigma_x=1.0, sigma_y=1.0):
    """CDF of ``X*Y`` by cumulative quadrature of :func:`product_pdf`."""
    interp = _half_mass_interp()
    z = _xi_array(xi) / (sigma_x * sigma_y)
    a = np.minimum(np.abs(z), 60.0)
    half = np.where(np.abs(z) >= 60.0, 0.5, interp(a))
    return _maybe_scalar(0.5 + np.sign(z) * half, xi)


def sample_product(params, n, seed):
    """``n`` independent draws of ``X*Y``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    r = stream(seed, "product")
    x = params.mu_x + params.sigma_x * r.standard_normal(n)
    y = params.mu_y + params.sigma_y * r.standard_normal(n)
    return x * y


# ---------------------------------------------------------------- correlated sums

def sample_correlated_sum(params, n, seed, max_chunk=4_000_000):
    """``n`` draws of ``sum_i X_i Y_i`` with ``X_i = c*x0 + (1-c)*x_i`` (Y alike)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    h, c = int(params.h), params.c
    rows = max(1, max_chunk // h)
    out = np.empty(n)
    for k, start in enumerate(range(0, n, rows)):
        m = min(rows, n - start)
        r = stream(seed, "corr-sum", k)
        x0, y0 = r.standard_normal(m), r.standard_normal(m)
        x = c * x0[:, None] + (1 - c) * r.standard_normal((m, h))
        y = c * y0[:, None] + (1 - c) * r.standard_normal((m, h))
        out[start:start + m] = np.einsum("ij,ij->i", x, y)
    return out


def decompose_correlated_sum(x0, y0, x, y, c):
    """Split ``sum_i X_i Y_i`` into Gaussian, global-product and cross terms.

    Returns
    -------
    gaussian_term, tail_term, cross_term
        ``(1-c)**2 sum x_i y_i``, ``c**2 h x0 y0`` and
        ``c(1-c)(x0 sum y_i + y0 sum x_i)``.
    """
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    if x.shape != y.shape:
        raise ValueError("x and y must have equal shapes")
    h = x.shape[-1]
    x0, y0 = np.asarray(x0, dtype=float), np.asarray(y0, dtype=float)
    gaussian = (1 - c) ** 2 * np.sum(x * y, axis=-1)
    tail = c ** 2 * h * x0 * y0
    cross = c * (1 - c) * (x0 * np.sum(y, axis=-1) + y0 * np.sum(x, axis=-1))
    return gaussian, tail, cross


# ---------------------------------------------------------------- tail propagation

def sample_stretched(params, size, seed):
    """Draws with density proportional to ``|xi|**(-(n-1)/n) * exp(-alpha*|xi|**(2/n))``.

    ``n = 1`` is a centred normal of variance ``1/(2*alpha)``.
    """
    r = stream(seed, "stretched", params.n)
    u = r.gamma(0.5, 1.0, size)
    sign = np.where(r.random(size) < 0.5, -1.0, 1.0)
    return sign * (u / params.alpha) ** (params.n / 2.0)


def saddle_kappa(params, sigma_x=1.0):
    """Saddle-point constant of the propagated tail, a function of ``alpha**n / sigma_x**2``."""
    n, a = params.n, params.alpha
    return a ** n * (n + 1) ** (n + 1) / (2.0 * n ** n * sigma_x ** 2)


def tail_propagation_asymptotic(params, xi, sigma_x=1.0, kappa=None):
    """Unnormalized tail of ``X*Y`` for ``X ~ N(0, sigma_x)`` and stretched ``Y``.

    ``|xi|**(-n/(n+1)) * exp(-kappa**(1/(n+1)) * |xi|**(2/(n+1)))``; ``kappa``
    defaults to :func:`saddle_kappa`.
    """
    n = params.n
    if n > 5:
        raise ValueError("asymptotic form only for small n (<= 5)")
    a = np.abs(_xi_array(xi))
    if np.any(a < 5):
        raise ValueError("asymptotic form only for |xi| >= 5")
    k = saddle_kappa(params, sigma_x) if kappa is None else kappa
    out = a ** (-n / (n + 1.0)) * np.exp(-k ** (1.0 / (n + 1)) * a ** (2.0 / (n + 1)))
    return _maybe_scalar(out, xi)


# ---------------------------------------------------------------- approximations

def erfc_approx_pdf(xi, params):
    """Gaussian-plus-Laplace approximation of the non-centred product law.

    Convolution of ``N(mu, sigma1)`` with a Laplace law of scale ``sigma2``,
    where ``mu = mu_x*mu_y``, ``sigma1 = sqrt((sigma_x*mu_y)**2 + (sigma_y*mu_x)**2)``
    and ``sigma2 = sigma_x*sigma_y``; evaluated in log space.
    """
    mu = params.mu_x * params.mu_y
    s1 = math.hypot(params.sigma_x * params.mu_y, params.sigma_y * params.mu_x)
    s2 = params.sigma_x * params.sigma_y
    t = _xi_array(xi) - mu
    if s1 == 0:
        return _maybe_scalar(np.exp(-np.abs(t) / s2) / (2 * s2), xi)

    def log_term(s):
        # log of exp(s1^2/2s2^2 + s/s2) * erfc(u), u = (s1^2 + s*s2)/(sqrt2 s1 s2)
        u = (s1 * s1 + s * s2) / (math.sqrt(2.0) * s1 * s2)
        pos = u > 0
        with np.errstate(divide="ignore"):
            return np.where(pos,
                            -s * s / (2 * s1 * s1) + np.log(special.erfcx(np.where(pos, u, 0.0))),
                            s1 * s1 / (2 * s2 * s2) + s / s2 + np.log(special.erfc(np.where(pos, 0.0, u))))

    out = (np.exp(log_term(-t)) + np.exp(log_term(t))) / (4 * s2)
    if not np.all(np.isfinite(out)):
        raise OverflowError("erfc approximation overflowed")
    return _maybe_scalar(out, xi)


def _cos_transform(f, xi, k0=50.0, tol=1e-10, max_doublings=60):
    total, err = integrate.quad(f, 0.0, k0, weight="cos", wvar=xi, limit=400) if xi else \
        integrate.quad(f, 0.0, k0, limit=400)
    lo = k0
    for _ in range(max_doublings):
        hi = 2 * lo
        part, e = integrate.quad(f, lo, hi, weight="cos", wvar=xi, limit=400) if xi else \
            integrate.quad(f, lo, hi, limit=400)
        total += part
        err += e
        lo = hi
        if abs(part) < tol:
            return total, err
    raise QuadratureError(f"cosine transform did not converge at xi={xi}: last contribution "
                          f"{abs(part):.3g}, error estimate {err:.3g}")


def spectrum_pdf_quadrature(params, xi):
    """Density of a Gaussian bilinear form from its eigenvalue spectrum.

    ``(1/pi) * int_0^inf cos(k*xi) * phi(k) dk`` with characteristic function
    ``phi(k) = prod_i (1 + k**2/sigma_i**2)**(-1/2)``, integrated on doubling
    intervals until the last contribution drops below ``1e-10``.
    """
    ev = np.asarray(params.eigenvalues)

    def phi(k):
        return math.exp(-0.5 * float(np.sum(np.log1p(k * k / ev))))

    vals = [_cos_transform(phi, abs(float(v)))[0] / np.pi for v in np.atleast_1d(_xi_array(xi))]
    out = np.array(vals).reshape(np.shape(xi))
    return _maybe_scalar(out, xi)


def laplace_mixture_pdf(sigmas, xi):
    """Density for a doubly degenerate spectrum with distinct ``sigma_i``.

    Partial fractions give ``sum_i w_i exp(-sigma_i |xi|)`` with
    ``w_i proportional to 1 / (2 sigma_i prod_{j != i} (sigma_j**2 - sigma_i**2))``,
    normalized to unit mass.
    """
    s = np.asarray(sigmas, dtype=float).ravel()
    if s.size < 1 or not np.all(s > 0):
        raise ValueError("sigmas must be positive")
    ss = np.sort(s)
    if s.size > 1 and np.min(np.diff(ss) / ss[1:]) < 1e-8:
        raise ValueError("sigmas must be distinct")
    diff = s[None, :] ** 2 - s[:, None] ** 2
    np.fill_diagonal(diff, 1.0)
    w = 1.0 / (2 * s * np.prod(diff, axis=1))
    mass = np.sum(2 * w / s)
    a = np.abs(_xi_array(xi))
    out = np.exp(-np.multiply.outer(a, s)) @ w / mass
    return _maybe_scalar(out, xi)


def pdf_grid_csv(xi, density, path=None):
    """Write ``(xi, density)`` rows as CSV; returns the text."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["xi", "density"])
    for a, b in zip(np.ravel(xi), np.ravel(density)):
        w.writerow([repr(float(a)), repr(float(b))])
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return text

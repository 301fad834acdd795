"""Dense vector kernels used by every other module.

All arithmetic is in float64 even though feature files store float32;
gradient-check tolerances require double precision. Reductions are
left-to-right sequential (numpy's default) so results are reproducible.
"""

import math

import numpy as np

from .errors import (
    EmptyInput,
    NonFiniteInput,
    NonPositiveTemperature,
    ZeroNorm,
)

EPS_NORM = 1e-12


def as_f64(x):
    a = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise NonFiniteInput("input contains NaN or Inf")
    return a


def l2_normalize(v, eps_norm=EPS_NORM):
    """Scale v to unit Euclidean norm. Raises ZeroNorm for degenerate input."""
    v = as_f64(v)
    n = math.sqrt(float(np.sum(v * v)))
    if n <= eps_norm:
        raise ZeroNorm(f"vector norm {n} <= {eps_norm}")
    return v / n


def normalize_rows(m, eps_norm=EPS_NORM):
    """Row-wise l2_normalize for a 2-d matrix."""
    m = as_f64(m)
    norms = np.sqrt(np.sum(m * m, axis=1))
    if np.any(norms <= eps_norm):
        raise ZeroNorm("matrix contains a row with near-zero norm")
    return m / norms[:, None]


def cosine(u, v):
    """Cosine similarity. Symmetric: cosine(u, v) == cosine(v, u) exactly."""
    u = as_f64(u)
    v = as_f64(v)
    nu = math.sqrt(float(np.sum(u * u)))
    nv = math.sqrt(float(np.sum(v * v)))
    if nu <= EPS_NORM or nv <= EPS_NORM:
        raise ZeroNorm("cosine of a zero vector is undefined")
    # elementwise product commutes, so argument order cannot change the result
    return float(np.sum(u * v)) / (nu * nv)


def logsumexp(xs):
    """log(sum(exp(xs))) with max-subtraction; exact for a singleton."""
    xs = as_f64(xs)
    if xs.size == 0:
        raise EmptyInput("logsumexp of empty sequence")
    m = float(np.max(xs))
    if xs.size == 1:
        return m
    return m + math.log(float(np.sum(np.exp(xs - m))))


def stable_softmax(xs, tau=1.0):
    """Softmax of xs / tau computed with max-subtraction."""
    if tau <= 0:
        raise NonPositiveTemperature(f"tau must be > 0, got {tau}")
    xs = as_f64(xs) / tau
    if xs.size == 0:
        raise EmptyInput("softmax of empty sequence")
    e = np.exp(xs - np.max(xs))
    return e / np.sum(e)


def sigmoid(x):
    # split on sign to avoid overflow in exp
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    z = math.exp(x)
    return z / (1.0 + z)

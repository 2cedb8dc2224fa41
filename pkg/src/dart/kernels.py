"""Special functions and seeded samplers.

Scalar functions accept Python floats; the ``*_array`` variants are the
vectorised forms used on hot paths (working p-values, simulated data).
"""

from __future__ import annotations

import math

import numpy as np
from scipy import special

SQRT2 = math.sqrt(2.0)
INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _check_finite(x: float) -> float:
    x = float(x)
    if not math.isfinite(x):
        raise ValueError(f"expected a finite argument, got {x!r}")
    return x


def std_normal_sf(x: float) -> float:
    """Upper tail probability 1 - Phi(x) of the standard normal."""
    x = _check_finite(x)
    # erfc keeps full relative precision in the upper tail
    return 0.5 * math.erfc(x / SQRT2)


def std_normal_pdf(x: float) -> float:
    return INV_SQRT_2PI * math.exp(-0.5 * x * x)


def std_normal_sf_inv(p: float) -> float:
    """Inverse of :func:`std_normal_sf`, i.e. the upper ``p`` quantile.

    Starts from the Wichura rational approximation (``scipy.special.ndtri``)
    and polishes with two Newton steps on the erfc-based survival function.
    """
    p = float(p)
    if not (0.0 < p < 1.0):
        raise ValueError(f"p must lie in (0, 1), got {p!r}")
    x = -float(special.ndtri(p))
    for _ in range(2):
        dens = std_normal_pdf(x)
        if dens == 0.0:
            break
        x += (0.5 * math.erfc(x / SQRT2) - p) / dens
    return x


def std_normal_sf_array(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("std_normal_sf_array requires finite input")
    return 0.5 * special.erfc(x / SQRT2)


def std_normal_sf_inv_array(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if np.any((p <= 0.0) | (p >= 1.0)) or np.any(np.isnan(p)):
        raise ValueError("std_normal_sf_inv_array requires p in (0, 1)")
    x = -special.ndtri(p)
    for _ in range(2):
        dens = INV_SQRT_2PI * np.exp(-0.5 * x * x)
        step = np.divide(0.5 * special.erfc(x / SQRT2) - p, dens,
                         out=np.zeros_like(x), where=dens > 0)
        x = x + step
    return x


def chi2_1_sf(x: float) -> float:
    """Survival function of the chi-square distribution with one degree of freedom."""
    x = float(x)
    if math.isnan(x) or x < 0:
        raise ValueError(f"chi-square statistic must be >= 0, got {x!r}")
    if math.isinf(x):
        return 0.0
    return 2.0 * std_normal_sf(math.sqrt(x))


def chi2_1_sf_array(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if np.any(x < 0) or np.any(np.isnan(x)):
        raise ValueError("chi-square statistics must be >= 0")
    return special.erfc(np.sqrt(x / 2.0))


def normal_pdf(x: float, sd: float) -> float:
    """Density of N(0, sd**2) at ``x``."""
    if not sd > 0:
        raise ValueError(f"sd must be positive, got {sd!r}")
    z = x / sd
    return INV_SQRT_2PI / sd * math.exp(-0.5 * z * z)


def normal_pdf_array(x: np.ndarray, sd: float) -> np.ndarray:
    if not sd > 0:
        raise ValueError(f"sd must be positive, got {sd!r}")
    z = np.asarray(x, dtype=float) / sd
    return INV_SQRT_2PI / sd * np.exp(-0.5 * z * z)


# ---------------------------------------------------------------------------
# Random streams
# ---------------------------------------------------------------------------


class SeededRng:
    """Counter-based (Philox4x64) generator bound to a seed and spawn key.

    ``child(i)`` derives an independent stream for replication ``i`` by
    hashing ``(seed, key..., i)`` through :class:`numpy.random.SeedSequence`,
    so any replication can be regenerated in isolation.
    """

    def __init__(self, seed: int, key: tuple[int, ...] = ()):
        if seed < 0 or seed >= 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        self.seed = int(seed)
        self.key = tuple(int(k) for k in key)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.key)
        self.gen = np.random.Generator(np.random.Philox(ss))

    def child(self, *key: int) -> "SeededRng":
        return SeededRng(self.seed, self.key + tuple(key))

    def __repr__(self) -> str:
        return f"SeededRng(seed={self.seed}, key={self.key})"


def _gen(rng: SeededRng | np.random.Generator) -> np.random.Generator:
    return rng.gen if isinstance(rng, SeededRng) else rng


def sample_normal(rng, mean=0.0, sd=1.0, size=None):
    if not sd > 0:
        raise ValueError("sd must be positive")
    return _gen(rng).normal(mean, sd, size)


def sample_unif(rng, a=0.0, b=1.0, size=None):
    if not a < b:
        raise ValueError("uniform bounds need a < b")
    return _gen(rng).uniform(a, b, size)


def sample_laplace(rng, loc=0.0, scale=1.0, size=None):
    if not scale > 0:
        raise ValueError("scale must be positive")
    return _gen(rng).laplace(loc, scale, size)


def sample_noncentral_t5(rng, ncp=0.0, size=None):
    """Noncentral t with 5 df, built as (Z + ncp) / sqrt(V / 5)."""
    g = _gen(rng)
    shape = np.broadcast(np.asarray(ncp), np.empty(size if size is not None else ())).shape
    z = g.standard_normal(shape)
    v = np.sum(g.standard_normal(shape + (5,)) ** 2, axis=-1)
    out = (z + ncp) / np.sqrt(v / 5.0)
    return out if shape else float(out)


def sample_exponential(rng, rate=1.0, size=None):
    rate = np.asarray(rate, dtype=float)
    if np.any(rate <= 0):
        raise ValueError("rate must be positive")
    return _gen(rng).exponential(1.0 / rate, size)


def sample_bernoulli(rng, p=0.5, size=None):
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must lie in [0, 1]")
    return (_gen(rng).random(size) < p).astype(float)

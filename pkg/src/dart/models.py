"""Simulation settings SE1-SE5: layouts, signal fields and feature p-values."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .core import (
    DistanceMatrix,
    NumericError,
    PValueVector,
    TruthAssignment,
    ValidationError,
    euclidean_distances,
)
from .kernels import (
    chi2_1_sf_array,
    normal_pdf_array,
    sample_bernoulli,
    sample_laplace,
    sample_noncentral_t5,
    sample_normal,
    sample_unif,
)

SETTINGS = ("SE1", "SE2", "SE3", "SE4", "SE5")
REFERENCE_SIZES = {(90, 100): "small", (300, 1000): "large"}

# theta = scale * eta * 1{eta > 0.15}; eta_1 for the small design, eta_2 for the large one
SIGNAL_SCALE = {
    "small": {"SE1": 1 / 2, "SE2": 2 / 5, "SE3": 1 / 3, "SE4": 2.0, "SE5": 4 / 5},
    "large": {"SE1": 1 / 7, "SE2": 2 / 13, "SE3": 2 / 13, "SE4": 5 / 6, "SE5": 2 / 7},
}
ETA_CUTOFF = 0.15
MIX_WEIGHT = 0.04  # heavy-tailed share in SE2 / SE3

# phi_1..phi_4 are N(0, v) densities with v read as a variance, like the layout's N(0, 2)
PHI_SD = {k: float(np.sqrt(v)) for k, v in {1: 1.0, 2: 0.1, 3: 0.8, 4: 0.05}.items()}

# 1-based anchor features
ANCHOR_22, ANCHOR_7, ANCHOR_156 = 21, 6, 155
SPIKES = tuple(range(99, 1000, 100))  # features 100, 200, ..., 1000


@dataclass(frozen=True, eq=False)
class FeatureLayout:
    coords: np.ndarray
    distances: DistanceMatrix

    @property
    def m(self) -> int:
        return self.coords.shape[0]


@dataclass(frozen=True, eq=False)
class SignalField:
    theta: np.ndarray
    truth: TruthAssignment
    eta: np.ndarray | None = None


def gen_layout(m: int, rng) -> FeatureLayout:
    """x1 ~ N(0, variance 2), x2 ~ Unif(0, 4); Euclidean distances."""
    if m < 1:
        raise ValueError("m must be >= 1")
    x1 = sample_normal(rng, 0.0, np.sqrt(2.0), m)
    x2 = sample_unif(rng, 0.0, 4.0, m)
    coords = np.column_stack([x1, x2])
    return FeatureLayout(coords, euclidean_distances(coords))


def eta_field(d: DistanceMatrix, which: int) -> np.ndarray:
    """Signal intensity eta_1 or eta_2 for every feature."""
    dd = d.d
    m = d.m
    if which == 1:
        if m <= ANCHOR_22:
            raise ValidationError("eta_1 needs at least 22 features")
        return (np.maximum(2 * normal_pdf_array(dd[ANCHOR_22], PHI_SD[1]) - 0.2, 0.0)
                + normal_pdf_array(dd[ANCHOR_7], PHI_SD[2]))
    if which == 2:
        if m <= ANCHOR_156:
            raise ValidationError("eta_2 needs at least 156 features")
        spikes = np.zeros(m)
        spikes[[i for i in SPIKES if i < m]] = 10.0
        return (np.maximum(3.4 * normal_pdf_array(dd[ANCHOR_156], PHI_SD[3]) - 0.8, 0.0)
                + 3 * normal_pdf_array(dd[ANCHOR_7], PHI_SD[4]) + spikes)
    raise ValueError("which must be 1 or 2")


def eta(i: int, d: DistanceMatrix, which: int) -> float:
    """eta for a single 0-based feature index."""
    return float(eta_field(d, which)[i])


def design_size(n: int, m: int) -> str:
    size = REFERENCE_SIZES.get((n, m))
    if size is None:
        size = "small" if m <= ANCHOR_156 else "large"
        warnings.warn(
            f"(n, m) = ({n}, {m}) is not one of the reference designs; "
            f"using the {size}-design signal rule",
            stacklevel=3,
        )
    return size


def gen_theta(setting: str, n: int, m: int, d: DistanceMatrix, scale: float = 1.0) -> SignalField:
    """Effect sizes for ``setting``; ``scale`` multiplies them (0 gives a global null)."""
    if setting not in SETTINGS:
        raise ValueError(f"unknown setting {setting!r}")
    if d.m != m:
        raise ValidationError("distance matrix size does not match m")
    size = design_size(n, m)
    e = eta_field(d, 1 if size == "small" else 2)
    theta = scale * SIGNAL_SCALE[size][setting] * e * (e - ETA_CUTOFF > 0)
    return SignalField(theta, TruthAssignment.from_mask(theta != 0), e)


def gen_pvalues_direct(setting: str, theta: np.ndarray, n: int, rng) -> PValueVector:
    """Two-sided normal p-values for SE1-SE3."""
    mu = np.sqrt(n) * np.asarray(theta, dtype=float)
    m = mu.shape[0]
    z = sample_normal(rng, 0.0, 1.0, m) + mu
    if setting == "SE2":
        heavy = sample_unif(rng, 0.0, 1.0, m) < MIX_WEIGHT
        z = np.where(heavy, sample_laplace(rng, 0.0, 1.0, m) + mu, z)
    elif setting == "SE3":
        heavy = sample_unif(rng, 0.0, 1.0, m) < MIX_WEIGHT
        z = np.where(heavy, sample_noncentral_t5(rng, mu), z)
    elif setting != "SE1":
        raise ValueError(f"direct p-values exist only for SE1-SE3, not {setting!r}")
    return PValueVector(chi2_1_sf_array(z * z))


# ---------------------------------------------------------------------------
# Linear model (SE4)
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class RegressionDataset:
    Y: np.ndarray  # n x m
    W: np.ndarray  # n x p0
    theta: np.ndarray | None = None  # p0 x m
    sigma: float = 1.0

    def __post_init__(self):
        if self.Y.ndim != 2 or self.W.ndim != 2 or self.Y.shape[0] != self.W.shape[0]:
            raise ValidationError(f"Y {self.Y.shape} and W {self.W.shape} do not conform")

    @property
    def n(self) -> int:
        return self.W.shape[0]

    def resample(self, rows: np.ndarray) -> "RegressionDataset":
        return RegressionDataset(self.Y[rows], self.W[rows], self.theta, self.sigma)


@dataclass(frozen=True, eq=False)
class WaldFit:
    coef: np.ndarray  # p0 x m
    s2: np.ndarray
    stat: np.ndarray
    pvalues: PValueVector
    degenerate: np.ndarray


COND_LIMIT = 1e12


def wald_linear(dataset: RegressionDataset, q) -> WaldFit:
    """Per-feature least squares and the Wald test of q' theta_i = 0."""
    W, Y = dataset.W, dataset.Y
    n, p0 = W.shape
    q = np.asarray(q, dtype=float)
    if q.shape != (p0,):
        raise ValidationError(f"contrast must have length {p0}")
    if n <= p0:
        raise ValidationError(f"need n > p0, got n={n}, p0={p0}")
    gram = W.T @ W
    cond = np.linalg.cond(gram)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise NumericError(f"design matrix is rank deficient (condition number {cond:.3g})")
    coef = np.linalg.solve(gram, W.T @ Y)
    resid = Y - W @ coef
    s2 = np.einsum("ij,ij->j", resid, resid) / (n - p0)
    v = float(q @ np.linalg.solve(gram, q))
    est = q @ coef
    scale2 = np.maximum(np.mean(Y * Y, axis=0), 1.0)
    degenerate = s2 <= 1e-24 * scale2
    with np.errstate(divide="ignore", invalid="ignore"):
        stat = est * est / (s2 * v)
    p = np.empty_like(stat)
    p[~degenerate] = chi2_1_sf_array(stat[~degenerate])
    # a perfect fit: significant unless the contrast itself vanishes
    p[degenerate] = np.where(np.abs(est[degenerate]) > 0, 0.0, 1.0)
    if degenerate.any():
        warnings.warn(f"{int(degenerate.sum())} feature(s) fitted exactly (s^2 = 0)", stacklevel=2)
    return WaldFit(coef, s2, stat, PValueVector(p), degenerate)


def wald_linear_pvalues(dataset: RegressionDataset, q) -> PValueVector:
    return wald_linear(dataset, q).pvalues


SE4_CONTRAST = (0.0, 1.0, 0.0)
SE4_NUISANCE = 0.1


def gen_design_se4(n: int, rng) -> np.ndarray:
    return np.column_stack([
        np.ones(n),
        sample_bernoulli(rng, 0.5, n),
        sample_unif(rng, 0.1, 0.5, n),
    ])


def gen_dataset_se4(signal: SignalField | np.ndarray, n: int, rng) -> tuple[RegressionDataset, PValueVector]:
    """Linear model with intercept, a binary and a uniform covariate.

    The signal sits on the binary covariate's coefficient, which is the one
    tested; the other two coefficients are fixed at 0.1.
    """
    theta_sig = signal.theta if isinstance(signal, SignalField) else np.asarray(signal, dtype=float)
    if n <= 3:
        raise ValidationError("SE4 needs n > 3")
    m = theta_sig.shape[0]
    W = gen_design_se4(n, rng)
    while np.ptp(W[:, 1]) == 0:
        W = gen_design_se4(n, rng)
    theta = np.vstack([np.full(m, SE4_NUISANCE), theta_sig, np.full(m, SE4_NUISANCE)])
    Y = W @ theta + sample_normal(rng, 0.0, 1.0, (n, m))
    ds = RegressionDataset(Y, W, theta, 1.0)
    return ds, wald_linear_pvalues(ds, SE4_CONTRAST)

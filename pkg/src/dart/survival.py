"""Cox proportional hazards: SE5 data and per-feature Wald p-values.

The partial likelihood uses the Breslow handling of tied event times and is
maximised by step-halving Newton iterations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import PValueVector, ValidationError
from .kernels import chi2_1_sf, sample_bernoulli, sample_exponential, sample_unif
from .models import SignalField

MAX_ITER = 50
SCORE_TOL = 1e-9
# |beta| * sd(x) beyond this means the likelihood is monotone (separation)
SEPARATION_LIMIT = 25.0
SE5_NUISANCE = 0.1
CENSOR_MAX = 5.0
INFO_COLLAPSE = 1e-8


@dataclass(frozen=True, eq=False)
class SurvivalDataset:
    W: np.ndarray  # n x 2 subject covariates, shared by all features
    time: np.ndarray  # n x m observed times
    event: np.ndarray  # n x m, True when the event was observed

    def __post_init__(self):
        if self.time.shape != self.event.shape or self.time.shape[0] != self.W.shape[0]:
            raise ValidationError("W, time and event do not conform")

    @property
    def n(self) -> int:
        return self.W.shape[0]

    @property
    def m(self) -> int:
        return self.time.shape[1]


@dataclass
class CoxFit:
    beta: np.ndarray
    info: np.ndarray
    score: np.ndarray
    loglik: float
    iterations: int
    converged: bool
    failure: str | None = None

    @property
    def failed(self) -> bool:
        return self.failure is not None


def _partial_likelihood(beta, X, time, event):
    """Breslow log partial likelihood, score and observed information.

    ``time`` must be sorted ascending, with X and event in the same order.
    """
    eta = X @ beta
    eta = eta - eta.max()
    r = np.exp(eta)
    xr = X * r[:, None]
    xxr = X[:, :, None] * X[:, None, :] * r[:, None, None]
    # risk-set sums over {j: t_j >= t}
    s0 = np.cumsum(r[::-1])[::-1]
    s1 = np.cumsum(xr[::-1], axis=0)[::-1]
    s2 = np.cumsum(xxr[::-1], axis=0)[::-1]
    first = np.searchsorted(time, time, side="left")
    ev = np.flatnonzero(event)
    at = first[ev]
    S0, S1, S2 = s0[at], s1[at], s2[at]
    mean = S1 / S0[:, None]
    loglik = float(np.sum(eta[ev] - np.log(S0)))
    score = np.sum(X[ev] - mean, axis=0)
    info = np.sum(S2 / S0[:, None, None] - mean[:, :, None] * mean[:, None, :], axis=0)
    return loglik, score, info


def cox_fit(time, event, X) -> CoxFit:
    time = np.asarray(time, dtype=float)
    event = np.asarray(event, dtype=bool)
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    p = X.shape[1]
    order = np.argsort(time, kind="stable")
    time, event, X = time[order], event[order], X[order]
    beta = np.zeros(p)
    if not event.any():
        return CoxFit(beta, np.zeros((p, p)), np.zeros(p), 0.0, 0, False, "no events")
    scale = X.std(axis=0)
    ll, score, info = _partial_likelihood(beta, X, time, event)
    info_scale = max(np.linalg.eigvalsh(info).max(), 1e-300)
    for it in range(1, MAX_ITER + 1):
        try:
            step = np.linalg.solve(info, score)
        except np.linalg.LinAlgError:
            return CoxFit(beta, info, score, ll, it, False, "singular information")
        t = 1.0
        for _ in range(40):
            cand = beta + t * step
            ll_new, score_new, info_new = _partial_likelihood(cand, X, time, event)
            if ll_new >= ll - 1e-12 * max(1.0, abs(ll)):
                break
            t *= 0.5
        beta, ll, score, info = cand, ll_new, score_new, info_new
        if np.any(np.abs(beta) * scale > SEPARATION_LIMIT):
            return CoxFit(beta, info, score, ll, it, False, "monotone likelihood")
        if np.max(np.abs(score)) < SCORE_TOL:
            eig = np.linalg.eigvalsh(info)
            # information draining away while beta runs off signals separation
            if eig.min() <= INFO_COLLAPSE * info_scale:
                return CoxFit(beta, info, score, ll, it, False, "monotone likelihood")
            return CoxFit(beta, info, score, ll, it, True)
    return CoxFit(beta, info, score, ll, MAX_ITER, False, "no convergence")


def cox_wald_test(time, event, X, column: int = 0) -> tuple[float, CoxFit]:
    """Wald p-value for one coefficient; constant covariates are dropped.

    Failed fits return p = 1.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    keep = np.flatnonzero(np.ptp(X, axis=0) > 0)
    if column not in keep:
        fit = CoxFit(np.zeros(0), np.zeros((0, 0)), np.zeros(0), 0.0, 0, False, "tested covariate is constant")
        return 1.0, fit
    fit = cox_fit(time, event, X[:, keep])
    if fit.failed:
        return 1.0, fit
    j = int(np.searchsorted(keep, column))
    var = np.linalg.inv(fit.info)[j, j]
    return chi2_1_sf(fit.beta[j] ** 2 / var), fit


def gen_dataset_se5(signal: SignalField | np.ndarray, n: int, rng) -> SurvivalDataset:
    """Exponential event times with rate exp(theta_1 W1 + 0.1 W2), Unif(0, 5) censoring."""
    theta = signal.theta if isinstance(signal, SignalField) else np.asarray(signal, dtype=float)
    m = theta.shape[0]
    W = np.column_stack([sample_bernoulli(rng, 0.5, n), sample_unif(rng, 0.1, 0.5, n)])
    rate = np.exp(W[:, :1] * theta[None, :] + SE5_NUISANCE * W[:, 1:])
    t_event = sample_exponential(rng, rate)
    t_cens = sample_unif(rng, 0.0, CENSOR_MAX, (n, m))
    return SurvivalDataset(W, np.minimum(t_event, t_cens), t_event <= t_cens)


def cox_wald_pvalues(ds: SurvivalDataset) -> tuple[PValueVector, np.ndarray]:
    """Per-feature Wald p-values for the W1 coefficient, plus fit-failure flags."""
    p = np.empty(ds.m)
    failed = np.zeros(ds.m, dtype=bool)
    for i in range(ds.m):
        p[i], fit = cox_wald_test(ds.time[:, i], ds.event[:, i], ds.W, 0)
        failed[i] = fit.failed
    return PValueVector(p), failed

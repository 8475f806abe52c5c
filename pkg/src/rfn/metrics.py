"""Sample-based forecast scores: CRPS, CRPS_sum and the calibration score CS.

The predictive CDF is always the empirical CDF of the ensemble,
F(z) = #(samples <= z) / n, so ties with the observation count as <=.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)

DECILES = tuple(np.round(np.arange(1, 10) / 10, 10))


@dataclass
class ForecastEnsemble:
    samples: np.ndarray  # (n_samples, D)
    mask: np.ndarray  # (D,)
    observation: np.ndarray  # (D,)


def crps_ensemble(samples, x) -> np.ndarray:
    """CRPS of the empirical CDF of ``samples`` (..., n) at ``x`` (...).

    Exact for the step CDF via E|S - x| - E|S - S'| / 2, where the pair term is
    evaluated from the sorted samples in O(n log n).
    """
    s = np.asarray(samples, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if s.shape[-1] == 0:
        raise ValueError("empty ensemble")
    n = s.shape[-1]
    term1 = np.abs(s - x[..., None]).mean(axis=-1)
    ss = np.sort(s, axis=-1)
    w = 2.0 * np.arange(1, n + 1) - n - 1
    # sum_{i,j} |s_i - s_j| = 2 * sum_i (2i - n - 1) s_(i)
    term2 = (ss * w).sum(axis=-1) / (n * n)
    return term1 - term2


def crps_empirical(samples, x: float) -> float:
    return float(crps_ensemble(np.ravel(samples), x))


def crps_quadrature(samples, x: float, pad: float = 1.0) -> float:
    """Reference CRPS by integrating (F(z) - 1{x <= z})^2 piecewise exactly
    between the sorted breakpoints."""
    s = np.sort(np.ravel(np.asarray(samples, dtype=np.float64)))
    n = s.size
    pts = np.unique(np.concatenate([s, [x]]))
    grid = np.concatenate([[pts[0] - pad], pts, [pts[-1] + pad]])
    total = 0.0
    for a, b in zip(grid[:-1], grid[1:]):
        mid = 0.5 * (a + b)
        F = np.searchsorted(s, mid, side="right") / n
        H = 1.0 if x <= mid else 0.0
        total += (F - H) ** 2 * (b - a)
    return total


def crps_sum(samples, observations, mask=None) -> float:
    """CRPS of the summed forecast, averaged over time points.

    ``samples`` (T, n, D), ``observations`` (T, D), ``mask`` (T, D). Only observed
    variables enter the sums; time points without observations are skipped.
    """
    s = np.asarray(samples, dtype=np.float64)
    obs = np.asarray(observations, dtype=np.float64)
    m = np.ones_like(obs) if mask is None else np.asarray(mask, dtype=np.float64)
    keep = m.sum(axis=1) > 0
    if not np.any(keep):
        raise ValueError("no observed time point")
    s_sum = (s[keep] * m[keep][:, None, :]).sum(axis=-1)
    x_sum = (obs[keep] * m[keep]).sum(axis=-1)
    return float(crps_ensemble(s_sum, x_sum).mean())


def mean_crps(samples, observations, mask=None) -> float:
    """CRPS averaged over every observed (time, variable) pair."""
    s = np.asarray(samples, dtype=np.float64)
    obs = np.asarray(observations, dtype=np.float64)
    m = np.ones_like(obs, dtype=bool) if mask is None else np.asarray(mask) > 0
    per = crps_ensemble(np.moveaxis(s, 1, -1), obs)  # (T, D)
    return float(per[m].mean())


def pit_values(samples, observations) -> np.ndarray:
    """Empirical CDF of each ensemble at its observation: (T, D)."""
    s = np.asarray(samples, dtype=np.float64)
    obs = np.asarray(observations, dtype=np.float64)
    return (s <= obs[:, None, :]).mean(axis=1)


def confidence_score_from_cdf(cdf_values, mask=None, levels=DECILES) -> float:
    """CS = mean over levels and variables of (p_j - phat_j^d)^2.

    ``cdf_values`` (T, D) holds F_t^d(x_t^d); phat_j^d is the fraction of observed
    t with F_t^d(x_t^d) <= p_j. Variables without observations are excluded.
    """
    F = np.atleast_2d(np.asarray(cdf_values, dtype=np.float64))
    m = np.ones_like(F, dtype=bool) if mask is None else np.atleast_2d(np.asarray(mask)) > 0
    p = np.asarray(levels, dtype=np.float64)
    if p.size < 1:
        raise ValueError("need at least one quantile level")
    terms = []
    for d in range(F.shape[1]):
        f = F[m[:, d], d]
        if f.size == 0:
            logger.warning("variable %d has no observations; excluded from CS", d)
            continue
        phat = (f[None, :] <= p[:, None]).mean(axis=1)
        terms.append((p - phat) ** 2)
    if not terms:
        raise ValueError("no observations")
    return float(np.mean(terms))


def confidence_score(samples, observations, mask=None, levels=DECILES) -> float:
    return confidence_score_from_cdf(pit_values(samples, observations), mask, levels)


def score_all(samples, observations, mask=None, levels=DECILES) -> dict:
    return {"crps": mean_crps(samples, observations, mask),
            "crps_sum": crps_sum(samples, observations, mask),
            "cs": confidence_score(samples, observations, mask, levels)}

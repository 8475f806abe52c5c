"""Correlated geometric Brownian motion with a sinusoidally strengthening correlation.

Paths are stepped exactly in log-space on a uniform grid; the Brownian
increments of each step are correlated through the Cholesky factor of the
correlation schedule evaluated at the step midpoint.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .data import Dataset, Instance


@dataclass(frozen=True)
class GbmConfig:
    n_instances: int = 1000
    grid_points: int = 101
    horizon: float = 1.0
    rho1: float = 0.8
    rho2: float = 0.6
    # (low, high) per block; equal bounds pin the value
    drift_block1: tuple = (-0.2, -0.05)
    drift_block2: tuple = (0.05, 0.2)
    vol_block1: tuple = (0.15, 0.3)
    vol_block2: tuple = (0.15, 0.3)
    x0: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.grid_points < 2:
            raise ValueError("need at least two grid points")
        # PSD at t=1 covers every t: the schedule is I + sin(.)(B - I)
        np.linalg.cholesky(block_matrix(self.rho1, self.rho2))

    @property
    def dim(self) -> int:
        return 5


def block_matrix(rho1: float, rho2: float) -> np.ndarray:
    b = np.eye(5)
    b[0, 1] = b[1, 0] = rho1
    for i in range(2, 5):
        for j in range(2, 5):
            if i != j:
                b[i, j] = rho2
    return b


def correlation_schedule(t: float, rho1: float = 0.8, rho2: float = 0.6) -> np.ndarray:
    """sin(pi t / 2) times the block matrix, with the unit diagonal restored."""
    r = np.sin(0.5 * np.pi * t) * block_matrix(rho1, rho2)
    np.fill_diagonal(r, 1.0)
    return r


def draw_parameters(config: GbmConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Per-instance drift and volatility vectors, shared within each block."""
    n = config.n_instances
    mu = np.empty((n, 5))
    sig = np.empty((n, 5))
    mu[:, :2] = rng.uniform(*config.drift_block1, size=(n, 1))
    mu[:, 2:] = rng.uniform(*config.drift_block2, size=(n, 1))
    sig[:, :2] = rng.uniform(*config.vol_block1, size=(n, 1))
    sig[:, 2:] = rng.uniform(*config.vol_block2, size=(n, 1))
    return mu, sig


def simulate_paths(config: GbmConfig):
    """Simulate every path on the uniform grid.

    Returns ``(times (K,), paths (N, 5, K), mu (N, 5), sigma (N, 5))``.
    """
    rng = np.random.default_rng(config.seed)
    mu, sig = draw_parameters(config, rng)
    k = config.grid_points
    times = np.linspace(0.0, config.horizon, k)
    n = config.n_instances
    logx = np.empty((n, 5, k))
    logx[:, :, 0] = np.log(config.x0)
    drift = (mu - 0.5 * sig ** 2)
    for j in range(k - 1):
        dt = times[j + 1] - times[j]
        mid = 0.5 * (times[j] + times[j + 1])
        corr = correlation_schedule(mid / config.horizon, config.rho1, config.rho2)
        try:
            chol = np.linalg.cholesky(corr)
        except np.linalg.LinAlgError:
            raise ValueError(f"correlation matrix not PSD at t={mid}") from None
        eps = rng.standard_normal((n, 5)) @ chol.T
        logx[:, :, j + 1] = logx[:, :, j] + drift * dt + sig * np.sqrt(dt) * eps
    return times, np.exp(logx), mu, sig


def simulate(config: GbmConfig) -> Dataset:
    """Fully observed dataset on the uniform grid, one instance per path."""
    times, paths, mu, sig = simulate_paths(config)
    instances = [Instance(times, paths[i], np.ones_like(paths[i]), str(i))
                 for i in range(config.n_instances)]
    extra = {
        "generator": "gbm",
        "config": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(config).items()},
        "drift_per_instance": True,
        "mu": mu.tolist(),
        "sigma": sig.tolist(),
    }
    return Dataset(instances, 5, config.horizon, extra=extra)


def _check_fraction(keep_fraction: float):
    if not 0.0 < keep_fraction <= 1.0:
        raise ValueError(f"keep_fraction must lie in (0, 1], got {keep_fraction}")


def subsample_syn(dataset: Dataset, keep_fraction: float, seed: int = 0) -> Dataset:
    """Keep a random subset of whole time columns per instance."""
    _check_fraction(keep_fraction)
    rng = np.random.default_rng(seed)
    out = []
    for inst in dataset.instances:
        if np.any(inst.mask == 0):
            raise ValueError("subsampling expects fully observed input")
        k = inst.n_events
        n_keep = max(1, int(round(keep_fraction * k)))
        cols = np.sort(rng.choice(k, size=n_keep, replace=False))
        out.append(Instance(inst.times[cols], inst.values[:, cols], inst.mask[:, cols], inst.instance_id))
    return Dataset(out, dataset.dim, dataset.horizon, extra=dict(dataset.extra, subsample="syn",
                                                                 keep_fraction=keep_fraction))


def subsample_asyn(dataset: Dataset, keep_fraction: float, seed: int = 0) -> Dataset:
    """Independently per variable keep a random subset of its entries, then
    drop columns left without any observation."""
    _check_fraction(keep_fraction)
    rng = np.random.default_rng(seed)
    out = []
    for inst in dataset.instances:
        if np.any(inst.mask == 0):
            raise ValueError("subsampling expects fully observed input")
        d, k = inst.mask.shape
        n_keep = max(1, int(round(keep_fraction * k)))
        mask = np.zeros((d, k))
        for j in range(d):
            mask[j, rng.choice(k, size=n_keep, replace=False)] = 1.0
        cols = mask.sum(axis=0) > 0
        out.append(Instance(inst.times[cols], inst.values[:, cols] * mask[:, cols],
                            mask[:, cols], inst.instance_id))
    return Dataset(out, dataset.dim, dataset.horizon, extra=dict(dataset.extra, subsample="asyn",
                                                                 keep_fraction=keep_fraction))


def empirical_correlation(samples: np.ndarray) -> np.ndarray:
    """Pearson correlation of the columns of an (N, D) sample matrix.

    Entries involving a zero-variance column are NaN.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("need an (N, D) matrix with N >= 2")
    xc = x - x.mean(axis=0)
    cov = xc.T @ xc / (x.shape[0] - 1)
    sd = np.sqrt(np.diag(cov))
    with np.errstate(invalid="ignore", divide="ignore"):
        corr = cov / np.outer(sd, sd)
    bad = sd == 0
    corr[bad, :] = np.nan
    corr[:, bad] = np.nan
    corr = np.clip(corr, -1.0, 1.0)
    np.fill_diagonal(corr, np.where(bad, np.nan, 1.0))
    return corr

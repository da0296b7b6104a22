"""Sample-based distances and the analytic field-error probe."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial.distance import cdist

from .analytic import GaussianMixture, gmm_sample, marginal_field
from .nets import TimeDistribution

__all__ = ["MetricReport", "energy_distance", "field_mse", "sliced_wasserstein"]


@dataclass
class MetricReport:
    name: str
    value: float
    n_a: int
    n_b: int
    n_proj: int | None = None
    seed: int | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def _points(a, label: str) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if a.shape[0] == 0:
        raise ValueError(f"{label} is empty")
    return a


def _check_pair(a, b):
    a, b = _points(a, "first sample set"), _points(b, "second sample set")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    return a, b


def _quantiles(x: np.ndarray, levels: np.ndarray) -> np.ndarray:
    """Column-wise linear-interpolation quantiles (numpy's default method)."""
    x = np.sort(x, axis=0)
    pos = levels * (x.shape[0] - 1)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, x.shape[0] - 1)
    frac = (pos - lo)[:, None]
    return x[lo] * (1.0 - frac) + x[hi] * frac


def sliced_wasserstein(a, b, n_proj: int = 256, rng: np.random.Generator | None = None) -> float:
    """Mean over random unit directions of the 1-D Wasserstein-2 distance.

    Each 1-D distance compares ``min(len(a), len(b))`` quantiles at levels
    ``(j + 1/2) / m`` with linear interpolation.
    """
    a, b = _check_pair(a, b)
    rng = np.random.default_rng(0) if rng is None else rng
    dirs = rng.standard_normal((n_proj, a.shape[1]))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    m = min(a.shape[0], b.shape[0])
    levels = (np.arange(m) + 0.5) / m
    qa = _quantiles(a @ dirs.T, levels)
    qb = _quantiles(b @ dirs.T, levels)
    return float(np.mean(np.sqrt(np.mean((qa - qb) ** 2, axis=0))))


def _mean_pairwise(a, b, chunk: int = 2048) -> float:
    total = 0.0
    for i in range(0, a.shape[0], chunk):
        total += cdist(a[i : i + chunk], b).sum()
    return total / (a.shape[0] * b.shape[0])


def energy_distance(a, b) -> float:
    """V-statistic energy distance ``2 E|A-B| - E|A-A'| - E|B-B'|``."""
    a, b = _check_pair(a, b)
    value = 2.0 * _mean_pairwise(a, b) - _mean_pairwise(a, a) - _mean_pairwise(b, b)
    return max(value, 0.0)


def field_mse(net, q0: GaussianMixture, n: int, tdist: TimeDistribution, rng: np.random.Generator) -> float:
    """Monte-Carlo ``E ||net(x_t, t) - u_t(x_t)||^2`` with ``x_t ~ q_t``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    t = tdist.sample(n, rng)
    x0 = gmm_sample(q0, n, rng)
    x1 = rng.standard_normal(x0.shape)
    xt = (1.0 - t)[:, None] * x0 + t[:, None] * x1
    diff = net.velocity(xt, t) - marginal_field(q0, xt, t)
    return float(np.mean(np.sum(diff * diff, axis=1)))

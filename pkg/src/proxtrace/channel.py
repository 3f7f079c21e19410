"""Log-distance path loss with Gaussian shadowing, fitted to measured RSS."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .dataset import RssSample


class DegenerateDistances(ValueError):
    pass


class NonpositiveDistance(ValueError):
    pass


@dataclass(frozen=True)
class PathLossModel:
    p0_dbm: float  # mean RSS at 1 m
    n_exp: float
    sigma_dbm: float

    def __post_init__(self):
        if not self.n_exp > 0:
            raise ValueError(f"path-loss exponent must be positive, got {self.n_exp}")
        if not self.sigma_dbm >= 0:
            raise ValueError(f"shadowing spread must be non-negative, got {self.sigma_dbm}")

    def mean_rss(self, d):
        d = np.asarray(d, dtype=float)
        if np.any(d <= 0):
            raise NonpositiveDistance("distance must be positive")
        out = self.p0_dbm - 10.0 * self.n_exp * np.log10(d)
        return float(out) if out.ndim == 0 else out

    def distance_for(self, rss_dbm: float) -> float:
        """Distance at which the mean RSS equals ``rss_dbm``."""
        return 10.0 ** ((self.p0_dbm - rss_dbm) / (10.0 * self.n_exp))


def fit_path_loss(samples: Sequence[RssSample] | None = None, *, distances=None, rss=None) -> PathLossModel:
    """Least-squares fit of ``rss = p0 - 10 n log10(d)``.

    Pass either samples or parallel ``distances``/``rss`` arrays.  ``sigma``
    is the (population) standard deviation of the fit residuals.
    """
    if samples is not None:
        distances = [s.distance_m for s in samples]
        rss = [s.rss_dbm for s in samples]
    d = np.asarray(distances, dtype=float)
    y = np.asarray(rss, dtype=float)
    if d.size != y.size or d.size == 0:
        raise ValueError("need matching, non-empty distance and rss arrays")
    if np.any(d <= 0):
        raise NonpositiveDistance("distance must be positive")
    if np.unique(d).size < 2:
        raise DegenerateDistances("at least two distinct distances are needed")
    A = np.column_stack([np.ones_like(d), -10.0 * np.log10(d)])
    (p0, n), *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - A @ np.array([p0, n])
    return PathLossModel(float(p0), float(n), float(resid.std()))


def rss_at(model: PathLossModel, d: float, rng: np.random.Generator) -> float:
    if not d > 0:
        raise NonpositiveDistance(f"distance must be positive, got {d}")
    return model.p0_dbm - 10.0 * model.n_exp * math.log10(d) + float(rng.normal(0.0, model.sigma_dbm))


def rss_at_many(model: PathLossModel, d: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Vector form of :func:`rss_at`; consumes the generator exactly as repeated scalar calls would."""
    d = np.asarray(d, dtype=float)
    if np.any(d <= 0):
        raise NonpositiveDistance("distance must be positive")
    return model.p0_dbm - 10.0 * model.n_exp * np.log10(d) + rng.normal(0.0, model.sigma_dbm, size=d.shape)

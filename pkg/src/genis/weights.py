"""Chain-weight strategies for both stages.

Stage-1 weights a enter the reverse-logistic objective; stage-2 weights
enter the importance-weight mixture.  Strategies here cover the pooled
default (proportional to chain lengths), inverse-distance and
ESS-discounted inverse-distance rules for location families, and a pilot
grid search that minimizes the trace of the stage-1 asymptotic
covariance.
"""

from __future__ import annotations

from itertools import product
from typing import Sequence

import numpy as np

from .batch_means import DEFAULT_BM_SPEC, BatchMeansSpec, block_size, bm_variance
from .errors import ConvergenceError, EstimationError
from .reverse_logistic import StageWeights, estimate_ratios
from .samplers import SampleSet

WEIGHT_FLOOR = 1e-6


def naive_weights(n_per_chain) -> np.ndarray:
    """Weights proportional to chain lengths."""
    n_per = np.asarray(n_per_chain, dtype=float)
    if n_per.ndim != 1 or np.any(n_per <= 0):
        raise ValueError("chain lengths must be positive")
    return n_per / n_per.sum()


def _floored(a: np.ndarray, floor: float) -> np.ndarray:
    a = np.maximum(a, floor)
    return a / a.sum()


def inv_dist_weights(
    mu: float, ref_locations, n_per_chain, floor: float = WEIGHT_FLOOR
) -> np.ndarray:
    """Weights proportional to n_l / |mu - mu_l|; one-hot on exact match."""
    locs = np.asarray(ref_locations, dtype=float)
    n_per = np.asarray(n_per_chain, dtype=float)
    if locs.shape != n_per.shape:
        raise ValueError("one location per chain required")
    dist = np.abs(float(mu) - locs)
    hit = dist == 0.0
    if np.any(hit):
        out = np.zeros(locs.size)
        out[np.argmax(hit)] = 1.0
        return out
    return _floored(n_per / dist / np.sum(n_per / dist), floor)


def ess_inv_dist_weights(
    mu: float, ref_locations, ess_per_chain, floor: float = WEIGHT_FLOOR
) -> np.ndarray:
    """Inverse-distance weights with lengths replaced by effective sizes."""
    ess = np.asarray(ess_per_chain, dtype=float)
    if np.any(ess <= 0):
        raise ValueError("effective sample sizes must be positive")
    return inv_dist_weights(mu, ref_locations, ess, floor=floor)


def effective_sample_size(
    series, bm_spec: BatchMeansSpec = DEFAULT_BM_SPEC
) -> float:
    """n * sample variance / batch-means long-run variance, clamped to (0, n].

    Degenerate cases (zero sample variance or zero long-run variance)
    return n.
    """
    x = np.asarray(series, dtype=float)
    if x.ndim != 1 or x.size < 4:
        raise ValueError("series must be 1-d with at least 4 entries")
    n = x.size
    s2 = float(np.var(x, ddof=1))
    if s2 == 0.0:
        return float(n)
    lrv = bm_variance(x, block_size(n, bm_spec))
    if lrv <= 0.0:
        return float(n)
    return float(min(n * s2 / lrv, n))


def simplex_grid(k: int, step: float = 0.05, floor: float = WEIGHT_FLOOR):
    """Positive weight vectors on the k-simplex with the given step."""
    if k < 1:
        raise ValueError("k must be positive")
    if not 0 < step < 1:
        raise ValueError("step must lie strictly between 0 and 1")
    if k == 1:
        return [np.array([1.0])]
    m = int(round(1.0 / step))
    grid = []
    for parts in product(range(1, m), repeat=k - 1):
        if sum(parts) < m:
            vec = np.array(parts + (m - sum(parts),), dtype=float) / m
            if np.all(vec >= floor):
                grid.append(vec)
    return grid


def pilot_optimal_weights(
    pilot_samples: SampleSet,
    references,
    grid: Sequence | None = None,
    bm_spec: BatchMeansSpec = DEFAULT_BM_SPEC,
    step: float = 0.05,
) -> tuple[np.ndarray, dict]:
    """Grid search for the stage-1 weights minimizing trace of the covariance.

    Grid points where the fit or the covariance fails are skipped; ties
    are broken toward the pooled naive weights, then lexicographically.
    Returns the winning weights and a diagnostics map from grid points to
    traces (NaN where skipped).
    """
    k = len(references)
    if grid is None:
        grid = simplex_grid(k, step=step)
    if len(grid) == 0:
        raise ValueError("empty weight grid")
    naive = naive_weights(pilot_samples.n_per_chain)
    diagnostics: dict[tuple, float] = {}
    best: tuple | None = None
    for a_vec in grid:
        a_vec = np.asarray(a_vec, dtype=float)
        key = tuple(a_vec)
        try:
            est = estimate_ratios(
                pilot_samples,
                references,
                weights=StageWeights(a_vec),
                bm_spec=bm_spec,
                se_method="bm",
            )
            score = float(np.trace(est.cov)) if est.cov.size else 0.0
        except EstimationError:
            diagnostics[key] = float("nan")
            continue
        diagnostics[key] = score
        if best is None or score < best[0]:
            best = (score, key)
        elif score == best[0]:
            # tie: prefer naive, then the lexicographically smaller point
            if np.allclose(key, naive) and not np.allclose(best[1], naive):
                best = (score, key)
            elif key < best[1] and not np.allclose(best[1], naive):
                best = (score, key)
    if best is None:
        raise ConvergenceError("every grid point failed in the pilot search")
    return np.asarray(best[1]), diagnostics

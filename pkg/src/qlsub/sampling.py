"""Sampling scores, capped-proportional allocation, and Poisson draws.

Records are scored by |residual| * h(x) where h is either the plain
covariate norm (the cheap criterion, "mvc") or the norm of the
curvature-whitened covariate (the trace-optimal criterion, "mv").  The
allocation that minimizes the estimator's asymptotic dispersion subject to a
fixed expected subsample size is proportional-to-score with the largest
scores capped at probability one; :func:`waterfill` computes the exact cap.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DegenerateScores
from .estimator import WeightedObservation
from .families import LinkFamily
from .rng import MAIN_STREAM, uniform_one, uniforms

CRITERIA = ("uniform", "mv", "mvc")
THRESHOLD_MODES = ("inf", "quantile", "exact")


@dataclass(frozen=True)
class SamplingPlan:
    """Parameters of one nonuniform subsampling run."""

    criterion: str = "mvc"
    expected_size: float = 1000.0
    shrinkage: float = 0.2
    threshold_mode: str = "inf"
    seed: int = 0

    def __post_init__(self):
        if self.criterion not in CRITERIA:
            raise ConfigError(f"criterion must be one of {CRITERIA}")
        if self.threshold_mode not in THRESHOLD_MODES:
            raise ConfigError(f"threshold mode must be one of {THRESHOLD_MODES}")
        if not self.expected_size > 0:
            raise ConfigError("expected subsample size must be positive")
        if not 0.0 <= self.shrinkage <= 1.0:
            raise ConfigError("shrinkage must lie in [0, 1]")


@dataclass(frozen=True)
class ScoreContext:
    """Pilot quantities needed to turn a record score into a probability."""

    beta0: np.ndarray
    psi_hat: float
    sigma_inv: np.ndarray | None
    n_pool: float
    cap: float = math.inf

    def __post_init__(self):
        if not self.psi_hat > 0:
            raise ConfigError("pilot score normalizer must be positive")


def _rows(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x[None, :] if x.ndim == 1 else x


def linear_predictor(x: np.ndarray, beta: np.ndarray) -> np.ndarray:
    """Row-local dot products.

    Implemented as an elementwise product plus per-row reduction so each
    record's value is bit-identical no matter how the stream was blocked.
    """
    return np.sum(x * beta, axis=1)


def row_norms(x: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(x * x, axis=1))


def whitened_norms(x: np.ndarray, sigma_inv: np.ndarray) -> np.ndarray:
    """Norms of sigma_inv @ x_i per row, with a block-layout-stable reduction."""
    z = np.einsum("ij,kj->ik", x, sigma_inv, optimize=False)
    return row_norms(z)


def score_mvc(x, y, family: LinkFamily, beta):
    """Residual magnitude times covariate norm."""
    xs = _rows(x)
    resid = np.abs(np.asarray(y, dtype=np.float64) - family.mean(linear_predictor(xs, np.asarray(beta))))
    out = resid * row_norms(xs)
    return out if np.asarray(x).ndim == 2 else float(out[0])

def score_mv(x, y, family: LinkFamily, beta, sigma_inv):
    """Residual magnitude times curvature-whitened covariate norm."""
    if sigma_inv is None:
        raise ConfigError("the mv criterion requires the pilot curvature inverse")
    xs = _rows(x)
    si = np.asarray(sigma_inv, dtype=np.float64)
    resid = np.abs(np.asarray(y, dtype=np.float64) - family.mean(linear_predictor(xs, np.asarray(beta))))
    out = resid * whitened_norms(xs, si)
    return out if np.asarray(x).ndim == 2 else float(out[0])


def waterfill(scores, r: float) -> tuple[float, int]:
    """Exact threshold (cap, count) for the capped-proportional allocation.

    Returns ``(M, k)`` where k is the number of records allocated probability
    exactly one and M is the score cap, chosen so the probabilities
    ``r * (score ^ M) / sum(score ^ M)`` sum to r with max exactly one.  Only
    the largest ``floor(r) + 2`` scores are sorted, so the cost is
    O(N + r log r).
    """
    s = np.asarray(scores, dtype=np.float64)
    n = s.size
    if not r > 0:
        raise ValueError("expected size must be positive")
    if r >= n:
        raise ValueError("expected size must be below the number of scores")
    npos = int(np.count_nonzero(s > 0))
    if npos < math.ceil(r):
        raise DegenerateScores(
            f"only {npos} positive scores for expected size {r}"
        )
    m = min(n, int(math.floor(r)) + 2)
    top = np.sort(np.partition(s, n - m)[n - m :])[::-1]
    total = float(s.sum())
    cum = np.concatenate(([0.0], np.cumsum(top)))
    for k in range(0, int(math.floor(r)) + 1):
        remainder = total - float(cum[k])
        if (r - k) * float(top[k]) < remainder:
            return remainder / (r - k), k
    raise DegenerateScores(
        "no valid cap: the positive scores cannot absorb the expected size"
    )


def optimal_probabilities(scores, r: float, cap: float = math.inf) -> np.ndarray:
    """Capped proportional-to-score probabilities with expected total r.

    With ``(cap, k)`` from :func:`waterfill` the capped entries are assigned
    exactly one and the rest split ``r - k`` proportionally, which is the
    trace-optimal allocation.  With ``cap=inf`` this is plain proportional
    allocation and entries may exceed one (callers cap at draw time).
    """
    s = np.asarray(scores, dtype=np.float64)
    if np.any(s < 0):
        raise ValueError("scores must be nonnegative")
    if math.isinf(cap):
        denom = float(s.sum())
        if denom <= 0.0:
            raise DegenerateScores("all scores are zero")
        return r * s / denom
    capped = s >= cap
    k = int(np.count_nonzero(capped))
    rest_sum = float(s[~capped].sum())
    if r - k < 0 or (rest_sum <= 0.0 and r - k > 0):
        raise DegenerateScores("cap inconsistent with the requested size")
    p = np.empty_like(s)
    p[capped] = 1.0
    if rest_sum > 0.0:
        p[~capped] = (r - k) * s[~capped] / rest_sum
    return p


def threshold_quantile(pilot_scores, r: float, n: float) -> float:
    """Empirical (1 - r/(2n)) quantile of the pilot scores."""
    s = np.asarray(pilot_scores, dtype=np.float64)
    if s.size == 0:
        raise ValueError("pilot scores must be nonempty")
    level = min(max(1.0 - r / (2.0 * n), 0.0), 1.0)
    return float(np.quantile(s, level))


def shrinkage_probability(ctx: ScoreContext, score, r: float, rho: float):
    """Blend of score-proportional and uniform probabilities.

    ``(1 - rho) * r * (score ^ cap) / (n * psi_hat) + rho * r / n``; the
    uniform term floors every probability at ``rho * r / n`` so records with
    near-zero residuals cannot blow up the weighted estimating equation.
    Callers cap the result at one before drawing.
    """
    s = np.asarray(score, dtype=np.float64)
    capped = np.minimum(s, ctx.cap) if not math.isinf(ctx.cap) else s
    out = (1.0 - rho) * r * capped / (ctx.n_pool * ctx.psi_hat) + rho * r / ctx.n_pool
    return out if isinstance(score, np.ndarray) else float(out)


def block_mask(seed: int, indices: np.ndarray, probs: np.ndarray, stream: int = MAIN_STREAM) -> np.ndarray:
    """Vectorized Bernoulli inclusion decisions keyed on (seed, index)."""
    probs = np.asarray(probs, dtype=np.float64)
    bad = ~((probs >= 0.0) & (probs <= 1.0))
    if np.any(bad):
        idx = np.asarray(indices)[bad][0]
        raise ValueError(f"probability outside [0, 1] at record {int(idx)}")
    return uniforms(seed, indices, stream) < probs


def poisson_draw(records, prob_fn, seed: int, stream: int = MAIN_STREAM):
    """Single-pass Bernoulli thinning of a record stream.

    ``records`` yields ``(index, x, y)`` triples; each record is included
    independently with ``prob_fn(index, x, y)`` and included records carry
    the probability used.  The decision for record i depends only on
    (seed, i, p_i), so any block or shard layout reproduces it.
    """
    for index, x, y in records:
        p = float(prob_fn(index, x, y))
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"probability outside [0, 1] at record {index}")
        if uniform_one(seed, index, stream) < p:
            yield WeightedObservation(x=np.asarray(x, dtype=np.float64), y=float(y), p=p)


def warn_on_zero_scores(scores: np.ndarray, rho: float) -> None:
    """Zero scores under rho = 0 can never enter the subsample."""
    if rho == 0.0 and bool(np.any(np.asarray(scores) == 0.0)):
        warnings.warn(
            "records with zero score receive probability 0 under rho = 0; "
            "the optimality premises may be violated",
            RuntimeWarning,
            stacklevel=3,
        )

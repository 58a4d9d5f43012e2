"""Weighted quasi-likelihood estimation on subsamples.

The central object is the weighted estimating equation

    sum_i (1/p_i) * (y_i - mean(beta' x_i)) * x_i = 0

solved by Newton-Raphson with step-halving.  Inclusion probabilities enter
only through the inverse-probability weights, so the full-data estimator is
the special case p = 1.  The module also provides the curvature matrix and
the sandwich variance estimators used for inference.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import EmptySample, SingularHessian
from .families import LinkFamily

# reciprocal condition number below this is treated as singular
RCOND_MIN = 1e-12
MAX_HALVINGS = 30
Z_975 = 1.959963985


@dataclass(frozen=True)
class WeightedObservation:
    """One sampled record: covariates, response, and its draw probability."""

    x: np.ndarray
    y: float
    p: float

    def __post_init__(self):
        if not 0.0 < self.p <= 1.0:
            raise ValueError(f"inclusion probability {self.p} outside (0, 1]")


def stack_observations(obs) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Convert a sequence of WeightedObservation into (x, y, p) arrays."""
    xs = np.asarray([o.x for o in obs], dtype=np.float64)
    ys = np.asarray([o.y for o in obs], dtype=np.float64)
    ps = np.asarray([o.p for o in obs], dtype=np.float64)
    return xs, ys, ps


@dataclass
class FitResult:
    """Outcome of a weighted fit or an aggregation.

    ``hessian`` holds the positive-definite curvature relevant to the
    producing routine: the final (unnormalized) Newton matrix for a direct
    solve, the pooled bread matrix for pipeline and distributed variance
    estimates.  ``variance`` is the plug-in sandwich estimate when one was
    computed.
    """

    beta: np.ndarray
    hessian: np.ndarray
    variance: np.ndarray | None
    iterations: int
    converged: bool
    subsample_size: int
    score_norm: float = 0.0
    saturated: bool = False
    info: dict = field(default_factory=dict)

    def std_errors(self) -> np.ndarray:
        if self.variance is None:
            raise ValueError("no variance estimate attached to this fit")
        return np.sqrt(np.clip(np.diag(self.variance), 0.0, None))

    def conf_int(self, z: float = Z_975) -> tuple[np.ndarray, np.ndarray]:
        se = self.std_errors()
        return self.beta - z * se, self.beta + z * se


def _weights(p, m: int) -> np.ndarray:
    if p is None:
        return np.ones(m)
    p = np.asarray(p, dtype=np.float64)
    if np.any(p <= 0.0) or np.any(p > 1.0):
        raise ValueError("inclusion probabilities must lie in (0, 1]")
    return 1.0 / p


def weighted_score(x, y, family: LinkFamily, beta, p=None) -> np.ndarray:
    """Inverse-probability-weighted score vector at ``beta``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    if x.shape[1] != beta.shape[0]:
        raise ValueError("dimension mismatch between covariates and beta")
    w = _weights(p, x.shape[0])
    resid = y - family.mean(x @ beta)
    return x.T @ (w * resid)


def solve_weighted_qle(
    x,
    y,
    family: LinkFamily,
    p=None,
    init=None,
    tol: float = 1e-8,
    max_iter: int = 100,
    ridge: float = 0.0,
) -> FitResult:
    """Solve the weighted estimating equation by Newton-Raphson.

    Convergence is declared when the max-norm of the weighted score falls
    below ``tol * (1 + sum of weights)``; the weight mass plays the role of
    the data size so the criterion is scale-free.  Steps that fail to reduce
    the score norm are halved up to 30 times.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("x must be a 2-d array")
    m, d = x.shape
    if m == 0:
        raise EmptySample("cannot fit on an empty subsample")
    w = _weights(p, m)
    scale = 1.0 + float(w.sum())
    beta = np.zeros(d) if init is None else np.asarray(init, dtype=np.float64).copy()
    if beta.shape != (d,):
        raise ValueError("init has wrong dimension")
    if tol <= 0:
        raise ValueError("tol must be positive")

    eye = np.eye(d)
    saturated = False

    def score_at(b):
        eta = x @ b
        resid = y - family.mean(eta)
        return x.T @ (w * resid), eta

    score, eta = score_at(beta)
    norm = float(np.max(np.abs(score)))
    newton = None
    iterations = 0
    converged = norm <= tol * scale

    while not converged and iterations < max_iter:
        iterations += 1
        saturated = saturated or family.saturates(eta)
        jw = w * family.mean_derivative(eta)
        newton = x.T @ (x * jw[:, None])
        newton = 0.5 * (newton + newton.T)
        if ridge > 0.0:
            newton = newton + ridge * eye
        cond = np.linalg.cond(newton)
        if not np.isfinite(cond) or cond > 1.0 / RCOND_MIN:
            raise SingularHessian(cond)
        try:
            delta = cho_solve(cho_factor(newton), score)
        except np.linalg.LinAlgError as err:  # pragma: no cover - cond guard first
            raise SingularHessian(cond, str(err)) from err

        step = 1.0
        improved = False
        for _ in range(MAX_HALVINGS + 1):
            cand = beta + step * delta
            try:
                cand_score, cand_eta = score_at(cand)
            except ValueError:
                step *= 0.5
                continue
            cand_norm = float(np.max(np.abs(cand_score)))
            if np.isfinite(cand_norm) and cand_norm < norm:
                improved = True
                break
            step *= 0.5
        if not improved:
            break
        beta, score, eta, norm = cand, cand_score, cand_eta, cand_norm
        if norm <= tol * scale:
            converged = True

    if newton is None:
        # converged at the starting point; still report the curvature there
        jw = w * family.mean_derivative(eta)
        newton = x.T @ (x * jw[:, None])
        newton = 0.5 * (newton + newton.T)

    return FitResult(
        beta=beta,
        hessian=newton,
        variance=None,
        iterations=iterations,
        converged=converged,
        subsample_size=m,
        score_norm=norm,
        saturated=saturated,
        info={"score_scale": scale, "ridge": ridge},
    )


def subsample_hessian(x, family: LinkFamily, beta, p=None, scale: float = 1.0) -> np.ndarray:
    """Positive-(semi)definite curvature of the weighted score.

    Returns ``scale**-1 * sum_i (1/p_i) * mean'(beta'x_i) * x_i x_i'``, i.e.
    the negated derivative of the estimating function normalized by the
    caller's data count.
    """
    x = np.asarray(x, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    if scale < 1.0:
        raise ValueError("scale must be at least 1")
    w = _weights(p, x.shape[0])
    jw = w * family.mean_derivative(x @ beta)
    h = x.T @ (x * jw[:, None]) / float(scale)
    return 0.5 * (h + h.T)


def vc_contribution(x, y, family: LinkFamily, beta, p) -> np.ndarray:
    """Unnormalized meat-matrix contribution of one subsample.

    ``sum_i (y_i - mean)^2 * (1 - p_i) / p_i^2 * x_i x_i'``; exactly zero
    when every record was included with probability one.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    resid = y - family.mean(x @ np.asarray(beta, dtype=np.float64))
    w = resid**2 * (1.0 - p) / p**2
    out = x.T @ (x * w[:, None])
    return 0.5 * (out + out.T)


def _sandwich(bread: np.ndarray, meat: np.ndarray) -> np.ndarray:
    cond = np.linalg.cond(bread)
    if not np.isfinite(cond) or cond > 1.0 / RCOND_MIN:
        raise SingularHessian(cond)
    tmp = np.linalg.solve(bread, meat)
    out = np.linalg.solve(bread, tmp.T).T
    return 0.5 * (out + out.T)


def sandwich_variance(parts, family: LinkFamily, pooled_hessian, n_total: float) -> np.ndarray:
    """Plug-in sandwich variance from per-partition subsamples.

    ``parts`` is an iterable of ``(x, y, p, beta_part)`` tuples; each
    contributes its realized meat term evaluated at that partition's own
    estimate.  ``pooled_hessian`` is the bread matrix on the n_total scale.
    """
    n_total = float(n_total)
    d = np.asarray(pooled_hessian).shape[0]
    meat = np.zeros((d, d))
    for x, y, p, beta_part in parts:
        meat += vc_contribution(x, y, family, beta_part, p)
    meat /= n_total**2
    return _sandwich(np.asarray(pooled_hessian, dtype=np.float64), meat)


def full_data_variance(x, y, family: LinkFamily, beta, probabilities) -> np.ndarray:
    """Asymptotic variance of the subsample estimator about the full-data fit.

    Diagnostic routine over the full data: the bread is the full-data
    curvature and the meat is the sampling variance of the weighted score
    under independent Bernoulli inclusions with the given probabilities.
    Used by tests and by the probability-optimality oracle.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    probs = np.asarray(probabilities, dtype=np.float64)
    n = x.shape[0]
    resid2 = (y - family.mean(x @ np.asarray(beta, dtype=np.float64))) ** 2
    meat = x.T @ (x * (resid2 * (1.0 / probs - 1.0))[:, None]) / float(n) ** 2
    meat = 0.5 * (meat + meat.T)
    bread = subsample_hessian(x, family, beta, scale=n)
    return _sandwich(bread, meat)

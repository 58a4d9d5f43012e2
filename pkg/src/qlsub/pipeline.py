"""Single-machine two-step subsampling pipeline.

Pass one draws a small uniform pilot, fits it, and extracts the pilot
statistics (estimate, score normalizer, curvature).  Pass two scans the data
again, converts each record's score into a shrinkage probability, performs
the Bernoulli draws, and refits on the union of the pilot and second-pass
subsamples with inverse-probability weights.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import ConfigError, EmptySample, PilotFailed, SingularHessian
from .estimator import (
    FitResult,
    sandwich_variance,
    solve_weighted_qle,
    subsample_hessian,
)
from .families import LinkFamily
from .ingest import RecordStream
from .rng import MAIN_STREAM, PILOT_STREAM, uniforms
from .sampling import (
    SamplingPlan,
    ScoreContext,
    block_mask,
    linear_predictor,
    row_norms,
    shrinkage_probability,
    threshold_quantile,
    warn_on_zero_scores,
    waterfill,
    whitened_norms,
)


@dataclass
class PilotResult:
    """Pilot subsample and the statistics derived from it."""

    beta0: np.ndarray
    psi_hat: float
    sigma0: np.ndarray
    sigma0_inv: np.ndarray
    x: np.ndarray
    y: np.ndarray
    p: np.ndarray
    indices: np.ndarray
    realized_r0: int
    scores: np.ndarray
    criterion: str
    n_total: int
    degenerate: bool
    fit: FitResult


@dataclass
class PassSample:
    """Records captured by one Bernoulli scan, in global index order."""

    x: np.ndarray
    y: np.ndarray
    p: np.ndarray
    indices: np.ndarray
    expected_size: float
    cap: float = math.inf
    info: dict = field(default_factory=dict)

    @property
    def size(self) -> int:
        return self.indices.shape[0]


def _pilot_h(x: np.ndarray, criterion: str, sigma0_inv: np.ndarray) -> np.ndarray:
    if criterion == "mv":
        return whitened_norms(x, sigma0_inv)
    return row_norms(x)


def run_pilot(
    stream: RecordStream,
    family: LinkFamily,
    r0: float,
    seed: int,
    criterion: str = "mvc",
    ridge: float = 0.0,
) -> PilotResult:
    """Uniform pilot pass: draw with probability r0/N, fit, summarize."""
    n = stream.n_records
    d = stream.dim
    if not 0 < r0 <= n:
        raise ConfigError(f"pilot size {r0} outside (0, {n}]")
    if r0 < 10 * d:
        warnings.warn(
            f"pilot size {r0} is below 10*d = {10 * d}; the pilot fit may be fragile",
            RuntimeWarning,
            stacklevel=2,
        )
    p0 = float(r0) / n
    xs, ys, idxs = [], [], []
    for start, xb, yb in stream.iter_blocks():
        block_idx = np.arange(start, start + xb.shape[0], dtype=np.int64)
        mask = uniforms(seed, block_idx, PILOT_STREAM) < p0
        if mask.any():
            xs.append(xb[mask])
            ys.append(yb[mask])
            idxs.append(block_idx[mask])
    realized = int(sum(a.shape[0] for a in xs))
    if realized < d + 1:
        raise PilotFailed(
            f"pilot captured only {realized} records for dimension {d}; raise r0"
        )
    px = np.concatenate(xs)
    py = np.concatenate(ys)
    pidx = np.concatenate(idxs)
    pp = np.full(realized, p0)

    try:
        fit = solve_weighted_qle(px, py, family, p=pp, ridge=ridge)
    except SingularHessian as err:
        raise PilotFailed(f"pilot Newton system is singular; raise r0 ({err})") from err
    beta0 = fit.beta

    sigma0 = subsample_hessian(px, family, beta0, scale=realized)
    try:
        factor = cho_factor(sigma0)
    except np.linalg.LinAlgError as err:
        raise PilotFailed(f"pilot curvature is singular; raise r0 ({err})") from err
    sigma0_inv = cho_solve(factor, np.eye(d))
    sigma0_inv = 0.5 * (sigma0_inv + sigma0_inv.T)

    resid = np.abs(py - family.mean(linear_predictor(px, beta0)))
    scores = resid * _pilot_h(px, criterion, sigma0_inv)
    psi_hat = float(scores.mean())

    return PilotResult(
        beta0=beta0,
        psi_hat=psi_hat,
        sigma0=sigma0,
        sigma0_inv=sigma0_inv,
        x=px,
        y=py,
        p=pp,
        indices=pidx,
        realized_r0=realized,
        scores=scores,
        criterion=criterion,
        n_total=n,
        degenerate=psi_hat <= 0.0,
        fit=fit,
    )


def _block_scores(
    xb: np.ndarray,
    yb: np.ndarray,
    family: LinkFamily,
    pilot: PilotResult,
    criterion: str,
) -> np.ndarray:
    resid = np.abs(yb - family.mean(linear_predictor(xb, pilot.beta0)))
    if criterion == "mv":
        return resid * whitened_norms(xb, pilot.sigma0_inv)
    return resid * row_norms(xb)


def _resolve_cap(
    stream: RecordStream,
    family: LinkFamily,
    pilot: PilotResult,
    plan: SamplingPlan,
    r: float,
    n_pool: float,
) -> tuple[float, float]:
    """Cap value and the matching score normalizer for the chosen mode."""
    if plan.threshold_mode == "inf":
        return math.inf, pilot.psi_hat
    if plan.threshold_mode == "quantile":
        cap = threshold_quantile(pilot.scores, r, n_pool)
        psi = float(np.minimum(pilot.scores, cap).mean())
        return cap, psi
    # exact mode: score the whole pool with the pilot estimate, then solve
    # the capped allocation on it
    chunks = [
        _block_scores(xb, yb, family, pilot, plan.criterion)
        for _, xb, yb in stream.iter_blocks()
    ]
    scores = np.concatenate(chunks) if chunks else np.empty(0)
    cap, _ = waterfill(scores, r)
    psi = float(np.minimum(scores, cap).mean())
    return cap, psi


@dataclass(frozen=True)
class ProbabilityRule:
    """Resolved record-to-probability map for one sampling pass."""

    pilot: PilotResult
    plan: SamplingPlan
    r: float
    n_pool: float
    uniform_only: bool
    cap: float
    psi_eff: float
    ctx: ScoreContext | None

    def block_probabilities(self, xb: np.ndarray, yb: np.ndarray, family: LinkFamily) -> np.ndarray:
        if self.uniform_only:
            return np.full(xb.shape[0], self.r / self.n_pool)
        scores = _block_scores(xb, yb, family, self.pilot, self.plan.criterion)
        return np.minimum(
            shrinkage_probability(self.ctx, scores, self.r, self.plan.shrinkage), 1.0
        )


def resolve_rule(
    stream: RecordStream,
    family: LinkFamily,
    pilot: PilotResult,
    plan: SamplingPlan,
    r: float,
    n_pool: float | None = None,
) -> ProbabilityRule:
    """Bind the plan to this pass: threshold, normalizer, probability map."""
    n_pool = float(stream.n_records if n_pool is None else n_pool)
    uniform_only = plan.criterion == "uniform"
    if pilot.degenerate and not uniform_only:
        warnings.warn(
            "pilot residuals are all zero; falling back to uniform probabilities",
            RuntimeWarning,
            stacklevel=2,
        )
        uniform_only = True
    cap, psi_eff = math.inf, (pilot.psi_hat if not pilot.degenerate else 1.0)
    ctx = None
    if not uniform_only:
        cap, psi_eff = _resolve_cap(stream, family, pilot, plan, r, n_pool)
        ctx = ScoreContext(
            beta0=pilot.beta0,
            psi_hat=psi_eff,
            sigma_inv=pilot.sigma0_inv if plan.criterion == "mv" else None,
            n_pool=n_pool,
            cap=cap,
        )
    return ProbabilityRule(
        pilot=pilot,
        plan=plan,
        r=r,
        n_pool=n_pool,
        uniform_only=uniform_only,
        cap=cap,
        psi_eff=psi_eff,
        ctx=ctx,
    )


def second_pass(
    stream: RecordStream,
    family: LinkFamily,
    pilot: PilotResult,
    plan: SamplingPlan,
    r: float,
    seed: int,
    rule: ProbabilityRule | None = None,
) -> PassSample:
    """Score-driven Bernoulli scan over ``stream`` with expected size r.

    The probability pool size is the stream's own record count, so a shard
    passed here is sampled to expected size r by itself.
    """
    n_pool = stream.n_records
    if not 0 < r < n_pool:
        raise ConfigError(f"expected size {r} outside (0, {n_pool})")
    if rule is None:
        rule = resolve_rule(stream, family, pilot, plan, r)
    cap, psi_eff = rule.cap, rule.psi_eff

    xs, ys, ps, idxs = [], [], [], []
    expected = 0.0
    zero_warned = False
    for start, xb, yb in stream.iter_blocks():
        block_idx = np.arange(start, start + xb.shape[0], dtype=np.int64)
        if rule.uniform_only:
            probs = np.full(xb.shape[0], r / n_pool)
        else:
            scores = _block_scores(xb, yb, family, pilot, plan.criterion)
            if not zero_warned and plan.shrinkage == 0.0 and np.any(scores == 0.0):
                warn_on_zero_scores(scores, plan.shrinkage)
                zero_warned = True
            probs = np.minimum(
                shrinkage_probability(rule.ctx, scores, r, plan.shrinkage), 1.0
            )
        expected += float(probs.sum())
        mask = block_mask(seed, block_idx, probs, MAIN_STREAM)
        if mask.any():
            xs.append(xb[mask])
            ys.append(yb[mask])
            ps.append(probs[mask])
            idxs.append(block_idx[mask])

    if not xs:
        return PassSample(
            x=np.empty((0, stream.dim)),
            y=np.empty(0),
            p=np.empty(0),
            indices=np.empty(0, dtype=np.int64),
            expected_size=expected,
            cap=cap,
        )
    return PassSample(
        x=np.concatenate(xs),
        y=np.concatenate(ys),
        p=np.concatenate(ps),
        indices=np.concatenate(idxs),
        expected_size=expected,
        cap=cap,
        info={"psi_eff": psi_eff},
    )


def run_two_step(
    stream: RecordStream,
    family: LinkFamily,
    plan: SamplingPlan,
    r0: float,
    seed: int | None = None,
    ridge: float = 0.0,
) -> FitResult:
    """Pilot pass, shrinkage-probability pass, and the final weighted fit.

    The final sample is the union of the pilot and second-pass draws.  The
    two scans are independent Poisson experiments, so a record's inclusion
    probability in the union is 1 - (1 - r0/N)(1 - p2) where p2 is its
    capped shrinkage probability; the union is deduplicated and weighted by
    the inverse of that probability.  Weighting pilot records at their raw
    pilot probability instead would freeze their score noise at the 1/r0
    scale and destroy the 1/r convergence of the final estimator.
    """
    seed = plan.seed if seed is None else seed
    n = stream.n_records
    r = plan.expected_size
    if not 0 < r < n:
        raise ConfigError(f"expected size {r} must lie in (0, {n})")

    pilot = run_pilot(stream, family, r0, seed, plan.criterion, ridge=ridge)
    rule = resolve_rule(stream, family, pilot, plan, r)
    sample = second_pass(stream, family, pilot, plan, r, seed, rule=rule)
    if sample.size == 0:
        raise EmptySample("second pass captured no records")

    p0 = float(r0) / n
    pilot_p2 = rule.block_probabilities(pilot.x, pilot.y, family)
    fresh = ~np.isin(sample.indices, pilot.indices)
    x = np.concatenate([pilot.x, sample.x[fresh]])
    y = np.concatenate([pilot.y, sample.y[fresh]])
    p2 = np.concatenate([pilot_p2, sample.p[fresh]])
    indices = np.concatenate([pilot.indices, sample.indices[fresh]])
    order = np.argsort(indices, kind="stable")
    x, y, indices = x[order], y[order], indices[order]
    union_p = 1.0 - (1.0 - p0) * (1.0 - p2[order])

    fit = solve_weighted_qle(x, y, family, p=union_p, init=pilot.beta0, ridge=ridge)
    bread = subsample_hessian(x, family, fit.beta, p=union_p, scale=n)
    variance = sandwich_variance([(x, y, union_p, fit.beta)], family, bread, n)

    fit.hessian = bread
    fit.variance = variance
    fit.info.update(
        realized_r0=pilot.realized_r0,
        realized_second=sample.size,
        expected_second=sample.expected_size,
        cap=sample.cap,
        psi_hat=pilot.psi_hat,
        criterion=plan.criterion,
        seed=seed,
    )
    return fit

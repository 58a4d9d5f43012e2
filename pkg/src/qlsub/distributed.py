"""Divide-and-conquer subsampling across data shards.

Each shard is sampled and fit on its own (expected subsample size r per
shard), compressed into its estimate, curvature, and meat-matrix
contribution, and the coordinator combines the summaries with
curvature-weighted averaging.  The global pilot joins the combination as
partition 0.  Workers share no mutable state, so shards may be processed
concurrently; the reduction is ordered by partition id and therefore
reproducible bit-for-bit under any worker count or summary arrival order.
"""

from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, PartitionFailed, QlsubError, SingularHessian
from .estimator import (
    FitResult,
    solve_weighted_qle,
    subsample_hessian,
    vc_contribution,
)
from .families import LinkFamily
from .ingest import RecordStream, partition_view
from .pipeline import PilotResult, run_pilot, second_pass
from .sampling import SamplingPlan, ScoreContext, shrinkage_probability

PILOT_PARTITION_ID = 0


@dataclass
class PartitionSummary:
    """Sufficient statistics shipped from one shard to the coordinator.

    ``hessian`` is the shard-normalized curvature (divided by the shard's own
    record count) evaluated at the shard estimate; ``vc_contrib`` is the
    unnormalized meat term.  Partition id 0 is reserved for the pilot.
    """

    partition_id: int
    beta: np.ndarray
    hessian: np.ndarray
    vc_contrib: np.ndarray
    n_records: float
    realized_size: int


def fit_partition(
    shard: RecordStream,
    family: LinkFamily,
    pilot: PilotResult,
    plan: SamplingPlan,
    r: float,
    seed: int,
    partition_id: int,
    ridge: float = 0.0,
) -> PartitionSummary:
    """Sample and fit one shard; failures carry the partition id."""
    n_j = shard.n_records
    if n_j == 0:
        raise PartitionFailed(partition_id, "empty partition")
    try:
        sample = second_pass(shard, family, pilot, plan, r, seed)
        if sample.size == 0:
            raise PartitionFailed(partition_id, "no records drawn in partition")
        fit = solve_weighted_qle(
            sample.x, sample.y, family, p=sample.p, init=pilot.beta0, ridge=ridge
        )
        hessian = subsample_hessian(sample.x, family, fit.beta, p=sample.p, scale=n_j)
        vc = vc_contribution(sample.x, sample.y, family, fit.beta, sample.p)
    except PartitionFailed:
        raise
    except QlsubError as err:
        raise PartitionFailed(partition_id, f"partition {partition_id}: {err}") from err
    return PartitionSummary(
        partition_id=partition_id,
        beta=fit.beta,
        hessian=hessian,
        vc_contrib=vc,
        n_records=float(n_j),
        realized_size=sample.size,
    )


def pilot_summary(
    pilot: PilotResult,
    family: LinkFamily,
    plan: SamplingPlan,
    r: float,
    machine_size: float,
) -> PartitionSummary:
    """Compress the global pilot into a combinable summary.

    The pilot behaves like one more machine-sized partition whose records
    carry second-stage probabilities: its curvature then scales like r0/r
    relative to a shard's, so the combination weights the pilot by its
    actual information instead of letting its 1/r0-scale noise dominate.
    Its meat contribution propagates the pilot estimate's own sandwich
    variance (pilot term at p = r0/N) through that combination weight, so
    the pooled variance stays calibrated.
    """
    p = pilot_stage_probabilities(pilot, family, plan, r, machine_size)
    hessian = subsample_hessian(pilot.x, family, pilot.beta0, p=p, scale=machine_size)
    n_total = float(pilot.n_total)
    pilot_meat = vc_contribution(pilot.x, pilot.y, family, pilot.beta0, pilot.p)
    pilot_var = np.linalg.solve(
        pilot.sigma0, np.linalg.solve(pilot.sigma0, pilot_meat / n_total**2).T
    ).T
    scaled = machine_size * hessian
    vc = scaled @ (0.5 * (pilot_var + pilot_var.T)) @ scaled
    vc = 0.5 * (vc + vc.T)
    return PartitionSummary(
        partition_id=PILOT_PARTITION_ID,
        beta=pilot.beta0,
        hessian=hessian,
        vc_contrib=vc,
        n_records=float(machine_size),
        realized_size=pilot.realized_r0,
    )


def pilot_stage_probabilities(
    pilot: PilotResult,
    family: LinkFamily,
    plan: SamplingPlan,
    r: float,
    n_pool: float,
) -> np.ndarray:
    """Second-stage probabilities of the pilot's own records, capped at one."""
    if plan.criterion == "uniform" or pilot.degenerate:
        return np.minimum(np.full(pilot.realized_r0, r / n_pool), 1.0)
    ctx = ScoreContext(
        beta0=pilot.beta0,
        psi_hat=pilot.psi_hat,
        sigma_inv=pilot.sigma0_inv if plan.criterion == "mv" else None,
        n_pool=float(n_pool),
    )
    return np.minimum(
        shrinkage_probability(ctx, pilot.scores, r, plan.shrinkage), 1.0
    )


def aggregate(summaries, n_total: float | None = None) -> FitResult:
    """Curvature-weighted combination of partition summaries.

    The estimate is ``(sum_j H_j)^-1 sum_j H_j beta_j``.  The variance
    sandwich un-normalizes each curvature by its partition's record count to
    form the pooled bread on the full-data scale, and sums the meat
    contributions.  Summaries are reduced in partition-id order so the result
    does not depend on list order.
    """
    summaries = sorted(summaries, key=lambda s: s.partition_id)
    if not summaries:
        raise ConfigError("no partition summaries to aggregate")
    ids = [s.partition_id for s in summaries]
    if len(set(ids)) != len(ids):
        raise ConfigError(f"duplicate partition ids: {ids}")
    d = summaries[0].beta.shape[0]
    if n_total is None:
        shard_n = [s.n_records for s in summaries if s.partition_id != PILOT_PARTITION_ID]
        n_total = float(sum(shard_n)) if shard_n else float(summaries[0].n_records)

    weight = np.zeros((d, d))
    weighted_beta = np.zeros(d)
    bread = np.zeros((d, d))
    meat = np.zeros((d, d))
    realized = 0
    for s in summaries:
        weight += s.hessian
        weighted_beta += s.hessian @ s.beta
        bread += s.n_records * s.hessian
        meat += s.vc_contrib
        realized += s.realized_size
    bread /= n_total
    meat /= n_total**2

    cond = np.linalg.cond(weight)
    if not np.isfinite(cond) or cond > 1e12:
        raise SingularHessian(cond, "pooled curvature is singular")
    beta = np.linalg.solve(weight, weighted_beta)
    tmp = np.linalg.solve(bread, meat)
    variance = np.linalg.solve(bread, tmp.T).T
    variance = 0.5 * (variance + variance.T)

    return FitResult(
        beta=beta,
        hessian=bread,
        variance=variance,
        iterations=0,
        converged=True,
        subsample_size=realized,
        info={
            "partition_ids": ids,
            "partition_sizes": [s.realized_size for s in summaries],
        },
    )


def run_distributed(
    stream: RecordStream,
    family: LinkFamily,
    plan: SamplingPlan,
    r0: float,
    k: int,
    seed: int | None = None,
    threads: int | None = None,
    ridge: float = 0.0,
) -> FitResult:
    """Full distributed run: global pilot, per-shard fits, combination.

    ``stream`` is split into K contiguous shards (a K-file source aligns the
    shards with its files).  The pilot is drawn across all shards with the
    global probability r0/N and pooled before the per-shard passes start.
    """
    shards = partition_view(stream, k)
    n_total = stream.n_records
    seed = plan.seed if seed is None else seed
    r = plan.expected_size
    if k > r ** (1.0 / 3.0):
        warnings.warn(
            f"partition count {k} exceeds r^(1/3) = {r ** (1/3.0):.1f}; the "
            "aggregation guarantees degrade in this regime",
            RuntimeWarning,
            stacklevel=2,
        )

    pilot = run_pilot(stream, family, r0, seed, plan.criterion, ridge=ridge)

    def job(pair):
        pid, shard = pair
        return fit_partition(shard, family, pilot, plan, r, seed, pid, ridge=ridge)

    jobs = list(enumerate(shards, start=1))
    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(job, jobs))
    else:
        parts = [job(pair) for pair in jobs]

    summaries = [pilot_summary(pilot, family, plan, r, n_total / k)] + parts
    result = aggregate(summaries, n_total=n_total)
    result.info.update(
        realized_r0=pilot.realized_r0,
        criterion=plan.criterion,
        seed=seed,
        k=k,
    )
    return result

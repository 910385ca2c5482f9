"""Randomization-imbalance study: minimization over simulated enrollments
with site-correlated binary factors."""
from dataclasses import dataclass, field, asdict
import time

import numpy as np

from .core import N_ARMS
from .datagen import SiteCovariateConfig, draw_site_correlated_factors
from .parallel import replicate_rng, run_tasks
from .randomizer import MinimizationConfig, exclusion_mask, minimize_sequence

METRICS = ("study_wide", "factor_level", "site_treatment")


def study_wide_imbalance(arm_totals):
    """Largest difference in participant counts between two arms."""
    n = np.asarray(arm_totals)
    return int(n.max() - n.min())


def factor_level_imbalance(counts_by_level):
    """Largest arm-pair difference within any (factor, level) cell.

    ``counts_by_level`` has arms on the first axis; remaining axes index
    factor and level.
    """
    c = np.asarray(counts_by_level)
    return int((c.max(axis=0) - c.min(axis=0)).max())


def site_treatment_imbalance(counts_by_site):
    """Largest within-site arm-pair difference; arms on the first axis."""
    c = np.asarray(counts_by_site)
    return int((c.max(axis=0) - c.min(axis=0)).max())


def level_counts(counts, arm_totals):
    """(arms, factors, 2) counts for levels 0 and 1 of binary factors."""
    counts = np.asarray(counts)
    ones = counts
    zeros = np.asarray(arm_totals)[:, None] - counts
    return np.stack([zeros, ones], axis=-1)


@dataclass(frozen=True)
class ImbalanceConfig:
    n_participants: int = 600
    n_sites: int = 8
    icc: float = 0.05
    marginal_p: float = 0.5
    factor_counts: tuple = (2, 4, 6, 8)
    n_replicates: int = 10_000
    rho: float = 2.0 / 3.0
    exclusion_prevalence: float = 0.0
    master_seed: int = 0
    threads: int = 1
    coding: str = "own_level"

    def __post_init__(self):
        object.__setattr__(self, "factor_counts", tuple(int(f) for f in self.factor_counts))
        if not self.factor_counts:
            raise ValueError("factor_counts must be nonempty")
        if self.n_replicates < 1 or self.n_participants < 1:
            raise ValueError("need at least one replicate and one participant")
        bound = (N_ARMS - 1) / N_ARMS
        if not 0.0 <= self.exclusion_prevalence < bound:
            raise ValueError(
                f"exclusion prevalence must lie in [0, {bound:.3f}); beyond that balance "
                "across arms is impossible")

    def to_dict(self):
        return asdict(self)


def _summary(values, threshold=10):
    v = np.asarray(values)
    q1, med, q3 = np.quantile(v, [0.25, 0.5, 0.75])
    return {"min": int(v.min()), "q1": float(q1), "median": float(med), "q3": float(q3),
            "max": int(v.max()), "p_ge_10": float((v >= threshold).mean())}


@dataclass
class ImbalanceReport:
    config: ImbalanceConfig
    metrics: dict = field(default_factory=dict)  # n_factors -> metric -> int array
    runtime: dict = field(default_factory=dict)

    def summary(self, n_factors):
        return {m: _summary(self.metrics[n_factors][m]) for m in METRICS}

    def pooled_p_study_wide_ge(self, threshold=10):
        allv = np.concatenate([self.metrics[f]["study_wide"] for f in self.metrics])
        return float((allv >= threshold).mean())

    def summary_rows(self):
        rows = []
        for f in self.metrics:
            for m, s in self.summary(f).items():
                rows.append({"n_factors": f, "metric": m, **s})
        return rows


def _one_replicate(task):
    config, n_factors, rep = task
    rng = replicate_rng(config.master_seed, n_factors, rep)
    site_cfg = SiteCovariateConfig(n_sites=config.n_sites, icc=config.icc,
                                   marginal_p=config.marginal_p, n_factors=n_factors)
    factors, site = draw_site_correlated_factors(site_cfg, config.n_participants, rng)
    n = config.n_participants
    if config.exclusion_prevalence > 0:
        has = rng.random(n) < config.exclusion_prevalence
        excluded = np.where(has, rng.integers(0, N_ARMS, n), -1)
        feasible = exclusion_mask(excluded)
    else:
        feasible = None
    min_cfg = MinimizationConfig.stage1(rho=config.rho, n_factors=n_factors,
                                        coding=config.coding)
    arms, counts, site_counts = minimize_sequence(factors, feasible, min_cfg, rng,
                                                  sites=site, return_state=True)
    totals = np.bincount(arms, minlength=N_ARMS)
    out = (study_wide_imbalance(totals),
           factor_level_imbalance(level_counts(counts, totals)),
           site_treatment_imbalance(site_counts))
    assert 0 <= out[1] <= n
    return out


def run_imbalance(config):
    """Run every replicate of every factor-count setting."""
    report = ImbalanceReport(config)
    for f in config.factor_counts:
        t0 = time.perf_counter()
        tasks = [(config, f, r) for r in range(config.n_replicates)]
        res = np.array(run_tasks(_one_replicate, tasks, config.threads, chunksize=256),
                       dtype=np.int64)
        report.metrics[f] = {m: res[:, i] for i, m in enumerate(METRICS)}
        report.runtime[f] = time.perf_counter() - t0
    return report

"""Monte Carlo power for estimating a near-optimal regime.

For each completer count N, every replicate simulates a trial, fits the
regime by Q-learning and records whether its value reaches ``delta`` times
the optimal value.
"""
from dataclasses import asdict, dataclass, field
import time
import traceback
import warnings

import numpy as np

from .datagen import DgmConfig, simulate_arrays
from .dtr import QLearner, optimal_value, value_ratio
from .lasso import LassoCVCD
from .parallel import replicate_rng, run_tasks

DEFAULT_N_GRID = (300, 400, 500, 600, 630, 700, 800, 900)
PRESETS = {
    "desk": {"n_replicates": 500, "n_mc_value": 20_000},
    "paper": {"n_replicates": 3_500, "n_mc_value": 20_000, "confirm_replicates": 5_000},
}
MAX_FAILURE_RATE = 0.01
QUANTILES = (0.05, 0.25, 0.5, 0.75, 0.95)


class PowerAborted(RuntimeError):
    """Too many replicates failed for the estimate to be trusted."""


@dataclass(frozen=True)
class PowerConfig:
    n_grid: tuple = DEFAULT_N_GRID
    delta: float = 0.9
    n_replicates: int = 500
    n_mc_value: int = 20_000
    dgm: DgmConfig = field(default_factory=DgmConfig)
    master_seed: int = 0
    threads: int = 1
    pairs: str = "all"
    cv_rule: str = "min"
    confirm_replicates: int = 5_000

    def __post_init__(self):
        object.__setattr__(self, "n_grid", tuple(int(n) for n in self.n_grid))
        if isinstance(self.dgm, dict):
            object.__setattr__(self, "dgm", DgmConfig(**self.dgm))
        if not 0.0 < self.delta <= 1.0:
            raise ValueError(f"delta must lie in (0, 1], got {self.delta}")
        if self.n_replicates < 1 or self.confirm_replicates < 1:
            raise ValueError("need at least one replicate")
        if self.n_mc_value < 1:
            raise ValueError("n_mc_value must be >= 1")
        if not self.n_grid or min(self.n_grid) < 20:
            raise ValueError("n_grid must be nonempty with every N >= 20")

    @classmethod
    def preset(cls, name, **overrides):
        if name not in PRESETS:
            raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        return cls(**{**PRESETS[name], **overrides})

    def to_dict(self):
        return asdict(self)


@dataclass
class PowerPoint:
    n: int
    n_replicates: int
    successes: int
    n_failed: int
    ratio_mean: float
    ratio_quantiles: tuple
    runtime: float
    ratios: np.ndarray = field(repr=False, default=None)

    @property
    def p_hat(self):
        return self.successes / self.n_replicates

    @property
    def mc_se(self):
        p = self.p_hat
        return float(np.sqrt(p * (1.0 - p) / self.n_replicates))

    def row(self):
        out = {"N": self.n, "replicates": self.n_replicates, "failed": self.n_failed,
               "p_hat": self.p_hat, "mc_se": self.mc_se, "ratio_mean": self.ratio_mean}
        for q, v in zip(QUANTILES, self.ratio_quantiles):
            out[f"ratio_q{int(round(q * 100)):02d}"] = v
        out["runtime_s"] = self.runtime
        return out


@dataclass
class PowerResult:
    config: PowerConfig
    v_opt: float
    points: list = field(default_factory=list)

    def point(self, n):
        for p in self.points:
            if p.n == n:
                return p
        raise KeyError(n)

    def rows(self):
        return [p.row() for p in self.points]

    def monotone_violations(self, n_se=2.0):
        """Adjacent grid pairs where power drops by more than ``n_se`` SEs."""
        bad = []
        for a, b in zip(self.points, self.points[1:]):
            se = np.hypot(a.mc_se, b.mc_se)
            if b.p_hat < a.p_hat - n_se * se:
                bad.append((a.n, b.n))
        return bad


def _one_replicate(task):
    """Value ratio for one replicate, or the error text if it failed."""
    config, n, rep, v_opt = task
    rng = replicate_rng(config.master_seed, n, rep)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            data = simulate_arrays(config.dgm, rng, n=n)
            learner = QLearner(estimator=LassoCVCD(rule=config.cv_rule), pairs=config.pairs,
                               mode=config.dgm.stage2_mode,
                               random_state=int(rng.integers(2**63 - 1))).fit(data)
            return value_ratio(learner.policy_, config.dgm, rng, config.n_mc_value, v_opt)
    except (ValueError, FloatingPointError, np.linalg.LinAlgError):
        return traceback.format_exc(limit=1)


def _run_point(config, n, n_rep, v_opt, progress=None):
    t0 = time.perf_counter()
    out = run_tasks(_one_replicate, [(config, n, r, v_opt) for r in range(n_rep)],
                    config.threads, chunksize=4)
    failed = [o for o in out if isinstance(o, str)]
    if len(failed) > MAX_FAILURE_RATE * n_rep:
        raise PowerAborted(f"N={n}: {len(failed)} of {n_rep} replicates failed; "
                           f"first error: {failed[0].strip()}")
    ratios = np.array([o for o in out if not isinstance(o, str)], dtype=float)
    point = PowerPoint(
        n=n, n_replicates=len(ratios), successes=int((ratios >= config.delta).sum()),
        n_failed=len(failed), ratio_mean=float(ratios.mean()),
        ratio_quantiles=tuple(float(v) for v in np.quantile(ratios, QUANTILES)),
        runtime=time.perf_counter() - t0, ratios=ratios)
    if progress is not None:
        progress(point)
    return point


def _checked_v_opt(config):
    v_opt = optimal_value(config.dgm)
    if not v_opt > 0:
        raise ValueError(
            f"optimal regime value is {v_opt:.6g}; value ratios need it strictly positive "
            "(with no treatment effects every regime is equally good)")
    return v_opt


def run_power(config, progress=None):
    """Success probability and its Monte Carlo SE at every N of the grid."""
    v_opt = _checked_v_opt(config)
    result = PowerResult(config, v_opt)
    for n in config.n_grid:
        result.points.append(_run_point(config, n, config.n_replicates, v_opt, progress))
    return result


@dataclass
class Confirmation:
    point: PowerPoint
    target: float = 0.80

    @property
    def lower(self):
        return self.point.p_hat - 2.0 * self.point.mc_se

    @property
    def confirmed(self):
        return self.lower >= self.target


def confirm_at(n, config, target=0.80, n_replicates=None):
    """Confirmatory run at one N: power minus two SEs must reach ``target``."""
    v_opt = _checked_v_opt(config)
    reps = config.confirm_replicates if n_replicates is None else int(n_replicates)
    return Confirmation(_run_point(config, int(n), reps, v_opt), target)


__all__ = ["PowerConfig", "PowerResult", "PowerPoint", "Confirmation", "PowerAborted",
           "run_power", "confirm_at", "DEFAULT_N_GRID", "PRESETS"]

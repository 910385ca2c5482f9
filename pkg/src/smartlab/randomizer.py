"""Covariate-adaptive minimization with treatment exclusions.

Every assignment consumes exactly two uniforms from the random stream, one
to break ties among the minimizing arms and one for the biased coin.  The
scalar path (:func:`assign`) and the compiled batch path
(:func:`minimize_sequence`) therefore produce identical assignments from
the same generator state.
"""
import csv
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numba import njit

from .core import ARMS, N_ARMS, ActionKind, Arm, ResponderCategory

STAGE1_FACTORS = ("dep_anx", "pain_duration_5y", "opioid_use", "phenotyping_consent")
AUGMENT_FACTOR = "augment"
TIE_RTOL = 1e-12
CODINGS = ("own_level", "indicator")


@dataclass(frozen=True)
class MinimizationConfig:
    rho: float = 2.0 / 3.0
    factor_weights: tuple = (1.0, 1.0, 1.0, 1.0)
    arm_weights: Optional[tuple] = None
    factor_names: tuple = STAGE1_FACTORS
    n_arms: int = N_ARMS
    # "own_level": counts at the participant's own level of each factor (a
    # level-0 participant is balanced against other level-0 participants).
    # "indicator": counts of factor value one, so level-0 participants add
    # nothing to the score.
    coding: str = "own_level"

    def __post_init__(self):
        if self.coding not in CODINGS:
            raise ValueError(f"coding must be one of {CODINGS}, got {self.coding!r}")
        object.__setattr__(self, "factor_weights", tuple(float(w) for w in self.factor_weights))
        if self.arm_weights is None:
            object.__setattr__(self, "arm_weights", (1.0,) * self.n_arms)
        object.__setattr__(self, "arm_weights", tuple(float(w) for w in self.arm_weights))
        object.__setattr__(self, "factor_names", tuple(self.factor_names))
        if not 0.0 < self.rho <= 1.0:
            raise ValueError(f"rho must lie in (0, 1], got {self.rho}")
        if not self.factor_weights:
            raise ValueError("need at least one balancing factor")
        if min(self.factor_weights) < 0 or min(self.arm_weights) < 0:
            raise ValueError("weights must be >= 0")
        if len(self.factor_names) != len(self.factor_weights):
            raise ValueError("one name per balancing factor")
        if len(self.arm_weights) != self.n_arms or self.n_arms < 2:
            raise ValueError("one arm weight per arm, at least two arms")

    @property
    def n_factors(self):
        return len(self.factor_weights)

    @classmethod
    def stage1(cls, rho=2.0 / 3.0, n_factors=4, coding="own_level"):
        names = STAGE1_FACTORS if n_factors == 4 else tuple(f"f{i + 1}" for i in range(n_factors))
        return cls(rho=rho, factor_weights=(1.0,) * n_factors, factor_names=names,
                   coding=coding)

    @classmethod
    def stage2(cls, intermediate=False, rho=2.0 / 3.0, n_arms=N_ARMS, coding="own_level"):
        """Visit-1 factors with pain duration and phenotyping consent doubled.

        Intermediate responders' treatment minimization adds the
        augment/switch indicator as a fifth factor.
        """
        weights = (1.0, 2.0, 1.0, 2.0) + ((1.0,) if intermediate else ())
        names = STAGE1_FACTORS + ((AUGMENT_FACTOR,) if intermediate else ())
        return cls(rho=rho, factor_weights=weights, factor_names=names, n_arms=n_arms,
                   coding=coding)

    @classmethod
    def augment_switch(cls, rho=2.0 / 3.0, coding="own_level"):
        """Two-option minimization (0 = Augment, 1 = Switch) on stage-2 factors."""
        return cls(rho=rho, factor_weights=(1.0, 2.0, 1.0, 2.0), factor_names=STAGE1_FACTORS,
                   n_arms=2, coding=coding)


@dataclass
class MinimizationState:
    """Counts behind the imbalance score; grows only by :meth:`record`."""

    n_arms: int
    n_factors: int
    counts: np.ndarray = None
    arm_totals: np.ndarray = None
    site_totals: np.ndarray = None
    log: list = field(default_factory=list)

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros((self.n_arms, self.n_factors), dtype=np.int64)
        if self.arm_totals is None:
            self.arm_totals = np.zeros(self.n_arms, dtype=np.int64)
        if self.site_totals is None:
            self.site_totals = np.zeros((self.n_arms, 0), dtype=np.int64)

    @classmethod
    def for_config(cls, config):
        return cls(config.n_arms, config.n_factors)

    def record(self, x, arm, site=0):
        x = np.asarray(x, dtype=np.int64)
        if x.shape != (self.n_factors,):
            raise ValueError(f"factor vector needs {self.n_factors} entries")
        if site >= self.site_totals.shape[1]:
            grown = np.zeros((self.n_arms, site + 1), dtype=np.int64)
            grown[:, :self.site_totals.shape[1]] = self.site_totals
            self.site_totals = grown
        self.counts[arm] += x
        self.arm_totals[arm] += 1
        self.site_totals[arm, site] += 1
        self.log.append((tuple(int(v) for v in x), int(arm), int(site)))

    @classmethod
    def replay(cls, n_arms, n_factors, log):
        state = cls(n_arms, n_factors)
        for x, arm, site in log:
            state.record(x, arm, site)
        return state


def _check_x(x, config):
    x = np.asarray(x)
    if x.shape != (config.n_factors,):
        raise ValueError(f"factor vector has {x.size} entries, config has {config.n_factors}")
    if not np.all((x == 0) | (x == 1)):
        raise ValueError("factors are coded 0/1")
    return x.astype(np.int64)


def imbalance_score(state, x, candidate, config):
    """Marginal discrepancy if the participant joined ``candidate``.

    ``max over other arms j of sum_p w_p |(n[candidate, p] + x_p) - n[j, p]|``

    With ``indicator`` coding ``n[k, p]`` counts arm-k participants with
    factor p equal to one.  With ``own_level`` coding it counts arm-k
    participants sharing this participant's level of factor p, and the
    hypothetical addition is always one.
    """
    x = _check_x(x, config)
    w = np.asarray(config.factor_weights)
    if config.coding == "indicator":
        n, add = state.counts, x
    else:
        n = np.where(x == 1, state.counts, state.arm_totals[:, None] - state.counts)
        add = 1
    hyp = n[candidate] + add
    others = [j for j in range(config.n_arms) if j != candidate]
    return float(max(w @ np.abs(hyp - n[j]) for j in others))


def all_scores(state, x, config):
    """Arm-weighted scores for every arm, feasible or not."""
    alpha = np.asarray(config.arm_weights)
    return np.array([alpha[k] * imbalance_score(state, x, k, config)
                     for k in range(config.n_arms)])


def _minimizers(scores, feasible):
    fs = scores[feasible]
    lo = fs.min()
    tol = TIE_RTOL * max(1.0, abs(lo))
    return [k for k in feasible if scores[k] <= lo + tol]


def _coin(feasible, favored, u_coin, rho):
    if len(feasible) == 1 or u_coin < rho:
        return favored, True
    others = [k for k in feasible if k != favored]
    idx = min(int((u_coin - rho) / (1.0 - rho) * len(others)), len(others) - 1)
    return others[idx], False


@dataclass(frozen=True)
class Decision:
    arm: int
    scores: tuple
    favored: int
    coin_favored: bool
    u_tie: float
    u_coin: float


def decide(state, x, feasible, config, u_tie, u_coin):
    """One minimization step from explicit uniforms; does not touch state."""
    feasible = sorted({int(k) for k in feasible})
    if not feasible:
        raise ValueError("empty feasible set")
    if feasible[0] < 0 or feasible[-1] >= config.n_arms:
        raise ValueError(f"feasible arms must lie in 0..{config.n_arms - 1}")
    scores = all_scores(state, x, config)
    ties = _minimizers(scores, feasible)
    favored = ties[min(int(u_tie * len(ties)), len(ties) - 1)]
    arm, hit = _coin(feasible, favored, u_coin, config.rho)
    return Decision(arm, tuple(float(s) for s in scores), favored, hit, u_tie, u_coin)


def assign(state, x, feasible, config, rng, site=0, return_decision=False):
    """Assign one participant and update ``state``.

    Scores are computed for every arm, the minimum is taken over the
    feasible arms only, ties are broken uniformly, then the favored arm is
    given with probability ``rho`` and each other feasible arm with
    probability ``(1 - rho) / (|feasible| - 1)``.
    """
    x = _check_x(x, config)
    u_tie, u_coin = rng.random(2)
    d = decide(state, x, feasible, config, u_tie, u_coin)
    state.record(x, d.arm, site)
    return d if return_decision else d.arm


def assign_augment_or_switch(state2, x, config, rng, site=0):
    """Minimization over the two options Augment (0) and Switch (1)."""
    if config.n_arms != 2:
        raise ValueError("augment/switch minimization needs a two-option config")
    arm = assign(state2, x, (0, 1), config, rng, site)
    return ActionKind.AUGMENT if arm == 0 else ActionKind.SWITCH


def stage2_factor_vector(factors, augment=None):
    """Visit-1 factor vector, with the augment indicator appended when given.

    ``factors`` is a mapping with the four Visit-1 factor names or a
    4-sequence in the same order.
    """
    if isinstance(factors, dict):
        missing = [f for f in STAGE1_FACTORS if factors.get(f) is None]
        if missing:
            raise ValueError(f"missing factor values: {missing}")
        values = [factors[f] for f in STAGE1_FACTORS]
    else:
        values = list(factors)
        if len(values) != 4 or any(v is None for v in values):
            raise ValueError("need the four Visit-1 factor values")
    if augment is not None:
        values.append(int(augment))
    out = tuple(int(v) for v in values)
    if any(v not in (0, 1) for v in out):
        raise ValueError("factors are coded 0/1")
    return out


# ---------------------------------------------------------------------------
# batch kernel


@njit(cache=True)
def _sequence_kernel(factors, feasible, sites, weights, alpha, rho, uniforms,
                     counts, site_counts, own_level):
    n, p = factors.shape
    k_arms = counts.shape[0]
    arms = np.empty(n, dtype=np.int64)
    scores = np.empty(k_arms)
    ties = np.empty(k_arms, dtype=np.int64)
    others = np.empty(k_arms, dtype=np.int64)
    totals = np.zeros(k_arms, dtype=np.int64)
    for t in range(n):
        for k in range(k_arms):
            worst = 0.0
            for j in range(k_arms):
                if j == k:
                    continue
                s = 0.0
                for q in range(p):
                    if not own_level:
                        d = counts[k, q] + factors[t, q] - counts[j, q]
                    elif factors[t, q] == 1:
                        d = counts[k, q] + 1 - counts[j, q]
                    else:
                        d = (totals[k] - counts[k, q]) + 1 - (totals[j] - counts[j, q])
                    s += weights[q] * abs(d)
                if s > worst:
                    worst = s
            scores[k] = alpha[k] * worst
        lo = np.inf
        for k in range(k_arms):
            if feasible[t, k] and scores[k] < lo:
                lo = scores[k]
        tol = 1e-12 * max(1.0, abs(lo))
        n_ties = 0
        n_feas = 0
        for k in range(k_arms):
            if feasible[t, k]:
                n_feas += 1
                if scores[k] <= lo + tol:
                    ties[n_ties] = k
                    n_ties += 1
        favored = ties[min(int(uniforms[t, 0] * n_ties), n_ties - 1)]
        u = uniforms[t, 1]
        if n_feas == 1 or u < rho:
            arm = favored
        else:
            n_oth = 0
            for k in range(k_arms):
                if feasible[t, k] and k != favored:
                    others[n_oth] = k
                    n_oth += 1
            arm = others[min(int((u - rho) / (1.0 - rho) * n_oth), n_oth - 1)]
        arms[t] = arm
        totals[arm] += 1
        for q in range(p):
            counts[arm, q] += factors[t, q]
        site_counts[arm, sites[t]] += 1
    return arms


def minimize_sequence(factors, feasible, config, rng, sites=None, return_state=False):
    """Assign a whole enrollment sequence in order.

    ``feasible`` is an (n, n_arms) boolean mask or None for all arms.  The
    result matches calling :func:`assign` once per row with the same
    generator.
    """
    factors = np.ascontiguousarray(factors, dtype=np.int64)
    n = factors.shape[0]
    if factors.shape[1] != config.n_factors:
        raise ValueError("factor matrix width does not match config")
    if feasible is None:
        feasible = np.ones((n, config.n_arms), dtype=np.bool_)
    feasible = np.ascontiguousarray(feasible, dtype=np.bool_)
    if not feasible.any(axis=1).all():
        raise ValueError("empty feasible set")
    sites = np.zeros(n, dtype=np.int64) if sites is None else np.asarray(sites, dtype=np.int64)
    n_sites = int(sites.max()) + 1 if n else 1
    counts = np.zeros((config.n_arms, config.n_factors), dtype=np.int64)
    site_counts = np.zeros((config.n_arms, n_sites), dtype=np.int64)
    uniforms = rng.random((n, 2))
    arms = _sequence_kernel(factors, feasible, sites, np.asarray(config.factor_weights),
                            np.asarray(config.arm_weights), float(config.rho), uniforms,
                            counts, site_counts, config.coding == "own_level")
    if return_state:
        return arms, counts, site_counts
    return arms


def exclusion_mask(excluded, n_arms=N_ARMS):
    """Feasible-arm mask from excluded arm codes (-1 = no exclusion)."""
    excluded = np.asarray(excluded, dtype=np.int64)
    mask = np.ones((len(excluded), n_arms), dtype=bool)
    has = excluded >= 0
    mask[np.flatnonzero(has), excluded[has]] = False
    return mask


# ---------------------------------------------------------------------------
# audit log

AUDIT_COLUMNS = (["id", "context", "site", "factors", "feasible"]
                 + [f"score_{i}" for i in range(N_ARMS)]
                 + ["favored", "coin", "arm", "stream_pos", "u_tie", "u_coin"])


def _join(values):
    return ";".join(str(int(v)) for v in values)


def _split(text):
    return tuple(int(v) for v in text.split(";")) if text else ()


class AuditLog:
    """Append-only CSV of every assignment, enough to re-derive each one."""

    def __init__(self, path):
        self.path = path
        with open(path, "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(AUDIT_COLUMNS)

    def append(self, pid, context, site, x, feasible, decision, stream_pos):
        scores = list(decision.scores) + [""] * (N_ARMS - len(decision.scores))
        row = ([pid, context, site, _join(x), _join(sorted(feasible))]
               + [repr(float(s)) if s != "" else "" for s in scores]
               + [decision.favored, "favored" if decision.coin_favored else "other",
                  decision.arm, stream_pos, repr(float(decision.u_tie)),
                  repr(float(decision.u_coin))])
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(row)


def read_audit_log(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != tuple(AUDIT_COLUMNS):
            raise ValueError(f"{path}: not an assignment audit log")
        return list(reader)


def replay_audit_log(rows, configs, rng=None):
    """Re-derive every logged assignment from replayed state.

    ``configs`` maps context name to :class:`MinimizationConfig`.  With
    ``rng`` (a generator seeded like the original run) the logged uniforms
    are also checked against the stream.  Returns a list of mismatch
    messages; empty means the log verifies.
    """
    states = {}
    problems = []
    for i, row in enumerate(rows):
        ctx = row["context"]
        cfg = configs[ctx]
        state = states.setdefault(ctx, MinimizationState.for_config(cfg))
        x = _split(row["factors"])
        feasible = _split(row["feasible"])
        u_tie, u_coin = float(row["u_tie"]), float(row["u_coin"])
        if rng is not None:
            fresh = rng.random(2)
            if fresh[0] != u_tie or fresh[1] != u_coin:
                problems.append(f"row {i}: uniforms differ from the seeded stream")
        d = decide(state, x, feasible, cfg, u_tie, u_coin)
        logged = [float(row[f"score_{k}"]) for k in range(cfg.n_arms)]
        if logged != list(d.scores):
            problems.append(f"row {i}: scores {logged} != replayed {list(d.scores)}")
        if int(row["arm"]) != d.arm or int(row["favored"]) != d.favored:
            problems.append(f"row {i}: arm {row['arm']} != replayed {d.arm}")
        if row["coin"] != ("favored" if d.coin_favored else "other"):
            problems.append(f"row {i}: coin outcome {row['coin']!r} does not match replay")
        if int(row["stream_pos"]) != 2 * i:
            problems.append(f"row {i}: stream position {row['stream_pos']} != {2 * i}")
        state.record(x, d.arm, int(row["site"]))
    return problems


# ---------------------------------------------------------------------------
# full two-stage procedure


def config_for_context(context, rho=2.0 / 3.0, coding="own_level"):
    """Minimization settings used for a named randomization context."""
    if context == "stage1":
        return MinimizationConfig.stage1(rho=rho, coding=coding)
    if context == "augment_switch":
        return MinimizationConfig.augment_switch(rho=rho, coding=coding)
    if context.startswith("stage2:"):
        return MinimizationConfig.stage2(intermediate=context.endswith(":intermediate"), rho=rho,
                                         coding=coding)
    raise ValueError(f"unknown randomization context {context!r}")


class SmartRandomizer:
    """Runs every randomization of the two-stage design from one stream.

    Contexts: ``stage1`` for the initial arm, ``augment_switch`` for
    intermediate responders, and stage-2 treatment minimization kept
    separately per (stage-1 arm, responder category) stratum.
    """

    def __init__(self, rng, rho=2.0 / 3.0, audit_log=None, coding="own_level"):
        self.rng = rng
        self.rho = rho
        self.coding = coding
        self.audit_log = audit_log
        self.states = {}
        self.draws = 0

    def config_for(self, context):
        return config_for_context(context, self.rho, self.coding)

    def configs(self):
        return {ctx: self.config_for(ctx) for ctx in self.states}

    def _step(self, context, pid, x, feasible, site):
        cfg = self.config_for(context)
        state = self.states.setdefault(context, MinimizationState.for_config(cfg))
        pos = self.draws
        d = assign(state, x, feasible, cfg, self.rng, site, return_decision=True)
        self.draws += 2
        if self.audit_log is not None:
            self.audit_log.append(pid, context, site, x, feasible, d, pos)
        return d.arm

    def stage1(self, pid, x, excluded=None, site=0):
        feasible = [int(a) for a in ARMS if a != excluded]
        return Arm(self._step("stage1", pid, tuple(x), feasible, site))

    def stage2(self, pid, x, a1, responder, excluded=None, site=0):
        """Returns the :class:`~smartlab.core.Stage2Action` for one participant."""
        from .core import Stage2Action
        a1 = Arm(a1)
        responder = ResponderCategory(responder)
        x = stage2_factor_vector(x)
        if responder is ResponderCategory.BEST_RESPONDER:
            return Stage2Action.keep(a1)
        if responder is ResponderCategory.INTERMEDIATE:
            option = self._step("augment_switch", pid, x, (0, 1), site)
            kind = ActionKind.AUGMENT if option == 0 else ActionKind.SWITCH
            x = stage2_factor_vector(x, augment=int(kind is ActionKind.AUGMENT))
            ctx = f"stage2:{a1.name}:intermediate"
        else:
            kind = (ActionKind.AUGMENT if responder is ResponderCategory.RESPONDER_HIGH_PEG
                    else ActionKind.SWITCH)
            ctx = f"stage2:{a1.name}:{responder.name.lower()}"
        feasible = [int(k) for k in ARMS if k != a1 and k != excluded]
        new_arm = Arm(self._step(ctx, pid, x, feasible, site))
        if kind is ActionKind.AUGMENT:
            return Stage2Action.augment(a1, new_arm)
        return Stage2Action.switch(a1, new_arm)

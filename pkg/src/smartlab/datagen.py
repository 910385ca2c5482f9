"""Synthetic SMART data from the sparse stage-wise outcome model, plus
site-correlated binary factors for the randomization study."""
from dataclasses import dataclass, field, asdict
from functools import lru_cache

import numpy as np
from scipy import stats

from .core import (ARMS, N_ARMS, ActionKind, Arm, ParticipantRecord, ResponderCategory,
                   Stage2Action, all_stage2_actions, feasible_stage2)

N_BINARY = 5
N_NORMAL = 5
STAGE2_MODES = ("unrestricted", "responder")


@dataclass(frozen=True)
class DgmConfig:
    """Coefficients of the stage-1 and stage-2 mean outcome models.

    ``tailoring`` holds ``(covariate index, arm, coef)`` terms, ``prognostic``
    holds ``(covariate index, coef)`` and ``combo`` holds
    ``(arm, arm, coef)`` pairwise stage-2 terms.  Covariate indices are
    0-based, so the tailoring covariate Z1 is index 0.

    ``bern_probs`` gives P(Z_l = +1) for the five binary covariates in
    order; the default puts the largest probability on the tailoring
    covariate.  ``stage2_mode="responder"`` restricts stage-2 actions by the
    simulated responder category; ``"unrestricted"`` lets every participant
    take any stage-2 action.
    """

    n_completers: int = 630
    main_effects: tuple = (0.1, 0.25, 0.3, 0.4)
    tailoring: tuple = ((0, 3, 0.3),)
    prognostic: tuple = ((1, 0.25), (2, -0.25))
    combo: tuple = ((1, 2, -0.1), (1, 3, -1.0), (2, 3, -0.1))
    bern_probs: tuple = (0.9, 0.8, 0.7, 0.6, 0.5)
    normal_sd: float = 0.5
    normal_scale: str = "sd"
    noise_sd: float = 1.0
    scenario: str = "sparse"
    stage2_mode: str = "responder"

    def __post_init__(self):
        to_t = lambda v: tuple(tuple(x) if isinstance(x, (list, tuple)) else x for x in v)
        for name in ("main_effects", "tailoring", "prognostic", "combo", "bern_probs"):
            object.__setattr__(self, name, to_t(getattr(self, name)))
        if len(self.main_effects) != N_ARMS:
            raise ValueError("main_effects needs one value per arm")
        if len(self.bern_probs) != N_BINARY:
            raise ValueError(f"bern_probs needs {N_BINARY} values")
        if not all(0.0 < p < 1.0 for p in self.bern_probs):
            raise ValueError("bern_probs must lie in (0, 1)")
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be >= 0")
        if self.normal_scale not in ("sd", "variance"):
            raise ValueError("normal_scale is 'sd' or 'variance'")
        if self.stage2_mode not in STAGE2_MODES:
            raise ValueError(f"stage2_mode must be one of {STAGE2_MODES}")
        if self.n_completers < 1:
            raise ValueError("n_completers must be >= 1")
        for idx, arm, _ in self.tailoring:
            if not (0 <= idx < self.n_covariates and 0 <= arm < N_ARMS):
                raise ValueError(f"bad tailoring term {(idx, arm)}")
        for idx, _ in self.prognostic:
            if not 0 <= idx < self.n_covariates:
                raise ValueError(f"bad prognostic index {idx}")
        for a, b, _ in self.combo:
            if a == b or not (0 <= a < N_ARMS and 0 <= b < N_ARMS):
                raise ValueError(f"bad combo pair {(a, b)}")

    @property
    def n_covariates(self):
        return N_BINARY + N_NORMAL

    @property
    def normal_sd_value(self):
        return self.normal_sd if self.normal_scale == "sd" else float(np.sqrt(self.normal_sd))

    def covariate_means(self):
        return np.concatenate([2.0 * np.asarray(self.bern_probs) - 1.0, np.zeros(N_NORMAL)])

    def prognostic_constant(self):
        """Policy-free mean of the prognostic terms, removed before forming ratios."""
        mu = self.covariate_means()
        return float(sum(c * mu[i] for i, c in self.prognostic))

    def replace(self, **changes):
        d = asdict(self)
        d.update(changes)
        return DgmConfig(**d)

    def to_dict(self):
        return asdict(self)


def sparse_dgm(**overrides):
    return DgmConfig(**overrides)


def dense_dgm(**overrides):
    """Many small tailoring and prognostic effects spread over covariates.

    No reference numbers exist for this scenario; it is shipped for
    exploration only.
    """
    params = dict(
        scenario="dense",
        tailoring=((0, 3, 0.1), (1, 2, 0.1), (2, 1, 0.1), (3, 3, 0.1), (4, 0, 0.1),
                   (5, 2, 0.1), (6, 1, 0.1), (7, 3, 0.1)),
        prognostic=((1, 0.1), (2, -0.1), (3, 0.1), (5, 0.1), (6, -0.1), (8, 0.1)),
    )
    params.update(overrides)
    return DgmConfig(**params)


@dataclass(frozen=True)
class SiteCovariateConfig:
    n_sites: int = 8
    icc: float = 0.05
    marginal_p: float = 0.5
    n_factors: int = 4

    def __post_init__(self):
        if not 0.0 <= self.icc < 1.0:
            raise ValueError("icc must lie in [0, 1)")
        if not 0.0 < self.marginal_p < 1.0:
            raise ValueError("marginal_p must lie in (0, 1)")
        if self.n_sites < 1 or self.n_factors < 1:
            raise ValueError("need at least one site and one factor")
        p = self.marginal_p
        # site probabilities are Beta(a, b) with ICC = 1/(a+b+1); a, b > 0 needs icc > 0
        if self.icc > 0 and not (p * (1 - self.icc) / self.icc > 0):
            raise ValueError(f"infeasible (icc, p) = ({self.icc}, {p})")


# ---------------------------------------------------------------------------
# mean models


def q1(z, a1, dgm=DgmConfig()):
    """Stage-1 conditional mean.  ``z`` is (n, 10) or (10,), ``a1`` arm codes."""
    z = np.asarray(z, dtype=float)
    single = z.ndim == 1
    z2 = np.atleast_2d(z)
    a1 = np.broadcast_to(np.asarray(a1, dtype=np.int64), (z2.shape[0],))
    ind = np.zeros((z2.shape[0], N_ARMS))
    ind[np.arange(z2.shape[0]), a1] = 1.0
    out = _linear_part(z2, ind, dgm)
    return float(out[0]) if single else out


def q2(z, active, dgm=DgmConfig()):
    """Stage-2 conditional mean given the active-arm indicators.

    ``active`` is an (n, 4) 0/1 array, a single 4-tuple, or a
    :class:`Stage2Action`.
    """
    z = np.asarray(z, dtype=float)
    single = z.ndim == 1
    z2 = np.atleast_2d(z)
    if isinstance(active, Stage2Action):
        active = active.indicators()
    ind = np.broadcast_to(np.asarray(active, dtype=float), (z2.shape[0], N_ARMS))
    out = _linear_part(z2, ind, dgm)
    for a, b, c in dgm.combo:
        out = out + c * ind[:, a] * ind[:, b]
    return float(out[0]) if single else out


def _linear_part(z, ind, dgm):
    out = ind @ np.asarray(dgm.main_effects, dtype=float)
    for idx, arm, c in dgm.tailoring:
        out = out + c * z[:, idx] * ind[:, arm]
    for idx, c in dgm.prognostic:
        out = out + c * z[:, idx]
    return out


# ---------------------------------------------------------------------------
# covariates


def draw_covariates(dgm, rng, n=None):
    """Z1..Z5 Bernoulli recoded to {-1, +1}; Z6..Z10 normal with mean 0."""
    size = 1 if n is None else n
    p = np.asarray(dgm.bern_probs)
    binary = np.where(rng.random((size, N_BINARY)) < p, 1.0, -1.0)
    normal = rng.normal(0.0, dgm.normal_sd_value, (size, N_NORMAL))
    z = np.hstack([binary, normal])
    return z[0] if n is None else z


def draw_site_correlated_factors(config, n, rng):
    """Binary factors correlated within site through a beta-binomial model.

    Each site draws its own success probability per factor from
    ``Beta(p(1-icc)/icc, (1-p)(1-icc)/icc)``, which has mean ``p`` and gives
    an intra-class correlation of exactly ``icc`` for the 0/1 outcomes.
    Participants go to sites uniformly at random.  Returns ``(factors, site)``.
    """
    if n <= 0:
        raise ValueError("n must be > 0")
    c = config
    site = rng.integers(0, c.n_sites, size=n)
    if c.icc == 0.0:
        probs = np.full((c.n_sites, c.n_factors), c.marginal_p)
    else:
        scale = (1.0 - c.icc) / c.icc
        probs = rng.beta(c.marginal_p * scale, (1.0 - c.marginal_p) * scale,
                         size=(c.n_sites, c.n_factors))
    factors = (rng.random((n, c.n_factors)) < probs[site]).astype(np.int8)
    return factors, site


def anova_icc(values, groups):
    """One-way ANOVA estimator of the intra-class correlation."""
    values = np.asarray(values, dtype=float)
    groups = np.asarray(groups)
    labels, inv, sizes = np.unique(groups, return_inverse=True, return_counts=True)
    g = len(labels)
    n = len(values)
    means = np.bincount(inv, weights=values) / sizes
    grand = values.mean()
    ssb = float((sizes * (means - grand) ** 2).sum())
    ssw = float(((values - means[inv]) ** 2).sum())
    msb = ssb / (g - 1)
    msw = ssw / (n - g)
    n0 = (n - (sizes ** 2).sum() / n) / (g - 1)
    return (msb - msw) / (msb + (n0 - 1) * msw)


# ---------------------------------------------------------------------------
# responder categories in simulation


@lru_cache(maxsize=32)
def responder_cutoffs(dgm, n_draws=1_000_000, seed=20_240_101):
    """Quartiles of the stage-1 outcome under uniform stage-1 assignment.

    Highest quarter maps to best responders, lowest to non-responders.  The
    draw is seeded so cutoffs are a fixed property of the model.
    """
    rng = np.random.default_rng(seed)
    z = draw_covariates(dgm, rng, n_draws)
    a1 = rng.integers(0, N_ARMS, n_draws)
    y1 = q1(z, a1, dgm) + dgm.noise_sd * rng.standard_normal(n_draws)
    return tuple(float(q) for q in np.quantile(y1, [0.25, 0.5, 0.75]))


def responder_from_y1(y1, cutoffs):
    """Vectorized quartile rule returning category codes 1..4."""
    lo, mid, hi = cutoffs
    y1 = np.asarray(y1)
    return np.select([y1 >= hi, y1 >= mid, y1 >= lo], [1, 2, 3], default=4).astype(np.int64)


def responder_probabilities(mean_y1, noise_sd, cutoffs):
    """P(category | stage-1 mean) for categories 1..4 (columns)."""
    mean_y1 = np.atleast_1d(np.asarray(mean_y1, dtype=float))
    lo, mid, hi = cutoffs
    if noise_sd == 0:
        cats = responder_from_y1(mean_y1, cutoffs)
        return np.eye(4)[cats - 1]
    cdf = lambda c: stats.norm.cdf((c - mean_y1) / noise_sd)
    p_hi, p_mid, p_lo = cdf(hi), cdf(mid), cdf(lo)
    return np.column_stack([1 - p_hi, p_hi - p_mid, p_mid - p_lo, p_lo])


# ---------------------------------------------------------------------------
# action tables
#
# Stage-2 actions are indexed per stage-1 arm so that vectorized code can
# work with (a1, action index) pairs.  ACTION_ACTIVE[a1, i] is the 0/1
# active-arm vector, ACTION_VALID[a1, i] whether slot i exists for a1, and
# ACTION_FEASIBLE[a1, category, i] whether it is open to that responder.

def _build_tables():
    width = max(len(all_stage2_actions(a)) for a in ARMS)
    active = np.zeros((N_ARMS, width, N_ARMS))
    valid = np.zeros((N_ARMS, width), dtype=bool)
    feas = np.zeros((N_ARMS, 5, width), dtype=bool)
    actions = []
    for a in ARMS:
        row = all_stage2_actions(a)
        actions.append(row)
        for i, act in enumerate(row):
            active[a, i] = act.indicators()
            valid[a, i] = True
        for cat in ResponderCategory:
            for act in feasible_stage2(a, cat):
                feas[a, cat, row.index(act)] = True
    feas[:, 0, :] = valid  # category 0 = unrestricted
    return actions, active, valid, feas


STAGE2_ACTIONS, ACTION_ACTIVE, ACTION_VALID, ACTION_FEASIBLE = _build_tables()
N_ACTION_SLOTS = ACTION_ACTIVE.shape[1]


def action_index(action):
    return STAGE2_ACTIONS[action.a1].index(action)


def feasibility_mask(a1, responder, excluded=None, mode="unrestricted"):
    """Boolean (n, slots) mask of stage-2 actions open to each participant."""
    a1 = np.asarray(a1, dtype=np.int64)
    cat = np.zeros_like(a1) if mode == "unrestricted" else np.asarray(responder, dtype=np.int64)
    mask = ACTION_FEASIBLE[a1, cat].copy()
    if excluded is not None:
        excluded = np.asarray(excluded, dtype=np.int64)
        has = excluded >= 0
        uses = ACTION_ACTIVE[a1][np.arange(len(a1)), :, np.where(has, excluded, 0)] > 0
        mask &= ~(uses & has[:, None])
    return mask


# ---------------------------------------------------------------------------
# trial simulation


@dataclass
class TrialData:
    """Column-oriented trial data; the fast path for estimation."""

    z: np.ndarray
    a1: np.ndarray
    y1: np.ndarray
    responder: np.ndarray
    a2: np.ndarray          # action slot index into STAGE2_ACTIONS[a1]
    y2: np.ndarray
    excluded: np.ndarray = None
    site: np.ndarray = None

    def __len__(self):
        return len(self.a1)

    @property
    def active(self):
        return ACTION_ACTIVE[self.a1, self.a2]

    def to_records(self):
        n = len(self)
        exc = self.excluded if self.excluded is not None else np.full(n, -1)
        site = self.site if self.site is not None else np.zeros(n, dtype=int)
        out = []
        for i in range(n):
            a1 = Arm(int(self.a1[i]))
            out.append(ParticipantRecord(
                id=i + 1, covariates=tuple(float(v) for v in self.z[i]), a1=a1,
                y1=float(self.y1[i]), responder=ResponderCategory(int(self.responder[i])),
                a2=STAGE2_ACTIONS[a1][int(self.a2[i])], y2=float(self.y2[i]),
                excluded_arm=None if exc[i] < 0 else Arm(int(exc[i])), site=int(site[i])))
        return out

    @classmethod
    def from_records(cls, records):
        records = list(records)
        if not records:
            raise ValueError("no records")
        if not all(r.completer for r in records):
            raise ValueError("every record needs an observed stage-2 outcome")
        return cls(
            z=np.array([r.covariates for r in records], dtype=float),
            a1=np.array([int(r.a1) for r in records], dtype=np.int64),
            y1=np.array([r.y1 for r in records], dtype=float),
            responder=np.array([int(r.responder) for r in records], dtype=np.int64),
            a2=np.array([action_index(r.a2) for r in records], dtype=np.int64),
            y2=np.array([r.y2 for r in records], dtype=float),
            excluded=np.array([-1 if r.excluded_arm is None else int(r.excluded_arm)
                               for r in records], dtype=np.int64),
            site=np.array([r.site for r in records], dtype=np.int64),
        )


def _uniform_choice(mask, rng):
    """One uniformly chosen True column per row of a boolean mask."""
    u = rng.random(mask.shape[0])
    counts = mask.sum(axis=1)
    target = np.floor(u * counts).astype(np.int64)
    csum = np.cumsum(mask, axis=1) - 1
    return np.argmax((csum == target[:, None]) & mask, axis=1)


def simulate_arrays(dgm, rng, n=None, policy=None, stage1="uniform", min_config=None):
    """Simulate one trial of completers as :class:`TrialData`.

    ``policy`` (optional) is an object with ``stage1(z)`` and
    ``stage2(z, a1, responder)`` returning arm codes / action slots; it
    replaces randomization at both stages.  ``stage1`` is ``"uniform"`` or
    ``"minimization"`` (first four binary covariates as balancing factors).
    """
    n = dgm.n_completers if n is None else n
    z = draw_covariates(dgm, rng, n)
    if policy is not None:
        a1 = np.asarray(policy.stage1(z), dtype=np.int64)
    elif stage1 == "uniform":
        a1 = rng.integers(0, N_ARMS, n)
    elif stage1 == "minimization":
        from .randomizer import MinimizationConfig, minimize_sequence
        cfg = min_config or MinimizationConfig.stage1()
        factors = (z[:, :cfg.n_factors] > 0).astype(np.int64)
        a1 = minimize_sequence(factors, None, cfg, rng)
    else:
        raise ValueError(f"unknown stage-1 assignment {stage1!r}")
    y1 = q1(z, a1, dgm) + dgm.noise_sd * rng.standard_normal(n)
    responder = responder_from_y1(y1, responder_cutoffs(dgm))
    if policy is not None:
        a2 = np.asarray(policy.stage2(z, a1, responder), dtype=np.int64)
    else:
        mask = feasibility_mask(a1, responder, mode=dgm.stage2_mode)
        a2 = _uniform_choice(mask, rng)
    active = ACTION_ACTIVE[a1, a2]
    y2 = q2(z, active, dgm) + dgm.noise_sd * rng.standard_normal(n)
    return TrialData(z=z, a1=a1, y1=y1, responder=responder, a2=a2, y2=y2,
                     excluded=np.full(n, -1, dtype=np.int64),
                     site=np.zeros(n, dtype=np.int64))


def simulate_trial(dgm, rng, policy=None, stage1="uniform"):
    """List-of-records front end to :func:`simulate_arrays`."""
    return simulate_arrays(dgm, rng, policy=policy, stage1=stage1).to_records()

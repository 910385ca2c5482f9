"""Q-learning for the two-stage regime with Lasso-fitted Q-functions,
plus exact and Monte Carlo evaluation of regime values."""
import itertools
import warnings
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, clone

from .core import ARMS, N_ARMS, Arm
from .datagen import (ACTION_ACTIVE, ACTION_VALID, N_BINARY, STAGE2_ACTIONS, TrialData,
                      draw_covariates, feasibility_mask, q1, q2, responder_cutoffs,
                      responder_from_y1, responder_probabilities)
from .lasso import LassoCVCD

ALL_PAIRS = tuple(itertools.combinations(range(N_ARMS), 2))
MODEL_PAIRS = ((1, 2), (1, 3), (2, 3))


@dataclass(frozen=True)
class DesignSpec:
    """Column layout of the stage-wise regressions.

    Stage 1: covariates, arm one-hot, arm x covariate.
    Stage 2: covariates, active-arm indicators, pairwise products of
    active indicators, active x covariate.  ``pairs`` is ``"all"`` (six
    pairs), ``"model"`` (the three pairs with combination effects in the
    generating model) or an explicit tuple of arm pairs.  With
    ``reference_arm`` set, that arm's stage-1 indicator and its interactions
    are dropped so the stage-1 design has full column rank.
    """

    n_covariates: int = 10
    pairs: object = "all"
    reference_arm: object = None
    covariate_names: tuple = ()

    @property
    def pair_list(self):
        if self.pairs == "all":
            return ALL_PAIRS
        if self.pairs == "model":
            return MODEL_PAIRS
        return tuple(tuple(p) for p in self.pairs)

    @property
    def names(self):
        return self.covariate_names or tuple(f"z{i + 1}" for i in range(self.n_covariates))

    def _stage1_arms(self):
        return [a for a in ARMS if a != self.reference_arm]

    def stage1_columns(self):
        arms = self._stage1_arms()
        return (list(self.names) + [f"A1_{a.name}" for a in arms]
                + [f"A1_{a.name}:{c}" for a in arms for c in self.names])

    def stage2_columns(self):
        cols = list(self.names) + [f"A2_{a.name}" for a in ARMS]
        cols += [f"A2_{ARMS[i].name}*A2_{ARMS[j].name}" for i, j in self.pair_list]
        cols += [f"A2_{a.name}:{c}" for a in ARMS for c in self.names]
        return cols

    def stage1_design(self, z, a1):
        z = np.asarray(z, dtype=float)
        onehot = np.eye(N_ARMS)[np.asarray(a1, dtype=np.int64)]
        keep = [int(a) for a in self._stage1_arms()]
        onehot = onehot[:, keep]
        inter = (onehot[:, :, None] * z[:, None, :]).reshape(len(z), -1)
        return np.hstack([z, onehot, inter])

    def stage2_design(self, z, active):
        z = np.asarray(z, dtype=float)
        active = np.asarray(active, dtype=float)
        pairs = [active[:, i] * active[:, j] for i, j in self.pair_list]
        pair_block = np.column_stack(pairs) if pairs else np.zeros((len(z), 0))
        inter = (active[:, :, None] * z[:, None, :]).reshape(len(z), -1)
        return np.hstack([z, active, pair_block, inter])

    def stage1_blocks(self, coef):
        """Split stage-1 coefficients into (covariate, arm (4,), arm x covariate (4, p))."""
        p = self.n_covariates
        arms = [int(a) for a in self._stage1_arms()]
        coef = np.asarray(coef, dtype=float)
        main = np.zeros(N_ARMS)
        inter = np.zeros((N_ARMS, p))
        main[arms] = coef[p:p + len(arms)]
        inter[arms] = coef[p + len(arms):].reshape(len(arms), p)
        return coef[:p], main, inter

    def stage2_blocks(self, coef):
        """Split stage-2 coefficients into (covariate, arm, pair, arm x covariate)."""
        p = self.n_covariates
        n_pairs = len(self.pair_list)
        coef = np.asarray(coef, dtype=float)
        main = coef[p:p + N_ARMS]
        pair = coef[p + N_ARMS:p + N_ARMS + n_pairs]
        inter = coef[p + N_ARMS + n_pairs:].reshape(N_ARMS, p)
        return coef[:p], main, pair, inter


@dataclass
class QModel:
    stage: int
    coefficients: np.ndarray
    intercept: float
    lam: float
    columns: list = field(default_factory=list)

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.columns and len(self.columns) != len(self.coefficients):
            raise ValueError("one coefficient per design column")

    def predict(self, design):
        return np.asarray(design) @ self.coefficients + self.intercept

    def coefficient_table(self):
        rows = [("(intercept)", float(self.intercept))]
        rows += [(c, float(b)) for c, b in zip(self.columns, self.coefficients)]
        return rows


def _masked_argmax(values, mask):
    # ties go to the lowest slot index
    v = np.where(mask, values, -np.inf)
    return np.argmax(v, axis=1)


class QPolicy:
    """Argmax regime induced by fitted stage-1 and stage-2 Q-models."""

    def __init__(self, q1_model, q2_model, spec, mode="responder"):
        self.q1_model = q1_model
        self.q2_model = q2_model
        self.spec = spec
        self.mode = mode

    def stage2_values(self, z, a1):
        """Fitted Q2 for every action slot of each participant: (n, slots)."""
        # same numbers as predicting on stage2_design rows, without building them
        z = np.asarray(z, dtype=float)
        a1 = np.asarray(a1, dtype=np.int64)
        bz, main, pair, inter = self.spec.stage2_blocks(self.q2_model.coefficients)
        arm_eff = main + z @ inter.T                                    # (n, arms)
        active = ACTION_ACTIVE[a1]                                       # (n, slots, arms)
        vals = np.einsum("nsa,na->ns", active, arm_eff)
        for (i, j), c in zip(self.spec.pair_list, pair):
            if c != 0.0:
                vals += c * active[:, :, i] * active[:, :, j]
        vals += (self.q2_model.intercept + z @ bz)[:, None]
        return np.where(ACTION_VALID[a1], vals, -np.inf)

    def stage1_values(self, z):
        z = np.asarray(z, dtype=float)
        bz, main, inter = self.spec.stage1_blocks(self.q1_model.coefficients)
        return self.q1_model.intercept + (z @ bz)[:, None] + main + z @ inter.T

    def stage1(self, z):
        return np.argmax(self.stage1_values(z), axis=1)

    def stage2(self, z, a1, responder=None, excluded=None):
        mask = feasibility_mask(a1, responder, excluded, self.mode)
        return _masked_argmax(self.stage2_values(z, a1), mask)

    def describe(self):
        lines = ["stage 1: recommend argmax over arms of Q1(z, arm)",
                 f"stage 2 ({self.mode}): recommend argmax over feasible actions of Q2(z, action);"
                 " ties go to the first action in Keep/Augment/Switch order"]
        for stage, model in ((1, self.q1_model), (2, self.q2_model)):
            lines.append(f"Q{stage} lambda={model.lam:.6g}")
            lines += [f"  {name}\t{coef:.10g}" for name, coef in model.coefficient_table()
                      if coef != 0.0]
        return "\n".join(lines)


class FixedPolicy:
    """Same stage-1 arm and stage-2 action slot for everyone."""

    def __init__(self, a1, a2_slot, mode="responder"):
        self.a1 = int(a1)
        self.a2_slot = int(a2_slot)
        self.mode = mode
        if not ACTION_VALID[self.a1, self.a2_slot]:
            raise ValueError("no such stage-2 action for this arm")

    @classmethod
    def from_action(cls, action, mode="responder"):
        return cls(action.a1, STAGE2_ACTIONS[action.a1].index(action), mode)

    def stage1(self, z):
        return np.full(len(z), self.a1)

    def stage2(self, z, a1, responder=None, excluded=None):
        mask = feasibility_mask(a1, responder, excluded, self.mode)
        pick = np.full(len(z), self.a2_slot)
        ok = mask[np.arange(len(z)), pick]
        if np.all(ok):
            return pick
        fallback = np.argmax(mask, axis=1)
        return np.where(ok, pick, fallback)


class RandomPolicy:
    """Uniform over arms, then uniform over feasible stage-2 actions."""

    def __init__(self, rng, mode="responder"):
        self.rng = rng
        self.mode = mode

    def stage1(self, z):
        return self.rng.integers(0, N_ARMS, len(z))

    def stage2(self, z, a1, responder=None, excluded=None):
        mask = feasibility_mask(a1, responder, excluded, self.mode)
        u = self.rng.random(mask.shape)
        return np.argmax(np.where(mask, u, -1.0), axis=1)


class OptimalPolicy:
    """Regime maximizing the true stage-2 mean, found by enumeration.

    Stage 2 takes the feasible action with largest true mean.  Stage 1
    maximizes the expected best stage-2 mean; under responder-driven
    feasibility the expectation runs over the responder-category
    distribution implied by the stage-1 mean.
    """

    def __init__(self, dgm):
        self.dgm = dgm
        self.mode = dgm.stage2_mode

    def true_stage2_values(self, z, a1):
        z = np.asarray(z, dtype=float)
        a1 = np.asarray(a1, dtype=np.int64)
        n, slots = len(z), ACTION_ACTIVE.shape[1]
        active = ACTION_ACTIVE[a1].reshape(n * slots, N_ARMS)
        vals = q2(np.repeat(z, slots, axis=0), active, self.dgm).reshape(n, slots)
        return np.where(ACTION_VALID[a1], vals, -np.inf)

    def expected_best(self, z, a1):
        """E[max over feasible stage-2 actions of q2 | z, a1]."""
        z = np.asarray(z, dtype=float)
        a1 = np.broadcast_to(np.asarray(a1, dtype=np.int64), (len(z),))
        vals = self.true_stage2_values(z, a1)
        if self.mode == "unrestricted":
            return vals.max(axis=1)
        probs = responder_probabilities(q1(z, a1, self.dgm), self.dgm.noise_sd,
                                        responder_cutoffs(self.dgm))
        out = np.zeros(len(z))
        for cat in range(1, 5):
            mask = feasibility_mask(a1, np.full(len(z), cat), mode="responder")
            out += probs[:, cat - 1] * np.where(mask, vals, -np.inf).max(axis=1)
        return out

    def stage1(self, z):
        z = np.asarray(z, dtype=float)
        scores = np.column_stack([self.expected_best(z, np.full(len(z), a)) for a in ARMS])
        return np.argmax(scores, axis=1)

    def stage2(self, z, a1, responder=None, excluded=None):
        mask = feasibility_mask(a1, responder, excluded, self.mode)
        return _masked_argmax(self.true_stage2_values(z, a1), mask)


# ---------------------------------------------------------------------------
# estimation


class QLearner(BaseEstimator):
    """Backward-induction Q-learning with a pluggable stage regressor.

    ``fit`` takes a :class:`TrialData` (or a list of ParticipantRecord).
    The stage-2 regression uses the observed final outcome; the stage-1
    regression uses the pseudo-outcome max over feasible actions of the
    fitted stage-2 Q-function.
    """

    def __init__(self, estimator=None, pairs="all", mode="responder", random_state=None):
        self.estimator = estimator
        self.pairs = pairs
        self.mode = mode
        self.random_state = random_state

    def _regressor(self, seed):
        est = clone(self.estimator) if self.estimator is not None else LassoCVCD()
        if "random_state" in est.get_params():
            est.set_params(random_state=seed)
        return est

    def fit(self, data, y=None):
        if not isinstance(data, TrialData):
            data = TrialData.from_records(data)
        if len(data) == 0:
            raise ValueError("no records to fit")
        rng = np.random.default_rng(self.random_state)
        seeds = rng.integers(0, 2**63 - 1, size=2)
        spec = DesignSpec(n_covariates=data.z.shape[1], pairs=self.pairs)
        self.spec_ = spec

        x2 = spec.stage2_design(data.z, data.active)
        _warn_rank(x2, "stage 2")
        est2 = self._regressor(int(seeds[0])).fit(x2, data.y2)
        self.q2_model_ = _as_qmodel(2, est2, spec.stage2_columns())

        policy = QPolicy(None, self.q2_model_, spec, self.mode)
        vals = policy.stage2_values(data.z, data.a1)
        mask = feasibility_mask(data.a1, data.responder, data.excluded, self.mode)
        self.pseudo_outcome_ = np.where(mask, vals, -np.inf).max(axis=1)

        x1 = spec.stage1_design(data.z, data.a1)
        est1 = self._regressor(int(seeds[1])).fit(x1, self.pseudo_outcome_)
        self.q1_model_ = _as_qmodel(1, est1, spec.stage1_columns())
        policy.q1_model = self.q1_model_
        self.policy_ = policy
        return self

    def predict(self, z):
        """Recommended stage-1 arm codes."""
        return self.policy_.stage1(np.atleast_2d(z))


def _as_qmodel(stage, est, columns):
    lam = getattr(est, "alpha_", getattr(est, "alpha", 0.0))
    return QModel(stage=stage, coefficients=np.asarray(est.coef_, dtype=float),
                  intercept=float(est.intercept_), lam=float(lam), columns=list(columns))


def _warn_rank(x, label):
    xc = x - x.mean(axis=0)
    rank = np.linalg.matrix_rank(xc)
    if rank < x.shape[1]:
        warnings.warn(f"{label} design has rank {rank} < {x.shape[1]} columns; "
                      "Lasso solution is still defined", RuntimeWarning, stacklevel=3)


def q_learn(data, spec=None, mode="responder", estimator=None, random_state=None):
    """Functional front end: returns ``(q2_model, q1_model, policy)``."""
    pairs = spec.pairs if spec is not None else "all"
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        learner = QLearner(estimator=estimator, pairs=pairs, mode=mode,
                           random_state=random_state).fit(data)
    return learner.q2_model_, learner.q1_model_, learner.policy_


# ---------------------------------------------------------------------------
# values


def _treatment_part(z, active, dgm):
    prog = sum(c * z[:, i] for i, c in dgm.prognostic) if dgm.prognostic else 0.0
    return q2(z, active, dgm) - prog


def rollout(policy, dgm, z, rng):
    """Apply a policy to covariates; returns (a1, responder, a2 slot)."""
    a1 = np.asarray(policy.stage1(z), dtype=np.int64)
    if dgm.stage2_mode == "responder":
        y1 = q1(z, a1, dgm) + dgm.noise_sd * rng.standard_normal(len(z))
        responder = responder_from_y1(y1, responder_cutoffs(dgm))
    else:
        responder = np.zeros(len(z), dtype=np.int64)
    a2 = np.asarray(policy.stage2(z, a1, responder), dtype=np.int64)
    return a1, responder, a2


def policy_value(policy, dgm, n_mc, rng, return_se=False):
    """Monte Carlo value of a regime with the prognostic constant removed.

    Uses the noiseless stage-2 mean.  Prognostic terms are subtracted per
    draw: they do not depend on the policy and their mean is the constant
    being removed, so this is unbiased and has lower variance.
    """
    if n_mc < 1:
        raise ValueError("n_mc must be >= 1")
    z = draw_covariates(dgm, rng, n_mc)
    a1, _, a2 = rollout(policy, dgm, z, rng)
    vals = _treatment_part(z, ACTION_ACTIVE[a1, a2], dgm)
    mean = float(vals.mean())
    if return_se:
        return mean, float(vals.std(ddof=1) / np.sqrt(n_mc)) if n_mc > 1 else 0.0
    return mean


def _binary_support(dgm):
    combos = np.array(list(itertools.product([-1.0, 1.0], repeat=N_BINARY)))
    p = np.asarray(dgm.bern_probs)
    w = np.prod(np.where(combos > 0, p, 1.0 - p), axis=1)
    z = np.hstack([combos, np.zeros((len(combos), dgm.n_covariates - N_BINARY))])
    return z, w


def optimal_value(dgm, n_mc=1_000_000, seed=0):
    """Value of the optimal regime with the prognostic part removed.

    When only binary covariates tailor treatment the value is an exact sum
    over the 32 binary patterns.  Otherwise it falls back to a Monte Carlo
    average over ``n_mc`` draws from a fixed ``seed``.
    """
    opt = OptimalPolicy(dgm)
    if any(i >= N_BINARY for i, _, _ in dgm.tailoring):
        z = draw_covariates(dgm, np.random.default_rng(seed), n_mc)
        best = np.column_stack([opt.expected_best(z, np.full(n_mc, a)) for a in ARMS])
        prog = sum(c * z[:, i] for i, c in dgm.prognostic) if dgm.prognostic else 0.0
        return float(np.mean(best.max(axis=1) - prog))
    z, w = _binary_support(dgm)
    best = np.column_stack([opt.expected_best(z, np.full(len(z), a)) for a in ARMS]).max(axis=1)
    prog = sum(c * z[:, i] for i, c in dgm.prognostic) if dgm.prognostic else 0.0
    return float(w @ (best - prog))


def value_ratio(policy_hat, dgm, rng, n_mc=20_000, v_opt=None):
    """V(pi_hat)/V(pi*) with V(pi_hat) truncated below at zero."""
    v_opt = optimal_value(dgm) if v_opt is None else v_opt
    if v_opt <= 0:
        raise ValueError(f"optimal value must be strictly positive, got {v_opt:.6g}")
    v_hat = policy_value(policy_hat, dgm, n_mc, rng)
    return max(v_hat, 0.0) / v_opt

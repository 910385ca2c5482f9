import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from smartlab.core import ActionKind, Arm, ResponderCategory
from smartlab.randomizer import (AuditLog, MinimizationConfig, MinimizationState,
                                 SmartRandomizer, all_scores, assign,
                                 assign_augment_or_switch, decide, exclusion_mask,
                                 imbalance_score, minimize_sequence, read_audit_log,
                                 replay_audit_log, stage2_factor_vector)


def _state(counts, totals=None):
    counts = np.asarray(counts, dtype=np.int64)
    st_ = MinimizationState(counts.shape[0], counts.shape[1])
    st_.counts = counts.copy()
    st_.arm_totals = (counts.max(axis=1) if totals is None
                      else np.asarray(totals, dtype=np.int64))
    return st_


# ---------------------------------------------------------------------------
# imbalance score oracles


@pytest.mark.parametrize("coding", ["own_level", "indicator"])
def test_hand_example_two_arms_one_factor(coding):
    cfg = MinimizationConfig(factor_weights=(1.0,), factor_names=("f",), n_arms=2, coding=coding)
    st_ = _state([[3], [1]], totals=[3, 1])
    assert imbalance_score(st_, (1,), 0, cfg) == 3.0
    assert imbalance_score(st_, (1,), 1, cfg) == 1.0


def test_codings_differ_for_level_zero_participant():
    # arm 0 holds four level-0 participants, arm 1 none
    st_ = _state([[0], [0]], totals=[4, 0])
    ind = MinimizationConfig(factor_weights=(1.0,), factor_names=("f",), n_arms=2,
                             coding="indicator")
    own = MinimizationConfig(factor_weights=(1.0,), factor_names=("f",), n_arms=2)
    # indicator coding cannot see level-0 imbalance
    assert imbalance_score(st_, (0,), 0, ind) == imbalance_score(st_, (0,), 1, ind) == 0.0
    assert imbalance_score(st_, (0,), 0, own) == 5.0
    assert imbalance_score(st_, (0,), 1, own) == 3.0


@pytest.mark.parametrize("coding", ["own_level", "indicator"])
def test_empty_state_scores_tie(coding):
    cfg = MinimizationConfig.stage1(coding=coding)
    for x in itertools.product((0, 1), repeat=4):
        s = all_scores(MinimizationState.for_config(cfg), x, cfg)
        assert np.all(s == s[0])


@given(st.lists(st.integers(0, 1), min_size=4, max_size=4),
       st.lists(st.tuples(st.tuples(*[st.integers(0, 1)] * 4), st.integers(0, 3)),
                max_size=30),
       st.sampled_from(["own_level", "indicator"]))
def test_score_properties(x, history, coding):
    cfg = MinimizationConfig.stage1(coding=coding)
    st_ = MinimizationState.for_config(cfg)
    for xi, arm in history:
        st_.record(xi, arm)
    base = all_scores(st_, x, cfg)
    assert np.all(base >= 0)
    doubled = MinimizationConfig(factor_weights=(2.0,) * 4, coding=coding)
    s2 = all_scores(st_, x, doubled)
    np.testing.assert_array_equal(s2, 2 * base)
    assert set(np.flatnonzero(s2 == s2.min())) == set(np.flatnonzero(base == base.min()))
    # relabelling arms permutes the scores the same way
    perm = np.array([2, 0, 3, 1])
    permuted = MinimizationState(4, 4, counts=st_.counts[perm].copy(),
                                 arm_totals=st_.arm_totals[perm].copy())
    np.testing.assert_array_equal(all_scores(permuted, x, cfg), base[perm])


def test_arm_weights_scale_scores():
    cfg = MinimizationConfig(arm_weights=(1.0, 2.0, 1.0, 0.5))
    st_ = _state([[1, 0, 0, 0], [0, 0, 0, 0], [0, 0, 0, 0], [0, 0, 0, 0]], [1, 0, 0, 0])
    raw = all_scores(st_, (1, 0, 0, 0), MinimizationConfig())
    np.testing.assert_allclose(all_scores(st_, (1, 0, 0, 0), cfg), raw * [1, 2, 1, 0.5])


def test_dimension_and_coding_errors():
    cfg = MinimizationConfig.stage1()
    st_ = MinimizationState.for_config(cfg)
    with pytest.raises(ValueError):
        imbalance_score(st_, (1, 0, 1), 0, cfg)
    with pytest.raises(ValueError):
        imbalance_score(st_, (1, 0, 2, 0), 0, cfg)
    with pytest.raises(ValueError):
        MinimizationConfig(rho=0.0)
    with pytest.raises(ValueError):
        MinimizationConfig(factor_weights=(-1.0, 1, 1, 1))
    with pytest.raises(ValueError):
        MinimizationConfig(coding="both")


# ---------------------------------------------------------------------------
# assignment


def test_decide_coin_arithmetic():
    cfg = MinimizationConfig.stage1()
    st_ = MinimizationState.for_config(cfg)
    # empty state, all tie: u_tie picks among 4, u_coin < rho keeps the favored arm
    d = decide(st_, (0, 0, 0, 0), [0, 1, 2, 3], cfg, 0.6, 0.5)
    assert (d.favored, d.arm, d.coin_favored) == (2, 2, True)
    # u_coin in the upper third spreads evenly over the other three arms
    arms = [decide(st_, (0, 0, 0, 0), [0, 1, 2, 3], cfg, 0.6, u).arm
            for u in (0.7, 0.8, 0.95)]
    assert arms == [0, 1, 3]


def test_singleton_feasible_is_certain():
    cfg = MinimizationConfig.stage1()
    rng = np.random.default_rng(0)
    st_ = MinimizationState.for_config(cfg)
    for _ in range(50):
        assert assign(st_, (1, 1, 0, 0), [Arm.ACT], cfg, rng) == Arm.ACT


def test_rho_one_is_deterministic_minimizer():
    cfg = MinimizationConfig.stage1(rho=1.0)
    st_ = _state([[5, 5, 5, 5], [4, 4, 4, 4], [5, 5, 5, 5], [5, 5, 5, 5]], [5, 4, 5, 5])
    rng = np.random.default_rng(1)
    for _ in range(20):
        trial = MinimizationState(4, 4, counts=st_.counts.copy(),
                                  arm_totals=st_.arm_totals.copy())
        assert assign(trial, (1, 1, 1, 1), [0, 1, 2, 3], cfg, rng) == 1
        assert assign(MinimizationState(4, 4, counts=st_.counts.copy(),
                                        arm_totals=st_.arm_totals.copy()),
                      (1, 1, 1, 1), [0, 2, 3], cfg, rng) in (0, 2, 3)


def test_four_arm_probabilities():
    cfg = MinimizationConfig.stage1()
    st_ = _state([[5, 5, 5, 5], [4, 4, 4, 4], [5, 5, 5, 5], [5, 5, 5, 5]], [5, 4, 5, 5])
    rng = np.random.default_rng(2)
    n = 30_000
    hits = np.zeros(4)
    for _ in range(n):
        d = decide(st_, (1, 1, 1, 1), [0, 1, 2, 3], cfg, *rng.random(2))
        hits[d.arm] += 1
    expected = n * np.array([1 / 9, 2 / 3, 1 / 9, 1 / 9])
    assert stats.chisquare(hits, expected).pvalue > 1e-3


def test_zero_weights_give_uniform_randomization():
    cfg = MinimizationConfig(factor_weights=(0.0,) * 4)
    rng = np.random.default_rng(3)
    n = 10_000
    x = rng.integers(0, 2, (n, 4))
    arms = minimize_sequence(x, None, cfg, rng)
    counts = np.bincount(arms, minlength=4)
    assert stats.chisquare(counts).pvalue > 1e-3


def test_augment_or_switch():
    cfg = MinimizationConfig.augment_switch()
    rng = np.random.default_rng(4)
    picks = [assign_augment_or_switch(MinimizationState.for_config(cfg), (1, 0, 1, 0), cfg, rng)
             for _ in range(4000)]
    frac = np.mean([p is ActionKind.AUGMENT for p in picks])
    assert abs(frac - 0.5) < 0.03
    # heavy imbalance toward Augment: Switch favored with probability rho
    heavy = _state([[9, 9, 9, 9], [0, 0, 0, 0]], [9, 0])
    picks = []
    for _ in range(6000):
        st_ = MinimizationState(2, 4, counts=heavy.counts.copy(),
                                arm_totals=heavy.arm_totals.copy())
        picks.append(assign_augment_or_switch(st_, (1, 1, 1, 1), cfg, rng))
    frac_switch = np.mean([p is ActionKind.SWITCH for p in picks])
    assert abs(frac_switch - 2 / 3) < 0.02
    det = MinimizationConfig.augment_switch(rho=1.0)
    st_ = MinimizationState(2, 4, counts=heavy.counts.copy(), arm_totals=heavy.arm_totals.copy())
    assert assign_augment_or_switch(st_, (1, 1, 1, 1), det, rng) is ActionKind.SWITCH
    with pytest.raises(ValueError):
        assign_augment_or_switch(st_, (1, 1, 1, 1), MinimizationConfig.stage1(), rng)


def test_stage2_factor_vector():
    v = stage2_factor_vector({"dep_anx": 1, "pain_duration_5y": 1, "opioid_use": 0,
                              "phenotyping_consent": 1}, augment=1)
    assert v == (1, 1, 0, 1, 1)
    assert MinimizationConfig.stage2(intermediate=True).factor_weights == (1, 2, 1, 2, 1)
    assert MinimizationConfig.stage1().factor_weights == (1, 1, 1, 1)
    assert stage2_factor_vector((0, 0, 0, 0)) == (0, 0, 0, 0)
    with pytest.raises(ValueError):
        stage2_factor_vector({"dep_anx": 1, "pain_duration_5y": None, "opioid_use": 0,
                              "phenotyping_consent": 1})
    with pytest.raises(ValueError):
        stage2_factor_vector((1, 0, 1))


# ---------------------------------------------------------------------------
# batch kernel, replay and the audit log


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["own_level", "indicator"]),
       st.floats(0.3, 1.0))
def test_batch_kernel_matches_scalar_path(seed, coding, rho):
    cfg = MinimizationConfig.stage1(rho=rho, coding=coding)
    gen = np.random.default_rng(seed)
    n = 60
    x = gen.integers(0, 2, (n, 4))
    excluded = np.where(gen.random(n) < 0.3, gen.integers(0, 4, n), -1)
    mask = exclusion_mask(excluded)
    batch = minimize_sequence(x, mask, cfg, np.random.default_rng(seed + 1))
    rng = np.random.default_rng(seed + 1)
    st_ = MinimizationState.for_config(cfg)
    scalar = [assign(st_, x[i], np.flatnonzero(mask[i]), cfg, rng) for i in range(n)]
    np.testing.assert_array_equal(batch, scalar)


def test_state_replay_is_exact():
    cfg = MinimizationConfig.stage1()
    rng = np.random.default_rng(5)
    st_ = MinimizationState.for_config(cfg)
    for i in range(200):
        assign(st_, rng.integers(0, 2, 4), [0, 1, 2, 3], cfg, rng, site=i % 8)
    again = MinimizationState.replay(4, 4, st_.log)
    np.testing.assert_array_equal(again.counts, st_.counts)
    np.testing.assert_array_equal(again.arm_totals, st_.arm_totals)
    np.testing.assert_array_equal(again.site_totals, st_.site_totals)


def test_smart_randomizer_audit_round_trip(tmp_path):
    log = AuditLog(tmp_path / "audit.csv")
    rand = SmartRandomizer(np.random.default_rng(11), audit_log=log)
    gen = np.random.default_rng(12)
    for pid in range(40):
        x = tuple(int(v) for v in gen.integers(0, 2, 4))
        exc = None if gen.random() < 0.7 else Arm(int(gen.integers(0, 4)))
        a1 = rand.stage1(pid, x, exc, site=pid % 3)
        assert a1 != exc
        resp = ResponderCategory(int(gen.integers(1, 5)))
        action = rand.stage2(pid, x, a1, resp, exc, site=pid % 3)
        assert exc not in action.active_set
        assert action.a1 == a1
        if resp is ResponderCategory.BEST_RESPONDER:
            assert action.kind is ActionKind.KEEP
    rows = read_audit_log(tmp_path / "audit.csv")
    assert rand.draws == 2 * len(rows)
    assert replay_audit_log(rows, rand.configs(), np.random.default_rng(11)) == []
    rows[5]["arm"] = str((int(rows[5]["arm"]) + 1) % 4)
    assert replay_audit_log(rows, rand.configs())


def test_golden_audit_log(tmp_path, data_dir):
    """Three stage-1 participants, seed 7, traced by hand.

    P1 x=(1,0,1,1): empty state, every S_k = 4; u_tie=0.625 picks arm 2 of
    four; u_coin=0.897 >= 2/3 moves to the third of the other arms, EBEM.
    P2 x=(0,1,0,1), EBEM excluded: only EBEM holds a participant, sharing
    level 1 of factor 4, so S = (4,4,4,5); tie over {0,1,2}, u_tie=0.776
    favors DUL and u_coin=0.225 keeps it.
    P3 x=(1,1,0,0): own-level counts are DUL (0,1,1,0), EBEM (1,0,0,0), so
    S = (4,4,6,5); tie {ESC, ACT}, u_tie=0.300 favors ESC, u_coin=0.874
    moves to the second other arm, DUL.
    """
    import csv
    from smartlab.cli import main
    assert main(["randomize", "--input", str(data_dir / "three_participants.csv"),
                 "--seed", "7", "--out-dir", str(tmp_path)]) == 0
    assert (tmp_path / "audit_log.csv").read_bytes() == \
        (data_dir / "golden_audit_log.csv").read_bytes()
    with open(tmp_path / "assignments.csv") as fh:
        assert [r["action"] for r in csv.DictReader(fh)] == ["EBEM", "DUL", "DUL"]

import numpy as np
import pytest

import smartlab.power as power_mod
from smartlab.datagen import DgmConfig
from smartlab.dtr import OptimalPolicy
from smartlab.power import (PRESETS, Confirmation, PowerAborted, PowerConfig, PowerPoint,
                            PowerResult, confirm_at, run_power)

SMALL = dict(n_grid=(200,), n_replicates=16, n_mc_value=2_000, master_seed=5)


def _point(n, successes, reps):
    return PowerPoint(n=n, n_replicates=reps, successes=successes, n_failed=0,
                      ratio_mean=0.5, ratio_quantiles=(0.1, 0.3, 0.5, 0.7, 0.9), runtime=0.0)


def test_config_validation():
    with pytest.raises(ValueError):
        PowerConfig(delta=0.0)
    with pytest.raises(ValueError):
        PowerConfig(delta=1.2)
    with pytest.raises(ValueError):
        PowerConfig(n_replicates=0)
    with pytest.raises(ValueError):
        PowerConfig(n_grid=())
    assert PowerConfig(delta=1.0).delta == 1.0
    cfg = PowerConfig(dgm={"noise_sd": 0.5})
    assert isinstance(cfg.dgm, DgmConfig) and cfg.dgm.noise_sd == 0.5


def test_presets():
    desk = PowerConfig.preset("desk")
    assert (desk.n_replicates, desk.n_mc_value) == (500, 20_000)
    paper = PowerConfig.preset("paper", master_seed=3)
    assert (paper.n_replicates, paper.confirm_replicates, paper.master_seed) == (3_500, 5_000, 3)
    assert set(PRESETS) == {"desk", "paper"}
    with pytest.raises(ValueError):
        PowerConfig.preset("huge")


def test_default_grid_contains_anchor():
    assert 630 in PowerConfig().n_grid
    assert PowerConfig().delta == 0.9


@pytest.mark.parametrize("succ,reps,se", [(81, 100, np.sqrt(0.81 * 0.19 / 100)),
                                         (4050, 5000, np.sqrt(0.81 * 0.19 / 5000)),
                                         (100, 100, 0.0), (0, 50, 0.0)])
def test_mc_se_is_binomial(succ, reps, se):
    assert _point(630, succ, reps).mc_se == pytest.approx(se, abs=1e-15)


def test_confirmation_rule():
    # at R=5000 an estimate of exactly 0.81 sits just under the bar:
    # 0.81 - 2 * 0.00555 = 0.7989; 0.812 clears it
    assert Confirmation(_point(630, 4060, 5000)).confirmed
    assert not Confirmation(_point(630, 4050, 5000)).confirmed
    assert Confirmation(_point(630, 4050, 5000)).lower == pytest.approx(
        0.81 - 2 * np.sqrt(0.81 * 0.19 / 5000))
    assert not Confirmation(_point(630, 81, 100)).confirmed      # SE 0.04: inconclusive
    assert Confirmation(_point(630, 100, 100)).confirmed         # degenerate SE 0


def test_monotone_violation_check():
    cfg = PowerConfig()
    ok = PowerResult(cfg, 1.0, [_point(300, 60, 100), _point(400, 58, 100),
                                _point(500, 80, 100)])
    assert ok.monotone_violations() == []
    bad = PowerResult(cfg, 1.0, [_point(300, 90, 100), _point(400, 50, 100)])
    assert bad.monotone_violations() == [(300, 400)]
    assert bad.point(400).successes == 50
    with pytest.raises(KeyError):
        bad.point(999)


def test_small_run_shapes_and_ranges():
    res = run_power(PowerConfig(**SMALL, delta=0.5))
    (pt,) = res.points
    assert pt.n == 200 and pt.n_replicates == 16 and pt.n_failed == 0
    assert 0.0 <= pt.p_hat <= 1.0
    assert pt.successes == int((pt.ratios >= 0.5).sum())
    assert pt.mc_se == pytest.approx(np.sqrt(pt.p_hat * (1 - pt.p_hat) / 16))
    assert list(pt.ratio_quantiles) == sorted(pt.ratio_quantiles)
    row = pt.row()
    assert list(row)[:6] == ["N", "replicates", "failed", "p_hat", "mc_se", "ratio_mean"]
    assert "ratio_q50" in row and "runtime_s" in row
    assert res.v_opt == pytest.approx(0.7092354359097375)


def test_vanishing_cutoff_gives_certain_success():
    res = run_power(PowerConfig(**{**SMALL, "n_replicates": 40}, delta=1e-9))
    assert res.points[0].p_hat == 1.0
    assert res.points[0].mc_se == 0.0


def test_null_scenario_is_refused():
    null = DgmConfig(main_effects=(0, 0, 0, 0), tailoring=(), combo=())
    with pytest.raises(ValueError, match="strictly positive"):
        run_power(PowerConfig(**SMALL, dgm=null))
    with pytest.raises(ValueError):
        confirm_at(200, PowerConfig(**SMALL, dgm=null))


def test_single_threaded_runs_are_bit_identical():
    a = run_power(PowerConfig(**SMALL)).points[0]
    b = run_power(PowerConfig(**SMALL)).points[0]
    assert a.ratios.tobytes() == b.ratios.tobytes()
    c = run_power(PowerConfig(**{**SMALL, "master_seed": 6})).points[0]
    assert a.ratios.tobytes() != c.ratios.tobytes()


def test_parallel_runs_are_value_identical():
    a = run_power(PowerConfig(**SMALL)).points[0]
    b = run_power(PowerConfig(**SMALL, threads=2)).points[0]
    np.testing.assert_array_equal(a.ratios, b.ratios)


def test_replicate_streams_do_not_depend_on_grid():
    # the stream for (seed, N, rep) is the same whichever other N are run
    a = run_power(PowerConfig(**SMALL)).points[0]
    b = run_power(PowerConfig(**{**SMALL, "n_grid": (160, 200)})).point(200)
    np.testing.assert_array_equal(a.ratios, b.ratios)


def test_confirm_at_uses_confirm_replicates():
    cfg = PowerConfig(**SMALL, confirm_replicates=10)
    conf = confirm_at(200, cfg)
    assert conf.point.n_replicates == 10
    assert confirm_at(200, cfg, n_replicates=6).point.n_replicates == 6
    assert conf.target == 0.80


def _failing_simulator(fail_calls):
    real = power_mod.simulate_arrays
    calls = {"n": 0}

    def fake(*args, **kwargs):
        calls["n"] += 1
        if calls["n"] in fail_calls:
            raise ValueError("synthetic failure")
        return real(*args, **kwargs)
    return fake


class _OracleLearner:
    """Stands in for Q-learning so the failure tests run in milliseconds."""

    def __init__(self, mode="responder", **kwargs):
        self.mode = mode

    def fit(self, data):
        self.policy_ = OptimalPolicy(DgmConfig(stage2_mode=self.mode))
        return self


def test_rare_failures_are_excluded_and_counted(monkeypatch):
    monkeypatch.setattr(power_mod, "QLearner", _OracleLearner)
    monkeypatch.setattr(power_mod, "simulate_arrays", _failing_simulator({3}))
    pt = run_power(PowerConfig(n_grid=(200,), n_replicates=120, n_mc_value=200)).points[0]
    assert pt.n_failed == 1 and pt.n_replicates == 119 and len(pt.ratios) == 119


def test_too_many_failures_abort(monkeypatch):
    monkeypatch.setattr(power_mod, "QLearner", _OracleLearner)
    monkeypatch.setattr(power_mod, "simulate_arrays", _failing_simulator({1, 2}))
    with pytest.raises(PowerAborted, match="synthetic failure"):
        run_power(PowerConfig(n_grid=(200,), n_replicates=120, n_mc_value=200))


def test_progress_callback_sees_each_point():
    seen = []
    run_power(PowerConfig(**{**SMALL, "n_grid": (160, 200), "n_replicates": 4}),
              progress=lambda p: seen.append(p.n))
    assert seen == [160, 200]

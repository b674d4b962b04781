import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, strategies as st

from cdsp_moe.dynamics import (ChainConfig, conflict_probability_experiment, deterministic_path, drift,
                               empirical_supermartingale_check, export_trajectories, init_chains, preset,
                               residual_entropy_estimate, simulate, step_ensemble, system_entropy)
from cdsp_moe.linalg import Rng, sigmoid
from cdsp_moe.metrics import read_csv_log


def test_drift_examples():
    cfg = ChainConfig(lambda_c=1.0, partner_prob=0.5, conflict=1.0, lambda_r=0.0)
    assert drift(0.0, cfg) == -0.125
    assert drift(1.7, ChainConfig(conflict=0.0, lambda_r=0.0)) == 0.0


@given(st.sampled_from([-1.0, 1.0]))
def test_drift_saturation_leaves_regulariser(sign):
    assert drift(sign * 60.0, ChainConfig()) == pytest.approx(-1e-4 * sign, abs=1e-20)


def test_task_gain_schedule():
    cfg = ChainConfig(task_gain=[1.0, 0.0], steps=11)
    assert cfg.gain(0) == 1.0 and cfg.gain(10) == 0.0 and cfg.gain(5) == pytest.approx(0.5)


def test_chains_frozen_without_forces():
    cfg = ChainConfig(noise_std=0.0, conflict=0.0, lambda_r=0.0, n_chains=50)
    a = init_chains(cfg, Rng(0))
    assert np.array_equal(step_ensemble(a, cfg, Rng(1)), a)


def test_config_validation():
    for bad in (dict(eta=0.0), dict(partner_prob=1.5), dict(conflict=-1.0), dict(init_mode="x"),
                dict(init_mode="eq3", n_chains=100)):
        with pytest.raises(ValueError):
            ChainConfig(**bad).validate()


def test_eq3_init_places_diagonal_logits():
    a = init_chains(ChainConfig(init_mode="eq3", n_chains=128), Rng(0)).reshape(2, 8, 8)
    assert np.all(a[:, range(8), range(8)] == 4.0)
    off = a[:, ~np.eye(8, dtype=bool)]
    assert np.abs(off).max() < 0.1


def _mp_path(a0, cfg, steps):
    mpmath.mp.dps = 40
    a, out = mpmath.mpf(a0), [float(a0)]
    for _ in range(steps):
        s = 1 / (1 + mpmath.exp(-a))
        sgn = (a > 0) - (a < 0)
        a = a + cfg.eta * (cfg.gain(0) - cfg.lambda_c * cfg.partner_prob * cfg.conflict * s * (1 - s)
                           - cfg.lambda_r * sgn)
        out.append(float(a))
    return np.array(out)


def test_noise_free_ensemble_matches_high_precision_oracle():
    cfg = preset("quiet", steps=400, n_chains=3, record_every=1)
    res = simulate(cfg)
    for c in range(3):
        oracle = _mp_path(res.logits[0, c], cfg, 400)
        assert np.abs(res.logits[:, c] - oracle).max() < 1e-9
        assert np.abs(deterministic_path(res.logits[0, c], cfg, 400) - oracle).max() < 1e-9


def test_noise_free_conflict_is_strictly_decreasing():
    path = deterministic_path(0.0, preset("quiet"), 2000)
    assert np.all(np.diff(path) < 0)


def test_simulation_is_reproducible():
    cfg = ChainConfig(steps=50, n_chains=200)
    assert np.array_equal(simulate(cfg).logits, simulate(cfg).logits)


def test_persistent_conflict_short_run():
    res = simulate(ChainConfig(steps=2000, n_chains=2000))
    occupied = [b for b in res.supermartingale["bins"] if not b["flagged"]]
    assert occupied and all(b["mean_delta"] < 0 for b in occupied)
    assert res.supermartingale["fraction_nonpositive"] == 1.0
    assert np.all(np.diff(res.mean_p_curve[100:]) <= 0)
    assert res.entropy_curve[-1] < res.entropy_curve[0]
    assert res.entropy_curve[-1] > 0


def test_no_force_bins_are_driftless_within_three_standard_errors():
    res = simulate(preset("no-force", steps=2000))
    for b in res.supermartingale["bins"]:
        if not b["flagged"]:
            assert abs(b["mean_delta"]) <= 3 * b["stderr"], b


def test_sparse_bins_are_flagged_not_failed():
    traj = np.array([[0.05] * 5 + [0.95] * 40, [0.04] * 5 + [0.94] * 40])
    rep = empirical_supermartingale_check(traj)
    assert rep["bins"][0]["flagged"] and not rep["bins"][9]["flagged"]
    assert rep["fraction_nonpositive"] == 1.0


def test_system_entropy_examples():
    assert system_entropy(np.full(64, 0.5)) == pytest.approx(44.3614195558365, rel=1e-14)
    assert system_entropy([0.0, 1.0, 1.0]) == 0.0
    p = np.full(64, 0.5)
    p[::9] = sigmoid(4.0)
    assert system_entropy(p) == pytest.approx(39.53700025348635, rel=1e-12)


def test_residual_entropy_estimate():
    traj = np.vstack([np.full((8, 4), 0.5), np.full((2, 4), 0.25)])
    assert residual_entropy_estimate(traj, 0.2) == pytest.approx(0.5623351446188083, rel=1e-14)
    with pytest.raises(ValueError):
        residual_entropy_estimate(traj, 0.05)


def test_noise_free_entropy_decays_towards_zero_without_regulariser():
    cfg = preset("quiet", lambda_r=0.0)
    path = sigmoid(deterministic_path(0.0, cfg, 200_000))
    tails = [residual_entropy_estimate(path[:n, None], 0.2) for n in (5_001, 50_001, 200_001)]
    assert tails[0] > tails[1] > tails[2]
    assert tails[2] < 1e-3


def test_noise_free_chain_settles_where_regulariser_balances_conflict():
    cfg = preset("quiet")
    k = cfg.lambda_r / (cfg.lambda_c * cfg.partner_prob * cfg.conflict)
    s = (1 - math.sqrt(1 - 4 * k)) / 2
    a_star = math.log(s / (1 - s))
    path = deterministic_path(0.0, cfg, 2_000_000)
    assert np.all(np.diff(path) <= 0)
    assert abs(path[-1] - a_star) < 1e-3
    assert residual_entropy_estimate(sigmoid(path)[-1000:, None], 0.5) > 0


def test_residual_entropy_grows_with_noise():
    levels = [simulate(ChainConfig(n_chains=2000, noise_std=s)).residual_entropy() for s in (0.05, 0.1, 0.2)]
    assert levels[0] > 0
    assert levels[0] < levels[1] < levels[2]


def test_conflict_probability_small():
    rep = conflict_probability_experiment(64, 20000, Rng(0))
    assert abs(rep["fraction_negative"] - 0.5) < 0.02
    assert abs(rep["std"] / rep["predicted_std"] - 1) < 0.1
    one = conflict_probability_experiment(1, 20000, Rng(1))
    assert abs(one["fraction_negative"] - 0.5) < 3 * 0.5 / math.sqrt(20000)
    assert one["std"] == pytest.approx(1.0, rel=1e-3)


def test_unknown_preset():
    with pytest.raises(KeyError):
        preset("nope")


def test_trajectory_export(tmp_path):
    res = simulate(ChainConfig(steps=20, n_chains=7, record_every=10))
    path = export_trajectories(res, tmp_path / "t.csv", max_chains=3)
    rows = read_csv_log(path)
    assert len(rows) == 3 * 3
    assert list(rows[0]) == ["step", "chain_id", "logit", "probability"]
    assert float(rows[-1]["logit"]) == res.logits[-1, 2]

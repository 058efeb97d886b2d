"""Hospital simulator: scenarios, event dynamics, oracles, sweeps."""

import json

import numpy as np
import pytest

from icutransfer import mdp
from icutransfer import simulator as sim


def ten_score_instance(seed=17):
    kernel, _, _ = mdp.generate_instance(np.random.default_rng(seed), 10)
    return kernel


def no_transfers(n):
    return mdp.TransferPolicy.threshold(n + 1, n)


# ---------------------------------------------------------------------------
# stochastic primitives and scenario validation
# ---------------------------------------------------------------------------


def test_los_model_moments():
    rng = np.random.default_rng(0)
    model = sim.LosModel(12.54, 10.13)
    draws = np.array([model.sample_periods(rng) for _ in range(20_000)])
    assert np.all(draws > 0)
    assert abs(draws.mean() - 12.54 * 4) < 1.5
    with pytest.raises(ValueError):
        sim.LosModel(0.0, 1.0)
    with pytest.raises(ValueError):
        sim.LosModel(1.0, -1.0)


def test_fraction_model_moments():
    rng = np.random.default_rng(1)
    model = sim.FractionModel(0.4692)
    draws = np.array([model.sample(rng) for _ in range(20_000)])
    assert np.all((draws > 0) & (draws < 1))
    assert abs(draws.mean() - 0.4692) < 0.01
    with pytest.raises(ValueError):
        sim.FractionModel(0.0)
    with pytest.raises(ValueError):
        sim.FractionModel(0.5, concentration=0.0)


def test_default_scenario_published_tables():
    sc = sim.default_scenario(ten_score_instance(), icu_capacity=10)
    assert sc.n == 10
    assert np.isclose(sc.ward_arrival_rates.sum(), 1.5)
    assert np.allclose(sc.death_proactive, sim.PROACTIVE_DEATH)
    assert np.isclose(sc.readmit_ddd, 1.15 * sc.readmit_direct)
    assert np.isclose(sc.readmit_proactive, sc.readmit_crash)
    assert sc.proactive_los[9].mean_days == 3.77


def test_default_scenario_interpolates_other_sizes():
    kernel, _, _ = mdp.generate_instance(np.random.default_rng(3), 5)
    sc = sim.default_scenario(kernel, icu_capacity=4, total_ward_rate=2.0)
    assert len(sc.proactive_los) == 5
    assert np.isclose(sc.ward_arrival_rates.sum(), 2.0)
    assert sc.death_proactive.min() >= sim.PROACTIVE_DEATH.min() - 1e-12
    assert sc.death_proactive.max() <= sim.PROACTIVE_DEATH.max() + 1e-12


def test_scenario_validation():
    kernel = ten_score_instance()
    good = sim.default_scenario(kernel, icu_capacity=10)
    with pytest.raises(ValueError, match="bed"):
        sim.default_scenario(kernel, icu_capacity=0)
    with pytest.raises(ValueError, match="regime"):
        sim.default_scenario(kernel, icu_capacity=5, regime="panic")
    with pytest.raises(ValueError, match="proactive mortality"):
        import dataclasses

        dataclasses.replace(good, death_proactive=np.full(10, 0.99))
    with pytest.raises(ValueError, match="score count"):
        other, _, _ = mdp.generate_instance(np.random.default_rng(0), 4)
        good.with_kernel(other)
    with pytest.raises(ValueError, match="nonnegative"):
        import dataclasses

        dataclasses.replace(good, ward_arrival_rates=-np.ones(10))


def test_run_argument_validation():
    kernel = ten_score_instance()
    sc = sim.default_scenario(kernel, icu_capacity=10)
    with pytest.raises(ValueError, match="policy length"):
        sim.run_simulation(sc, mdp.TransferPolicy.threshold(2, 4), 100, 10)
    with pytest.raises(ValueError, match="horizon"):
        sim.run_simulation(sc, no_transfers(10), 0, 0)
    with pytest.raises(ValueError, match="warmup"):
        sim.run_simulation(sc, no_transfers(10), 100, 100)
    with pytest.raises(ValueError, match="replication"):
        sim.run_simulation(sc, no_transfers(10), 100, 10, reps=0)


# ---------------------------------------------------------------------------
# analytic absorbing-chain oracle
# ---------------------------------------------------------------------------


def test_analytic_outcomes_all_death_kernel():
    mat = np.zeros((3, 6))
    mat[:, 5] = 1.0  # every score straight to the death exit
    out = sim.analytic_ward_outcomes(mdp.TransitionKernel(mat), np.full(3, 1 / 3))
    assert out.p_death == pytest.approx(1.0)
    assert out.p_crash == pytest.approx(0.0)
    assert out.expected_periods == pytest.approx(1.0)


def test_analytic_outcomes_hand_computed():
    mat = np.array(
        [
            [0.5, 0.2, 0.1, 0.1, 0.1],
            [0.0, 0.5, 0.2, 0.2, 0.1],
        ]
    )
    out = sim.analytic_ward_outcomes(mdp.TransitionKernel(mat), np.array([1.0, 0.0]))
    # geometric elimination: second score first, then back-substitute
    assert out.p_death == pytest.approx(0.28)
    assert out.p_crash == pytest.approx(0.1 / 0.5 + 0.4 * 0.4)
    assert out.expected_periods == pytest.approx(2.8)


def test_analytic_outcomes_partition_on_random_kernels():
    for s in range(5):
        kernel, _, _ = mdp.generate_instance(np.random.default_rng(s), 6)
        out = sim.analytic_ward_outcomes(kernel, np.full(6, 1 / 6))
        total = out.p_death + out.p_crash + out.p_recover
        assert total == pytest.approx(1.0, abs=1e-10)
        assert out.expected_periods >= 1.0


def test_analytic_outcomes_rejects_trapped_chain():
    mat = np.zeros((2, 5))
    mat[0, 1] = 1.0
    mat[1, 0] = 1.0
    with pytest.raises(ValueError, match="never exits"):
        sim.analytic_ward_outcomes(mdp.TransitionKernel(mat), np.array([1.0, 0.0]))


def test_calibrated_kernel_stays_in_the_clinical_band():
    kernel = sim.calibrated_ward_kernel()
    mix = sim.SCORE_MIX / sim.SCORE_MIX.sum()
    out = sim.analytic_ward_outcomes(kernel, mix)
    assert 0.005 < out.p_death < 0.03
    assert 0.01 < out.p_crash < 0.06
    assert 5.0 < out.expected_periods < 20.0
    assert kernel.exit_mass > 0.0
    # every score adds more proactive ICU load than it removes in crash load
    for i in range(10):
        point = np.zeros(10)
        point[i] = 1.0
        per_score = sim.analytic_ward_outcomes(kernel, point)
        displaced = per_score.p_crash * sim.CRASH_LOS_MEAN_DAYS
        assert displaced < sim.PROACTIVE_LOS_MEAN[i]
    with pytest.raises(ValueError):
        sim.calibrated_ward_kernel(1)


def test_simulated_ward_chain_matches_the_linear_solve():
    kernel = ten_score_instance()
    sc = sim.default_scenario(kernel, icu_capacity=10**6, direct_rate=0.0)
    metrics = sim.run_simulation(
        sc, no_transfers(10), horizon=600, warmup=0, seed=1, reps=8
    )
    mix = sc.ward_arrival_rates[:, 0] / sc.ward_arrival_rates[:, 0].sum()
    oracle = sim.analytic_ward_outcomes(kernel, mix)
    for name, target in [
        ("ward_death_fraction", oracle.p_death),
        ("ward_crash_fraction", oracle.p_crash),
        ("ward_recover_fraction", oracle.p_recover),
    ]:
        gap = abs(metrics.means[name] - target)
        assert gap <= 3.0 * max(metrics.stderrs[name], 1e-4), name


# ---------------------------------------------------------------------------
# trivial regimes and degenerate inputs
# ---------------------------------------------------------------------------


def test_zero_arrivals_report_absent_or_zero():
    kernel = ten_score_instance()
    sc = sim.default_scenario(kernel, icu_capacity=5, total_ward_rate=0.0,
                              direct_rate=0.0)
    m = sim.run_simulation(sc, no_transfers(10), horizon=100, warmup=10,
                           seed=0, reps=2)
    assert "mortality_rate" not in m.means
    assert "ddd_fraction" not in m.means
    assert m.means["avg_icu_occupancy"] == 0.0
    assert m.means["queue_mean_length"] == 0.0


def test_regime_exclusivity():
    kernel = ten_score_instance()
    policy = mdp.TransferPolicy.threshold(5, 10)
    ddd = sim.run_simulation(
        sim.default_scenario(kernel, icu_capacity=6, regime="ddd"),
        policy, horizon=400, warmup=40, seed=2, reps=3,
    )
    queue = sim.run_simulation(
        sim.default_scenario(kernel, icu_capacity=6, regime="queue"),
        policy, horizon=400, warmup=40, seed=2, reps=3,
    )
    assert ddd.means["queue_mean_length"] == 0.0
    assert ddd.means["queue_entry_crash"] == 0.0
    assert "queue_death_fraction" not in ddd.means
    assert ddd.means["ddd_fraction"] > 0.0
    assert queue.means["ddd_fraction"] == 0.0
    assert queue.means["queue_mean_length"] > 0.0
    # the product form of the exclusivity claim
    assert ddd.means["queue_mean_length"] * ddd.means["ddd_fraction"] == 0.0
    assert queue.means["queue_mean_length"] * queue.means["ddd_fraction"] == 0.0


def test_transfer_everyone_with_spare_beds():
    kernel = ten_score_instance()
    sc = sim.default_scenario(kernel, icu_capacity=10**6)
    m = sim.run_simulation(sc, mdp.TransferPolicy.threshold(1, 10),
                           horizon=300, warmup=0, seed=4, reps=3)
    assert m.means["ward_transfer_fraction"] == pytest.approx(1.0)
    assert m.means["ward_crash_fraction"] == 0.0
    nobody = sim.run_simulation(sc, no_transfers(10), horizon=300, warmup=0,
                                seed=4, reps=3)
    # proactive outcomes dominate the ward pathway by a wide margin here
    assert m.mortality_rate < nobody.mortality_rate - 0.3


def test_queue_death_probability_extremes():
    kernel = ten_score_instance()
    lethal = sim.default_scenario(kernel, icu_capacity=2, regime="queue",
                                  queue_death_prob=1.0)
    m = sim.run_simulation(lethal, no_transfers(10), horizon=300, warmup=30,
                           seed=6, reps=3)
    assert m.means["queue_death_fraction"] > 0.5
    safe = sim.default_scenario(kernel, icu_capacity=2, regime="queue",
                                queue_death_prob=0.0)
    m0 = sim.run_simulation(safe, no_transfers(10), horizon=300, warmup=30,
                            seed=6, reps=3)
    assert m0.means["queue_death_fraction"] == 0.0


# ---------------------------------------------------------------------------
# determinism and event-log audits
# ---------------------------------------------------------------------------


def test_identical_seed_identical_log_and_metrics():
    kernel = ten_score_instance()
    sc = sim.default_scenario(kernel, icu_capacity=8)
    pol = mdp.TransferPolicy.threshold(7, 10)
    a, loga = sim.simulate_replication(sc, pol, 200, 0, seed=5, collect_log=True)
    b, logb = sim.simulate_replication(sc, pol, 200, 0, seed=5, collect_log=True)
    assert loga.events == logb.events
    assert a == b
    c, _ = sim.simulate_replication(sc, pol, 200, 0, seed=6)
    assert a != c
    m1 = sim.run_simulation(sc, pol, 200, 20, seed=5, reps=3)
    m2 = sim.run_simulation(sc, pol, 200, 20, seed=5, reps=3)
    assert m1.means == m2.means and m1.stderrs == m2.stderrs


def test_thread_pool_reproduces_serial_table():
    kernel = ten_score_instance()
    sc = sim.default_scenario(kernel, icu_capacity=8)
    pol = mdp.TransferPolicy.threshold(6, 10)
    serial = sim.run_simulation(sc, pol, 200, 20, seed=9, reps=4, threads=1)
    pooled = sim.run_simulation(sc, pol, 200, 20, seed=9, reps=4, threads=3)
    assert serial.means == pooled.means
    assert serial.stderrs == pooled.stderrs


def test_event_log_audit_conservation_and_eviction_rule():
    kernel = ten_score_instance()
    # small ICU under heavy load so evictions are frequent
    sc = sim.default_scenario(kernel, icu_capacity=3, total_ward_rate=3.0,
                              direct_rate=0.5)
    rep, log = sim.simulate_replication(sc, mdp.TransferPolicy.threshold(4, 10),
                                        300, 0, seed=11, collect_log=True)
    assert rep["_max_occupied"] <= 3
    assert rep["_arrivals_total"] == rep["_resolved_total"] + rep["_live_end"]
    assert rep["_ddd_events"] > 0
    times = [e[0] for e in log.events]
    assert times == sorted(times)
    occupied = 0
    for _, kind, _, a, b in log.events:
        if kind == "icu_admit":
            occupied += 1
            assert occupied <= 3
        elif kind in ("icu_release", "ddd_evict"):
            occupied -= 1
            assert occupied >= 0
        if kind == "ddd_evict":
            # the victim really had the shortest remaining service time
            assert a <= b + 1e-9


def test_event_log_jsonl_round_trip(tmp_path):
    kernel = ten_score_instance()
    sc = sim.default_scenario(kernel, icu_capacity=5)
    _, log = sim.simulate_replication(sc, no_transfers(10), 60, 0, seed=2,
                                      collect_log=True)
    text = log.to_jsonl()
    rows = [json.loads(line) for line in text.splitlines()]
    assert len(rows) == len(log.events)
    assert all(set(r) == {"time", "event", "patient", "a", "b"} for r in rows)
    target = tmp_path / "trace.jsonl"
    assert log.to_jsonl(target) is None
    assert target.read_text() == text


# ---------------------------------------------------------------------------
# metrics container
# ---------------------------------------------------------------------------


def test_metrics_validation():
    with pytest.raises(ValueError, match="replication"):
        sim.SimMetrics(0, {}, {})
    with pytest.raises(ValueError, match="fraction"):
        sim.SimMetrics(2, {"mortality_rate": 1.7}, {})
    m = sim.SimMetrics(2, {"mortality_rate": 0.2, "mean_los_hours": 30.0}, {})
    assert m.mortality_rate == 0.2
    assert m.mean_los_hours == 30.0


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------


def test_threshold_sweep_single_cell_matches_run_simulation():
    kernel = ten_score_instance()
    sc = sim.default_scenario(kernel, icu_capacity=8)
    rows = sim.threshold_sweep(sc, [("nominal", kernel)], [7], reps=3, seed=3,
                               horizon=200, warmup=20)
    direct = sim.run_simulation(sc, mdp.TransferPolicy.threshold(7, 10),
                                200, 20, seed=3, reps=3)
    table = {r["metric"]: r["value"] for r in rows}
    assert table == direct.means
    assert all(r["threshold"] == 7 and r["kernel_label"] == "nominal" for r in rows)
    again = sim.threshold_sweep(sc, [("nominal", kernel)], [7], reps=3, seed=3,
                                horizon=200, warmup=20)
    assert rows == again


def test_threshold_sweep_accepts_per_threshold_kernels():
    kernel = ten_score_instance()
    other, _, _ = mdp.generate_instance(np.random.default_rng(23), 10)
    sc = sim.default_scenario(kernel, icu_capacity=8)
    rows = sim.threshold_sweep(
        sc, [("worst", {10: kernel, 11: other})], [10, 11],
        reps=2, seed=1, horizon=120, warmup=12,
    )
    assert {r["threshold"] for r in rows} == {10, 11}
    csv_text = sim.save_metric_table(rows)
    lines = csv_text.splitlines()
    assert lines[0] == "threshold,kernel_label,metric,value,stderr"
    assert len(lines) == len(rows) + 1


def test_sensitivity_sweep_nominal_sample_is_exactly_zero():
    kernel = ten_score_instance()
    sc = sim.default_scenario(kernel, icu_capacity=8)
    out = sim.sensitivity_sweep(sc, mdp.TransferPolicy.threshold(8, 10),
                                [kernel], reps=2, seed=7, horizon=150, warmup=15)
    assert out
    for mean_dev, max_dev in out.values():
        assert mean_dev == 0.0 and max_dev == 0.0

import dataclasses
import json
from pathlib import Path

import numpy as np
import pytest

from icutransfer import cli, estimation, mdp, robust
from icutransfer.cli import ScenarioDocument, SchemaError


def small_scenario_dict(alpha_value=2e-3, seed=21):
    rng = np.random.default_rng(seed)
    kernel, spec, p0 = mdp.generate_instance(rng, n=4, discount=0.9)
    return {
        "version": 1,
        "name": "small",
        "kernel": kernel.matrix.tolist(),
        "rewards": dataclasses.asdict(spec),
        "initial_distribution": p0.tolist(),
        "uncertainty": {
            "alpha": [alpha_value] * 4,
            "rank": 3,
            "bootstrap_samples": 30,
            "nmf_starts": 8,
            "nmf_iters": 200,
        },
        "thresholds": [1, 2, 3, 4, 5],
        "hospital": {
            "icu_capacity": 2,
            "total_ward_rate": 0.8,
            "direct_rate": 0.1,
            "regime": "ddd",
        },
        "simulate": {"reps": 2, "horizon": 60, "warmup": 10},
        "seeds": {"nmf": 0, "bootstrap": 1, "simulate": 2},
    }


@pytest.fixture(scope="module")
def small_scenario_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("scn") / "small.json"
    path.write_text(json.dumps(small_scenario_dict()))
    return path


@pytest.fixture(scope="module")
def pipeline_runs(small_scenario_path, tmp_path_factory):
    out = tmp_path_factory.mktemp("bundles")
    argv = [
        "pipeline",
        "--scenario", str(small_scenario_path),
        "--out", str(out),
    ]
    assert cli.main(argv) == 0
    assert cli.main(argv) == 0
    return out


# ---------------------------------------------------------------------------
# scenario schema
# ---------------------------------------------------------------------------

def test_demo_scenario_loads():
    doc = ScenarioDocument.from_path(str(cli.demo_scenario_path()))
    assert doc.n == 10
    assert doc.thresholds == tuple(range(1, 12))
    assert doc.rank == 10
    assert len(doc.sha256) == 64
    assert doc.scenario("queue").regime == "queue"


def mutate(change):
    doc = small_scenario_dict()
    change(doc)
    return json.dumps(doc)


@pytest.mark.parametrize(
    "change,fragment",
    [
        (lambda d: d.pop("version"), "version is required"),
        (lambda d: d.update(version=3), "unsupported scenario version"),
        (lambda d: d.update(extra=1), "unknown fields: extra"),
        (lambda d: d["uncertainty"].pop("rank"), "rank is required"),
        (lambda d: d["uncertainty"].update(rank=9), "rank must lie in [1, 4]"),
        (lambda d: d["uncertainty"].update(alpha=[0.1] * 3), "one radius per"),
        (lambda d: d["uncertainty"]["alpha"].__setitem__(0, 1.5), "lie in [0, 1]"),
        (lambda d: d["kernel"][2].append(0.0), "row 3 must have 7 entries"),
        (lambda d: d["kernel"][0].__setitem__(0, 0.9), "kernel"),
        (lambda d: d.update(thresholds=[0, 2]), "threshold 0"),
        (lambda d: d.update(thresholds=[6]), "threshold 6"),
        (lambda d: d["seeds"].pop("simulate"), "seeds.simulate is required"),
        (lambda d: d["simulate"].update(warmup=60), "warmup must lie in"),
        (lambda d: d["hospital"].update(beds=3), "unknown fields: beds"),
        (lambda d: d["hospital"].update(regime="fcfs"), "hospital"),
        (lambda d: d["rewards"].pop("d_A"), "rewards.d_A is required"),
        (lambda d: d["rewards"].update(r_RL="big"), "must be a number"),
        (lambda d: d.update(initial_distribution=[0.5, 0.5]), "initial_distribution"),
    ],
)
def test_schema_rejects(change, fragment):
    with pytest.raises(SchemaError) as err:
        ScenarioDocument.from_json(mutate(change))
    assert fragment in str(err.value)


def test_schema_rejects_non_json():
    with pytest.raises(SchemaError, match="not valid JSON"):
        ScenarioDocument.from_json("{nope")
    with pytest.raises(SchemaError, match="JSON object"):
        ScenarioDocument.from_json("[1, 2]")


def test_missing_scenario_file(capsys):
    assert cli.main(["check", "--scenario", "/no/such/file.json"]) == 2
    assert "cannot read scenario" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# estimate
# ---------------------------------------------------------------------------

def test_estimate_roundtrip(tmp_path):
    rng = np.random.default_rng(5)
    kernel, _, p0 = mdp.generate_instance(rng, n=3, discount=0.9)
    data = estimation.synth_trajectories(kernel, p0, 3000, seed=12)
    csv = tmp_path / "traj.csv"
    estimation.save_trajectories_csv(data, csv)
    out = tmp_path / "est.json"
    code = cli.main(["estimate", str(csv), "--out", str(out), "--scores", "3"])
    assert code == 0
    payload = json.loads(out.read_text())
    assert payload["scores"] == 3
    assert payload["hospitalizations"] == 3000
    fitted = np.array(payload["kernel"])
    assert fitted.shape == (3, 6)
    assert np.max(np.abs(fitted - kernel.matrix)) < 0.05
    counts = np.array(payload["counts"])
    assert counts.sum() > 3000
    assert len(payload["alpha"]) == 3 and payload["level"] == 0.95


def test_estimate_malformed_row_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("hospitalization,period,state\nh1,0,S1\nh1,1,QX\n")
    assert cli.main(["estimate", str(bad), "--out", str(tmp_path / "o.json")]) == 2
    err = capsys.readouterr().err
    assert "[estimate]" in err and "(line 3)" in err


# ---------------------------------------------------------------------------
# check
# ---------------------------------------------------------------------------

def test_check_generated_scenario_all_pass(tmp_path, capsys):
    path = tmp_path / "ok.json"
    path.write_text(json.dumps(small_scenario_dict(alpha_value=0.0)))
    assert cli.main(["check", "--scenario", str(path), "--uncertainty", "sa"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out
    for label in ("assumption 1", "assumption 2", "assumption 3 over U_sa"):
        assert label in out


def test_check_demo_reports_failures_with_witnesses(capsys):
    code = cli.main(
        ["check", "--scenario", str(cli.demo_scenario_path()), "--uncertainty", "sa"]
    )
    assert code == 0
    out = capsys.readouterr().out
    assert "assumption 1 (one-period recovery beats lingering): pass" in out
    assert "ward-mass decay FAIL" in out
    assert "ward-mass decay too slow S1 -> S2" in out
    assert "assumption 3 over U_sa (set-wide monotone structure): FAIL" in out
    assert "minimizing row S1" in out


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------

def test_pipeline_bundle_layout(pipeline_runs):
    run = pipeline_runs / "run-0001"
    manifest = json.loads((run / "manifest.json").read_text())
    assert manifest["seeds"] == {"nmf": 0, "bootstrap": 1, "simulate": 2}
    assert manifest["regimes"] == ["ddd", "queue"]
    assert manifest["uncertainty"] == ["min", "emp", "sa"]
    assert manifest["thresholds"] == [1, 2, 3, 4, 5]
    for name in manifest["outputs"]:
        assert (run / name).exists()
    rewards = (run / "rewards.csv").read_text().splitlines()
    assert rewards[0] == "threshold,nominal,nmf,worst_min,worst_emp,worst_sa"
    assert len(rewards) == 6
    for regime in ("ddd", "queue"):
        table = (run / f"sim_{regime}.csv").read_text().splitlines()
        assert table[0] == "threshold,kernel_label,metric,value,stderr"
        labels = {line.split(",")[1] for line in table[1:]}
        assert labels == {"nominal", "nmf", "worst_min", "worst_emp", "worst_sa"}


def test_pipeline_worst_cases_stay_in_their_sets(pipeline_runs, small_scenario_path):
    doc = ScenarioDocument.from_path(str(small_scenario_path))
    run = pipeline_runs / "run-0001"
    worst = json.loads((run / "worst_case.json").read_text())
    rewards = {}
    for line in (run / "rewards.csv").read_text().splitlines()[1:]:
        cells = line.split(",")
        rewards[int(cells[0])] = dict(
            zip(("nominal", "nmf", "worst_min", "worst_emp", "worst_sa"),
                map(float, cells[1:]))
        )
    uset = robust.RectangularSet(doc.kernel, doc.alpha)
    for tau, entry in worst["sa"].items():
        kernel = mdp.TransitionKernel(np.array(entry["kernel"]))
        for i in range(doc.n):
            assert uset.row_sets[i].contains(kernel.matrix[i])
        row = rewards[int(tau)]
        assert entry["reward"] <= row["nominal"] + 1e-9
        assert abs(entry["reward"] - row["worst_sa"]) < 1e-12


def test_pipeline_solves_are_consistent(pipeline_runs):
    run = pipeline_runs / "run-0001"
    solves = json.loads((run / "solve.json").read_text())
    assert set(solves) == {"nominal", "robust_min", "robust_emp", "robust_sa"}
    nominal = solves["nominal"]
    assert isinstance(nominal["threshold"], int)
    # the nominal kernel is a member of the entrywise set, so its optimum
    # bounds the max-min value and the robust threshold sits at or below
    sa = solves["robust_sa"]
    assert sa["reward_at_p0"] <= nominal["reward_at_p0"] + 1e-9
    assert sa["threshold"] <= nominal["threshold"]
    for label in ("robust_min", "robust_emp", "robust_sa"):
        entry = solves[label]
        values = np.array(entry["value"])
        assert values.shape == (8,) and np.all(np.isfinite(values))
        assert np.array(entry["worst_kernel"]).shape == (4, 7)


def test_pipeline_append_only_and_deterministic(pipeline_runs):
    first = pipeline_runs / "run-0001"
    second = pipeline_runs / "run-0002"
    assert first.is_dir() and second.is_dir()
    names = sorted(p.name for p in first.iterdir())
    assert names == sorted(p.name for p in second.iterdir())
    for name in names:
        assert (first / name).read_bytes() == (second / name).read_bytes()


def test_pipeline_singleton_uncertainty_matches_nominal(tmp_path):
    path = tmp_path / "point.json"
    path.write_text(json.dumps(small_scenario_dict(alpha_value=0.0)))
    out = tmp_path / "out"
    code = cli.main([
        "pipeline",
        "--scenario", str(path),
        "--out", str(out),
        "--uncertainty", "sa",
        "--regime", "ddd",
        "--reps", "1",
    ])
    assert code == 0
    run = out / "run-0001"
    solves = json.loads((run / "solve.json").read_text())
    nom, rob = solves["nominal"], solves["robust_sa"]
    assert rob["threshold"] == nom["threshold"]
    assert np.max(np.abs(np.array(rob["value"]) - np.array(nom["value"]))) < 1e-8
    for line in (run / "rewards.csv").read_text().splitlines()[1:]:
        cells = line.split(",")
        assert abs(float(cells[1]) - float(cells[3])) < 1e-8
    assert not (run / "sim_queue.csv").exists()
    manifest = json.loads((run / "manifest.json").read_text())
    assert manifest["regimes"] == ["ddd"] and manifest["uncertainty"] == ["sa"]


def test_pipeline_seed_override(tmp_path, small_scenario_path):
    out = tmp_path / "seeded"
    code = cli.main([
        "pipeline",
        "--scenario", str(small_scenario_path),
        "--out", str(out),
        "--seed", "9",
        "--uncertainty", "sa",
        "--regime", "ddd",
        "--reps", "1",
    ])
    assert code == 0
    manifest = json.loads((out / "run-0001" / "manifest.json").read_text())
    assert manifest["seeds"] == {"nmf": 9, "bootstrap": 10, "simulate": 11}


# ---------------------------------------------------------------------------
# exit codes
# ---------------------------------------------------------------------------

@pytest.mark.parametrize(
    "exc,code",
    [
        (robust.InfeasibleError("boxes"), 4),
        (mdp.ConvergenceError("stuck"), 3),
        (RuntimeError("no bracket"), 3),
        (SchemaError("bad"), 2),
        (estimation.EstimationError("row"), 2),
        (ValueError("shape"), 2),
        (OSError("disk"), 2),
    ],
)
def test_exit_code_mapping(exc, code):
    assert cli._exit_code(exc) == code

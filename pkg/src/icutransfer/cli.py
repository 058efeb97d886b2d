"""Command-line front end tying the library together.

Three subcommands: ``estimate`` fits a kernel and interval radii from a
trajectory CSV, ``check`` prints the structural-condition report for a
scenario, and ``pipeline`` reproduces the full experiment chain
(factorization, uncertainty sets, nominal and robust solves,
per-threshold adversaries, hospital sweeps in both discharge regimes)
into an append-only run directory.

Scenario files are versioned JSON documents validated field by field;
every command is deterministic given the scenario's seeds, and the
pipeline manifest records the resolved seeds, flags, and tolerances
needed to replay a run bit for bit.  The factorization honors the
ICUTRANSFER_NMF_CACHE environment variable for multistart checkpoints.

Exit codes: 0 success, 2 schema or validation failure, 3 numerical
non-convergence, 4 infeasible uncertainty set.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from icutransfer import estimation, mdp, nmf, robust, simulator
from icutransfer.mdp import RewardSpec, TransferPolicy, TransitionKernel

__all__ = [
    "SchemaError",
    "ScenarioDocument",
    "build_parser",
    "cmd_check",
    "cmd_estimate",
    "cmd_pipeline",
    "demo_scenario_path",
    "main",
]

EXIT_OK = 0
EXIT_SCHEMA = 2
EXIT_NUMERIC = 3
EXIT_INFEASIBLE = 4

VI_TOL = 1e-10

_UNCERTAINTY_LABELS = ("min", "emp", "sa")
_REWARD_KEYS = (
    "r_W",
    "r_RL",
    "r_D",
    "r_PT_RL",
    "r_PT_D",
    "r_CR_RL",
    "r_CR_D",
    "d_A",
    "d_C",
    "discount",
)
_HOSPITAL_KEYS = (
    "icu_capacity",
    "total_ward_rate",
    "direct_rate",
    "regime",
    "queue_death_prob",
    "fraction_concentration",
)


class SchemaError(ValueError):
    """Scenario document rejected; the message names the offending field."""


class _StageFailure(Exception):
    def __init__(self, stage: str, cause: BaseException) -> None:
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause


# ---------------------------------------------------------------------------
# scenario documents
# ---------------------------------------------------------------------------

def _require(doc: Mapping, key: str, where: str) -> Any:
    if key not in doc:
        raise SchemaError(f"{where}.{key} is required")
    return doc[key]


def _reject_unknown(doc: Mapping, allowed: Sequence[str], where: str) -> None:
    extra = sorted(set(doc) - set(allowed))
    if extra:
        raise SchemaError(f"{where} has unknown fields: {', '.join(extra)}")


def _as_number(value: Any, where: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise SchemaError(f"{where} must be a number")
    return float(value)


def _as_int(value: Any, where: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise SchemaError(f"{where} must be an integer")
    return value


def _as_vector(value: Any, where: str) -> np.ndarray:
    if not isinstance(value, list) or not value:
        raise SchemaError(f"{where} must be a nonempty list of numbers")
    return np.array([_as_number(x, where) for x in value])


@dataclass(frozen=True)
class ScenarioDocument:
    """Validated experiment description loaded from versioned JSON.

    Carries the nominal kernel, rewards, start distribution, interval
    radii and factorization knobs, the hospital configuration, sweep
    grids, and named seeds.  ``sha256`` fingerprints the source text for
    the replay manifest.
    """

    version: int
    name: str
    kernel: TransitionKernel
    rewards: RewardSpec
    p0: np.ndarray
    alpha: np.ndarray
    rank: int
    bootstrap_samples: int
    nmf_starts: int
    nmf_iters: int
    thresholds: tuple[int, ...]
    hospital: dict
    simulate: dict
    seeds: dict
    sha256: str
    source_text: str = field(repr=False)

    @property
    def n(self) -> int:
        return self.kernel.n

    def scenario(self, regime: str | None = None) -> simulator.HospitalScenario:
        kwargs = dict(self.hospital)
        if regime is not None:
            kwargs["regime"] = regime
        try:
            return simulator.default_scenario(self.kernel, **kwargs)
        except ValueError as exc:
            raise SchemaError(f"hospital: {exc}") from None

    @classmethod
    def from_json(cls, text: str) -> "ScenarioDocument":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"not valid JSON: {exc}") from None
        if not isinstance(doc, dict):
            raise SchemaError("scenario must be a JSON object")
        _reject_unknown(
            doc,
            (
                "version",
                "name",
                "kernel",
                "rewards",
                "initial_distribution",
                "uncertainty",
                "thresholds",
                "hospital",
                "simulate",
                "seeds",
            ),
            "scenario",
        )
        version = _as_int(_require(doc, "version", "scenario"), "version")
        if version != 1:
            raise SchemaError(f"unsupported scenario version {version}")
        name = doc.get("name", "scenario")
        if not isinstance(name, str) or not name:
            raise SchemaError("name must be a nonempty string")

        raw_kernel = _require(doc, "kernel", "scenario")
        if not isinstance(raw_kernel, list) or not raw_kernel:
            raise SchemaError("kernel must be a nonempty list of rows")
        rows = [_as_vector(row, "kernel row") for row in raw_kernel]
        n = len(rows)
        for i, row in enumerate(rows):
            if row.size != n + 3:
                raise SchemaError(
                    f"kernel row {i + 1} must have {n + 3} entries, "
                    f"got {row.size}"
                )
        try:
            kernel = TransitionKernel(np.vstack(rows))
        except ValueError as exc:
            raise SchemaError(f"kernel: {exc}") from None

        raw_rewards = _require(doc, "rewards", "scenario")
        if not isinstance(raw_rewards, dict):
            raise SchemaError("rewards must be an object")
        _reject_unknown(raw_rewards, _REWARD_KEYS, "rewards")
        vals = {
            key: _as_number(_require(raw_rewards, key, "rewards"), f"rewards.{key}")
            for key in _REWARD_KEYS
        }
        try:
            rewards = RewardSpec(**vals)
        except ValueError as exc:
            raise SchemaError(f"rewards: {exc}") from None

        p0 = _as_vector(
            _require(doc, "initial_distribution", "scenario"),
            "initial_distribution",
        )
        try:
            p0 = mdp.validate_initial_distribution(p0, n)
        except ValueError as exc:
            raise SchemaError(f"initial_distribution: {exc}") from None

        raw_unc = _require(doc, "uncertainty", "scenario")
        if not isinstance(raw_unc, dict):
            raise SchemaError("uncertainty must be an object")
        _reject_unknown(
            raw_unc,
            ("alpha", "rank", "bootstrap_samples", "nmf_starts", "nmf_iters"),
            "uncertainty",
        )
        alpha = _as_vector(_require(raw_unc, "alpha", "uncertainty"), "uncertainty.alpha")
        if alpha.size != n:
            raise SchemaError(
                f"uncertainty.alpha must have one radius per severity score "
                f"({n}), got {alpha.size}"
            )
        if np.any(alpha < 0.0) or np.any(alpha > 1.0):
            raise SchemaError("uncertainty.alpha entries must lie in [0, 1]")
        rank = _as_int(_require(raw_unc, "rank", "uncertainty"), "uncertainty.rank")
        if not 1 <= rank <= n:
            raise SchemaError(f"uncertainty.rank must lie in [1, {n}]")
        q = _as_int(raw_unc.get("bootstrap_samples", 200), "uncertainty.bootstrap_samples")
        starts = _as_int(raw_unc.get("nmf_starts", 64), "uncertainty.nmf_starts")
        iters = _as_int(raw_unc.get("nmf_iters", 300), "uncertainty.nmf_iters")
        for label, value in (
            ("bootstrap_samples", q),
            ("nmf_starts", starts),
            ("nmf_iters", iters),
        ):
            if value < 1:
                raise SchemaError(f"uncertainty.{label} must be positive")

        raw_taus = doc.get("thresholds", list(range(1, n + 2)))
        if not isinstance(raw_taus, list) or not raw_taus:
            raise SchemaError("thresholds must be a nonempty list")
        thresholds = tuple(_as_int(t, "thresholds entry") for t in raw_taus)
        for t in thresholds:
            if not 1 <= t <= n + 1:
                raise SchemaError(f"threshold {t} must lie in [1, {n + 1}]")

        raw_hosp = _require(doc, "hospital", "scenario")
        if not isinstance(raw_hosp, dict):
            raise SchemaError("hospital must be an object")
        _reject_unknown(raw_hosp, _HOSPITAL_KEYS, "hospital")
        hospital = dict(raw_hosp)
        hospital["icu_capacity"] = _as_int(
            _require(raw_hosp, "icu_capacity", "hospital"), "hospital.icu_capacity"
        )

        raw_sim = _require(doc, "simulate", "scenario")
        if not isinstance(raw_sim, dict):
            raise SchemaError("simulate must be an object")
        _reject_unknown(raw_sim, ("reps", "horizon", "warmup"), "simulate")
        sim_cfg = {
            "reps": _as_int(raw_sim.get("reps", 20), "simulate.reps"),
            "horizon": _as_int(raw_sim.get("horizon", 1460), "simulate.horizon"),
            "warmup": _as_int(raw_sim.get("warmup", 120), "simulate.warmup"),
        }
        if sim_cfg["reps"] < 1:
            raise SchemaError("simulate.reps must be positive")
        if sim_cfg["horizon"] < 1:
            raise SchemaError("simulate.horizon must be positive")
        if not 0 <= sim_cfg["warmup"] < sim_cfg["horizon"]:
            raise SchemaError("simulate.warmup must lie in [0, horizon)")

        raw_seeds = _require(doc, "seeds", "scenario")
        if not isinstance(raw_seeds, dict):
            raise SchemaError("seeds must be an object")
        _reject_unknown(raw_seeds, ("nmf", "bootstrap", "simulate"), "seeds")
        seeds = {}
        for key in ("nmf", "bootstrap", "simulate"):
            value = _as_int(_require(raw_seeds, key, "seeds"), f"seeds.{key}")
            if value < 0:
                raise SchemaError(f"seeds.{key} must be nonnegative")
            seeds[key] = value

        out = cls(
            version=version,
            name=name,
            kernel=kernel,
            rewards=rewards,
            p0=p0,
            alpha=alpha,
            rank=rank,
            bootstrap_samples=q,
            nmf_starts=starts,
            nmf_iters=iters,
            thresholds=thresholds,
            hospital=hospital,
            simulate=sim_cfg,
            seeds=seeds,
            sha256=hashlib.sha256(text.encode()).hexdigest(),
            source_text=text,
        )
        out.scenario()  # surface hospital-parameter problems at load time
        return out

    @classmethod
    def from_path(cls, path: str) -> "ScenarioDocument":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise SchemaError(f"cannot read scenario {path}: {exc}") from None
        return cls.from_json(text)


def demo_scenario_path() -> Path:
    """Filesystem path of the bundled demonstration scenario."""
    return Path(
        str(resources.files("icutransfer").joinpath("data/demo_scenario.json"))
    )


def _resolve_seeds(doc: ScenarioDocument, override: int | None) -> dict:
    if override is None:
        return dict(doc.seeds)
    if override < 0:
        raise SchemaError("--seed must be nonnegative")
    return {"nmf": override, "bootstrap": override + 1, "simulate": override + 2}


# ---------------------------------------------------------------------------
# estimate
# ---------------------------------------------------------------------------

def cmd_estimate(args: argparse.Namespace) -> int:
    def load():
        data = estimation.load_trajectories_csv(args.trajectories, n=args.scores)
        kernel, counts = estimation.estimate_kernel(data)
        spec = estimation.confidence_radii(counts, level=args.level)
        return data, kernel, counts, spec

    data, kernel, counts, spec = _run_stage("estimate", load)
    payload = {
        "version": 1,
        "scores": kernel.n,
        "hospitalizations": len(data),
        "kernel": kernel.matrix.tolist(),
        "counts": counts.tolist(),
        "alpha": spec.alpha.tolist(),
        "level": spec.level,
    }
    _run_stage(
        "write",
        lambda: Path(args.out).write_text(json.dumps(payload, indent=2) + "\n"),
    )
    print(
        f"estimated a {kernel.n}-score kernel from {len(data)} "
        f"hospitalizations ({int(counts.sum())} transitions); wrote {args.out}"
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# check
# ---------------------------------------------------------------------------

def _structure_witness(kernel: TransitionKernel, rewards: RewardSpec) -> list[str]:
    lines = []
    n = kernel.n
    outs = np.array([mdp.outside_option(kernel, rewards, i) for i in range(1, n + 1)])
    mass = kernel.ward_block.sum(axis=1)
    ratio = (rewards.r_W + rewards.discount * rewards.r_PT) / (
        rewards.r_W + rewards.discount * rewards.r_RL
    )
    for i in range(n - 1):
        if outs[i] < outs[i + 1] - 1e-12:
            lines.append(
                f"    outside option rises S{i + 1} -> S{i + 2}: "
                f"{outs[i]:.6g} < {outs[i + 1]:.6g}"
            )
    for i in range(n - 1):
        if ratio * mass[i] < mass[i + 1] - 1e-12:
            lines.append(
                f"    ward-mass decay too slow S{i + 1} -> S{i + 2}: "
                f"{ratio:.4g} * {mass[i]:.6g} < {mass[i + 1]:.6g}"
            )
    return lines


def _set_witness(
    uset: "robust.FactorModel | robust.RectangularSet", rewards: RewardSpec
) -> list[str]:
    # first adjacent score pair whose set-wide minimum goes negative, with
    # the minimizing vertex realized there
    n = uset.n
    lam = rewards.discount
    ratio = (rewards.r_W + lam * rewards.r_PT) / (rewards.r_W + lam * rewards.r_RL)
    term = np.array([rewards.r_CR, rewards.r_RL, rewards.r_D])

    def fmt(vec: np.ndarray) -> str:
        return "[" + ", ".join(f"{x:.4g}" for x in vec) + "]"

    if isinstance(uset, robust.FactorModel):
        u = uset.U
        for i in range(n - 1):
            for kind, cost_of in (
                ("ward-mass", lambda ell: np.concatenate(
                    [np.full(n, ratio * u[i, ell] - u[i + 1, ell]), np.zeros(3)]
                )),
                ("outside-option", lambda ell: np.concatenate(
                    [np.zeros(n), (u[i, ell] - u[i + 1, ell]) * term]
                )),
            ):
                total = 0.0
                verts = []
                for ell, box in enumerate(uset.factor_sets):
                    w, val = robust.inner_min_box_simplex(cost_of(ell), box)
                    total += val
                    verts.append(w)
                if total < -1e-12:
                    lines = [
                        f"    {kind} gap S{i + 1} -> S{i + 2} dips to "
                        f"{total:.6g}; minimizing factors:"
                    ]
                    lines += [
                        f"      factor {ell + 1}: {fmt(w)}"
                        for ell, w in enumerate(verts)
                    ]
                    return lines
        return []

    ward_cost = np.concatenate([np.ones(n), np.zeros(3)])
    out_cost = np.concatenate([np.zeros(n), term])
    for i in range(n - 1):
        for kind, cost in (("ward-mass", ward_cost), ("outside-option", out_cost)):
            scale = ratio if kind == "ward-mass" else 1.0
            w_lo, lo = robust.inner_min_box_simplex(scale * cost, uset.row_sets[i])
            w_hi, neg = robust.inner_min_box_simplex(-cost, uset.row_sets[i + 1])
            gap = lo - (-neg)
            if gap < -1e-12:
                return [
                    f"    {kind} gap S{i + 1} -> S{i + 2} dips to {gap:.6g}",
                    f"      minimizing row S{i + 1}: {fmt(w_lo)}",
                    f"      maximizing row S{i + 2}: {fmt(w_hi)}",
                ]
    return []


def _factorize(doc: ScenarioDocument, seeds: Mapping[str, int]) -> nmf.NmfSolution:
    problem = nmf.NmfProblem(
        doc.kernel, rank=doc.rank, starts=doc.nmf_starts, iters=doc.nmf_iters
    )
    return nmf.nmf_factorize(problem, seed=seeds["nmf"])


def _build_sets(
    doc: ScenarioDocument,
    which: str,
    seeds: Mapping[str, int],
    solution: nmf.NmfSolution | None = None,
) -> tuple[dict, nmf.NmfSolution | None]:
    labels = _UNCERTAINTY_LABELS if which == "all" else (which,)
    if solution is None and {"min", "emp"} & set(labels):
        solution = _factorize(doc, seeds)
    sets: dict[str, Any] = {}
    for label in labels:
        if label == "min":
            sets[label] = nmf.build_u_min(solution, doc.alpha)
        elif label == "emp":
            sets[label] = nmf.build_u_emp(
                doc.kernel,
                doc.alpha,
                solution.U,
                q=doc.bootstrap_samples,
                seed=seeds["bootstrap"],
            )
        else:
            sets[label] = robust.RectangularSet(doc.kernel, doc.alpha)
    return sets, solution


def cmd_check(args: argparse.Namespace) -> int:
    doc = _run_stage("scenario", lambda: ScenarioDocument.from_path(args.scenario))
    seeds = _resolve_seeds(doc, args.seed)
    kernel, rewards = doc.kernel, doc.rewards

    print(f"scenario {doc.name!r}: {doc.n} severity scores")
    ok0 = mdp.check_assumption_0(rewards)
    print(f"assumption 1 (one-period recovery beats lingering): "
          f"{'pass' if ok0 else 'FAIL'}")
    if not ok0:
        forever = rewards.r_W / (1.0 - rewards.discount)
        leave = rewards.r_W + rewards.discount * rewards.r_RL
        print(f"    r_W/(1-discount) = {forever:.6g} > {leave:.6g}")

    cond2, cond3, cond4 = mdp.check_assumption_1(kernel, rewards)
    verdict = "pass" if (cond2 and cond3) else ("partial" if cond4 else "FAIL")
    print(
        f"assumption 2 (monotone structure): {verdict} "
        f"(outside-option {'pass' if cond2 else 'FAIL'}, "
        f"ward-mass decay {'pass' if cond3 else 'FAIL'}, "
        f"combined {'pass' if cond4 else 'FAIL'})"
    )
    for line in _structure_witness(kernel, rewards):
        print(line)

    sets, _ = _run_stage(
        "uncertainty", lambda: _build_sets(doc, args.uncertainty, seeds)
    )
    for label, uset in sets.items():
        ok = robust.check_assumption_3(uset, rewards)
        print(f"assumption 3 over U_{label} (set-wide monotone structure): "
              f"{'pass' if ok else 'FAIL'}")
        if not ok:
            for line in _set_witness(uset, rewards):
                print(line)
    return EXIT_OK


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------

def _run_stage(stage: str, fn: Callable):
    try:
        return fn()
    except _StageFailure:
        raise
    except Exception as exc:
        raise _StageFailure(stage, exc) from exc


def _new_run_dir(outdir: Path) -> Path:
    outdir.mkdir(parents=True, exist_ok=True)
    taken = [
        int(p.name.split("-")[-1])
        for p in outdir.glob("run-*")
        if p.name.split("-")[-1].isdigit()
    ]
    run = outdir / f"run-{(max(taken) + 1 if taken else 1):04d}"
    run.mkdir(exist_ok=False)
    return run


def _policy_probs(policy: TransferPolicy) -> list[float]:
    return [float(x) for x in policy.probs]


def cmd_pipeline(args: argparse.Namespace) -> int:
    doc = _run_stage("scenario", lambda: ScenarioDocument.from_path(args.scenario))
    seeds = _resolve_seeds(doc, args.seed)
    reps = doc.simulate["reps"] if args.reps is None else args.reps
    if reps < 1:
        raise _StageFailure("scenario", ValueError("--reps must be positive"))
    regimes = ("ddd", "queue") if args.regime is None else (args.regime,)
    run_dir = _run_stage("scenario", lambda: _new_run_dir(Path(args.out)))
    print(f"writing bundle to {run_dir}")
    kernel, rewards, p0 = doc.kernel, doc.rewards, doc.p0
    n = doc.n

    solution = _run_stage("nmf", lambda: _factorize(doc, seeds))
    nmf_kernel = TransitionKernel(solution.fitted_matrix)
    print(
        f"[nmf] rank {solution.rank} objective {solution.objective:.6e} "
        f"(start {solution.start_index}, {solution.sweeps} sweeps)"
    )
    sets, _ = _run_stage(
        "uncertainty", lambda: _build_sets(doc, args.uncertainty, seeds, solution)
    )
    print(f"[uncertainty] built: {', '.join('U_' + k for k in sets)}")

    def solve():
        v_nom, pol_nom, _ = mdp.value_iteration(kernel, rewards, tol=VI_TOL)
        record = {
            "nominal": {
                "threshold": mdp.is_threshold(pol_nom),
                "policy": _policy_probs(pol_nom),
                "value": [float(x) for x in v_nom],
                "reward_at_p0": float(p0 @ v_nom[:n]),
            }
        }
        for label, uset in sets.items():
            sol = robust.robust_value_iteration(uset, rewards, tol=VI_TOL)
            record[f"robust_{label}"] = {
                "threshold": mdp.is_threshold(sol.policy),
                "policy": _policy_probs(sol.policy),
                "value": [float(x) for x in sol.value],
                "reward_at_p0": float(p0 @ sol.value[:n]),
                "worst_kernel": sol.worst_kernel.matrix.tolist(),
            }
        return record

    solves = _run_stage("solve", solve)
    for label, entry in solves.items():
        print(
            f"[solve] {label}: threshold {entry['threshold']}, "
            f"reward at p0 {entry['reward_at_p0']:.6f}"
        )

    def adversaries():
        table: dict[str, dict[int, tuple[TransitionKernel, float]]] = {}
        for label, uset in sets.items():
            per_tau = {}
            for tau in doc.thresholds:
                policy = TransferPolicy.threshold(tau, n)
                per_tau[tau] = robust.worst_case_kernel(
                    policy, uset, rewards, tol=VI_TOL, p0=p0
                )
            table[label] = per_tau
        return table

    worst = _run_stage("worst_case", adversaries)

    def reward_rows():
        rows = []
        for tau in doc.thresholds:
            policy = TransferPolicy.threshold(tau, n)
            row = {"threshold": tau}
            _, row["nominal"] = mdp.policy_evaluation(policy, kernel, rewards, p0)
            _, row["nmf"] = mdp.policy_evaluation(policy, nmf_kernel, rewards, p0)
            for label in sets:
                row[f"worst_{label}"] = worst[label][tau][1]
            rows.append(row)
        return rows

    rewards_table = _run_stage("worst_case", reward_rows)
    labels = ["nominal", "nmf"] + [f"worst_{label}" for label in sets]
    print(f"[worst_case] {len(doc.thresholds)}-threshold rewards for: "
          + ", ".join(labels))

    def simulate():
        entries = [("nominal", kernel), ("nmf", nmf_kernel)]
        for label in sets:
            entries.append(
                (f"worst_{label}", {tau: worst[label][tau][0] for tau in doc.thresholds})
            )
        outputs = {}
        for regime in regimes:
            rows = simulator.threshold_sweep(
                doc.scenario(regime),
                entries,
                doc.thresholds,
                reps=reps,
                seed=seeds["simulate"],
                horizon=doc.simulate["horizon"],
                warmup=doc.simulate["warmup"],
                threads=args.threads,
            )
            outputs[regime] = rows
        return outputs

    sim_tables = _run_stage("simulate", simulate)
    for regime, rows in sim_tables.items():
        print(f"[simulate] {regime}: {len(rows)} metric rows "
              f"({reps} replications per cell)")

    def bundle():
        files = []

        def emit(name: str, text: str) -> None:
            (run_dir / name).write_text(text)
            files.append(name)

        emit("scenario.json", doc.source_text)
        emit(
            "nmf.json",
            json.dumps(
                {
                    "rank": solution.rank,
                    "objective": solution.objective,
                    "residual_linf": solution.residual_linf,
                    "residual_l1": solution.residual_l1,
                    "start_index": solution.start_index,
                    "sweeps": solution.sweeps,
                    "U": solution.U.tolist(),
                    "W": solution.W.tolist(),
                },
                indent=2,
            )
            + "\n",
        )
        emit("solve.json", json.dumps(solves, indent=2) + "\n")
        emit(
            "worst_case.json",
            json.dumps(
                {
                    label: {
                        str(tau): {
                            "reward": worst[label][tau][1],
                            "kernel": worst[label][tau][0].matrix.tolist(),
                        }
                        for tau in doc.thresholds
                    }
                    for label in sets
                },
                indent=2,
            )
            + "\n",
        )
        header = ",".join(["threshold"] + labels)
        lines = [header]
        for row in rewards_table:
            lines.append(
                ",".join(
                    [str(row["threshold"])] + [repr(row[label]) for label in labels]
                )
            )
        emit("rewards.csv", "\n".join(lines) + "\n")
        for regime, rows in sim_tables.items():
            name = f"sim_{regime}.csv"
            simulator.save_metric_table(rows, run_dir / name)
            files.append(name)
        manifest = {
            "version": 1,
            "scenario": "scenario.json",
            "scenario_sha256": doc.sha256,
            "scenario_name": doc.name,
            "seeds": seeds,
            "reps": reps,
            "threads": args.threads,
            "regimes": list(regimes),
            "uncertainty": list(sets),
            "thresholds": list(doc.thresholds),
            "tolerances": {
                "value_iteration": VI_TOL,
                "nmf_stall": nmf.NmfProblem(kernel, rank=doc.rank).tol,
            },
            "outputs": files,
        }
        (run_dir / "manifest.json").write_text(
            json.dumps(manifest, indent=2) + "\n"
        )

    _run_stage("bundle", bundle)
    print(f"[bundle] manifest and {len(sim_tables) + 5} artifacts in {run_dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing and dispatch
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="icutransfer",
        description="Estimate, check, and reproduce proactive-transfer experiments.",
        epilog=(
            "Set ICUTRANSFER_NMF_CACHE to a directory to checkpoint "
            "factorization multistarts across runs."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    est = sub.add_parser(
        "estimate", help="fit a kernel and interval radii from a trajectory CSV"
    )
    est.add_argument("trajectories", help="CSV of hospitalization,period,state rows")
    est.add_argument("--out", required=True, help="output JSON path")
    est.add_argument(
        "--scores", type=int, default=None, help="severity score count (default: infer)"
    )
    est.add_argument(
        "--level", type=float, default=0.95, help="simultaneous confidence level"
    )
    est.set_defaults(func=cmd_estimate)

    pipe = sub.add_parser(
        "pipeline", help="run the full experiment chain into a fresh run directory"
    )
    pipe.add_argument("--scenario", required=True, help="scenario JSON path")
    pipe.add_argument("--out", required=True, help="bundle root directory")
    pipe.add_argument(
        "--seed", type=int, default=None, help="override every scenario seed"
    )
    pipe.add_argument(
        "--reps", type=int, default=None, help="override simulation replications"
    )
    pipe.add_argument("--threads", type=int, default=1, help="simulation threads")
    pipe.add_argument(
        "--regime",
        choices=("ddd", "queue"),
        default=None,
        help="restrict the hospital sweep to one discharge regime (default: both)",
    )
    pipe.add_argument(
        "--uncertainty",
        choices=_UNCERTAINTY_LABELS + ("all",),
        default="all",
        help="which uncertainty sets to build (default: all)",
    )
    pipe.set_defaults(func=cmd_pipeline)

    chk = sub.add_parser(
        "check", help="print the structural-condition report for a scenario"
    )
    chk.add_argument("--scenario", required=True, help="scenario JSON path")
    chk.add_argument(
        "--seed", type=int, default=None, help="override every scenario seed"
    )
    chk.add_argument(
        "--uncertainty",
        choices=_UNCERTAINTY_LABELS + ("all",),
        default="all",
        help="which uncertainty sets to examine (default: all)",
    )
    chk.set_defaults(func=cmd_check)
    return parser


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, robust.InfeasibleError):
        return EXIT_INFEASIBLE
    if isinstance(exc, (mdp.ConvergenceError, RuntimeError)):
        return EXIT_NUMERIC
    if isinstance(
        exc, (SchemaError, estimation.EstimationError, ValueError, OSError, TypeError)
    ):
        return EXIT_SCHEMA
    return 1


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except _StageFailure as failure:
        print(f"[{failure.stage}] error: {failure.cause}", file=sys.stderr)
        return _exit_code(failure.cause)


if __name__ == "__main__":
    sys.exit(main())

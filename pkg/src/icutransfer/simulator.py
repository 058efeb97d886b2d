"""Discrete-event hospital model: ward severity chains feeding a finite ICU.

Ward patients progress through severity scores on a 6-hour grid and may be
proactively transferred when a bed is free.  Crashes, direct admits, and
ICU readmissions demand a bed immediately; a full ICU either discharges
the occupant with the shortest remaining service time (demand-driven
discharge) or queues the arrival, depending on the regime.  ICU stays
split a lognormal hospital LOS into an ICU portion and a ward tail with a
one-coin readmission per discharge.  All event times are measured in
6-hour periods; LOS parameters are entered in days.
"""

from __future__ import annotations

import dataclasses
import heapq
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .mdp import TransferPolicy, TransitionKernel, validate_initial_distribution

__all__ = [
    "FractionModel",
    "HospitalScenario",
    "LosModel",
    "SimEventLog",
    "SimMetrics",
    "analytic_ward_outcomes",
    "calibrated_ward_kernel",
    "default_scenario",
    "run_simulation",
    "save_metric_table",
    "sensitivity_sweep",
    "simulate_replication",
    "threshold_sweep",
]

PERIODS_PER_DAY = 4  # 6-hour slots
HOURS_PER_PERIOD = 6.0

# published per-score statistics for the ten-score system: arrival mix,
# proactive mortality, proactive LOS mean and std (days)
SCORE_MIX = np.array(
    [17.6, 20.3, 20.0, 14.9, 16.9, 2.2, 2.0, 2.0, 2.0, 2.0]
) / 100.0
PROACTIVE_DEATH = np.array(
    [0.01, 0.02, 0.04, 0.05, 0.11, 0.18, 0.28, 0.39, 0.70, 6.84]
) / 100.0
PROACTIVE_LOS_MEAN = np.array(
    [0.85, 0.91, 0.97, 1.04, 1.17, 1.36, 1.45, 1.57, 1.85, 3.77]
)
PROACTIVE_LOS_STD = np.array(
    [0.68, 0.74, 0.78, 0.84, 0.95, 1.10, 1.17, 1.27, 1.50, 3.04]
)

CRASH_LOS_MEAN_DAYS = 12.54
CRASH_LOS_STD_DAYS = 10.13
DIRECT_LOS_MEAN_DAYS = 5.49
DIRECT_LOS_STD_DAYS = 5.71
DEATH_CRASH = 0.5728
DEATH_DIRECT = 0.0941
READMIT_CRASH = 0.1688
READMIT_DIRECT = 0.1576
DDD_READMIT_MARKUP = 1.15
WARD_ICU_FRACTION_MEAN = 0.4692
DIRECT_ICU_FRACTION_MEAN = 0.5079
QUEUE_DEATH_PROB = 0.0684

_BED_KINDS = ("direct", "crash", "readmit")


# ---------------------------------------------------------------------------
# stochastic primitives
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LosModel:
    """Lognormal length of stay, parameterized by mean and std in days."""

    mean_days: float
    std_days: float

    def __post_init__(self) -> None:
        if not (self.mean_days > 0.0 and self.std_days > 0.0):
            raise ValueError("LOS mean and std must be positive")

    def sample_periods(self, rng: np.random.Generator) -> float:
        m, s = self.mean_days, self.std_days
        var = math.log1p((s / m) ** 2)
        mu = math.log(m) - 0.5 * var
        return float(np.exp(rng.normal(mu, math.sqrt(var)))) * PERIODS_PER_DAY


@dataclass(frozen=True)
class FractionModel:
    """Beta-distributed ICU share of the hospital LOS, moment-matched."""

    mean: float
    concentration: float = 10.0

    def __post_init__(self) -> None:
        if not 0.0 < self.mean < 1.0:
            raise ValueError("fraction mean must lie strictly in (0, 1)")
        if self.concentration <= 0.0:
            raise ValueError("concentration must be positive")

    def sample(self, rng: np.random.Generator) -> float:
        a = self.mean * self.concentration
        b = (1.0 - self.mean) * self.concentration
        return float(rng.beta(a, b))


# ---------------------------------------------------------------------------
# scenario
# ---------------------------------------------------------------------------


def _rate_profile(rates, rows: int | None) -> np.ndarray:
    """Normalize a rate spec to (rows, slots) or (slots,) for rows=None."""
    arr = np.asarray(rates, dtype=float)
    if rows is None:
        if arr.ndim == 0:
            arr = arr[None]
        if arr.ndim != 1 or arr.size < 1:
            raise ValueError("direct arrival rate must be a scalar or vector")
    else:
        if arr.ndim == 1:
            arr = arr[:, None]
        if arr.ndim != 2 or arr.shape[0] != rows or arr.shape[1] < 1:
            raise ValueError("ward arrival rates must be per-score (optionally per-slot)")
    if np.any(arr < 0.0) or not np.all(np.isfinite(arr)):
        raise ValueError("arrival rates must be finite and nonnegative")
    return arr


@dataclass(frozen=True)
class HospitalScenario:
    """Full parameterization of the simulated hospital.

    ``ward_arrival_rates`` is per score, optionally per 6h slot of a
    repeating profile (patients per period).  ``regime`` selects what a
    full ICU does with a bed demand: ``"ddd"`` evicts the occupant with
    the shortest remaining ICU time, ``"queue"`` holds arrivals FCFS with
    a per-period death risk.
    """

    icu_capacity: int
    ward_arrival_rates: np.ndarray
    direct_arrival_rate: np.ndarray
    kernel: TransitionKernel
    crash_los: LosModel
    direct_los: LosModel
    proactive_los: tuple[LosModel, ...]
    ward_icu_fraction: FractionModel
    direct_icu_fraction: FractionModel
    death_crash: float
    death_direct: float
    death_proactive: np.ndarray
    readmit_crash: float
    readmit_direct: float
    readmit_ddd: float | None = None
    readmit_proactive: float | None = None
    regime: str = "ddd"
    queue_death_prob: float = QUEUE_DEATH_PROB

    def __post_init__(self) -> None:
        if self.icu_capacity < 1:
            raise ValueError("need at least one ICU bed")
        n = self.kernel.n
        ward_rates = _rate_profile(self.ward_arrival_rates, n)
        direct_rates = _rate_profile(self.direct_arrival_rate, None)
        ward_rates.setflags(write=False)
        direct_rates.setflags(write=False)
        object.__setattr__(self, "ward_arrival_rates", ward_rates)
        object.__setattr__(self, "direct_arrival_rate", direct_rates)
        if len(self.proactive_los) != n:
            raise ValueError("need one proactive LOS model per score")
        dp = np.asarray(self.death_proactive, dtype=float)
        if dp.shape != (n,):
            raise ValueError("need one proactive death probability per score")
        probs = [self.death_crash, self.death_direct, self.readmit_crash,
                 self.readmit_direct, self.queue_death_prob, *dp]
        if self.readmit_ddd is None:
            object.__setattr__(
                self, "readmit_ddd", DDD_READMIT_MARKUP * self.readmit_direct
            )
        if self.readmit_proactive is None:
            object.__setattr__(self, "readmit_proactive", self.readmit_crash)
        probs += [self.readmit_ddd, self.readmit_proactive]
        if any(not 0.0 <= p <= 1.0 for p in probs):
            raise ValueError("probabilities must lie in [0, 1]")
        if np.any(dp > self.death_crash):
            raise ValueError("proactive mortality cannot exceed crash mortality")
        object.__setattr__(self, "death_proactive", dp)
        dp.setflags(write=False)
        if self.regime not in ("ddd", "queue"):
            raise ValueError("regime must be 'ddd' or 'queue'")

    @property
    def n(self) -> int:
        return self.kernel.n

    def with_kernel(self, kernel: TransitionKernel) -> "HospitalScenario":
        if kernel.n != self.n:
            raise ValueError("replacement kernel has the wrong score count")
        return dataclasses.replace(self, kernel=kernel)


def default_scenario(
    kernel: TransitionKernel,
    icu_capacity: int,
    total_ward_rate: float = 1.5,
    direct_rate: float = 0.25,
    regime: str = "ddd",
    queue_death_prob: float = QUEUE_DEATH_PROB,
    fraction_concentration: float = 10.0,
) -> HospitalScenario:
    """Scenario built from the published patient statistics.

    The per-score tables are stated for ten scores; other score counts
    interpolate them over the normalized severity axis, so the shape of
    the severity gradient is preserved.
    """
    n = kernel.n
    if n == 10:
        mix, dp = SCORE_MIX, PROACTIVE_DEATH
        lm, ls = PROACTIVE_LOS_MEAN, PROACTIVE_LOS_STD
    else:
        pos = np.linspace(0.0, 1.0, n)
        ref = np.linspace(0.0, 1.0, 10)
        mix = np.interp(pos, ref, SCORE_MIX)
        mix = mix / mix.sum()
        dp = np.interp(pos, ref, PROACTIVE_DEATH)
        lm = np.interp(pos, ref, PROACTIVE_LOS_MEAN)
        ls = np.interp(pos, ref, PROACTIVE_LOS_STD)
    return HospitalScenario(
        icu_capacity=icu_capacity,
        ward_arrival_rates=total_ward_rate * (mix / mix.sum()),
        direct_arrival_rate=np.array([direct_rate]),
        kernel=kernel,
        crash_los=LosModel(CRASH_LOS_MEAN_DAYS, CRASH_LOS_STD_DAYS),
        direct_los=LosModel(DIRECT_LOS_MEAN_DAYS, DIRECT_LOS_STD_DAYS),
        proactive_los=tuple(LosModel(m, s) for m, s in zip(lm, ls)),
        ward_icu_fraction=FractionModel(WARD_ICU_FRACTION_MEAN, fraction_concentration),
        direct_icu_fraction=FractionModel(
            DIRECT_ICU_FRACTION_MEAN, fraction_concentration
        ),
        death_crash=DEATH_CRASH,
        death_direct=DEATH_DIRECT,
        death_proactive=dp,
        readmit_crash=READMIT_CRASH,
        readmit_direct=READMIT_DIRECT,
        regime=regime,
        queue_death_prob=queue_death_prob,
    )


def calibrated_ward_kernel(n: int = 10) -> TransitionKernel:
    """Sticky severity walk with small score-graded exits, clinically scaled.

    Per-period crash, recovery, and death probabilities ramp with severity
    at magnitudes that reproduce a ward mortality near 1-2% and keep every
    score's crash-displaced ICU load below its proactive ICU load, so
    transferring more scores always adds net ICU demand.  Deterministic;
    the bundled demo scenario is built on it.
    """
    if n < 2:
        raise ValueError("need at least two severity scores")
    scores = np.linspace(0.0, 1.0, n)
    crash = 0.0015 + (0.008 - 0.0015) * scores**1.5
    recover = (0.13 - 0.05) * (1.0 - scores) ** 1.5 + 0.05
    die = 0.0005 + (0.009 - 0.0005) * scores**3
    mat = np.zeros((n, n + 3))
    for i in range(n):
        ward = 1.0 - crash[i] - recover[i] - die[i]
        stay = 0.80 * ward
        move = ward - stay
        mat[i, i] = stay
        if i == 0:
            mat[i, 1] += move
        elif i == n - 1:
            mat[i, n - 2] += move
        else:
            mat[i, i - 1] += 0.62 * move
            mat[i, i + 1] += 0.38 * move
        mat[i, n] = crash[i]
        mat[i, n + 1] = recover[i]
        mat[i, n + 2] = die[i]
    return TransitionKernel(mat)


# ---------------------------------------------------------------------------
# results
# ---------------------------------------------------------------------------


_FRACTION_METRICS = frozenset(
    [
        "mortality_rate",
        "avg_icu_occupancy",
        "ddd_fraction",
        "ward_death_fraction",
        "ward_crash_fraction",
        "ward_recover_fraction",
        "ward_transfer_fraction",
        "queue_entry_direct",
        "queue_entry_crash",
        "queue_entry_readmit",
        "queue_death_fraction",
    ]
)


@dataclass(frozen=True)
class SimMetrics:
    """Replication-averaged metrics with standard errors.

    Ratio metrics whose denominator never materialized (no resolved
    patients, no bed demand of a type) are absent from ``means`` rather
    than reported as zero.  ``stderrs`` holds the standard error of the
    mean for every metric observed in at least two replications.
    """

    replications: int
    means: dict
    stderrs: dict

    def __post_init__(self) -> None:
        if self.replications < 1:
            raise ValueError("need at least one replication")
        for name in _FRACTION_METRICS & self.means.keys():
            v = self.means[name]
            if not -1e-9 <= v <= 1.0 + 1e-9:
                raise ValueError(f"{name} must be a fraction, got {v}")

    @property
    def mortality_rate(self) -> float:
        return self.means["mortality_rate"]

    @property
    def mean_los_hours(self) -> float:
        return self.means["mean_los_hours"]

    @property
    def avg_icu_occupancy(self) -> float:
        return self.means["avg_icu_occupancy"]

    @property
    def ddd_fraction(self) -> float:
        return self.means["ddd_fraction"]


@dataclass(frozen=True)
class SimEventLog:
    """Chronological event trace of one replication, replayable by seed."""

    seed: int
    replication: int
    events: tuple

    def to_jsonl(self, path=None) -> str | None:
        out = io.StringIO()
        for t, kind, pid, a, b in self.events:
            out.write(
                json.dumps(
                    {
                        "time": float(t),
                        "event": kind,
                        "patient": int(pid),
                        "a": float(a),
                        "b": float(b),
                    }
                )
            )
            out.write("\n")
        text = out.getvalue()
        if path is None:
            return text
        Path(path).write_text(text)
        return None


# ---------------------------------------------------------------------------
# single-replication engine
# ---------------------------------------------------------------------------


class _Patient:
    __slots__ = (
        "pid", "arrival", "measured", "score", "death_prob", "readmit_nat",
        "direct_split", "total_end", "icu_end", "epoch", "in_icu", "resolved",
        "queued",
    )

    def __init__(self, pid: int, arrival: float, measured: bool, score: int | None):
        self.pid = pid
        self.arrival = arrival
        self.measured = measured
        self.score = score
        self.death_prob = None
        self.readmit_nat = 0.0
        self.direct_split = False
        self.total_end = None
        self.icu_end = None
        self.epoch = 0
        self.in_icu = False
        self.resolved = False
        self.queued = False


class _Engine:
    def __init__(self, scenario, policy, horizon, warmup, seed, rep, collect_log):
        self.sc = scenario
        self.policy = policy
        self.horizon = float(horizon)
        self.warmup = float(warmup)
        self.rng = np.random.default_rng(np.random.SeedSequence((seed, rep)))
        self.collect = collect_log
        self.events = []
        self.heap = []
        self.seq = 0
        self.patients = {}
        self.ward = {}  # pid -> current score, severity-chain phase only
        self.icu = {}  # pid -> scheduled stint end
        self.queue = []  # (pid, enter_time) FCFS, lazily pruned
        self.queue_live = 0
        self.cdf = np.cumsum(scenario.kernel.matrix, axis=1)
        self.cdf[:, -1] = 1.0
        # integrators over [warmup, horizon]
        self.last_t = 0.0
        self.occ_area = 0.0
        self.queue_area = 0.0
        self.max_occupied = 0
        # counters (post-warmup unless suffixed _total)
        self.arrivals_total = 0
        self.resolved_total = 0
        self.deaths = 0
        self.resolved_measured = 0
        self.los_sum = 0.0
        self.icu_admissions = 0
        self.ddd_events = 0
        self.bed_demand = dict.fromkeys(_BED_KINDS, 0)
        self.queue_entries = dict.fromkeys(_BED_KINDS, 0)
        self.queue_deaths = 0
        self.queue_wait_sum = 0.0
        self.queue_served = 0
        self.chain_out = {"death": 0, "recover": 0, "crash": 0, "transfer": 0}

    # -- plumbing --

    def log(self, t, kind, pid, a=0.0, b=0.0):
        if self.collect:
            self.events.append((t, kind, pid, a, b))

    def push(self, t, kind, pid, epoch=0):
        self.seq += 1
        heapq.heappush(self.heap, (t, self.seq, kind, pid, epoch))

    def advance(self, t):
        lo = max(self.last_t, self.warmup)
        hi = min(t, self.horizon)
        if hi > lo:
            self.occ_area += len(self.icu) * (hi - lo)
            self.queue_area += self.queue_live * (hi - lo)
        self.last_t = t

    # -- patient lifecycle --

    def new_patient(self, t, score):
        pid = len(self.patients)
        p = _Patient(pid, t, t >= self.warmup, score)
        self.patients[pid] = p
        self.arrivals_total += 1
        return p

    def resolve(self, p, t, died):
        p.resolved = True
        self.resolved_total += 1
        if p.queued:
            p.queued = False
            self.queue_live -= 1
        if p.measured:
            self.resolved_measured += 1
            self.los_sum += t - p.arrival
            if died:
                self.deaths += 1
        self.log(t, "death" if died else "recover", p.pid)

    def outcome(self, p, t):
        # end of the hospital LOS: terminal coin for the ICU pathway
        self.resolve(p, t, self.rng.random() < p.death_prob)

    # -- ICU bed management --

    def demand_bed(self, p, t, kind):
        if p.measured:
            self.bed_demand[kind] += 1
        self.log(t, "bed_demand", p.pid)
        if len(self.icu) < self.sc.icu_capacity:
            self.admit(p, t, kind)
        elif self.sc.regime == "ddd":
            self.evict_shortest(t)
            self.admit(p, t, kind)
        else:
            p.queued = True
            self.queue.append((p.pid, t, kind))
            self.queue_live += 1
            if p.measured:
                self.queue_entries[kind] += 1
            self.log(t, "queue_enter", p.pid)

    def evict_shortest(self, t):
        victim_pid = min(self.icu, key=lambda q: (self.icu[q], q))
        rest = [self.icu[q] - t for q in self.icu if q != victim_pid]
        victim = self.patients[victim_pid]
        remaining = self.icu[victim_pid] - t
        del self.icu[victim_pid]
        victim.in_icu = False
        victim.epoch += 1  # kills the pending stint-end event
        if t >= self.warmup:
            self.ddd_events += 1
        self.log(t, "ddd_evict", victim_pid, remaining, min(rest) if rest else math.inf)
        self.to_ward_tail(victim, t, self.sc.readmit_ddd)

    def admit(self, p, t, kind):
        if p.total_end is None:
            # first ICU admission fixes the whole hospital LOS
            if kind == "crash":
                los = self.sc.crash_los.sample_periods(self.rng)
                p.death_prob = self.sc.death_crash
                p.readmit_nat = self.sc.readmit_crash
            elif kind == "direct":
                los = self.sc.direct_los.sample_periods(self.rng)
                p.death_prob = self.sc.death_direct
                p.readmit_nat = self.sc.readmit_direct
                p.direct_split = True
            else:  # proactive transfer; score still attached
                los = self.sc.proactive_los[p.score].sample_periods(self.rng)
                p.death_prob = self.sc.death_proactive[p.score]
                p.readmit_nat = self.sc.readmit_proactive
            p.total_end = t + los
            self.push(p.total_end, "outcome", p.pid, p.epoch)
        remaining = p.total_end - t
        if remaining <= 0.0:
            # the LOS lapsed while waiting; no bed time left
            return
        split = (
            self.sc.direct_icu_fraction if p.direct_split
            else self.sc.ward_icu_fraction
        )
        p.in_icu = True
        p.epoch += 1
        p.icu_end = t + split.sample(self.rng) * remaining
        self.icu[p.pid] = p.icu_end
        self.push(p.icu_end, "stint_end", p.pid, p.epoch)
        self.max_occupied = max(self.max_occupied, len(self.icu))
        if t >= self.warmup:
            self.icu_admissions += 1
        self.log(t, "icu_admit", p.pid, p.icu_end - t)

    def release_natural(self, p, t):
        del self.icu[p.pid]
        p.in_icu = False
        self.log(t, "icu_release", p.pid)
        self.to_ward_tail(p, t, p.readmit_nat)
        self.serve_queue(t)

    def to_ward_tail(self, p, t, readmit_prob):
        # post-ICU ward stay until the LOS ends; one readmission coin
        if t >= p.total_end:
            return
        if self.rng.random() < readmit_prob:
            self.push(self.rng.uniform(t, p.total_end), "readmit", p.pid, p.epoch)

    def serve_queue(self, t):
        while self.queue and len(self.icu) < self.sc.icu_capacity:
            pid, entered, kind = self.queue[0]
            p = self.patients[pid]
            if p.resolved or not p.queued:
                self.queue.pop(0)
                continue
            self.queue.pop(0)
            p.queued = False
            self.queue_live -= 1
            if p.measured:
                self.queue_wait_sum += t - entered
                self.queue_served += 1
            self.log(t, "queue_admit", pid, t - entered)
            self.admit(p, t, kind)

    # -- slot boundary: queue risk, transfer decisions, severity moves --

    def slot(self, t):
        if self.sc.regime == "queue" and self.queue_live:
            for pid, _, _ in list(self.queue):
                p = self.patients[pid]
                if p.resolved or not p.queued:
                    continue
                if self.rng.random() < self.sc.queue_death_prob:
                    self.queue_deaths += p.measured
                    self.log(t, "queue_death", pid)
                    self.resolve(p, t, died=True)

        # sickest eligible candidates claim free beds first
        probs = self.policy.probs
        pids = sorted(self.ward)
        willing = []
        for pid in pids:
            s = self.ward[pid]
            pr = probs[s]
            if pr > 0.0 and (pr >= 1.0 or self.rng.random() < pr):
                willing.append((-s, pid))
        willing.sort()
        for _, pid in willing:
            if len(self.icu) >= self.sc.icu_capacity:
                break  # proactive moves never evict and never queue
            s = self.ward.pop(pid)
            p = self.patients[pid]
            self.chain_out["transfer"] += p.measured
            self.log(t, "transfer", pid, s)
            self.admit(p, t, "proactive")

        # severity transitions for everyone left on the ward
        movers = sorted(self.ward)
        if movers:
            scores = np.array([self.ward[pid] for pid in movers])
            draws = self.rng.random(len(movers))
            n = self.sc.n
            for k, pid in enumerate(movers):
                nxt = int(
                    np.searchsorted(self.cdf[scores[k]], draws[k], side="right")
                )
                if nxt < n:
                    self.ward[pid] = nxt
                    self.patients[pid].score = nxt
                    continue
                del self.ward[pid]
                p = self.patients[pid]
                if nxt == n:  # crash, reactive admission now
                    self.chain_out["crash"] += p.measured
                    self.log(t, "crash", pid)
                    self.demand_bed(p, t, "crash")
                elif nxt == n + 1:
                    self.chain_out["recover"] += p.measured
                    self.resolve(p, t, died=False)
                else:
                    self.chain_out["death"] += p.measured
                    self.resolve(p, t, died=True)

    # -- main loop --

    def schedule_arrivals(self):
        ward_rates = self.sc.ward_arrival_rates
        direct_rates = self.sc.direct_arrival_rate
        periods = int(math.ceil(self.horizon))
        for t0 in range(periods):
            width = min(self.horizon - t0, 1.0)
            col = ward_rates[:, t0 % ward_rates.shape[1]] * width
            for s in range(self.sc.n):
                for _ in range(self.rng.poisson(col[s])):
                    self.push(t0 + self.rng.uniform(0.0, width), "ward_arrival", s)
            lam = direct_rates[t0 % direct_rates.shape[0]] * width
            for _ in range(self.rng.poisson(lam)):
                self.push(t0 + self.rng.uniform(0.0, width), "direct_arrival", -1)

    def run(self):
        self.schedule_arrivals()
        for t in range(1, int(math.ceil(self.horizon))):
            self.push(float(t), "slot", -1)
        while self.heap:
            t, _, kind, pid, epoch = heapq.heappop(self.heap)
            if t >= self.horizon:
                break
            self.advance(t)
            if kind == "slot":
                self.slot(t)
            elif kind == "ward_arrival":
                p = self.new_patient(t, pid)  # pid slot carries the score
                self.ward[p.pid] = pid
                self.log(t, "arrive_ward", p.pid, pid)
            elif kind == "direct_arrival":
                p = self.new_patient(t, None)
                self.log(t, "arrive_direct", p.pid)
                self.demand_bed(p, t, "direct")
            else:
                p = self.patients[pid]
                if p.resolved or epoch != p.epoch and kind != "outcome":
                    continue
                if kind == "outcome":
                    if p.in_icu:  # zero-measure tie: stint ends exactly at LOS end
                        del self.icu[pid]
                        p.in_icu = False
                        self.serve_queue(t)
                    self.outcome(p, t)
                elif kind == "readmit":
                    self.log(t, "readmit_demand", pid)
                    self.demand_bed(p, t, "readmit")
                elif kind == "stint_end":
                    self.release_natural(p, t)
            if len(self.icu) > self.sc.icu_capacity:
                raise AssertionError("bed conservation violated")
        self.advance(self.horizon)
        return self.collect_metrics()

    def collect_metrics(self):
        window = self.horizon - self.warmup
        out = {}
        if self.resolved_measured:
            out["mortality_rate"] = self.deaths / self.resolved_measured
            out["mean_los_hours"] = (
                HOURS_PER_PERIOD * self.los_sum / self.resolved_measured
            )
        if window > 0:
            out["avg_icu_occupancy"] = self.occ_area / (
                window * self.sc.icu_capacity
            )
            out["queue_mean_length"] = self.queue_area / window
        if self.icu_admissions:
            out["ddd_fraction"] = self.ddd_events / self.icu_admissions
        chain_total = sum(self.chain_out.values())
        if chain_total:
            out["ward_death_fraction"] = self.chain_out["death"] / chain_total
            out["ward_recover_fraction"] = self.chain_out["recover"] / chain_total
            out["ward_crash_fraction"] = self.chain_out["crash"] / chain_total
            out["ward_transfer_fraction"] = self.chain_out["transfer"] / chain_total
        for kind in _BED_KINDS:
            if self.bed_demand[kind]:
                out[f"queue_entry_{kind}"] = (
                    self.queue_entries[kind] / self.bed_demand[kind]
                )
        entrants = sum(self.queue_entries.values())
        if self.queue_served:
            out["queue_mean_wait_hours"] = (
                HOURS_PER_PERIOD * self.queue_wait_sum / self.queue_served
            )
        if entrants:
            out["queue_death_fraction"] = self.queue_deaths / entrants
        live = sum(not p.resolved for p in self.patients.values())
        out["_arrivals_total"] = self.arrivals_total
        out["_resolved_total"] = self.resolved_total
        out["_live_end"] = live
        out["_icu_admissions"] = self.icu_admissions
        out["_ddd_events"] = self.ddd_events
        out["_max_occupied"] = self.max_occupied
        return out


# ---------------------------------------------------------------------------
# public entry points
# ---------------------------------------------------------------------------


def _check_run_args(scenario, policy, horizon, warmup):
    if policy.n != scenario.n:
        raise ValueError("policy length does not match the score count")
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    if not 0 <= warmup < horizon:
        raise ValueError("warmup must lie in [0, horizon)")


def simulate_replication(
    scenario: HospitalScenario,
    policy: TransferPolicy,
    horizon: int = 1460,
    warmup: int = 120,
    seed: int = 0,
    replication: int = 0,
    collect_log: bool = False,
) -> tuple[dict, SimEventLog | None]:
    """One replication; returns its metric dict and (optionally) the trace."""
    _check_run_args(scenario, policy, horizon, warmup)
    eng = _Engine(scenario, policy, horizon, warmup, seed, replication, collect_log)
    metrics = eng.run()
    log = (
        SimEventLog(seed, replication, tuple(eng.events)) if collect_log else None
    )
    return metrics, log


def run_simulation(
    scenario: HospitalScenario,
    policy: TransferPolicy,
    horizon: int = 1460,
    warmup: int = 120,
    seed: int = 0,
    reps: int = 20,
    threads: int = 1,
) -> SimMetrics:
    """Replicated simulation with (seed, replication-index) derived streams.

    Replications are independent, so a thread pool reproduces the serial
    metric table exactly; aggregation always happens in replication order.
    """
    _check_run_args(scenario, policy, horizon, warmup)
    if reps < 1:
        raise ValueError("need at least one replication")

    def one(k):
        return simulate_replication(scenario, policy, horizon, warmup, seed, k)[0]

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(one, range(reps)))
    else:
        rows = [one(k) for k in range(reps)]

    means, stderrs = {}, {}
    keys = {k for row in rows for k in row if not k.startswith("_")}
    for key in sorted(keys):
        vals = np.array([row[key] for row in rows if key in row], dtype=float)
        means[key] = float(vals.mean())
        if vals.size >= 2:
            stderrs[key] = float(vals.std(ddof=1) / math.sqrt(vals.size))
    return SimMetrics(replications=reps, means=means, stderrs=stderrs)


# ---------------------------------------------------------------------------
# analytic oracle for the no-transfer ward chain
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WardOutcomes:
    p_death: float
    p_crash: float
    p_recover: float
    expected_periods: float


def analytic_ward_outcomes(
    kernel: TransitionKernel, start_dist: np.ndarray
) -> WardOutcomes:
    """Absorption split and mean absorption time of the severity chain.

    Solves the linear system of the absorbing chain directly, so it is an
    independent oracle for the simulated ward pathway.  Requires enough
    exit mass for the system to be nonsingular.
    """
    n = kernel.n
    p0 = validate_initial_distribution(start_dist, n)
    trap = np.eye(n) - kernel.ward_block
    try:
        absorb = np.linalg.solve(trap, kernel.terminal_block)
        periods = np.linalg.solve(trap, np.ones(n))
    except np.linalg.LinAlgError as exc:
        raise ValueError("severity chain never exits; absorption is ill-posed") from exc
    split = p0 @ absorb
    if not np.all(np.isfinite(split)) or abs(split.sum() - 1.0) > 1e-8:
        raise ValueError("severity chain never exits; absorption is ill-posed")
    return WardOutcomes(
        p_death=float(split[2]),
        p_crash=float(split[0]),
        p_recover=float(split[1]),
        expected_periods=float(p0 @ periods),
    )


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------


def threshold_sweep(
    scenario: HospitalScenario,
    kernels,
    thresholds,
    reps: int = 20,
    seed: int = 0,
    horizon: int = 1460,
    warmup: int = 120,
    threads: int = 1,
) -> list[dict]:
    """Metric table over (threshold, kernel) cells.

    ``kernels`` is a list of ``(label, kernel)`` pairs where the kernel
    may instead be a ``{threshold: kernel}`` mapping for worst cases that
    depend on the policy.  Rows carry one metric each: threshold,
    kernel_label, metric, value, stderr.
    """
    rows = []
    for tau in thresholds:
        policy = TransferPolicy.threshold(int(tau), scenario.n)
        for label, entry in kernels:
            kernel = entry[tau] if isinstance(entry, dict) else entry
            metrics = run_simulation(
                scenario.with_kernel(kernel), policy, horizon, warmup,
                seed=seed, reps=reps, threads=threads,
            )
            for name in sorted(metrics.means):
                rows.append(
                    {
                        "threshold": int(tau),
                        "kernel_label": label,
                        "metric": name,
                        "value": metrics.means[name],
                        "stderr": metrics.stderrs.get(name),
                    }
                )
    return rows


def save_metric_table(rows, path=None) -> str | None:
    out = io.StringIO()
    out.write("threshold,kernel_label,metric,value,stderr\n")
    for r in rows:
        se = "" if r["stderr"] is None else repr(r["stderr"])
        out.write(
            f'{r["threshold"]},{r["kernel_label"]},{r["metric"]},'
            f'{r["value"]!r},{se}\n'
        )
    text = out.getvalue()
    if path is None:
        return text
    Path(path).write_text(text)
    return None


def sensitivity_sweep(
    scenario: HospitalScenario,
    policy: TransferPolicy,
    sampled_kernels,
    reps: int = 20,
    seed: int = 0,
    horizon: int = 1460,
    warmup: int = 120,
) -> dict:
    """Relative metric deviation of kernel samples against the nominal run.

    Every run shares the same seed, so a sample equal to the nominal
    kernel deviates by exactly zero.  Returns metric -> (mean, max)
    relative deviation over the samples, for metrics with a nonzero
    nominal value.
    """
    base = run_simulation(scenario, policy, horizon, warmup, seed=seed, reps=reps)
    devs: dict[str, list] = {}
    for kernel in sampled_kernels:
        m = run_simulation(
            scenario.with_kernel(kernel), policy, horizon, warmup,
            seed=seed, reps=reps,
        )
        for name, nominal in base.means.items():
            if name in m.means and nominal != 0.0:
                devs.setdefault(name, []).append(
                    abs(m.means[name] - nominal) / abs(nominal)
                )
    return {
        name: (float(np.mean(v)), float(np.max(v))) for name, v in devs.items()
    }

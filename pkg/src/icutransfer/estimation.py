"""Trajectory ingestion, kernel estimation, and confidence radii.

Observed hospitalizations are coded as integer state sequences: scores
``0..n-1``, then ``n``/``n+1``/``n+2`` for the crash, recovery, and death
exits.  Sequences end at an exit or at censoring.  The empirical kernel is
the row-normalized transition count matrix; per-row radii come from a
simultaneous multinomial interval, with the skewed shape
``[T - a_i, T + 2 a_i]`` carried by all downstream interval checks.  A
synthetic generator closes the loop for round-trip validation, since real
trajectory data stays out of scope.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import stats

from .mdp import TransitionKernel, validate_initial_distribution

__all__ = [
    "ConfidenceSpec",
    "EstimationError",
    "REFERENCE_ALPHA",
    "TrajectorySet",
    "confidence_radii",
    "estimate_kernel",
    "load_trajectories_csv",
    "sample_kernels_in_ci",
    "save_trajectories_csv",
    "synth_trajectories",
]

# radii fixture for the ten-score demo system (probability units)
REFERENCE_ALPHA = 1e-4 * np.array(
    [4.0, 8.0, 10.0, 14.0, 15.0, 43.0, 46.0, 47.0, 46.0, 45.0]
)
REFERENCE_ALPHA.setflags(write=False)

_BOX_TOL = 1e-9


class EstimationError(ValueError):
    """Raised when the data cannot support an estimate (e.g. unobserved rows)."""


# ---------------------------------------------------------------------------
# trajectory container
# ---------------------------------------------------------------------------


class TrajectorySet:
    """Ragged batch of state sequences, stored flat for bulk counting.

    ``states`` concatenates all sequences; ``offsets`` marks sequence
    starts, with ``offsets[k]:offsets[k+1]`` slicing sequence ``k``.  Every
    sequence begins at a ward score; an exit state may appear only in the
    final position (a sequence ending on a score is censored there).
    """

    __slots__ = ("n", "states", "offsets")

    def __init__(self, n: int, states: np.ndarray, offsets: np.ndarray) -> None:
        if n < 1:
            raise ValueError("need at least one severity score")
        flat = np.asarray(states, dtype=np.int64)
        offs = np.asarray(offsets, dtype=np.int64)
        if flat.ndim != 1 or offs.ndim != 1 or offs.size < 1:
            raise ValueError("need flat states and an offsets vector")
        if offs[0] != 0 or offs[-1] != flat.size or np.any(np.diff(offs) < 1):
            raise ValueError("offsets must partition the states into nonempty runs")
        if flat.size and (flat.min() < 0 or flat.max() > n + 2):
            raise ValueError(f"states must lie in [0, {n + 2}]")
        starts = offs[:-1]
        ends = offs[1:] - 1
        if np.any(flat[starts] >= n):
            raise ValueError("sequences must start at a ward score")
        interior = np.ones(flat.size, dtype=bool)
        interior[ends] = False
        if np.any(flat[interior] >= n):
            raise ValueError("exit states may appear only in the final position")
        self.n = int(n)
        self.states = flat
        self.offsets = offs
        flat.setflags(write=False)
        offs.setflags(write=False)

    @classmethod
    def from_sequences(cls, sequences, n: int) -> "TrajectorySet":
        seqs = [np.asarray(s, dtype=np.int64) for s in sequences]
        lengths = [s.size for s in seqs]
        offsets = np.concatenate([[0], np.cumsum(lengths)])
        states = np.concatenate(seqs) if seqs else np.zeros(0, dtype=np.int64)
        return cls(n, states, offsets)

    def __len__(self) -> int:
        return self.offsets.size - 1

    def sequence(self, k: int) -> np.ndarray:
        return self.states[self.offsets[k] : self.offsets[k + 1]]

    def __iter__(self):
        for k in range(len(self)):
            yield self.sequence(k)

    @property
    def transition_count(self) -> int:
        return int(self.states.size - len(self))

    def state_label(self, code: int) -> str:
        if code < self.n:
            return f"S{code + 1}"
        return ("CR", "RL", "D")[code - self.n]


# ---------------------------------------------------------------------------
# CSV interface: one row per (hospitalization id, period index, state label)
# ---------------------------------------------------------------------------


def save_trajectories_csv(data: TrajectorySet, path=None) -> str | None:
    out = io.StringIO()
    out.write("hospitalization,period,state\n")
    for k, seq in enumerate(data):
        for t, code in enumerate(seq):
            out.write(f"{k},{t},{data.state_label(int(code))}\n")
    text = out.getvalue()
    if path is None:
        return text
    Path(path).write_text(text)
    return None


def _parse_label(label: str, n: int | None) -> tuple[str, int]:
    """Returns ("score", k) with k 0-based, or ("exit", 0..2)."""
    label = label.strip()
    exits = {"CR": 0, "RL": 1, "D": 2}
    if label in exits:
        return "exit", exits[label]
    if label.startswith("S"):
        try:
            k = int(label[1:])
        except ValueError:
            raise EstimationError(f"unknown state label {label!r}") from None
        if k < 1 or (n is not None and k > n):
            raise EstimationError(f"score label {label!r} out of range")
        return "score", k - 1
    raise EstimationError(f"unknown state label {label!r}")


def load_trajectories_csv(source, n: int | None = None) -> TrajectorySet:
    """Inverse of ``save_trajectories_csv``.

    ``source`` is CSV text (anything containing a newline) or a path.
    ``n=None`` infers the score count from the largest score label seen.
    """
    text = source if "\n" in str(source) else Path(source).read_text()
    lines = [
        (no, ln) for no, ln in enumerate(text.splitlines(), start=1) if ln.strip()
    ]
    if not lines or lines[0][1].split(",")[:3] != [
        "hospitalization",
        "period",
        "state",
    ]:
        raise EstimationError("expected a hospitalization,period,state header")
    rows = []
    for lineno, ln in lines[1:]:
        parts = ln.split(",")
        try:
            if len(parts) != 3:
                raise EstimationError(f"malformed row {ln!r}")
            rows.append((parts[0].strip(), int(parts[1]), parts[2], lineno))
        except ValueError:
            raise EstimationError(f"malformed row {ln!r} (line {lineno})") from None
        except EstimationError as exc:
            raise EstimationError(f"{exc} (line {lineno})") from None
    parsed = []
    for hid, per, lab, lineno in rows:
        try:
            parsed.append((hid, per, _parse_label(lab, n)))
        except EstimationError as exc:
            raise EstimationError(f"{exc} (line {lineno})") from None
    if n is None:
        scores = [k for _, _, (kind, k) in parsed if kind == "score"]
        if not scores:
            raise EstimationError("cannot infer the score count without score labels")
        n = max(scores) + 1

    order: dict[str, list[tuple[int, int]]] = {}
    for hid, per, (kind, k) in parsed:
        code = k if kind == "score" else n + k
        order.setdefault(hid, []).append((per, code))
    sequences = []
    for hid, entries in order.items():
        entries.sort()
        periods = [p for p, _ in entries]
        if periods != list(range(len(periods))):
            raise EstimationError(f"hospitalization {hid!r} has gaps in its periods")
        sequences.append([code for _, code in entries])
    return TrajectorySet.from_sequences(sequences, n)


# ---------------------------------------------------------------------------
# estimation
# ---------------------------------------------------------------------------


def estimate_kernel(data: TrajectorySet) -> tuple[TransitionKernel, np.ndarray]:
    """Row-normalized transition counts; unobserved rows are an error.

    No smoothing: a score that never appears as a transition source cannot
    be estimated and is reported instead, so zero-probability checks stay
    meaningful downstream.
    """
    n = data.n
    ends = data.offsets[1:] - 1
    src_mask = np.ones(data.states.size, dtype=bool)
    src_mask[ends] = False
    src = data.states[src_mask]
    dst = data.states[np.nonzero(src_mask)[0] + 1]
    counts = np.zeros((n, n + 3), dtype=np.int64)
    np.add.at(counts, (src, dst), 1)
    row_totals = counts.sum(axis=1)
    missing = np.nonzero(row_totals == 0)[0]
    if missing.size:
        labels = ", ".join(f"S{i + 1}" for i in missing)
        raise EstimationError(f"no observed transitions out of: {labels}")
    kernel = TransitionKernel(counts / row_totals[:, None])
    return kernel, counts


@dataclass(frozen=True)
class ConfidenceSpec:
    """Per-row interval radii with the fixed 1:2 downward:upward skew."""

    alpha: np.ndarray
    level: float = 0.95

    def __post_init__(self) -> None:
        a = np.asarray(self.alpha, dtype=float)
        if a.ndim != 1 or np.any(a <= 0.0) or np.any(a > 1.0):
            raise ValueError("radii must lie in (0, 1]")
        if not 0.0 < self.level < 1.0:
            raise ValueError("level must lie in (0, 1)")
        object.__setattr__(self, "alpha", a)
        a.setflags(write=False)

    @property
    def n(self) -> int:
        return self.alpha.size

    def interval_bounds(self, kernel: TransitionKernel) -> tuple[np.ndarray, np.ndarray]:
        """Entrywise box [T - a_i, T + 2 a_i] clipped to probabilities."""
        if kernel.n != self.n:
            raise ValueError("kernel size does not match the radii")
        a = self.alpha[:, None]
        return (
            np.clip(kernel.matrix - a, 0.0, 1.0),
            np.clip(kernel.matrix + 2.0 * a, 0.0, 1.0),
        )


def confidence_radii(counts: np.ndarray, level: float = 0.95) -> ConfidenceSpec:
    """One radius per row from a simultaneous multinomial interval.

    Each row uses the chi-square simultaneous half-widths on its cell
    counts; the row radius is the largest half-width, capped at 1.  Radii
    shrink like 1/sqrt(N) in the row total, so rarely visited scores get
    the widest intervals.
    """
    x = np.asarray(counts, dtype=float)
    if x.ndim != 2 or np.any(x < 0):
        raise ValueError("need a nonnegative counts matrix")
    totals = x.sum(axis=1)
    if np.any(totals < 1):
        raise ValueError("every row needs at least one observed transition")
    cells = x.shape[1]
    crit = stats.chi2.ppf(1.0 - (1.0 - level) / cells, df=1)
    widths = np.sqrt(crit * (crit + 4.0 * x * (totals[:, None] - x) / totals[:, None]))
    widths = widths / (2.0 * (totals[:, None] + crit))
    alpha = np.minimum(widths.max(axis=1), 1.0)
    return ConfidenceSpec(alpha=alpha, level=level)


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------


def _project_row(v: np.ndarray) -> np.ndarray:
    u = -np.sort(-v)
    css = np.cumsum(u) - 1.0
    k = np.arange(1, v.size + 1)
    rho = np.nonzero(u - css / k > 0.0)[0][-1]
    return np.maximum(v - css[rho] / (rho + 1.0), 0.0)


def _interval_bounds(
    kernel: TransitionKernel, spec: ConfidenceSpec | np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(spec, ConfidenceSpec):
        return spec.interval_bounds(kernel)
    a = np.asarray(spec, dtype=float)
    if a.shape != (kernel.n,) or np.any(a < 0.0):
        raise ValueError("need one nonnegative radius per severity score")
    a = a[:, None]
    return (
        np.clip(kernel.matrix - a, 0.0, 1.0),
        np.clip(kernel.matrix + 2.0 * a, 0.0, 1.0),
    )


def sample_kernels_in_ci(
    kernel: TransitionKernel,
    spec: ConfidenceSpec | np.ndarray,
    count: int,
    seed: int,
) -> list[TransitionKernel]:
    """Kernels uniform in the per-entry boxes, rows back on the simplex.

    ``spec`` is a ``ConfidenceSpec`` or a raw radii vector (zeros allowed,
    collapsing the boxes onto the nominal kernel).  Each row draw is
    projected to the simplex and rejected if the projection leaves its box,
    so accepted kernels certifiably lie in the intervals.  Rows are
    independent, which makes per-row rejection equivalent to whole-matrix
    rejection.  Persistent rejection (above 99% on any row) aborts with the
    offending row.
    """
    if count < 1:
        raise ValueError("need at least one sample")
    lo, hi = _interval_bounds(kernel, spec)
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    n = kernel.n
    attempts = np.zeros(n, dtype=np.int64)
    accepts = np.zeros(n, dtype=np.int64)
    out = []
    for _ in range(count):
        mat = np.empty_like(kernel.matrix)
        for i in range(n):
            while True:
                attempts[i] += 1
                row = _project_row(rng.uniform(lo[i], hi[i]))
                if np.all(row >= lo[i] - _BOX_TOL) and np.all(row <= hi[i] + _BOX_TOL):
                    accepts[i] += 1
                    mat[i] = row
                    break
                if attempts[i] >= 1000 and accepts[i] < 0.01 * attempts[i]:
                    raise RuntimeError(
                        f"row {i + 1} rejects more than 99% of draws; "
                        "the interval box barely meets the simplex"
                    )
        out.append(TransitionKernel(mat))
    return out


# ---------------------------------------------------------------------------
# synthetic trajectories
# ---------------------------------------------------------------------------


def synth_trajectories(
    kernel: TransitionKernel,
    start_dist: np.ndarray,
    count: int,
    seed: int,
) -> TrajectorySet:
    """Independent absorbing-chain sample paths, one per hospitalization.

    Starts are drawn from ``start_dist`` over the scores; each path runs
    until it exits.  Requires a positive per-row exit probability so
    absorption is certain.  ``count=0`` yields an empty set.
    """
    if np.any(kernel.terminal_block.sum(axis=1) <= 0.0):
        raise ValueError("every score needs positive exit probability")
    p0 = validate_initial_distribution(start_dist, kernel.n)
    if count < 0:
        raise ValueError("count must be nonnegative")
    n = kernel.n
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    if count == 0:
        return TrajectorySet.from_sequences([], n)

    cdf = np.cumsum(kernel.matrix, axis=1)
    cdf[:, -1] = 1.0
    current = rng.choice(n, size=count, p=p0)
    log_ids = [np.arange(count)]
    log_states = [current.astype(np.int64)]
    active = np.arange(count)
    while active.size:
        draws = rng.random(active.size)
        nxt = np.empty(active.size, dtype=np.int64)
        states_now = current[active]
        for s in np.unique(states_now):
            mask = states_now == s
            nxt[mask] = np.searchsorted(cdf[s], draws[mask], side="right")
        log_ids.append(active.copy())
        log_states.append(nxt)
        current[active] = nxt
        active = active[nxt < n]

    # the logs are already in step order, so a stable sort by trajectory id
    # interleaves each path's states in sequence
    all_ids = np.concatenate(log_ids)
    all_states = np.concatenate(log_states)
    order = np.argsort(all_ids, kind="stable")
    lengths = np.bincount(all_ids, minlength=count)
    offsets = np.concatenate([[0], np.cumsum(lengths)])
    return TrajectorySet(n, all_states[order], offsets)

"""Simplex-constrained factorization of transition kernels.

Fits ``T0 ~ U @ W.T`` with the rows of ``U`` and the columns of ``W`` on
probability simplexes, by alternating projected-gradient sweeps from many
random starts.  The fitted factors feed the robust solver: the factor
columns become centers of box-simplex credible sets, either at the smallest
per-row radius or with bootstrap half-widths obtained by refitting ``W`` on
kernels resampled inside the per-row intervals.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .mdp import TransitionKernel
from .robust import BoxSimplexSet, FactorModel

__all__ = [
    "CACHE_ENV",
    "CONSTRAINT_TOL",
    "DeviationStats",
    "NmfProblem",
    "NmfSolution",
    "ResidualReport",
    "bootstrap_factor_sets",
    "build_u_emp",
    "build_u_min",
    "nmf_factorize",
    "project_simplex",
    "rank_sweep",
    "residual_report",
]

# directory for memoised factorizations; unset means no cache
CACHE_ENV = "ICUTRANSFER_NMF_CACHE"

CONSTRAINT_TOL = 1e-10
RATIO_TOL = 1e-9
_STALL_SWEEPS = 10
_TINY = 1e-300


# ---------------------------------------------------------------------------
# simplex projection
# ---------------------------------------------------------------------------


def _project_rows(rows: np.ndarray) -> np.ndarray:
    """Project each row onto the unit simplex (sort and threshold)."""
    x = np.asarray(rows, dtype=float)
    m = x.shape[1]
    u = -np.sort(-x, axis=1)
    css = np.cumsum(u, axis=1) - 1.0
    k = np.arange(1, m + 1)
    positive = u - css / k > 0.0
    # k=1 is always positive, so the last positive index exists
    rho = m - 1 - np.argmax(positive[:, ::-1], axis=1)
    theta = css[np.arange(x.shape[0]), rho] / (rho + 1.0)
    return np.maximum(x - theta[:, None], 0.0)


def project_simplex(v: np.ndarray) -> np.ndarray:
    """Nearest point on the unit simplex in Euclidean norm.  Idempotent."""
    x = np.asarray(v, dtype=float)
    if x.ndim != 1 or x.size == 0:
        raise ValueError("need a nonempty vector")
    return _project_rows(x[None, :])[0]


# ---------------------------------------------------------------------------
# problem / solution containers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NmfProblem:
    """Factorization instance: target kernel, rank, and search budget.

    ``starts`` counts the random initializations (the paper-scale default is
    a compute knob, not a quality guarantee); ``iters`` caps the sweeps per
    start; ``tol`` is the relative-improvement stall threshold.
    """

    target: TransitionKernel
    rank: int
    starts: int = 1000
    iters: int = 500
    tol: float = 1e-9

    def __post_init__(self) -> None:
        if not 1 <= self.rank <= self.target.n:
            raise ValueError(
                f"rank must lie in [1, {self.target.n}], got {self.rank}"
            )
        if self.starts < 1:
            raise ValueError("need at least one start")
        if self.iters < 1:
            raise ValueError("need at least one sweep")
        if self.tol <= 0.0:
            raise ValueError("stall threshold must be positive")


@dataclass(frozen=True)
class NmfSolution:
    """Best factorization found: factors, objective, residual norms.

    ``objective`` is the squared Frobenius residual.  ``residual_l1`` and
    ``residual_linf`` are the entrywise absolute-deviation sum and max;
    ``residual_relmax`` is the largest deviation relative to the (positive)
    target entry.  ``start_index`` identifies the winning start (-1 for a
    warm start injected by ``rank_sweep``), ``sweeps`` how long its descent
    ran.
    """

    U: np.ndarray
    W: np.ndarray
    objective: float
    residual_l1: float
    residual_linf: float
    residual_relmax: float
    start_index: int
    sweeps: int

    def __post_init__(self) -> None:
        u = np.asarray(self.U, dtype=float)
        w = np.asarray(self.W, dtype=float)
        if u.ndim != 2 or w.ndim != 2 or w.shape != (u.shape[0] + 3, u.shape[1]):
            raise ValueError("need U of shape (n, r) and W of shape (n+3, r)")
        if np.any(u < -CONSTRAINT_TOL) or np.any(w < -CONSTRAINT_TOL):
            raise ValueError("factors must be nonnegative")
        if np.any(np.abs(u.sum(axis=1) - 1.0) > CONSTRAINT_TOL):
            raise ValueError("rows of U must sum to 1")
        if np.any(np.abs(w.sum(axis=0) - 1.0) > CONSTRAINT_TOL):
            raise ValueError("columns of W must sum to 1")
        object.__setattr__(self, "U", u)
        object.__setattr__(self, "W", w)
        u.setflags(write=False)
        w.setflags(write=False)

    @property
    def rank(self) -> int:
        return self.U.shape[1]

    @property
    def fitted_matrix(self) -> np.ndarray:
        return self.U @ self.W.T


# ---------------------------------------------------------------------------
# block-coordinate descent
# ---------------------------------------------------------------------------


def _objective(target: np.ndarray, U: np.ndarray, W: np.ndarray) -> float:
    diff = target - U @ W.T
    return float(np.sum(diff * diff))


def _descend(
    target: np.ndarray,
    U: np.ndarray,
    W: np.ndarray,
    iters: int,
    tol: float,
) -> tuple[np.ndarray, np.ndarray, float, int]:
    """Alternating projected-gradient sweeps until stall or the sweep cap.

    Step 1/L per block, L the spectral bound of the block quadratic; a
    sweep must never increase the objective.
    """
    obj = _objective(target, U, W)
    stall = 0
    for sweep in range(1, iters + 1):
        grad_u = 2.0 * (U @ W.T - target) @ W
        lip_u = 2.0 * np.linalg.norm(W.T @ W, 2)
        U = _project_rows(U - grad_u / max(lip_u, _TINY))
        grad_w = 2.0 * (U @ W.T - target).T @ U
        lip_w = 2.0 * np.linalg.norm(U.T @ U, 2)
        W = _project_rows((W - grad_w / max(lip_w, _TINY)).T).T
        new = _objective(target, U, W)
        assert new <= obj + 1e-12 * max(1.0, obj), "sweep increased the objective"
        stall = stall + 1 if obj - new < tol * max(obj, _TINY) else 0
        obj = new
        if stall >= _STALL_SWEEPS:
            return U, W, obj, sweep
    return U, W, obj, iters


def _finalize(
    target: np.ndarray, U: np.ndarray, W: np.ndarray, index: int, sweeps: int
) -> NmfSolution:
    dev = np.abs(target - U @ W.T)
    pos = target > 0.0
    relmax = float((dev[pos] / target[pos]).max()) if np.any(pos) else 0.0
    return NmfSolution(
        U=U,
        W=W,
        objective=_objective(target, U, W),
        residual_l1=float(dev.sum()),
        residual_linf=float(dev.max()),
        residual_relmax=relmax,
        start_index=int(index),
        sweeps=int(sweeps),
    )


# ---------------------------------------------------------------------------
# result cache
# ---------------------------------------------------------------------------


def _cache_dir() -> Path | None:
    root = os.environ.get(CACHE_ENV)
    return Path(root) if root else None


def _cache_key(target: np.ndarray, problem: NmfProblem, seed: int) -> str:
    digest = hashlib.sha256()
    digest.update(np.ascontiguousarray(target).tobytes())
    digest.update(
        repr(
            (
                target.shape,
                problem.rank,
                problem.starts,
                problem.iters,
                problem.tol,
                int(seed),
            )
        ).encode()
    )
    return digest.hexdigest()


def _cache_load(key: str, target: np.ndarray) -> NmfSolution | None:
    root = _cache_dir()
    if root is None:
        return None
    path = root / f"{key}.npz"
    if not path.exists():
        return None
    try:
        with np.load(path) as blob:
            return _finalize(
                target,
                blob["U"],
                blob["W"],
                int(blob["start_index"]),
                int(blob["sweeps"]),
            )
    except (OSError, ValueError, KeyError):
        return None


def _cache_store(key: str, solution: NmfSolution) -> None:
    root = _cache_dir()
    if root is None:
        return
    root.mkdir(parents=True, exist_ok=True)
    final = root / f"{key}.npz"
    scratch = root / f"{key}.tmp.npz"
    np.savez(
        scratch,
        U=solution.U,
        W=solution.W,
        start_index=solution.start_index,
        sweeps=solution.sweeps,
    )
    os.replace(scratch, final)


# ---------------------------------------------------------------------------
# multistart factorization
# ---------------------------------------------------------------------------


def nmf_factorize(problem: NmfProblem, seed: int) -> NmfSolution:
    """Multistart descent keeping the (objective, start-index) best.

    Starts draw U rows and W columns Dirichlet(1); at full rank the exact
    identity start is appended after the random ones.  Deterministic for a
    given seed.  When the environment variable named by ``CACHE_ENV`` points
    at a directory, results are recalled from and persisted to it.
    """
    target = problem.target.matrix
    key = _cache_key(target, problem, seed)
    cached = _cache_load(key, target)
    if cached is not None:
        return cached

    n = problem.target.n
    best: tuple[float, int, np.ndarray, np.ndarray, int] | None = None
    for index, child in enumerate(np.random.SeedSequence(seed).spawn(problem.starts)):
        rng = np.random.default_rng(child)
        u0 = rng.dirichlet(np.ones(problem.rank), size=n)
        w0 = rng.dirichlet(np.ones(n + 3), size=problem.rank).T
        u, w, obj, sweeps = _descend(target, u0, w0, problem.iters, problem.tol)
        if best is None or (obj, index) < best[:2]:
            best = (obj, index, u, w, sweeps)
    if problem.rank == n:
        u, w, obj, sweeps = _descend(
            target, np.eye(n), target.T.copy(), problem.iters, problem.tol
        )
        if (obj, problem.starts) < best[:2]:
            best = (obj, problem.starts, u, w, sweeps)
    solution = _finalize(target, best[2], best[3], best[1], best[4])
    _cache_store(key, solution)
    return solution


def rank_sweep(
    target: TransitionKernel,
    ranks,
    seed: int,
    starts: int = 50,
    iters: int = 500,
    tol: float = 1e-9,
) -> dict[int, NmfSolution]:
    """Factorize at several ranks; higher ranks warm-start from lower ones.

    The previous best is padded with unused factors (zero mixing columns,
    uniform factor columns), which leaves its objective unchanged, so the
    best objective is non-increasing in the rank.
    """
    wanted = sorted({int(r) for r in ranks})
    matrix = target.matrix
    out: dict[int, NmfSolution] = {}
    prev: NmfSolution | None = None
    for rank in wanted:
        problem = NmfProblem(target, rank, starts=starts, iters=iters, tol=tol)
        best = nmf_factorize(problem, seed)
        if prev is not None:
            pad = rank - prev.rank
            u0 = np.hstack([prev.U, np.zeros((target.n, pad))])
            w0 = np.hstack(
                [prev.W, np.full((target.n + 3, pad), 1.0 / (target.n + 3))]
            )
            u, w, obj, sweeps = _descend(matrix, u0, w0, iters, tol)
            if obj < best.objective:
                best = _finalize(matrix, u, w, -1, sweeps)
        out[rank] = best
        prev = best
    return out


# ---------------------------------------------------------------------------
# deviation diagnostics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DeviationStats:
    """max / mean / median / 95th percentile of one deviation family."""

    max: float
    mean: float
    median: float
    p95: float

    @classmethod
    def of(cls, values: np.ndarray) -> "DeviationStats":
        v = np.asarray(values, dtype=float).ravel()
        if v.size == 0:
            return cls(0.0, 0.0, 0.0, 0.0)
        return cls(
            float(v.max()),
            float(v.mean()),
            float(np.median(v)),
            float(np.percentile(v, 95.0)),
        )


@dataclass(frozen=True)
class ResidualReport:
    """Deviation diagnostics of a fitted kernel against its target.

    ``ratios`` holds (target - fitted)/alpha_i per entry; membership in the
    skewed interval [target - alpha_i, target + 2 alpha_i] is ratio in
    [-2, 1], and ``outside_count`` counts the entries that escape it.
    """

    absolute: DeviationStats
    relative: DeviationStats
    ratio_abs: DeviationStats
    ratios: np.ndarray
    outside_count: int
    in_interval: bool

    def __post_init__(self) -> None:
        r = np.asarray(self.ratios, dtype=float)
        object.__setattr__(self, "ratios", r)
        r.setflags(write=False)


def residual_report(
    solution: NmfSolution | np.ndarray,
    target: TransitionKernel,
    alpha: np.ndarray,
) -> ResidualReport:
    """Deviation statistics, interval ratios, and the in-interval verdict.

    ``solution`` may be a fitted ``NmfSolution`` or any matrix of the
    target's shape.  Relative deviations are taken over the strictly
    positive target entries.
    """
    if isinstance(solution, NmfSolution):
        fitted = solution.fitted_matrix
    else:
        fitted = np.asarray(solution, dtype=float)
    matrix = target.matrix
    if fitted.shape != matrix.shape:
        raise ValueError(f"fitted matrix must have shape {matrix.shape}")
    a = np.asarray(alpha, dtype=float)
    if a.shape != (target.n,) or np.any(a <= 0.0):
        raise ValueError("need one positive radius per severity score")
    dev = matrix - fitted
    absdev = np.abs(dev)
    pos = matrix > 0.0
    ratios = dev / a[:, None]
    outside = int(np.sum((ratios < -2.0 - RATIO_TOL) | (ratios > 1.0 + RATIO_TOL)))
    return ResidualReport(
        absolute=DeviationStats.of(absdev),
        relative=DeviationStats.of(absdev[pos] / matrix[pos]),
        ratio_abs=DeviationStats.of(np.abs(ratios)),
        ratios=ratios,
        outside_count=outside,
        in_interval=outside == 0,
    )


# ---------------------------------------------------------------------------
# credible-set construction
# ---------------------------------------------------------------------------


def _fit_w(
    target: np.ndarray,
    U: np.ndarray,
    w0: np.ndarray,
    iters: int = 4000,
    tol: float = 1e-14,
) -> np.ndarray:
    """Convex fit of W with U fixed, projected gradient to the global minimum."""
    lip = 2.0 * np.linalg.norm(U.T @ U, 2)
    W = w0
    obj = _objective(target, U, W)
    stall = 0
    for _ in range(iters):
        grad = 2.0 * (U @ W.T - target).T @ U
        W = _project_rows((W - grad / max(lip, _TINY)).T).T
        new = _objective(target, U, W)
        assert new <= obj + 1e-12 * max(1.0, obj), "step increased the objective"
        stall = stall + 1 if obj - new < tol * max(obj, _TINY) else 0
        obj = new
        if stall >= _STALL_SWEEPS:
            break
    return W


def _bootstrap(
    target: TransitionKernel,
    alpha: np.ndarray,
    U_fixed: np.ndarray,
    q: int,
    seed: int,
    center: np.ndarray | None,
) -> tuple[np.ndarray, tuple[BoxSimplexSet, ...]]:
    matrix = target.matrix
    n = target.n
    a = np.asarray(alpha, dtype=float)
    if a.shape != (n,) or np.any(a < 0.0):
        raise ValueError("need one nonnegative radius per severity score")
    U = np.asarray(U_fixed, dtype=float)
    if U.ndim != 2 or U.shape[0] != n or U.shape[1] < 1:
        raise ValueError("mixing matrix must have one row per severity score")
    if np.any(U < 0.0) or np.any(np.abs(U.sum(axis=1) - 1.0) > 1e-8):
        raise ValueError("mixing matrix rows must lie on the simplex")
    if q < 2:
        raise ValueError("need at least two resamples")
    rank = U.shape[1]

    if center is None:
        uniform = np.full((n + 3, rank), 1.0 / (n + 3))
        center = _fit_w(matrix, U, uniform)
    else:
        center = np.asarray(center, dtype=float)
        if center.shape != (n + 3, rank):
            raise ValueError(f"nominal factors must have shape {(n + 3, rank)}")

    lo = np.clip(matrix - a[:, None], 0.0, 1.0)
    hi = np.clip(matrix + 2.0 * a[:, None], 0.0, 1.0)
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    fits = np.empty((q, n + 3, rank))
    for m in range(q):
        draw = _project_rows(rng.uniform(lo, hi))
        fits[m] = _fit_w(draw, U, center)
    half = 1.96 * fits.std(axis=0, ddof=1) / np.sqrt(q)
    boxes = tuple(
        BoxSimplexSet.from_center(center[:, ell], half[:, ell], half[:, ell])
        for ell in range(rank)
    )
    return center, boxes


def bootstrap_factor_sets(
    target: TransitionKernel,
    alpha: np.ndarray,
    U_fixed: np.ndarray,
    q: int,
    seed: int,
    center: np.ndarray | None = None,
) -> tuple[BoxSimplexSet, ...]:
    """Per-factor boxes ``w_hat +- 1.96 sigma/sqrt(q)`` from resampled refits.

    Samples kernels uniformly in the skewed per-row intervals, re-projects
    the rows to the simplex, and refits ``W`` for each sample with the
    mixing matrix held fixed (a convex subproblem).  ``center=None`` fits
    the nominal factors from the target itself.
    """
    return _bootstrap(target, alpha, U_fixed, q, seed, center)[1]


def build_u_emp(
    target: TransitionKernel,
    alpha: np.ndarray,
    U_fixed: np.ndarray,
    q: int,
    seed: int,
    center: np.ndarray | None = None,
) -> FactorModel:
    """Factor model carrying the bootstrap boxes around the nominal factors."""
    what, boxes = _bootstrap(target, alpha, U_fixed, q, seed, center)
    return FactorModel(np.asarray(U_fixed, dtype=float).copy(), what, boxes)


def build_u_min(solution: NmfSolution, alpha: np.ndarray) -> FactorModel:
    """Factor boxes at the smallest row radius: ``[w_hat - a, w_hat + 2a]``.

    The skew matches the per-row intervals; bounds are clipped to [0, 1]
    since the radius can exceed small factor coefficients.
    """
    a = np.asarray(alpha, dtype=float)
    if a.shape != (solution.U.shape[0],) or np.any(a < 0.0):
        raise ValueError("need one nonnegative radius per severity score")
    amin = float(a.min())
    boxes = tuple(
        BoxSimplexSet.from_center(solution.W[:, ell], amin, 2.0 * amin)
        for ell in range(solution.rank)
    )
    return FactorModel(solution.U.copy(), solution.W.copy(), boxes)

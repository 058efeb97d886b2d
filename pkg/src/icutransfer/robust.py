"""Kernel uncertainty sets and robust dynamic programming.

Two set geometries are supported.  A factor model writes the kernel as
``T = U @ W.T`` with a fixed nonnegative mixing matrix ``U`` (rows on the
simplex) and one box-intersect-simplex credible set per factor column of
``W``.  A rectangular set perturbs each kernel row independently inside its
own box.  Both expose the same solver surface: a robust Bellman operator
that lets an adversary re-pick the uncertain components every sweep, value
iteration to its fixed point, and extraction of the static worst-case
kernel realized at that fixed point.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import mdp
from .mdp import (
    ConvergenceError,
    RewardSpec,
    TransferPolicy,
    TransitionKernel,
)

__all__ = [
    "InfeasibleError",
    "BoxSimplexSet",
    "FactorModel",
    "RectangularSet",
    "RobustSolution",
    "MaxPrincipleReport",
    "inner_min_box_simplex",
    "robust_bellman_apply",
    "robust_value_iteration",
    "worst_case_kernel",
    "check_assumption_3",
    "verify_max_principle",
    "sample_factor_vector",
    "sample_kernel_in_set",
    "nominal_kernel_of",
    "interval_violation_stats",
]

FEAS_TOL = 1e-12
MEMBER_TOL = 1e-9


class InfeasibleError(ValueError):
    """The requested uncertainty set contains no probability vector."""


# ---------------------------------------------------------------------------
# set geometries
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BoxSimplexSet:
    """{w : lower <= w <= upper, w >= 0, sum w = 1}."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self) -> None:
        low = np.asarray(self.lower, dtype=float)
        up = np.asarray(self.upper, dtype=float)
        if low.ndim != 1 or low.shape != up.shape:
            raise ValueError("bounds must be vectors of equal length")
        if np.any(low < 0.0) or np.any(up > 1.0 + FEAS_TOL):
            raise ValueError("bounds must stay inside [0, 1]")
        if np.any(low > up + FEAS_TOL):
            raise ValueError("lower bound exceeds upper bound")
        if low.sum() > 1.0 + FEAS_TOL or up.sum() < 1.0 - FEAS_TOL:
            raise InfeasibleError("box does not meet the simplex")
        object.__setattr__(self, "lower", low)
        object.__setattr__(self, "upper", up)
        low.setflags(write=False)
        up.setflags(write=False)

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    @classmethod
    def singleton(cls, w: np.ndarray) -> "BoxSimplexSet":
        w = np.asarray(w, dtype=float)
        return cls(w, w)

    @classmethod
    def from_center(
        cls,
        center: np.ndarray,
        below: float | np.ndarray,
        above: float | np.ndarray,
    ) -> "BoxSimplexSet":
        """Interval [center - below, center + above] clipped to [0, 1]."""
        center = np.asarray(center, dtype=float)
        return cls(
            np.clip(center - below, 0.0, 1.0),
            np.clip(center + above, 0.0, 1.0),
        )

    def contains(self, w: np.ndarray, tol: float = MEMBER_TOL) -> bool:
        w = np.asarray(w, dtype=float)
        return bool(
            np.all(w >= self.lower - tol)
            and np.all(w <= self.upper + tol)
            and abs(w.sum() - 1.0) <= tol
        )


@dataclass(frozen=True)
class FactorModel:
    """Kernel family ``U @ W.T`` with one credible set per factor column.

    ``U`` is n x r with rows on the simplex and stays fixed; each column of
    ``W`` (length n+3) varies inside its own ``BoxSimplexSet``.
    """

    U: np.ndarray
    W_nominal: np.ndarray
    factor_sets: tuple[BoxSimplexSet, ...]

    def __post_init__(self) -> None:
        u = np.asarray(self.U, dtype=float)
        w = np.asarray(self.W_nominal, dtype=float)
        sets = tuple(self.factor_sets)
        if u.ndim != 2 or w.ndim != 2:
            raise ValueError("U and W_nominal must be matrices")
        n, r = u.shape
        if w.shape != (n + 3, r):
            raise ValueError(
                f"W_nominal must have shape ({n + 3}, {r}), got {w.shape}"
            )
        if len(sets) != r:
            raise ValueError("need exactly one credible set per factor")
        if np.any(u < 0.0) or np.any(w < 0.0):
            raise ValueError("factors must be nonnegative")
        if np.any(np.abs(u.sum(axis=1) - 1.0) > FEAS_TOL):
            raise ValueError("rows of U must sum to 1")
        if np.any(np.abs(w.sum(axis=0) - 1.0) > FEAS_TOL):
            raise ValueError("columns of W_nominal must sum to 1")
        for ell, box in enumerate(sets):
            if box.dim != n + 3:
                raise ValueError("credible set dimension must be n+3")
            if not box.contains(w[:, ell]):
                raise ValueError(f"nominal factor {ell} escapes its set")
        object.__setattr__(self, "U", u)
        object.__setattr__(self, "W_nominal", w)
        object.__setattr__(self, "factor_sets", sets)
        u.setflags(write=False)
        w.setflags(write=False)
        # induced nominal kernel must be valid
        self.nominal_kernel

    @property
    def n(self) -> int:
        return self.U.shape[0]

    @property
    def rank(self) -> int:
        return self.U.shape[1]

    @property
    def nominal_kernel(self) -> TransitionKernel:
        return TransitionKernel(self.U @ self.W_nominal.T)

    def kernel_from_factors(self, W: np.ndarray) -> TransitionKernel:
        return TransitionKernel(self.U @ np.asarray(W, dtype=float).T)

    @classmethod
    def from_rectangular(cls, rect: "RectangularSet") -> "FactorModel":
        """Identity mixing: one factor per severity score, boxes = row boxes."""
        return cls(
            U=np.eye(rect.n),
            W_nominal=rect.nominal.matrix.T.copy(),
            factor_sets=rect.row_sets,
        )


@dataclass(frozen=True)
class RectangularSet:
    """Row-wise boxes [T0[i]-alpha_i, T0[i]+2*alpha_i] clipped to [0, 1]."""

    nominal: TransitionKernel
    alpha: np.ndarray
    row_sets: tuple[BoxSimplexSet, ...] = ()

    def __post_init__(self) -> None:
        a = np.asarray(self.alpha, dtype=float)
        if a.shape != (self.nominal.n,):
            raise ValueError("need one radius per severity score")
        if np.any(a < 0.0):
            raise ValueError("radii must be nonnegative")
        rows = tuple(
            BoxSimplexSet.from_center(self.nominal.matrix[i], a[i], 2.0 * a[i])
            for i in range(self.nominal.n)
        )
        object.__setattr__(self, "alpha", a)
        object.__setattr__(self, "row_sets", rows)
        a.setflags(write=False)

    @property
    def n(self) -> int:
        return self.nominal.n


@dataclass(frozen=True)
class RobustSolution:
    """Fixed point of the robust operator plus its static adversary."""

    policy: TransferPolicy
    value: np.ndarray
    worst_kernel: TransitionKernel
    worst_factors: np.ndarray | None
    iterations: int


def nominal_kernel_of(uset: FactorModel | RectangularSet) -> TransitionKernel:
    if isinstance(uset, FactorModel):
        return uset.nominal_kernel
    return uset.nominal


# ---------------------------------------------------------------------------
# exact linear minimization over a box-simplex set
# ---------------------------------------------------------------------------

def inner_min_box_simplex(
    cost: np.ndarray, box: BoxSimplexSet
) -> tuple[np.ndarray, float]:
    """Minimize cost . w over the box-simplex set; greedy fill, exact.

    Starts every coordinate at its lower bound and pours the remaining mass
    into coordinates by ascending cost, each up to its upper bound.  Cost
    ties resolve toward the lowest index, so the minimizer is deterministic.
    """
    c = np.asarray(cost, dtype=float)
    if c.shape != (box.dim,):
        raise ValueError("cost length must match the set dimension")
    low, up = box.lower, box.upper
    w = low.copy()
    budget = 1.0 - low.sum()
    if budget > 0.0:
        for j in np.argsort(c, kind="stable"):
            add = min(up[j] - low[j], budget)
            if add > 0.0:
                w[j] += add
                budget -= add
            if budget <= 0.0:
                break
    if budget > MEMBER_TOL:
        raise InfeasibleError("upper bounds cannot absorb the unit mass")
    if __debug__:
        _certify_inner_min(c, box, w)
    return w, float(c @ w)


def _certify_inner_min(c: np.ndarray, box: BoxSimplexSet, w: np.ndarray) -> None:
    # KKT: some price nu splits the coordinates into cheap ones pinned at
    # their upper bound and expensive ones pinned at their lower bound
    active = np.flatnonzero(w > box.lower + 1e-15)
    nu = np.max(c[active]) if active.size else -np.inf
    cheap = c < nu - 1e-12
    dear = c > nu + 1e-12
    assert np.all(np.abs(w[cheap] - box.upper[cheap]) <= 1e-9), "cheap coordinate not saturated"
    assert np.all(np.abs(w[dear] - box.lower[dear]) <= 1e-9), "dear coordinate above its floor"


# ---------------------------------------------------------------------------
# robust Bellman operator
# ---------------------------------------------------------------------------

def _extended_values(v: np.ndarray, spec: RewardSpec, n: int) -> np.ndarray:
    # continuation vector over the n+3 kernel columns: current ward values
    # plus the terminal rewards, regardless of what v carries in its tail
    vbar = np.empty(n + 3)
    vbar[:n] = v[:n]
    vbar[n:] = (spec.r_CR, spec.r_RL, spec.r_D)
    return vbar


def _worst_response(
    uset: FactorModel | RectangularSet, vbar: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Adversary's best reply to a continuation vector.

    Returns (per-score continuation minima, realization).  The realization
    is the chosen W for a factor model and the chosen kernel matrix for a
    rectangular set.
    """
    if isinstance(uset, FactorModel):
        r = uset.rank
        W = np.empty((vbar.shape[0], r))
        m = np.empty(r)
        for ell in range(r):
            W[:, ell], m[ell] = inner_min_box_simplex(vbar, uset.factor_sets[ell])
        return uset.U @ m, W
    rows = np.empty((uset.n, vbar.shape[0]))
    cont = np.empty(uset.n)
    for i in range(uset.n):
        rows[i], cont[i] = inner_min_box_simplex(vbar, uset.row_sets[i])
    return cont, rows


def robust_bellman_apply(
    v: np.ndarray,
    uset: FactorModel | RectangularSet,
    spec: RewardSpec,
    transfer_reward: float | None = None,
) -> tuple[np.ndarray, TransferPolicy]:
    """One sweep of the robust optimality operator plus its greedy policy.

    The adversary minimizes the continuation independently for every factor
    (or row); tie-breaking matches the nominal operator: transfer only on a
    strict win.
    """
    n = uset.n
    r_pt = spec.r_PT if transfer_reward is None else transfer_reward
    cont, _ = _worst_response(uset, _extended_values(v, spec, n))
    stay = spec.r_W + spec.discount * cont
    transfer = spec.r_W + spec.discount * r_pt
    out = np.empty(n + 4)
    out[:n] = np.maximum(stay, transfer)
    out[n:] = mdp.terminal_values(spec, transfer_reward)
    return out, TransferPolicy((stay < transfer).astype(float))


def _assert_realization_member(
    uset: FactorModel | RectangularSet, realization: np.ndarray
) -> None:
    if isinstance(uset, FactorModel):
        for ell, box in enumerate(uset.factor_sets):
            assert box.contains(realization[:, ell]), "worst factor escaped its set"
    else:
        for i, box in enumerate(uset.row_sets):
            assert box.contains(realization[i]), "worst row escaped its box"


def _realized_kernel(
    uset: FactorModel | RectangularSet, realization: np.ndarray
) -> TransitionKernel:
    if isinstance(uset, FactorModel):
        return uset.kernel_from_factors(realization)
    return TransitionKernel(realization)


def robust_value_iteration(
    uset: FactorModel | RectangularSet,
    spec: RewardSpec,
    tol: float = 1e-10,
    max_iter: int = 100_000,
    transfer_reward: float | None = None,
) -> RobustSolution:
    """Max-min value iteration to its fixed point.

    The returned worst_kernel is the static adversary realized at the fixed
    point; worst_factors carries the chosen W for factor models and None for
    rectangular sets.  Threshold structure of the returned policy is only
    guaranteed when check_assumption_3 accepts the set.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    n = uset.n
    v = mdp.initial_value_vector(n, spec, transfer_reward)
    for it in range(1, max_iter + 1):
        nxt, policy = robust_bellman_apply(v, uset, spec, transfer_reward)
        if float(np.max(np.abs(nxt - v))) < tol:
            v = nxt
            break
        v = nxt
    else:
        raise ConvergenceError(
            f"robust value iteration did not converge in {max_iter} sweeps"
        )
    _, realization = _worst_response(uset, _extended_values(v, spec, n))
    _assert_realization_member(uset, realization)
    kernel = _realized_kernel(uset, realization)
    factors = realization if isinstance(uset, FactorModel) else None
    return RobustSolution(
        policy=policy,
        value=v,
        worst_kernel=kernel,
        worst_factors=factors,
        iterations=it,
    )


def worst_case_kernel(
    policy: TransferPolicy,
    uset: FactorModel | RectangularSet,
    spec: RewardSpec,
    tol: float = 1e-10,
    max_iter: int = 100_000,
    p0: np.ndarray | None = None,
    transfer_reward: float | None = None,
) -> tuple[TransitionKernel, float]:
    """Static adversary against a fixed (possibly randomized) policy.

    Iterates the min-only operator to its fixed point, realizes the kernel
    chosen there, and returns it with the policy's expected reward under it
    (weighted by p0, uniform when omitted).
    """
    n = uset.n
    if policy.n != n:
        raise ValueError("policy length must match the uncertainty set")
    r_pt = spec.r_PT if transfer_reward is None else transfer_reward
    pi = policy.probs
    v = mdp.initial_value_vector(n, spec, transfer_reward)
    for _ in range(max_iter):
        cont, _ = _worst_response(uset, _extended_values(v, spec, n))
        nxt = v.copy()
        nxt[:n] = pi * (spec.r_W + spec.discount * r_pt) + (1.0 - pi) * (
            spec.r_W + spec.discount * cont
        )
        nxt[n:] = mdp.terminal_values(spec, transfer_reward)
        if float(np.max(np.abs(nxt - v))) < tol:
            v = nxt
            break
        v = nxt
    else:
        raise ConvergenceError(
            f"worst-case evaluation did not converge in {max_iter} sweeps"
        )
    _, realization = _worst_response(uset, _extended_values(v, spec, n))
    _assert_realization_member(uset, realization)
    kernel = _realized_kernel(uset, realization)
    _, reward = mdp.policy_evaluation(policy, kernel, spec, p0, transfer_reward)
    return kernel, reward


# ---------------------------------------------------------------------------
# structural condition over a whole set
# ---------------------------------------------------------------------------

def check_assumption_3(
    uset: FactorModel | RectangularSet, spec: RewardSpec, tol: float = 1e-12
) -> bool:
    """Monotone-structure conditions minimized over the entire set.

    For every adjacent score pair the two linear forms (outside-option gap
    and reward-weighted ward-mass gap) are minimized exactly over the set;
    true iff every minimum clears -tol.  Factor sets minimize per factor,
    rectangular sets per row; both reduce to the greedy oracle.
    """
    n = uset.n
    lam = spec.discount
    ratio = (spec.r_W + lam * spec.r_PT) / (spec.r_W + lam * spec.r_RL)
    term_rewards = np.array([spec.r_CR, spec.r_RL, spec.r_D])

    if isinstance(uset, FactorModel):
        u = uset.U
        for i in range(n - 1):
            mass_min = 0.0
            out_min = 0.0
            for ell, box in enumerate(uset.factor_sets):
                coef_mass = ratio * u[i, ell] - u[i + 1, ell]
                cost = np.zeros(n + 3)
                cost[:n] = coef_mass
                mass_min += inner_min_box_simplex(cost, box)[1]
                coef_out = u[i, ell] - u[i + 1, ell]
                cost = np.zeros(n + 3)
                cost[n:] = coef_out * term_rewards
                out_min += inner_min_box_simplex(cost, box)[1]
            if mass_min < -tol or out_min < -tol:
                return False
        return True

    ward_cost = np.zeros(n + 3)
    ward_cost[:n] = 1.0
    out_cost = np.zeros(n + 3)
    out_cost[n:] = term_rewards
    for i in range(n - 1):
        min_mass_i = inner_min_box_simplex(ratio * ward_cost, uset.row_sets[i])[1]
        max_mass_next = -inner_min_box_simplex(-ward_cost, uset.row_sets[i + 1])[1]
        if min_mass_i - max_mass_next < -tol:
            return False
        min_out_i = inner_min_box_simplex(out_cost, uset.row_sets[i])[1]
        max_out_next = -inner_min_box_simplex(-out_cost, uset.row_sets[i + 1])[1]
        if min_out_i - max_out_next < -tol:
            return False
    return True


# ---------------------------------------------------------------------------
# sampling members of a set
# ---------------------------------------------------------------------------

def sample_factor_vector(
    box: BoxSimplexSet, rng: np.random.Generator, mixture: int = 4
) -> np.ndarray:
    """Random member: convex combination of greedy-oracle vertices."""
    verts = np.stack(
        [
            inner_min_box_simplex(rng.normal(size=box.dim), box)[0]
            for _ in range(mixture)
        ]
    )
    return rng.dirichlet(np.ones(mixture)) @ verts


def sample_kernel_in_set(
    uset: FactorModel | RectangularSet,
    rng: np.random.Generator,
    mixture: int = 4,
) -> TransitionKernel:
    """Random kernel drawn inside the set (exact membership, no rejection)."""
    if isinstance(uset, FactorModel):
        W = np.column_stack(
            [sample_factor_vector(box, rng, mixture) for box in uset.factor_sets]
        )
        return uset.kernel_from_factors(W)
    rows = np.stack(
        [sample_factor_vector(box, rng, mixture) for box in uset.row_sets]
    )
    return TransitionKernel(rows)


# ---------------------------------------------------------------------------
# dominance report
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MaxPrincipleReport:
    """Componentwise dominance gaps; all must clear the tolerance.

    nominal_gap: worst excess of any candidate policy's value over the
      nominal-optimal value under the nominal kernel.
    adversary_gap: worst excess of the fixed-policy worst-case value over
      its value under kernels sampled inside the set.
    saddle_gap: worst excess of any threshold's worst-case value over the
      robust pair's value.
    """

    nominal_gap: float
    adversary_gap: float
    saddle_gap: float
    tol: float
    violations: tuple[str, ...]

    @property
    def ok(self) -> bool:
        return not self.violations


def verify_max_principle(
    uset: FactorModel | RectangularSet,
    spec: RewardSpec,
    rng: np.random.Generator | None = None,
    num_kernels: int = 20,
    thresholds: list[int] | None = None,
    tol: float = 1e-8,
) -> MaxPrincipleReport:
    """Check the three dominance inequalities on one instance.

    Candidate policies are all thresholds (plus the nominal-optimal policy);
    sampled kernels exercise the adversary's minimality.  Violations are
    reported with witnesses rather than raised.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    nominal = nominal_kernel_of(uset)
    n = nominal.n
    taus = list(range(1, n + 2)) if thresholds is None else list(thresholds)
    violations: list[str] = []

    v_hat, pi_hat, _ = mdp.value_iteration(nominal, spec)
    candidates = [(f"tau={t}", mdp.TransferPolicy.threshold(t, n)) for t in taus]

    nominal_gap = -np.inf
    for label, cand in candidates:
        v_cand, _ = mdp.policy_evaluation(cand, nominal, spec)
        gap = float(np.max(v_cand[:n] - v_hat[:n]))
        nominal_gap = max(nominal_gap, gap)
        if gap > tol:
            violations.append(f"nominal optimality beaten by {label} ({gap:.3e})")

    worst_hat, _ = worst_case_kernel(pi_hat, uset, spec)
    v_hat_worst, _ = mdp.policy_evaluation(pi_hat, worst_hat, spec)
    adversary_gap = -np.inf
    for k in range(num_kernels):
        sample = sample_kernel_in_set(uset, rng)
        v_sample, _ = mdp.policy_evaluation(pi_hat, sample, spec)
        gap = float(np.max(v_hat_worst[:n] - v_sample[:n]))
        adversary_gap = max(adversary_gap, gap)
        if gap > tol:
            violations.append(f"sampled kernel {k} beats the worst case ({gap:.3e})")

    solution = robust_value_iteration(uset, spec)
    v_rob = solution.value
    saddle_gap = float(np.max(v_hat_worst[:n] - v_rob[:n]))
    if saddle_gap > tol:
        violations.append(f"nominal policy beats the robust pair ({saddle_gap:.3e})")
    for label, cand in candidates:
        worst_cand, _ = worst_case_kernel(cand, uset, spec)
        v_cand_worst, _ = mdp.policy_evaluation(cand, worst_cand, spec)
        gap = float(np.max(v_cand_worst[:n] - v_rob[:n]))
        saddle_gap = max(saddle_gap, gap)
        if gap > tol:
            violations.append(f"{label} beats the robust pair ({gap:.3e})")

    return MaxPrincipleReport(
        nominal_gap=nominal_gap,
        adversary_gap=adversary_gap,
        saddle_gap=saddle_gap,
        tol=tol,
        violations=tuple(violations),
    )


def interval_violation_stats(
    kernel: TransitionKernel,
    nominal: TransitionKernel,
    alpha: np.ndarray,
    tol: float = 1e-9,
) -> tuple[int, float]:
    """Entries of kernel outside [nominal - alpha_i, nominal + 2 alpha_i]: count, max |ratio|.

    Ratios are (nominal - kernel)/alpha_i, so membership in the skewed
    interval is ratio in [-2, 1].  Worst-case kernels from factor sets may
    legitimately leave the raw per-entry intervals; this only measures, it
    does not constrain.
    """
    a = np.asarray(alpha, dtype=float)
    if np.any(a <= 0.0):
        raise ValueError("radii must be positive")
    ratios = (nominal.matrix - kernel.matrix) / a[:, None]
    outside = int(np.sum((ratios < -2.0 - tol) | (ratios > 1.0 + tol)))
    return outside, float(np.max(np.abs(ratios)))

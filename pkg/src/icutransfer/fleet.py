"""Multi-patient transfer planning at toy scale.

Couples N copies of the single-patient ward model through a per-period
cap on simultaneous transfers.  The joint problem is solved exactly by
value iteration on the product state space (small instances only), and
approximately through a multiplier relaxation that prices transfers
instead of capping them.  The relaxation decomposes across patients, so
its bound costs one single-patient solve per multiplier; priced-transfer
sweeps recover the per-score priority structure and how it moves with
the cap.

Per-patient state coding inside joint tensors: 0..n-1 ward scores, then
n=crash, n+1=recover, n+2=death, n+3=transferred.  Terminal coordinates
are absorbing.  Per-period flow rewards make the absorbing coordinates
carry the same discounted worth as the pinned terminal values of the
single-patient solver, so an N=1 joint solve reproduces it exactly.
"""

from __future__ import annotations

import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from functools import reduce
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from icutransfer.mdp import (
    ConvergenceError,
    RewardSpec,
    TransferPolicy,
    TransitionKernel,
    is_threshold,
    terminal_values,
    validate_initial_distribution,
    value_iteration,
)

__all__ = [
    "STATE_CAP",
    "FleetInstance",
    "FleetSolution",
    "LagrangianCurve",
    "lagrangian_curve",
    "lagrangian_value",
    "m_sensitivity",
    "penalized_single_values",
    "save_sweep_csv",
    "solve_fleet_exact",
    "solve_fleet_penalized",
    "whittle_sweep",
]

# hard ceiling on (n+4)^N for exact joint solves
STATE_CAP = 200_000


# ---------------------------------------------------------------------------
# instance container
# ---------------------------------------------------------------------------

def _unpack_base(base) -> tuple[TransitionKernel, RewardSpec]:
    try:
        kernel, rewards = base
    except (TypeError, ValueError):
        raise TypeError(
            "base must pair a TransitionKernel with a RewardSpec"
        ) from None
    if not isinstance(kernel, TransitionKernel) or not isinstance(
        rewards, RewardSpec
    ):
        raise TypeError("base must pair a TransitionKernel with a RewardSpec")
    return kernel, rewards


@dataclass(frozen=True)
class FleetInstance:
    """N identical patients sharing one transfer budget per period.

    ``base`` is the (kernel, rewards) pair every patient follows; ``m``
    caps how many patients may be transferred in the same period.
    """

    N: int
    m: int
    base: tuple[TransitionKernel, RewardSpec]

    def __post_init__(self) -> None:
        _unpack_base(self.base)
        if self.N < 1:
            raise ValueError("need at least one patient")
        if not 1 <= self.m <= self.N:
            raise ValueError("transfer cap must lie in [1, N]")

    @property
    def kernel(self) -> TransitionKernel:
        return self.base[0]

    @property
    def rewards(self) -> RewardSpec:
        return self.base[1]

    @property
    def n(self) -> int:
        return self.base[0].n

    @property
    def joint_states(self) -> int:
        return (self.n + 4) ** self.N


def _require_cap(instance: FleetInstance) -> None:
    if instance.joint_states > STATE_CAP:
        raise ValueError(
            f"joint state space has {instance.joint_states} states; "
            f"the exact solver caps at {STATE_CAP}"
        )


# ---------------------------------------------------------------------------
# joint value iteration
# ---------------------------------------------------------------------------

def _patient_matrices(kernel: TransitionKernel) -> tuple[np.ndarray, np.ndarray]:
    # one-step matrices over the n+4 per-patient coordinates
    n = kernel.n
    stay = np.zeros((n + 4, n + 4))
    stay[:n, : n + 3] = kernel.matrix
    stay[n:, n:] = np.eye(4)
    xfer = np.zeros((n + 4, n + 4))
    xfer[:n, n + 3] = 1.0
    xfer[n:, n:] = np.eye(4)
    return stay, xfer


def _flow_rewards(kernel: TransitionKernel, rewards: RewardSpec) -> np.ndarray:
    # absorbing coordinates pay (1-discount) * pinned value each period,
    # which discounts back to the pinned value itself
    flow = np.empty(kernel.n + 4)
    flow[: kernel.n] = rewards.r_W
    flow[kernel.n :] = (1.0 - rewards.discount) * terminal_values(rewards)
    return flow


def _action_masks(count: int, cap: int) -> list[int]:
    masks = [m for m in range(1 << count) if m.bit_count() <= cap]
    masks.sort(key=lambda m: (m.bit_count(), m))
    return masks


def _apply_axis(tensor: np.ndarray, mat: np.ndarray, axis: int) -> np.ndarray:
    moved = np.tensordot(mat, tensor, axes=([1], [axis]))
    return np.moveaxis(moved, 0, axis)


def _expected_next(
    values: np.ndarray, mask: int, stay: np.ndarray, xfer: np.ndarray
) -> np.ndarray:
    out = values
    for axis in range(values.ndim):
        out = _apply_axis(out, xfer if (mask >> axis) & 1 else stay, axis)
    return out


class FleetSolution(NamedTuple):
    """Joint value tensor plus greedy transfer sets, one axis per patient.

    ``policy`` holds bit masks; bit ``k`` set means patient ``k`` is
    transferred in that joint state.  Bits on already-exited patients are
    never set (they would change nothing).
    """

    values: np.ndarray
    policy: np.ndarray
    iterations: int

    def value_at(self, p0: np.ndarray) -> float:
        """Expected value when every patient starts iid from ``p0``."""
        n = self.values.shape[0] - 4
        p = validate_initial_distribution(np.asarray(p0, dtype=float), n)
        padded = np.zeros(n + 4)
        padded[:n] = p
        out = self.values
        for _ in range(self.values.ndim):
            out = np.tensordot(out, padded, axes=([0], [0]))
        return float(out)


def _joint_value_iteration(
    instance: FleetInstance,
    masks: Sequence[int],
    extra_rewards: Mapping[int, float] | None,
    tol: float,
    max_iter: int,
) -> FleetSolution:
    kernel, rewards = instance.base
    lam = rewards.discount
    stay, xfer = _patient_matrices(kernel)
    flow = _flow_rewards(kernel, rewards)
    base_reward = reduce(np.add.outer, [flow] * instance.N)
    values = np.zeros((kernel.n + 4,) * instance.N)
    greedy = np.zeros(values.shape, dtype=np.int64)
    for it in range(1, max_iter + 1):
        best = None
        greedy = np.zeros(values.shape, dtype=np.int64)
        for mask in masks:
            cand = base_reward + lam * _expected_next(values, mask, stay, xfer)
            if extra_rewards is not None:
                cand += extra_rewards[mask]
            if best is None:
                best = cand
            else:
                better = cand > best
                best = np.where(better, cand, best)
                greedy[better] = mask
        if float(np.max(np.abs(best - values))) < tol:
            return FleetSolution(best, greedy, it)
        values = best
    raise ConvergenceError(
        f"joint value iteration did not converge in {max_iter} sweeps"
    )


def solve_fleet_exact(
    instance: FleetInstance,
    tol: float = 1e-10,
    max_iter: int = 100_000,
) -> FleetSolution:
    """Optimal joint values under the hard per-period transfer cap.

    Enumerates, per sweep, every transfer set of at most ``m`` patients.
    Ties prefer fewer transfers, then lower-numbered patients, so the
    reported greedy masks are deterministic.
    """
    _require_cap(instance)
    if tol <= 0:
        raise ValueError("tol must be positive")
    masks = _action_masks(instance.N, instance.m)
    return _joint_value_iteration(instance, masks, None, tol, max_iter)


def solve_fleet_penalized(
    instance: FleetInstance,
    multiplier: float,
    tol: float = 1e-10,
    max_iter: int = 100_000,
) -> FleetSolution:
    """Joint values with the cap replaced by a per-transfer price.

    Each period pays ``multiplier * (m - transfers)`` on top of the flow
    rewards; the cap itself is dropped, so any subset of ward patients
    may be transferred.  The fixed point dominates the capped values for
    every nonnegative multiplier and separates across patients.
    """
    _require_cap(instance)
    if tol <= 0:
        raise ValueError("tol must be positive")
    if multiplier < 0:
        raise ValueError("multiplier must be nonnegative")
    kernel, _ = instance.base
    n = kernel.n
    masks = _action_masks(instance.N, instance.N)
    # transfers only count on patients still in a ward score
    ward = np.zeros(n + 4)
    ward[:n] = 1.0
    none = np.zeros(n + 4)
    extra = {}
    for mask in masks:
        picked = [ward if (mask >> axis) & 1 else none for axis in range(instance.N)]
        count = reduce(np.add.outer, picked)
        extra[mask] = multiplier * (instance.m - count)
    return _joint_value_iteration(instance, masks, extra, tol, max_iter)


# ---------------------------------------------------------------------------
# multiplier relaxation, single-patient route
# ---------------------------------------------------------------------------

def penalized_single_values(
    base: tuple[TransitionKernel, RewardSpec],
    multiplier: float,
    tol: float = 1e-10,
) -> tuple[np.ndarray, TransferPolicy]:
    """Single-patient values when each transfer costs ``multiplier``.

    The price lands in the period the transfer happens, which is the same
    as shaving ``multiplier / discount`` off the transfer reward.  The
    returned vector keeps the unpriced pinned terminal values, matching
    the per-patient coordinates of the joint solvers.
    """
    kernel, rewards = _unpack_base(base)
    if multiplier < 0:
        raise ValueError("multiplier must be nonnegative")
    priced = rewards.r_PT - multiplier / rewards.discount
    v, policy, _ = value_iteration(kernel, rewards, tol=tol, transfer_reward=priced)
    out = v.copy()
    out[kernel.n :] = terminal_values(rewards)
    return out, policy


def lagrangian_value(
    instance: FleetInstance,
    multiplier: float,
    p0: np.ndarray | None = None,
    tol: float = 1e-10,
) -> float:
    """Upper bound on the capped fleet value at the start distribution.

    Computed as ``m * multiplier / (1 - discount)`` plus N copies of the
    priced single-patient optimum; by separability this equals the joint
    priced solve evaluated at the same iid start, at a fraction of the
    cost.  Valid bound for every ``multiplier >= 0``.
    """
    u, _ = penalized_single_values(instance.base, multiplier, tol)
    kernel, rewards = instance.base
    if p0 is None:
        p = np.full(kernel.n, 1.0 / kernel.n)
    else:
        p = validate_initial_distribution(np.asarray(p0, dtype=float), kernel.n)
    head = instance.m * multiplier / (1.0 - rewards.discount)
    return float(head + instance.N * (p @ u[: kernel.n]))


# ---------------------------------------------------------------------------
# dual curve and its minimizer
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LagrangianCurve:
    """Sampled dual bound over a multiplier grid, plus its minimizer.

    Construction rejects samples whose divided-difference slopes decrease
    by more than 1e-9: the bound is a maximum of affine functions of the
    multiplier, so a sampled dip signals a broken evaluation, not a
    feature.
    """

    multipliers: np.ndarray
    values: np.ndarray
    mu_star: float

    def __post_init__(self) -> None:
        mus = np.asarray(self.multipliers, dtype=float)
        vals = np.asarray(self.values, dtype=float)
        if mus.ndim != 1 or mus.shape != vals.shape or mus.size < 3:
            raise ValueError("need matching 1-D grids of at least three points")
        if mus[0] < 0 or np.any(np.diff(mus) <= 0):
            raise ValueError(
                "multipliers must be nonnegative and strictly increasing"
            )
        object.__setattr__(self, "multipliers", mus)
        object.__setattr__(self, "values", vals)
        slopes = np.diff(vals) / np.diff(mus)
        if slopes.size > 1 and float(np.min(np.diff(slopes))) < -1e-9:
            raise RuntimeError(
                "sampled dual curve is not convex; slope dips exceed tolerance"
            )
        if not mus[0] <= self.mu_star <= mus[-1]:
            raise ValueError("mu_star must lie inside the sampled grid")


def _golden_min(f, lo: float, hi: float, tol: float = 1e-8) -> float:
    # derivative-free bracket shrink; fine with flat (piecewise-affine) bottoms
    if hi <= lo:
        return lo
    ratio = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - ratio * (b - a)
    d = a + ratio * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(200):
        if b - a <= tol * max(1.0, abs(a) + abs(b)):
            break
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - ratio * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + ratio * (b - a)
            fd = f(d)
    return 0.5 * (a + b)


def _map_ordered(fn, items: Iterable, threads: int) -> list:
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def lagrangian_curve(
    instance: FleetInstance,
    multipliers: Sequence[float],
    p0: np.ndarray | None = None,
    tol: float = 1e-10,
    threads: int = 1,
) -> LagrangianCurve:
    """Sample the dual bound on a grid and pin down its minimizer.

    The grid argmin brackets the minimizer; a golden-section pass inside
    the bracketing cell refines it.  Grid points are independent, so the
    sampling map may run threaded; collection order stays the grid order.
    """
    mus = np.asarray(multipliers, dtype=float)
    if mus.ndim != 1 or mus.size < 3:
        raise ValueError("need a 1-D multiplier grid of at least three points")
    if mus[0] < 0 or np.any(np.diff(mus) <= 0):
        raise ValueError("multipliers must be nonnegative and strictly increasing")
    vals = np.array(
        _map_ordered(
            lambda mu: lagrangian_value(instance, mu, p0, tol), mus, threads
        )
    )
    k = int(np.argmin(vals))
    lo = mus[max(k - 1, 0)]
    hi = mus[min(k + 1, mus.size - 1)]
    mu_star = _golden_min(
        lambda mu: lagrangian_value(instance, mu, p0, tol), float(lo), float(hi)
    )
    return LagrangianCurve(mus, vals, mu_star)


# ---------------------------------------------------------------------------
# priced-transfer sweeps
# ---------------------------------------------------------------------------

def _zero_reward_structure_ok(
    kernel: TransitionKernel, rewards: RewardSpec
) -> bool:
    # monotone outside options, plus ward-mass decay fast enough to keep
    # thresholds optimal for EVERY transfer reward down to zero
    term = np.array([rewards.r_CR, rewards.r_RL, rewards.r_D])
    outs = kernel.terminal_block @ term
    if not np.all(outs[:-1] >= outs[1:] - 1e-12):
        return False
    mass = kernel.ward_block.sum(axis=1)
    floor_ratio = rewards.r_W / (rewards.r_W + rewards.discount * rewards.r_RL)
    return bool(np.all(floor_ratio * mass[:-1] - mass[1:] >= -1e-12))


def _threshold_at(
    kernel: TransitionKernel,
    rewards: RewardSpec,
    transfer_reward: float,
    tol: float,
) -> int:
    _, policy, _ = value_iteration(
        kernel, rewards, tol=tol, transfer_reward=transfer_reward
    )
    tau = is_threshold(policy)
    if tau is None:
        raise RuntimeError(
            f"greedy policy at transfer reward {transfer_reward:g} "
            "is not a threshold"
        )
    return tau


def whittle_sweep(
    base: tuple[TransitionKernel, RewardSpec],
    transfer_rewards: Sequence[float],
    tol: float = 1e-10,
    threads: int = 1,
) -> np.ndarray:
    """Optimal transfer threshold at each grid transfer reward.

    Requires the monotone-structure conditions to hold with the transfer
    reward zeroed out; they then hold across the whole nonnegative grid,
    every greedy policy is a threshold, and the thresholds fall (weakly)
    as the reward grows.  Grid points solve independently.
    """
    kernel, rewards = _unpack_base(base)
    grid = np.asarray(transfer_rewards, dtype=float)
    if grid.ndim != 1 or grid.size == 0:
        raise ValueError("need a 1-D grid of transfer rewards")
    if not np.all(np.isfinite(grid)):
        raise ValueError("transfer rewards must be finite")
    if not _zero_reward_structure_ok(kernel, rewards):
        raise ValueError(
            "monotone-structure conditions fail at a zero transfer reward; "
            "the sweep has no indexability guarantee"
        )
    taus = _map_ordered(
        lambda r: _threshold_at(kernel, rewards, r, tol), grid, threads
    )
    return np.asarray(taus, dtype=np.int64)


def m_sensitivity(
    instance: FleetInstance,
    m_values: Sequence[int] | None = None,
    multipliers: Sequence[float] | None = None,
    p0: np.ndarray | None = None,
    tol: float = 1e-10,
    threads: int = 1,
) -> tuple[np.ndarray, np.ndarray]:
    """Minimizing multiplier and induced threshold across transfer caps.

    For each cap the dual curve is sampled on the multiplier grid and its
    minimizer refined; the threshold is the one the minimizer's price
    induces on a single patient.  Loosening the cap can only lower both:
    the curve's slope rises pointwise with ``m``, pushing the minimizer
    left, and a lower price transfers more scores.
    """
    kernel, rewards = instance.base
    if m_values is None:
        m_values = list(range(1, instance.N + 1))
    m_values = [int(m) for m in m_values]
    for m in m_values:
        if not 1 <= m <= instance.N:
            raise ValueError("transfer cap must lie in [1, N]")
    if multipliers is None:
        top = rewards.discount * max(rewards.r_PT, 0.0)
        multipliers = np.linspace(0.0, top if top > 0 else 1.0, 25)
    if not _zero_reward_structure_ok(kernel, rewards):
        raise ValueError(
            "monotone-structure conditions fail at a zero transfer reward; "
            "priced thresholds are not guaranteed to exist"
        )

    def solve_one(m: int) -> tuple[float, int]:
        curve = lagrangian_curve(
            replace(instance, m=m), multipliers, p0, tol, threads=1
        )
        priced = rewards.r_PT - curve.mu_star / rewards.discount
        tau = _threshold_at(kernel, rewards, priced, tol)
        return curve.mu_star, tau

    pairs = _map_ordered(solve_one, m_values, threads)
    mu_stars = np.array([p[0] for p in pairs])
    taus = np.array([p[1] for p in pairs], dtype=np.int64)
    return mu_stars, taus


# ---------------------------------------------------------------------------
# CSV interchange
# ---------------------------------------------------------------------------

def save_sweep_csv(
    table: Mapping[str, Sequence], path: str | None = None
) -> str | None:
    """Write parallel sweep columns as CSV; returns the text if no path."""
    if not table:
        raise ValueError("need at least one column")
    columns = {k: list(v) for k, v in table.items()}
    lengths = {len(v) for v in columns.values()}
    if len(lengths) != 1:
        raise ValueError("columns must have equal length")
    out = io.StringIO()
    out.write(",".join(columns) + "\n")
    for row in zip(*columns.values()):
        cells = [
            repr(float(c)) if isinstance(c, (float, np.floating)) else str(c)
            for c in row
        ]
        out.write(",".join(cells) + "\n")
    text = out.getvalue()
    if path is None:
        return text
    Path(path).write_text(text)
    return None

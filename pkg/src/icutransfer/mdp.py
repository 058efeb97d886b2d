"""Single-patient ward MDP: rewards, Bellman operator, value iteration.

The patient occupies one of ``n`` severity scores while in the ward.  Each
period (6 hours) she either stays in the ward and moves to another score, or
exits through one of three terminal events: crash (CR, reactive ICU
admission), recover-and-leave (RL), or death (D).  The decision-maker may
instead transfer her proactively (terminal state PT).  Value vectors have
length ``n + 4`` with the last four entries pinned to the terminal rewards
``(r_CR, r_RL, r_D, r_PT)``.

Column layout of a transition kernel row: ``0..n-1`` severity scores,
``n`` = CR, ``n+1`` = RL, ``n+2`` = D.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

__all__ = [
    "ConvergenceError",
    "TransitionKernel",
    "RewardSpec",
    "TransferPolicy",
    "derive_composite_rewards",
    "outside_option",
    "terminal_values",
    "initial_value_vector",
    "bellman_apply",
    "value_iteration",
    "policy_evaluation",
    "check_assumption_0",
    "check_assumption_1",
    "is_threshold",
    "lemma1_bound_check",
    "generate_instance",
    "validate_initial_distribution",
    "load_kernel_csv",
    "save_kernel_csv",
]

ROW_SUM_TOL = 1e-12


class ConvergenceError(RuntimeError):
    """An iterative solve did not reach its tolerance within max_iter."""


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------

class TransitionKernel:
    """Row-stochastic matrix of shape (n, n+3) over scores plus CR/RL/D.

    Rows must be nonnegative and sum to 1 within 1e-12.  ``exit_mass`` is the
    smallest single terminal-column entry across rows; spec-generated kernels
    keep it strictly positive, but factorized or worst-case kernels may carry
    exact zeros, so positivity is asserted by the operations that need it
    rather than here.
    """

    __slots__ = ("n", "matrix")

    def __init__(self, matrix: np.ndarray) -> None:
        mat = np.asarray(matrix, dtype=float)
        if mat.ndim != 2 or mat.shape[1] != mat.shape[0] + 3:
            raise ValueError(
                f"kernel must have shape (n, n+3), got {mat.shape}"
            )
        if np.any(mat < 0):
            raise ValueError("kernel entries must be nonnegative")
        row_sums = mat.sum(axis=1)
        if np.any(np.abs(row_sums - 1.0) > ROW_SUM_TOL):
            worst = float(np.max(np.abs(row_sums - 1.0)))
            raise ValueError(f"kernel rows must sum to 1 (off by {worst:.3e})")
        self.n = mat.shape[0]
        self.matrix = mat
        self.matrix.setflags(write=False)

    @property
    def ward_block(self) -> np.ndarray:
        """The n x n sub-matrix of score-to-score transitions."""
        return self.matrix[:, : self.n]

    @property
    def terminal_block(self) -> np.ndarray:
        """The n x 3 sub-matrix of (CR, RL, D) exit probabilities."""
        return self.matrix[:, self.n :]

    @property
    def exit_mass(self) -> float:
        """min over rows of min{T[i,CR], T[i,RL], T[i,D]}."""
        return float(self.terminal_block.min())

    def require_positive_exit(self) -> "TransitionKernel":
        if self.exit_mass <= 0.0:
            raise ValueError("kernel has a zero terminal entry (exit mass 0)")
        return self

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"TransitionKernel(n={self.n})"


@dataclass(frozen=True)
class RewardSpec:
    """Base rewards, death probabilities, and the discount factor.

    Constructor enforces the reward orderings
    ``r_RL >= r_PT_RL >= r_CR_RL >= r_D >= r_CR_D >= r_PT_D`` and checks that
    the derived composite rewards keep ``r_RL >= r_PT >= r_CR``.
    """

    r_W: float
    r_RL: float
    r_D: float
    r_PT_RL: float
    r_PT_D: float
    r_CR_RL: float
    r_CR_D: float
    d_A: float
    d_C: float
    discount: float

    def __post_init__(self) -> None:
        if not 0.0 < self.discount < 1.0:
            raise ValueError("discount must lie in (0, 1)")
        for name in ("d_A", "d_C"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if not (self.r_RL >= self.r_PT_RL >= self.r_CR_RL):
            raise ValueError("need r_RL >= r_PT_RL >= r_CR_RL")
        if not (self.r_D >= self.r_CR_D >= self.r_PT_D):
            raise ValueError("need r_D >= r_CR_D >= r_PT_D")
        if not self.r_CR_RL >= self.r_D:
            raise ValueError("need r_CR_RL >= r_D")
        r_pt, r_cr = derive_composite_rewards(self)
        if not (self.r_RL >= r_pt >= r_cr):
            raise ValueError("derived rewards must satisfy r_RL >= r_PT >= r_CR")

    @property
    def r_PT(self) -> float:
        return derive_composite_rewards(self)[0]

    @property
    def r_CR(self) -> float:
        return derive_composite_rewards(self)[1]


@dataclass(frozen=True)
class TransferPolicy:
    """Per-score transfer probabilities; terminal states implicitly 0."""

    probs: np.ndarray

    def __post_init__(self) -> None:
        p = np.asarray(self.probs, dtype=float)
        if p.ndim != 1:
            raise ValueError("policy must be a vector")
        if np.any(p < 0) or np.any(p > 1):
            raise ValueError("transfer probabilities must lie in [0, 1]")
        object.__setattr__(self, "probs", p)
        p.setflags(write=False)

    @property
    def n(self) -> int:
        return self.probs.shape[0]

    @classmethod
    def threshold(cls, tau: int, n: int) -> "TransferPolicy":
        """Transfer exactly the scores >= tau; tau = n+1 transfers nobody."""
        if not 1 <= tau <= n + 1:
            raise ValueError(f"threshold must lie in [1, {n + 1}]")
        probs = np.zeros(n)
        probs[tau - 1 :] = 1.0
        return cls(probs)


def is_threshold(policy: TransferPolicy) -> int | None:
    """Return tau if the policy is a monotone 0..01..1 step, else None.

    Raises ValueError for non-deterministic policies.
    """
    p = policy.probs
    if not np.all((p == 0.0) | (p == 1.0)):
        raise ValueError("is_threshold requires a deterministic policy")
    ones = np.flatnonzero(p == 1.0)
    if ones.size == 0:
        return policy.n + 1
    tau = int(ones[0]) + 1
    if np.all(p[tau - 1 :] == 1.0):
        return tau
    return None


def validate_initial_distribution(p0: np.ndarray, n: int) -> np.ndarray:
    p = np.asarray(p0, dtype=float)
    if p.shape != (n,):
        raise ValueError(f"initial distribution must have length {n}")
    if np.any(p < 0) or abs(p.sum() - 1.0) > ROW_SUM_TOL:
        raise ValueError("initial distribution must be a probability vector")
    return p


# ---------------------------------------------------------------------------
# rewards
# ---------------------------------------------------------------------------

def derive_composite_rewards(spec: RewardSpec) -> tuple[float, float]:
    """Death-weighted composite rewards (r_PT, r_CR)."""
    r_pt = spec.d_A * spec.r_PT_D + (1.0 - spec.d_A) * spec.r_PT_RL
    r_cr = spec.d_C * spec.r_CR_D + (1.0 - spec.d_C) * spec.r_CR_RL
    return r_pt, r_cr


def outside_option(kernel: TransitionKernel, spec: RewardSpec, i: int) -> float:
    """Expected one-step terminal reward if score ``i`` exits without transfer.

    ``i`` is 1-based to match the score labels S1..Sn.
    """
    if not 1 <= i <= kernel.n:
        raise IndexError(f"score index must lie in [1, {kernel.n}]")
    t_cr, t_rl, t_d = kernel.matrix[i - 1, kernel.n :]
    return spec.r_CR * t_cr + spec.r_RL * t_rl + spec.r_D * t_d


def _outside_options(kernel: TransitionKernel, spec: RewardSpec) -> np.ndarray:
    rewards = np.array([spec.r_CR, spec.r_RL, spec.r_D])
    return kernel.terminal_block @ rewards


def terminal_values(spec: RewardSpec, transfer_reward: float | None = None) -> np.ndarray:
    """Pinned terminal entries (r_CR, r_RL, r_D, r_PT) of a value vector."""
    r_pt = spec.r_PT if transfer_reward is None else transfer_reward
    return np.array([spec.r_CR, spec.r_RL, spec.r_D, r_pt])


def initial_value_vector(n: int, spec: RewardSpec,
                         transfer_reward: float | None = None) -> np.ndarray:
    """Canonical value-iteration start: all zeros except the transfer entry.

    The crash/recover/death entries start at zero as well; the operator pins
    them to their rewards on the first sweep.  Starting this way makes the
    first greedy policy transfer every score (whenever the transfer reward is
    positive), which seeds the threshold-preserving policy sequence.
    """
    v = np.zeros(n + 4)
    v[n + 3] = spec.r_PT if transfer_reward is None else transfer_reward
    return v


# ---------------------------------------------------------------------------
# Bellman operator and solvers
# ---------------------------------------------------------------------------

def _stay_values(v: np.ndarray, kernel: TransitionKernel, spec: RewardSpec) -> np.ndarray:
    # expectation over the n+3 kernel columns; v carries terminals in v[n:n+3]
    cont = kernel.matrix @ v[: kernel.n + 3]
    return spec.r_W + spec.discount * cont


def bellman_apply(
    v: np.ndarray,
    kernel: TransitionKernel,
    spec: RewardSpec,
    transfer_reward: float | None = None,
) -> tuple[np.ndarray, TransferPolicy]:
    """One sweep of the optimality operator plus the greedy policy.

    The greedy policy transfers a score only when the transfer branch is
    strictly larger than the stay branch; ties resolve to "do not transfer".
    ``transfer_reward`` overrides the derived r_PT (used by the reward sweeps
    and the Lagrangian penalty); it also replaces the pinned PT entry.
    """
    n = kernel.n
    r_pt = spec.r_PT if transfer_reward is None else transfer_reward
    stay = _stay_values(v, kernel, spec)
    transfer = spec.r_W + spec.discount * r_pt
    out = np.empty(n + 4)
    out[:n] = np.maximum(stay, transfer)
    out[n:] = terminal_values(spec, transfer_reward)
    greedy = TransferPolicy((stay < transfer).astype(float))
    return out, greedy


def value_iteration(
    kernel: TransitionKernel,
    spec: RewardSpec,
    tol: float = 1e-10,
    max_iter: int = 100_000,
    transfer_reward: float | None = None,
) -> tuple[np.ndarray, TransferPolicy, int]:
    """Fixed point of the optimality operator from the all-zero start.

    Returns (value vector, greedy policy at the fixed point, iterations).
    Raises ConvergenceError if the sup-norm successive difference does not
    drop below ``tol`` within ``max_iter`` sweeps.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    v = initial_value_vector(kernel.n, spec, transfer_reward)
    for it in range(1, max_iter + 1):
        nxt, policy = bellman_apply(v, kernel, spec, transfer_reward)
        if float(np.max(np.abs(nxt - v))) < tol:
            return nxt, policy, it
        v = nxt
    raise ConvergenceError(
        f"value iteration did not converge in {max_iter} sweeps"
    )


def policy_evaluation(
    policy: TransferPolicy,
    kernel: TransitionKernel,
    spec: RewardSpec,
    p0: np.ndarray | None = None,
    transfer_reward: float | None = None,
) -> tuple[np.ndarray, float]:
    """Exact value of a fixed (possibly randomized) policy via linear solve.

    Returns the value vector and, when ``p0`` is given, the expected reward
    p0 . v over ward states (NaN-free; p0 defaults to uniform).
    """
    n = kernel.n
    if policy.n != n:
        raise ValueError("policy length must match kernel size")
    r_pt = spec.r_PT if transfer_reward is None else transfer_reward
    pi = policy.probs
    lam = spec.discount
    # v = pi*(r_W + lam*r_pt) + (1-pi)*(r_W + lam*(Q v + out)), solve for v
    q = kernel.ward_block
    outs = _outside_options(kernel, spec)
    a = np.eye(n) - lam * (1.0 - pi)[:, None] * q
    b = pi * (spec.r_W + lam * r_pt) + (1.0 - pi) * (
        spec.r_W + lam * outs
    )
    ward_values = np.linalg.solve(a, b)
    v = np.empty(n + 4)
    v[:n] = ward_values
    v[n:] = terminal_values(spec, transfer_reward)
    if p0 is None:
        reward = float(ward_values.mean())
    else:
        p = validate_initial_distribution(p0, n)
        reward = float(p @ ward_values)
    return v, reward


# ---------------------------------------------------------------------------
# assumption checks
# ---------------------------------------------------------------------------

def check_assumption_0(spec: RewardSpec) -> bool:
    """Staying in the ward forever is no better than recovering next period."""
    forever = spec.r_W / (1.0 - spec.discount)
    return forever <= spec.r_W + spec.discount * spec.r_RL


def check_assumption_1(
    kernel: TransitionKernel, spec: RewardSpec
) -> tuple[bool, bool, bool]:
    """Monotone-structure conditions on (kernel, rewards).

    Returns (cond2, cond3, cond4):
      cond2: outside options non-increasing in the score.
      cond3: ward-mass ratio bounded by the transfer/recover reward ratio.
      cond4: the weaker combined inequality; cond2 and cond3 imply it.
    A row with zero ward mass makes the cond3 ratio undefined; the row is
    treated as degenerate and cond3 reports False.
    """
    n = kernel.n
    lam = spec.discount
    outs = _outside_options(kernel, spec)
    ward_mass = kernel.ward_block.sum(axis=1)
    cond2 = bool(np.all(outs[:-1] >= outs[1:] - 1e-12))
    ratio = (spec.r_W + lam * spec.r_PT) / (spec.r_W + lam * spec.r_RL)
    if np.any(ward_mass[:-1] <= 0.0):
        cond3 = False
    else:
        cond3 = bool(
            np.all(ratio * ward_mass[:-1] - ward_mass[1:] >= -1e-12)
        )
    lhs = ward_mass[:-1] * (spec.r_W + lam * spec.r_PT) + outs[:-1]
    rhs = ward_mass[1:] * (spec.r_W + lam * spec.r_RL) + outs[1:]
    cond4 = bool(np.all(lhs - rhs >= -1e-12))
    if cond2 and cond3 and not cond4:
        raise AssertionError("cond2 and cond3 must imply cond4")
    return cond2, cond3, cond4


def lemma1_bound_check(v: np.ndarray, spec: RewardSpec, n: int | None = None) -> bool:
    """True iff every ward value is <= r_W + discount * r_RL + 1e-9."""
    bound = spec.r_W + spec.discount * spec.r_RL + 1e-9
    ward = np.asarray(v)[: (len(v) - 4 if n is None else n)]
    return bool(np.all(ward <= bound))


# ---------------------------------------------------------------------------
# structured instance generator
# ---------------------------------------------------------------------------

def _sample_rewards(rng: np.random.Generator, discount: float) -> RewardSpec:
    scale = float(np.exp(rng.uniform(np.log(0.1), np.log(10.0))))
    # base magnitudes keep the transfer/recover reward ratio in a band that
    # the kernel construction below can match
    r_rl = 5000.0
    r_pt_rl = rng.uniform(3500.0, 4200.0)
    r_cr_rl = rng.uniform(2800.0, 3400.0)
    r_d = rng.uniform(450.0, 700.0)
    r_cr_d = rng.uniform(250.0, 420.0)
    r_pt_d = rng.uniform(100.0, r_cr_d)
    d_a = rng.uniform(0.0, 0.02)
    d_c = rng.uniform(0.3, 0.6)
    r_w = (1.0 - discount) * r_rl * rng.uniform(0.2, 0.95)
    return RewardSpec(
        r_W=r_w * scale,
        r_RL=r_rl * scale,
        r_D=r_d * scale,
        r_PT_RL=r_pt_rl * scale,
        r_PT_D=r_pt_d * scale,
        r_CR_RL=r_cr_rl * scale,
        r_CR_D=r_cr_d * scale,
        d_A=d_a,
        d_C=d_c,
        discount=discount,
    )


def generate_instance(
    rng: np.random.Generator,
    n: int,
    discount: float = 0.95,
    transfer_reward_floor: float | None = None,
    max_attempts: int = 200,
) -> tuple[TransitionKernel, RewardSpec, np.ndarray]:
    """Random instance satisfying the monotone-structure conditions.

    Construction: ward mass decays geometrically down the scores at a ratio
    below the transfer/recover reward ratio; the recover column decreases and
    the crash+death mass increases in the score; outside options are fixed on
    a decreasing schedule and the terminal split solved from them.  Instances
    failing the exact checkers are rejected and redrawn.

    ``transfer_reward_floor`` tightens the ward-mass decay so that the ratio
    condition still holds after the transfer reward is replaced by any value
    >= the floor (pass 0.0 to support full reward sweeps).
    """
    if n < 2:
        raise ValueError("need at least two severity scores")
    lam = discount
    for _ in range(max_attempts):
        spec = _sample_rewards(rng, discount)
        floor_pt = spec.r_PT if transfer_reward_floor is None else transfer_reward_floor
        ratio = (spec.r_W + lam * floor_pt) / (spec.r_W + lam * spec.r_RL)
        if ratio <= 0.12:
            continue
        # mean terminal reward under the crash/death split h
        h = rng.uniform(0.2, 0.5)
        r_bar = h * spec.r_CR + (1.0 - h) * spec.r_D

        s = np.empty(n)
        s[0] = rng.uniform(0.45, 0.6)
        decay = rng.uniform(0.45 * ratio, 0.92 * ratio, size=n - 1)
        for i in range(1, n):
            s[i] = s[i - 1] * decay[i - 1]
        e = 1.0 - s

        out_first = rng.uniform(0.75, 0.92) * spec.r_RL * e[0]
        out_last = rng.uniform(1.05, 1.15) * r_bar
        if out_last >= out_first:
            continue
        outs = out_first * (out_last / out_first) ** (
            np.arange(n) / (n - 1)
        )
        rl_col = (outs - r_bar * e) / (spec.r_RL - r_bar)
        if np.any(rl_col <= 0.0) or np.any(rl_col >= e):
            continue
        cr_col = h * (e - rl_col)
        d_col = (1.0 - h) * (e - rl_col)

        mat = np.zeros((n, n + 3))
        ward = rng.dirichlet(np.ones(n), size=n) * s[:, None]
        mat[:, :n] = ward
        mat[:, n] = cr_col
        mat[:, n + 1] = rl_col
        mat[:, n + 2] = d_col
        mat /= mat.sum(axis=1, keepdims=True)
        kernel = TransitionKernel(mat)
        if kernel.exit_mass <= 0.0:
            continue
        if not check_assumption_0(spec):
            continue
        cond2, cond3, _ = check_assumption_1(kernel, spec)
        if not (cond2 and cond3):
            continue
        if transfer_reward_floor is not None:
            ward_mass = kernel.ward_block.sum(axis=1)
            fr = (spec.r_W + lam * transfer_reward_floor) / (
                spec.r_W + lam * spec.r_RL
            )
            if not np.all(fr * ward_mass[:-1] - ward_mass[1:] >= -1e-12):
                continue
        p0 = rng.dirichlet(np.ones(n))
        return kernel, spec, p0
    raise RuntimeError("instance generator exhausted its attempts")


# ---------------------------------------------------------------------------
# CSV interchange
# ---------------------------------------------------------------------------

def _score_labels(n: int) -> list[str]:
    return [f"S{i}" for i in range(1, n + 1)]


def save_kernel_csv(kernel: TransitionKernel, path: str) -> None:
    """Matrix CSV with a 3-line header: n, column labels, row labels."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([kernel.n])
        writer.writerow(_score_labels(kernel.n) + ["CR", "RL", "D"])
        writer.writerow(_score_labels(kernel.n))
        for row in kernel.matrix:
            writer.writerow([repr(float(x)) for x in row])


def load_kernel_csv(path_or_text: str) -> TransitionKernel:
    """Inverse of save_kernel_csv; accepts a path or raw CSV text."""
    if "\n" in path_or_text:
        fh = io.StringIO(path_or_text)
        rows = list(csv.reader(fh))
    else:
        with open(path_or_text, newline="") as fh:
            rows = list(csv.reader(fh))
    if len(rows) < 4:
        raise ValueError("kernel CSV needs a 3-line header plus data rows")
    n = int(rows[0][0])
    cols = rows[1]
    expect = _score_labels(n) + ["CR", "RL", "D"]
    if cols != expect:
        raise ValueError(f"unexpected column labels {cols!r}")
    if rows[2] != _score_labels(n):
        raise ValueError(f"unexpected row labels {rows[2]!r}")
    data = [[float(x) for x in row] for row in rows[3 : 3 + n]]
    if len(data) != n:
        raise ValueError(f"expected {n} data rows, found {len(data)}")
    return TransitionKernel(np.array(data))

"""Shared builders for uncertainty-set test instances."""

from __future__ import annotations

import numpy as np

from icutransfer import mdp, robust


def shrink_rect_until_structured(
    kernel: mdp.TransitionKernel,
    spec: mdp.RewardSpec,
    alpha0: np.ndarray,
    max_halvings: int = 40,
) -> robust.RectangularSet:
    """Halve the row radii until the whole set passes the structure check."""
    a = np.asarray(alpha0, dtype=float).copy()
    for _ in range(max_halvings):
        rect = robust.RectangularSet(kernel, a)
        if robust.check_assumption_3(rect, spec):
            return rect
        a = a / 2.0
    raise AssertionError("no radius small enough to keep the structure")


def two_archetype_model(
    rng: np.random.Generator,
    n: int,
    spec: mdp.RewardSpec,
    radius: float = 1e-3,
    max_halvings: int = 40,
) -> robust.FactorModel:
    """Rank-2 factor family: a recovering archetype and a crashing one.

    Mixing weights decay geometrically toward the crashing archetype faster
    than the transfer/recover reward ratio, the crashing factor carries
    almost no ward mass, and the factor boxes are halved until the structure
    check accepts the whole family.  Draws whose nominal family already
    violates the condition are thrown away and redrawn; shrinking the boxes
    cannot repair those.
    """
    lam = spec.discount
    ratio = (spec.r_W + lam * spec.r_PT) / (spec.r_W + lam * spec.r_RL)
    for _ in range(50):
        decay = rng.uniform(0.5, 0.85) * ratio
        a = rng.uniform(0.85, 0.95) * decay ** np.arange(n)
        U = np.column_stack([a, 1.0 - a])

        ward_h = rng.dirichlet(np.ones(n)) * rng.uniform(0.5, 0.6)
        exits_h = np.array([0.05, 0.75, 0.05])
        exits_h = exits_h / exits_h.sum() * (1.0 - ward_h.sum())
        w_h = np.concatenate([ward_h, exits_h])

        ward_s = rng.dirichlet(np.ones(n)) * 1e-4
        exits_s = np.array([0.55, 0.08, 0.37])
        exits_s = exits_s / exits_s.sum() * (1.0 - ward_s.sum())
        w_s = np.concatenate([ward_s, exits_s])

        W = np.column_stack([w_h, w_s])
        singleton = robust.FactorModel(
            U,
            W,
            (robust.BoxSimplexSet.singleton(w_h), robust.BoxSimplexSet.singleton(w_s)),
        )
        if not robust.check_assumption_3(singleton, spec):
            continue
        r = radius
        for _ in range(max_halvings):
            sets = (
                robust.BoxSimplexSet.from_center(w_h, r, 2.0 * r),
                robust.BoxSimplexSet.from_center(w_s, r, 2.0 * r),
            )
            model = robust.FactorModel(U, W, sets)
            if robust.check_assumption_3(model, spec):
                return model
            r = r / 2.0
    raise AssertionError("no archetype draw kept the structure")


def structured_uncertainty_pair(
    rng: np.random.Generator, n: int | None = None
) -> tuple[robust.FactorModel | robust.RectangularSet, mdp.RewardSpec]:
    """Random (set, rewards) pair accepted by the structure check.

    Alternates between rectangular overlays on generated kernels and rank-2
    archetype factor families.
    """
    if n is None:
        n = int(rng.integers(3, 11))
    kernel, spec, _ = mdp.generate_instance(rng, n)
    if rng.uniform() < 0.5:
        return shrink_rect_until_structured(kernel, spec, np.full(n, 2e-3)), spec
    return two_archetype_model(rng, n, spec), spec

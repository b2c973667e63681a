"""Correlated equilibria of two-agent stage games via linear programming.

A stage game holds both agents' expected payoffs over the joint-action
grid (agent A picks the row, agent B the column). The solver returns the
utilitarian correlated equilibrium: the joint-action distribution that
maximizes the summed expected payoff subject to the deviation
inequalities, so neither agent gains by unilaterally ignoring its
recommendation. All functions are pure and deterministic.
"""

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .simplex import LPProblem, solve_lp

__all__ = [
    "StageGame",
    "CEDistribution",
    "build_ce_lp",
    "solve_ce",
    "verify_ce",
    "sample_joint",
    "CEVerdict",
]


@dataclass(eq=False)
class StageGame:
    """Bimatrix game: payoff_a[r, c] / payoff_b[r, c] for joint action (r, c)."""

    payoff_a: np.ndarray
    payoff_b: np.ndarray

    def __post_init__(self):
        self.payoff_a = np.ascontiguousarray(self.payoff_a, dtype=np.float64)
        self.payoff_b = np.ascontiguousarray(self.payoff_b, dtype=np.float64)
        if self.payoff_a.ndim != 2:
            raise ValueError("payoff matrices must be 2-D")
        if self.payoff_a.shape != self.payoff_b.shape:
            raise ValueError(
                f"payoff shapes differ: {self.payoff_a.shape} vs {self.payoff_b.shape}")
        if self.payoff_a.shape[0] < 1 or self.payoff_a.shape[1] < 1:
            raise ValueError("each agent needs at least one action")
        if not (np.isfinite(self.payoff_a).all() and np.isfinite(self.payoff_b).all()):
            raise ValueError("payoffs must be finite")

    @property
    def actions_a(self):
        return self.payoff_a.shape[0]

    @property
    def actions_b(self):
        return self.payoff_a.shape[1]


@dataclass(eq=False)
class CEDistribution:
    """Probability matrix over joint actions, same layout as the payoffs."""

    probs: np.ndarray

    def __post_init__(self):
        self.probs = np.ascontiguousarray(self.probs, dtype=np.float64)
        if self.probs.ndim != 2:
            raise ValueError("probs must be a 2-D matrix")
        if not np.isfinite(self.probs).all():
            raise ValueError("probabilities must be finite")
        if self.probs.min() < -1e-9:
            raise ValueError(f"negative probability {self.probs.min()}")
        s = float(self.probs.sum())
        if abs(s - 1.0) > 1e-9:
            raise ValueError(f"probabilities sum to {s}, not 1")


class CEVerdict(NamedTuple):
    ok: bool
    worst_violation: float
    constraint: str


def build_ce_lp(game: StageGame) -> LPProblem:
    """Assemble the utilitarian-CE linear program of a stage game.

    Variables are the joint probabilities flattened row-major (A-major).
    Rows, in order: the sum-to-one equality, then for every ordered pair of
    agent-A actions (r recommended, r' deviation, r != r') one inequality

        sum_c pi[r, c] * (QA[r, c] - QA[r', c]) >= 0

    and then the symmetric inequalities for agent B's columns. Row count is
    1 + na(na-1) + nb(nb-1). Nonnegativity comes from the solver's variable
    bounds, not explicit rows.
    """
    qa, qb = game.payoff_a, game.payoff_b
    na, nb = game.actions_a, game.actions_b
    nv = na * nb
    n_rows = 1 + na * (na - 1) + nb * (nb - 1)
    A = np.zeros((n_rows, nv))
    A[0, :] = 1.0

    if na > 1:
        # diffs[r, rp, c] = QA[r, c] - QA[rp, c]; keep rows with r != rp
        diffs = qa[:, None, :] - qa[None, :, :]
        rec, dev = np.nonzero(~np.eye(na, dtype=bool))  # r-major, rp ascending
        rows = 1 + np.arange(rec.size)
        cols = rec[:, None] * nb + np.arange(nb)[None, :]
        A[rows[:, None], cols] = diffs[rec, dev, :]

    if nb > 1:
        diffs = qb.T[:, None, :] - qb.T[None, :, :]  # [c, cp, r] = QB[r,c]-QB[r,cp]
        rec, dev = np.nonzero(~np.eye(nb, dtype=bool))
        rows = 1 + na * (na - 1) + np.arange(rec.size)
        cols = np.arange(na)[None, :] * nb + rec[:, None]
        A[rows[:, None], cols] = diffs[rec, dev, :]

    senses = ("=",) + (">=",) * (n_rows - 1)
    rhs = np.zeros(n_rows)
    rhs[0] = 1.0
    objective = (qa + qb).reshape(-1)
    return LPProblem(objective, A, senses, rhs)


def solve_ce(game: StageGame) -> CEDistribution:
    """Utilitarian-optimal correlated equilibrium of the game.

    The CE polytope of a finite game is never empty, so this always
    succeeds on valid input; solver errors indicate corrupted payoffs.
    The optimum may be degenerate; the returned vertex is the
    deterministic one picked by the fixed pivoting rule.
    """
    x = solve_lp(build_ce_lp(game))
    return CEDistribution(x.reshape(game.actions_a, game.actions_b))


def _deviation_margins(game: StageGame, probs: np.ndarray):
    """Per-agent deviation margins; entry [i, j] is the gain of following
    recommendation i over switching to j (diagonal is zero)."""
    qa, qb = game.payoff_a, game.payoff_b
    own_a = (probs * qa).sum(axis=1)            # value of each recommended row
    marg_a = own_a[:, None] - probs @ qa.T      # minus value after deviating
    own_b = (probs * qb).sum(axis=0)
    marg_b = own_b[:, None] - probs.T @ qb
    return marg_a, marg_b


def verify_ce(game: StageGame, dist: CEDistribution, tol: float = 1e-9) -> CEVerdict:
    """Check the simplex and deviation constraints, reporting the worst one."""
    probs = dist.probs
    if probs.shape != game.payoff_a.shape:
        raise ValueError(
            f"distribution shape {probs.shape} does not match game {game.payoff_a.shape}")
    worst = abs(float(probs.sum()) - 1.0)
    label = "sum-to-one"
    neg = -float(probs.min())
    if neg > worst:
        worst = neg
        cell = np.unravel_index(int(probs.argmin()), probs.shape)
        label = f"nonnegativity at {cell}"
    marg_a, marg_b = _deviation_margins(game, probs)
    if game.actions_a > 1:
        v = -float(marg_a.min())
        if v > worst:
            worst = v
            r, rp = np.unravel_index(int(marg_a.argmin()), marg_a.shape)
            label = f"agent A deviation {r}->{rp}"
    if game.actions_b > 1:
        v = -float(marg_b.min())
        if v > worst:
            worst = v
            c, cp = np.unravel_index(int(marg_b.argmin()), marg_b.shape)
            label = f"agent B deviation {c}->{cp}"
    return CEVerdict(worst <= tol, worst, label)


def sample_joint(dist: CEDistribution, rng_draw: float):
    """Map a uniform draw in [0, 1) to a joint action by inverse CDF.

    The CDF runs over the row-major flattening of probs; a draw landing
    exactly on a boundary selects the higher-index cell (half-open
    interval convention).
    """
    p = np.maximum(dist.probs.reshape(-1), 0.0)
    cdf = np.cumsum(p)
    k = int(np.searchsorted(cdf, rng_draw, side="right"))
    k = min(k, p.size - 1)
    nb = dist.probs.shape[1]
    return k // nb, k % nb

"""The message boundary between the two learning agents.

Each hour the agents share exactly one thing: their own Q-values at the
current state, restricted to the eligible joint actions. Trainers build
the stage game only out of these slices, so neither agent ever reads the
other's full table or rewards; the decentralization is informational, not
physical, and the in-process objects here could be swapped for a wire
transport without touching the trainers.

Joint-action convention, fixed everywhere: the flat index of a joint
action is storage-major, demand-minor (joint = ess * n_dsm + dsm); slice
matrices are oriented (demand rows, storage columns) so they drop
straight into the stage game as agent-A/agent-B payoffs.
"""

from dataclasses import dataclass

import numpy as np

from .ce_game import StageGame

__all__ = [
    "QSlice", "request_slice", "assemble_stage_game",
    "joint_index", "joint_pair",
    "UnknownState", "StateMismatch", "ShapeMismatch",
]


class UnknownState(IndexError):
    """The requested state index is outside the owner's table."""


class StateMismatch(ValueError):
    """The two slices describe different states."""


class ShapeMismatch(ValueError):
    """The two slices disagree about the eligible action sets."""


def joint_index(ess_idx, dsm_idx, n_dsm):
    """Flat joint-action index: storage-major, demand-minor."""
    return ess_idx * n_dsm + dsm_idx


def joint_pair(joint, n_dsm):
    """Inverse of joint_index."""
    return joint // n_dsm, joint % n_dsm


@dataclass(frozen=True)
class QSlice:
    """One agent's Q-values at one state over the eligible joint actions.

    matrix[i, j] is the sender's value for (demand action dsm_actions[i],
    storage action ess_actions[j]); the index tuples map positions back to
    full action-space indices. The matrix is a copy: mutating a slice never
    touches the owner's table.
    """

    sender: str
    state_index: int
    matrix: np.ndarray
    dsm_actions: tuple
    ess_actions: tuple


def request_slice(table, state_index, ess_actions, dsm_actions) -> QSlice:
    """Restrict an agent's table to one state and the eligible actions.

    table is any object with an `owner` string and a `values` array of
    shape (n_states, n_ess, n_dsm). Nothing outside (state_index,
    eligible) is ever exposed to the caller.
    """
    values = table.values
    if values.ndim != 3:
        raise ValueError(f"{table.owner} table is not joint-action shaped")
    if not 0 <= state_index < values.shape[0]:
        raise UnknownState(
            f"state {state_index} outside table of {values.shape[0]} states")
    ess_ids = np.asarray(ess_actions, dtype=np.intp)
    dsm_ids = np.asarray(dsm_actions, dtype=np.intp)
    matrix = values[state_index][np.ix_(ess_ids, dsm_ids)].T.copy()
    return QSlice(
        sender=table.owner,
        state_index=state_index,
        matrix=matrix,
        dsm_actions=tuple(int(i) for i in dsm_ids),
        ess_actions=tuple(int(i) for i in ess_ids),
    )


def assemble_stage_game(slice_dsm: QSlice, slice_ess: QSlice) -> StageGame:
    """Combine the two agents' slices into the hour's stage game.

    The demand agent is agent A (rows), the storage agent is agent B
    (columns). Both slices must describe the same state and identical
    eligible sets.
    """
    if slice_dsm.state_index != slice_ess.state_index:
        raise StateMismatch(
            f"slices describe states {slice_dsm.state_index} and {slice_ess.state_index}")
    if (slice_dsm.dsm_actions != slice_ess.dsm_actions
            or slice_dsm.ess_actions != slice_ess.ess_actions):
        raise ShapeMismatch("slices disagree about the eligible action sets")
    if slice_dsm.matrix.shape != slice_ess.matrix.shape:
        raise ShapeMismatch(
            f"slice matrices {slice_dsm.matrix.shape} vs {slice_ess.matrix.shape}")
    return StageGame(payoff_a=slice_dsm.matrix, payoff_b=slice_ess.matrix)

"""Tabular multi-agent Q-learning over the microgrid.

Three trainers share the environment and differ only in how actions are
selected and values bootstrapped:

* train_ceq   - each agent keeps its own joint-action table; every hour
                the agents exchange current-state Q slices, solve the
                utilitarian correlated equilibrium of that stage game and
                sample the recommended joint action from it.
* train_qlwc  - uncorrelated baseline: each agent keeps a table over its
                OWN actions only and greedily maximizes it, ignoring the
                other agent entirely. Settlement is identical; mutual
                threats simply happen and break trades.
* train_qlwa  - aggregator baseline: one table over joint actions trained
                on the summed reward, i.e. centralized control.

All randomness flows through numpy Generators seeded from the config, so
identical configs reproduce identical tables, curves and traces bit for
bit. Exploration uses a single epsilon draw per hour; greedy evaluation
episodes are interleaved during training to produce the learning curves
and never update the tables.
"""

from dataclasses import dataclass, field

import numpy as np

from .ce_game import CEDistribution, sample_joint, solve_ce
from .exchange import assemble_stage_game, request_slice
from .grid_env import MicrogridEnv, Scenario

__all__ = [
    "LearnConfig", "QTable", "EpisodeTrace", "HourRecord", "TrainResult",
    "train_ceq", "train_qlwc", "train_qlwa", "train",
    "select_joint_ceq", "update_q", "reward_bound",
]

CASES = ("ceq", "qlwc", "qlwa")


@dataclass
class LearnConfig:
    episodes: int = 600
    learning_rate: float = 0.1
    discount: float = 0.95
    epsilon: float = 0.1
    epsilon_decay: float = 0.999
    eval_every: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.episodes < 0:
            raise ValueError("episodes must be >= 0")
        if not 0.0 < self.learning_rate <= 1.0:
            raise ValueError("learning_rate must be in (0, 1]")
        if not 0.0 <= self.discount < 1.0:
            raise ValueError("discount must be in [0, 1)")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("epsilon must be in [0, 1]")
        if not 0.0 < self.epsilon_decay <= 1.0:
            raise ValueError("epsilon_decay must be in (0, 1]")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")


class QTable:
    """Dense zero-initialized value table owned by one agent."""

    def __init__(self, owner, shape):
        self.owner = owner
        self.values = np.zeros(shape)

    @classmethod
    def joint(cls, owner, env: MicrogridEnv):
        return cls(owner, (env.n_states, env.n_ess_actions, env.n_dsm_actions))

    @classmethod
    def own(cls, owner, n_states, n_actions):
        return cls(owner, (n_states, n_actions))


@dataclass(frozen=True)
class HourRecord:
    state: object
    ess_action: object
    dsm_action: object
    outcome: object


@dataclass
class EpisodeTrace:
    records: list
    dsm_cost: float
    ess_profit: float
    device_starts: dict  # device id -> start hour


@dataclass
class TrainResult:
    case: str
    tables: dict
    curve: list  # (episode, dsm_cost, ess_profit) greedy-evaluation points
    trace: EpisodeTrace

    @property
    def total_revenue(self):
        return self.trace.ess_profit - self.trace.dsm_cost


def reward_bound(scenario: Scenario, discount, aggregate=False):
    """Upper bound on |Q|: max one-hour reward over the discounted horizon."""
    max_pb = float(max(scenario.prices.buy(t) for t in range(1, scenario.horizon + 1)))
    r_dsm = sum(d.power_kw for d in scenario.devices) * max_pb
    r_ess = scenario.charge_power_kw * max_pb
    r_max = (r_ess + r_dsm) if aggregate else max(r_ess, r_dsm)
    return r_max / (1.0 - discount) + 1e-9


def update_q(q: QTable, state, joint, reward, next_value, lr, discount, bound=None):
    """Temporal-difference update: Q <- (1-lr) Q + lr (r + discount * V')."""
    idx = (state, *joint) if isinstance(joint, tuple) else (state, joint)
    v = (1.0 - lr) * q.values[idx] + lr * (reward + discount * next_value)
    assert np.isfinite(v), f"non-finite Q update at {idx}"
    if bound is not None:
        assert abs(v) <= bound, f"|Q|={abs(v)} exceeds bound {bound}"
    q.values[idx] = v


def _stage_distribution(q_dsm, q_ess, state_index, ess_ids, dsm_ids):
    """Exchange slices, assemble the stage game, solve the utilitarian CE.

    Returns (distribution, V_dsm, V_ess) where the values are the CE-weighted
    expectations of each agent's own slice (the bootstrap targets). Untouched
    states (both slices all zero) skip the solver: on a zero game the LP
    provably lands on a point mass at the first cell, so that answer is
    produced directly, bit-identical to what the solver would return.
    """
    s_dsm = request_slice(q_dsm, state_index, ess_ids, dsm_ids)
    s_ess = request_slice(q_ess, state_index, ess_ids, dsm_ids)
    if not s_dsm.matrix.any() and not s_ess.matrix.any():
        probs = np.zeros_like(s_dsm.matrix)
        probs[0, 0] = 1.0
        return CEDistribution(probs), 0.0, 0.0
    game = assemble_stage_game(s_dsm, s_ess)
    dist = solve_ce(game)
    v_dsm = float((dist.probs * s_dsm.matrix).sum())
    v_ess = float((dist.probs * s_ess.matrix).sum())
    return dist, v_dsm, v_ess


def select_joint_ceq(q_dsm, q_ess, state_index, eligible, epsilon, rng):
    """One CEQ action selection: epsilon-random, else sample the CE.

    eligible is the pair (ess_actions, dsm_actions) of action tuples plus
    their index arrays, i.e. ((ess_actions, ess_ids), (dsm_actions,
    dsm_ids)). The uniform branch draws over the full joint grid.
    """
    (ess_actions, ess_ids), (dsm_actions, dsm_ids) = eligible
    if rng.random() < epsilon:
        k = int(rng.integers(len(ess_actions) * len(dsm_actions)))
        return ess_actions[k // len(dsm_actions)], dsm_actions[k % len(dsm_actions)]
    dist, _, _ = _stage_distribution(q_dsm, q_ess, state_index, ess_ids, dsm_ids)
    row, col = sample_joint(dist, float(rng.random()))
    return ess_actions[col], dsm_actions[row]


def _collect(env, records):
    dsm_cost = -sum(r.outcome.r_dsm for r in records)
    ess_profit = sum(r.outcome.r_ess for r in records)
    starts = {}
    for r in records:
        for i, s in enumerate(r.dsm_action.starts):
            if s:
                starts[env.scenario.devices[i].id] = r.state.t
    return EpisodeTrace(records=records, dsm_cost=dsm_cost,
                        ess_profit=ess_profit, device_starts=starts)


def _evaluate(env, policy, rng):
    """One greedy episode (no updates); returns its trace."""
    records = []
    state = env.reset()
    while not env.is_terminal(state):
        ea, da = policy(state, rng)
        outcome, nxt = env.step(state, ea, da)
        records.append(HourRecord(state, ea, da, outcome))
        state = nxt
    return _collect(env, records)


def _train_loop(env, cfg, run_episode, greedy_policy):
    """Shared trainer skeleton: episodes, epsilon decay, interleaved greedy
    evaluation every cfg.eval_every episodes, final greedy trace."""
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed))
    eps = cfg.epsilon
    curve = []
    n_evals = 0
    for ep in range(cfg.episodes):
        run_episode(eps, rng)
        eps *= cfg.epsilon_decay
        if (ep + 1) % cfg.eval_every == 0:
            eval_rng = np.random.default_rng(
                np.random.SeedSequence(cfg.seed, spawn_key=(1, n_evals)))
            trace = _evaluate(env, greedy_policy, eval_rng)
            curve.append((ep + 1, trace.dsm_cost, trace.ess_profit))
            n_evals += 1
    final_rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(2,)))
    trace = _evaluate(env, greedy_policy, final_rng)
    return curve, trace


# ------------------------------------------------------------------------ CEQ


def train_ceq(scenario: Scenario, cfg: LearnConfig) -> TrainResult:
    """Correlated Q-learning: the trainers see each other only through the
    slice exchange; the stage-game CE at the next state provides both the
    bootstrap value and (carried one step) the next hour's selection."""
    env = MicrogridEnv(scenario)
    q_dsm = QTable.joint("dsm", env)
    q_ess = QTable.joint("ess", env)
    bound = reward_bound(scenario, cfg.discount)
    lr, th = cfg.learning_rate, cfg.discount

    def run_episode(eps, rng):
        state = env.reset()
        sidx = env.state_index(state)
        ess_actions, dsm_actions = env.eligible_actions(state)
        ess_ids, dsm_ids = env.eligible_ids(state)
        carried = None  # CE at the current state, solved during the previous
        # step's bootstrap; still exact because updates only touched the
        # previous state's row
        while not env.is_terminal(state):
            if rng.random() < eps:
                k = int(rng.integers(len(ess_actions) * len(dsm_actions)))
                ea = ess_actions[k // len(dsm_actions)]
                da = dsm_actions[k % len(dsm_actions)]
            else:
                if carried is None:
                    carried, _, _ = _stage_distribution(q_dsm, q_ess, sidx,
                                                        ess_ids, dsm_ids)
                row, col = sample_joint(carried, float(rng.random()))
                ea, da = ess_actions[col], dsm_actions[row]
            outcome, nstate = env.step(state, ea, da)
            if env.is_terminal(nstate):
                v_dsm = v_ess = 0.0
                nsidx = -1
                ncarried = None
            else:
                nsidx = env.state_index(nstate)
                n_ess_actions, n_dsm_actions = env.eligible_actions(nstate)
                n_ess_ids, n_dsm_ids = env.eligible_ids(nstate)
                ncarried, v_dsm, v_ess = _stage_distribution(
                    q_dsm, q_ess, nsidx, n_ess_ids, n_dsm_ids)
            joint = (env.ess_action_index(ea), env.dsm_action_index(da))
            update_q(q_dsm, sidx, joint, outcome.r_dsm, v_dsm, lr, th, bound)
            update_q(q_ess, sidx, joint, outcome.r_ess, v_ess, lr, th, bound)
            state, sidx, carried = nstate, nsidx, ncarried
            if not env.is_terminal(state):
                ess_actions, dsm_actions = n_ess_actions, n_dsm_actions
                ess_ids, dsm_ids = n_ess_ids, n_dsm_ids

    def greedy_policy(state, rng):
        sidx = env.state_index(state)
        ess_actions, dsm_actions = env.eligible_actions(state)
        ess_ids, dsm_ids = env.eligible_ids(state)
        dist, _, _ = _stage_distribution(q_dsm, q_ess, sidx, ess_ids, dsm_ids)
        row, col = sample_joint(dist, float(rng.random()))
        return ess_actions[col], dsm_actions[row]

    curve, trace = _train_loop(env, cfg, run_episode, greedy_policy)
    return TrainResult("ceq", {"dsm": q_dsm, "ess": q_ess}, curve, trace)


# ----------------------------------------------------------------------- QLWC


def train_qlwc(scenario: Scenario, cfg: LearnConfig) -> TrainResult:
    """Q-learning without correlation: own-action tables, own greedy argmax
    (ties to the lowest action index), own-max bootstrap."""
    env = MicrogridEnv(scenario)
    q_dsm = QTable.own("dsm", env.n_states, env.n_dsm_actions)
    q_ess = QTable.own("ess", env.n_states, env.n_ess_actions)
    bound = reward_bound(scenario, cfg.discount)
    lr, th = cfg.learning_rate, cfg.discount

    def pick(state):
        sidx = env.state_index(state)
        ess_actions, dsm_actions = env.eligible_actions(state)
        ess_ids, dsm_ids = env.eligible_ids(state)
        e_pos = int(np.argmax(q_ess.values[sidx, ess_ids]))
        d_pos = int(np.argmax(q_dsm.values[sidx, dsm_ids]))
        return ess_actions[e_pos], dsm_actions[d_pos]

    def run_episode(eps, rng):
        state = env.reset()
        while not env.is_terminal(state):
            sidx = env.state_index(state)
            ess_actions, dsm_actions = env.eligible_actions(state)
            if rng.random() < eps:
                ea = ess_actions[int(rng.integers(len(ess_actions)))]
                da = dsm_actions[int(rng.integers(len(dsm_actions)))]
            else:
                ea, da = pick(state)
            outcome, nstate = env.step(state, ea, da)
            if env.is_terminal(nstate):
                v_dsm = v_ess = 0.0
            else:
                nsidx = env.state_index(nstate)
                n_ess_ids, n_dsm_ids = env.eligible_ids(nstate)
                v_dsm = float(q_dsm.values[nsidx, n_dsm_ids].max())
                v_ess = float(q_ess.values[nsidx, n_ess_ids].max())
            update_q(q_dsm, sidx, env.dsm_action_index(da), outcome.r_dsm,
                     v_dsm, lr, th, bound)
            update_q(q_ess, sidx, env.ess_action_index(ea), outcome.r_ess,
                     v_ess, lr, th, bound)
            state = nstate

    def greedy_policy(state, rng):
        return pick(state)

    curve, trace = _train_loop(env, cfg, run_episode, greedy_policy)
    return TrainResult("qlwc", {"dsm": q_dsm, "ess": q_ess}, curve, trace)


# ----------------------------------------------------------------------- QLWA


def train_qlwa(scenario: Scenario, cfg: LearnConfig) -> TrainResult:
    """Aggregator Q-learning: one joint table trained on the summed reward;
    greedy play is the argmax over eligible joint actions (first maximum in
    storage-major order on ties)."""
    env = MicrogridEnv(scenario)
    q = QTable.joint("agg", env)
    bound = reward_bound(scenario, cfg.discount, aggregate=True)
    lr, th = cfg.learning_rate, cfg.discount

    def pick(state):
        sidx = env.state_index(state)
        ess_actions, dsm_actions = env.eligible_actions(state)
        ess_ids, dsm_ids = env.eligible_ids(state)
        grid = q.values[sidx][np.ix_(ess_ids, dsm_ids)]
        k = int(np.argmax(grid))
        return ess_actions[k // len(dsm_ids)], dsm_actions[k % len(dsm_ids)]

    def run_episode(eps, rng):
        state = env.reset()
        while not env.is_terminal(state):
            sidx = env.state_index(state)
            ess_actions, dsm_actions = env.eligible_actions(state)
            if rng.random() < eps:
                k = int(rng.integers(len(ess_actions) * len(dsm_actions)))
                ea = ess_actions[k // len(dsm_actions)]
                da = dsm_actions[k % len(dsm_actions)]
            else:
                ea, da = pick(state)
            outcome, nstate = env.step(state, ea, da)
            if env.is_terminal(nstate):
                v = 0.0
            else:
                nsidx = env.state_index(nstate)
                n_ess_ids, n_dsm_ids = env.eligible_ids(nstate)
                v = float(q.values[nsidx][np.ix_(n_ess_ids, n_dsm_ids)].max())
            update_q(q, sidx, (env.ess_action_index(ea), env.dsm_action_index(da)),
                     outcome.r_ess + outcome.r_dsm, v, lr, th, bound)
            state = nstate

    def greedy_policy(state, rng):
        return pick(state)

    curve, trace = _train_loop(env, cfg, run_episode, greedy_policy)
    return TrainResult("qlwa", {"agg": q}, curve, trace)


_TRAINERS = {"ceq": train_ceq, "qlwc": train_qlwc, "qlwa": train_qlwa}


def train(case, scenario, cfg) -> TrainResult:
    """Dispatch to one of the three trainers by case name."""
    try:
        fn = _TRAINERS[case]
    except KeyError:
        raise ValueError(f"unknown case {case!r}; expected one of {CASES}")
    return fn(scenario, cfg)

"""One-day community microgrid episode: deferrable devices, battery, PV
surplus, time-of-use tariffs and the bilateral trade settlement that turns
each hour's joint action into per-agent rewards.

Two agents act each hour. The demand-side agent picks a trade stance and
which pending devices to start; the storage agent picks a trade stance
and a charge/discharge level. Settlement prices the energy flows (PV
surplus first for charging, the battery's discharge serving local load at
the negotiated rate, grid covering the residual) and the environment
advances hour, state of charge and the pending-device vector.

Hours run 1..horizon on an unrolled axis so late-evening device windows
may spill past midnight; profile and tariff lookups wrap on a 24 h day.
"""

import csv
import json
import math
from dataclasses import dataclass, field, replace
from enum import IntEnum

import numpy as np

__all__ = [
    "Stance", "EssAction", "DsmAction", "DeviceSpec", "PriceSchedule",
    "Scenario", "SystemState", "TradeOutcome", "MicrogridEnv", "BROKEN",
    "trade_price", "step_soc", "load_profiles_csv", "default_scenario",
    "ConfigError", "SocOutOfRange", "IneligibleAction",
]


class ConfigError(ValueError):
    """Scenario input failed validation; message names the offending field."""


class SocOutOfRange(ValueError):
    """A storage action would push the state of charge outside its bounds."""


class IneligibleAction(ValueError):
    """An action violated the masking rules for the current state."""


class Stance(IntEnum):
    """Trade stance: cooperate with the peer, or threaten to use the grid."""

    COOPERATE = 0
    THREAT = 1


ESS_LEVELS = (-1.0, 0.0, 0.5, 1.0)  # charge, idle, half discharge, full discharge
_LEVEL_INDEX = {q: i for i, q in enumerate(ESS_LEVELS)}


class _Broken:
    __slots__ = ()

    def __repr__(self):
        return "BROKEN"


BROKEN = _Broken()
"""Sentinel returned by trade_price when both agents play threat."""


@dataclass(frozen=True)
class EssAction:
    stance: Stance
    level: float  # q: -1 charge, 0 idle, 0.5 half discharge, 1 full discharge

    def __post_init__(self):
        if self.level not in _LEVEL_INDEX:
            raise ValueError(f"unknown storage level {self.level}")


@dataclass(frozen=True)
class DsmAction:
    stance: Stance
    starts: tuple  # one 0/1 flag per device


@dataclass(frozen=True)
class SystemState:
    t: int
    soc: float
    pending: tuple  # one bool per device; cleared when the device starts


@dataclass(frozen=True)
class DeviceSpec:
    """A deferrable device set: a service window, a run length, a power draw.

    Windows live on the unrolled hour axis, so a window reaching past
    midnight uses end > 24 (e.g. 20..29 for "20:00 until 5:00 next day").
    power_kw may be None until episode-set construction draws it.
    """

    id: int
    window_start: int
    window_end: int
    duration: int
    power_kw: float = None

    def __post_init__(self):
        if self.duration < 1:
            raise ConfigError(f"device {self.id}: duration must be >= 1")
        if self.window_start < 1:
            raise ConfigError(f"device {self.id}: window_start must be >= 1")
        if self.window_end - self.window_start + 1 < self.duration:
            raise ConfigError(
                f"device {self.id}: window [{self.window_start}, {self.window_end}] "
                f"shorter than duration {self.duration}")

    @property
    def latest_start(self):
        return self.window_end - self.duration + 1


@dataclass
class PriceSchedule:
    """Hourly grid buy tariff plus flat sell-back and PV prices ($/kWh)."""

    p_bgrid: np.ndarray
    p_sgrid: float
    p_pv: float

    def __post_init__(self):
        self.p_bgrid = np.asarray(self.p_bgrid, dtype=np.float64)
        if self.p_bgrid.ndim != 1 or self.p_bgrid.size < 1:
            raise ConfigError("prices.buy_from_grid must be a nonempty vector")
        if not (self.p_bgrid > 0).all():
            raise ConfigError("prices.buy_from_grid must be positive")
        lo = float(self.p_bgrid.min())
        if not self.p_pv < lo:
            raise ConfigError(f"prices.pv ({self.p_pv}) must undercut every grid buy price ({lo})")
        # A flat sell-back rate may top the off-peak tariff (trades then just
        # break at those hours), but it must stay below the peak rate or
        # storage arbitrage against the grid becomes a money pump.
        hi = float(self.p_bgrid.max())
        if not self.p_sgrid < hi:
            raise ConfigError(
                f"prices.sell_to_grid ({self.p_sgrid}) must undercut the peak buy price ({hi})")

    def buy(self, t):
        return float(self.p_bgrid[_hour_row(t, self.p_bgrid.size)])


def _hour_row(t, length):
    """Profile row for unrolled hour t; hours past the table wrap on a day."""
    if t <= length:
        return t - 1
    return (t - 1) % 24


def _default_tou():
    # Ontario-winter shape: on-peak 7-11 and 17-19, mid-peak 11-17 (half-open)
    out = np.empty(24)
    for hod in range(1, 25):
        if 7 <= hod < 11 or 17 <= hod < 19:
            out[hod - 1] = 0.132
        elif 11 <= hod < 17:
            out[hod - 1] = 0.094
        else:
            out[hod - 1] = 0.065
    return out


def _default_pv():
    return np.array([60.0 * max(0.0, math.sin(math.pi * (hod - 7) / 12.0))
                     if 7 <= hod <= 19 else 0.0
                     for hod in range(1, 25)])


def _default_crucial():
    return np.array([10.0 + (5.0 if 17 <= hod <= 22 else 0.0) for hod in range(1, 25)])


_DEFAULT_DEVICES = (
    DeviceSpec(1, 1, 8, 1),
    DeviceSpec(2, 7, 13, 1),
    DeviceSpec(3, 10, 17, 2),
    DeviceSpec(4, 15, 21, 1),
    DeviceSpec(5, 20, 29, 3),  # 20:00 until 5:00 next day
)


@dataclass
class Scenario:
    """Full parameterization of one microgrid episode family."""

    horizon: int = 29
    devices: tuple = _DEFAULT_DEVICES
    capacity_kwh: float = 120.0
    charge_power_kw: float = 30.0
    soc_min: float = 0.0
    soc_max: float = 1.0
    initial_soc: float = 0.25
    prices: PriceSchedule = field(default_factory=lambda: PriceSchedule(
        _default_tou(), p_sgrid=0.08, p_pv=0.03))
    pv_kw: np.ndarray = field(default_factory=_default_pv)
    crucial_kw: np.ndarray = field(default_factory=_default_crucial)
    pv_scale: float = 1.0
    device_power_range: tuple = (8, 14)

    def __post_init__(self):
        self.pv_kw = np.asarray(self.pv_kw, dtype=np.float64)
        self.crucial_kw = np.asarray(self.crucial_kw, dtype=np.float64)
        self.devices = tuple(self.devices)
        if self.horizon < 1:
            raise ConfigError("horizon_hours must be >= 1")
        if self.capacity_kwh <= 0 or self.charge_power_kw <= 0:
            raise ConfigError("ess capacity and charge power must be positive")
        if not 0.0 <= self.soc_min < self.soc_max:
            raise ConfigError("need 0 <= soc_min < soc_max")
        for arr, name in ((self.pv_kw, "pv_kw"), (self.crucial_kw, "crucial_kw")):
            need = min(self.horizon, 24)
            if arr.size < need:
                raise ConfigError(f"{name} needs at least {need} hourly values, got {arr.size}")
            if (arr < 0).any():
                raise ConfigError(f"{name} must be nonnegative")
        if self.pv_scale < 0:
            raise ConfigError("pv_scale must be nonnegative")
        span = self.soc_max - self.soc_min
        if round(span / self.soc_quantum) < 1:
            raise ConfigError("soc range narrower than one quantum")
        if abs(span / self.soc_quantum - round(span / self.soc_quantum)) > 1e-9:
            raise ConfigError(
                f"soc range {span} is not a multiple of the quantum {self.soc_quantum}")
        lvl = (self.initial_soc - self.soc_min) / self.soc_quantum
        if abs(lvl - round(lvl)) > 1e-9 or not (self.soc_min - 1e-12 <= self.initial_soc
                                                <= self.soc_max + 1e-12):
            raise ConfigError(
                f"initial_soc {self.initial_soc} is not on the quantum grid "
                f"[{self.soc_min}, {self.soc_max}] step {self.soc_quantum}")
        seen = set()
        for d in self.devices:
            if d.id in seen:
                raise ConfigError(f"duplicate device id {d.id}")
            seen.add(d.id)
            if d.window_end > self.horizon:
                raise ConfigError(
                    f"device {d.id}: window_end {d.window_end} exceeds horizon {self.horizon}")
            if d.power_kw is not None:
                lo, hi = self.device_power_range
                if not lo <= d.power_kw <= hi:
                    raise ConfigError(
                        f"device {d.id}: power {d.power_kw} outside range [{lo}, {hi}]")

    @property
    def soc_quantum(self):
        # half the full-discharge step, so the q=0.5 action stays on the grid
        return self.charge_power_kw / (2.0 * self.capacity_kwh)

    @property
    def n_soc_levels(self):
        return int(round((self.soc_max - self.soc_min) / self.soc_quantum)) + 1

    def realize_powers(self, rng):
        """New scenario with undrawn device powers sampled as integers."""
        lo, hi = self.device_power_range
        devices = tuple(
            d if d.power_kw is not None
            else replace(d, power_kw=float(rng.integers(lo, hi + 1)))
            for d in self.devices)
        return replace(self, devices=devices)

    # ------------------------------------------------------------- config I/O

    def to_dict(self):
        return {
            "horizon_hours": self.horizon,
            "ess": {
                "capacity_kwh": self.capacity_kwh,
                "charge_power_kw": self.charge_power_kw,
                "soc_min": self.soc_min,
                "soc_max": self.soc_max,
                "initial_soc": self.initial_soc,
            },
            "prices": {
                "pv": self.prices.p_pv,
                "sell_to_grid": self.prices.p_sgrid,
                "buy_from_grid": self.prices.p_bgrid.tolist(),
            },
            "pv_kw": self.pv_kw.tolist(),
            "crucial_kw": self.crucial_kw.tolist(),
            "pv_scale": self.pv_scale,
            "device_power_range": list(self.device_power_range),
            "devices": [
                {"id": d.id, "window": [d.window_start, d.window_end],
                 "duration": d.duration, "power_kw": d.power_kw}
                for d in self.devices
            ],
        }

    @classmethod
    def from_dict(cls, data, base_dir=None):
        base = cls()
        if not isinstance(data, dict):
            raise ConfigError("scenario config must be a JSON object")
        known = {"horizon_hours", "ess", "prices", "pv_kw", "crucial_kw",
                 "pv_scale", "device_power_range", "devices", "profiles_csv"}
        for key in data:
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
        ess = data.get("ess", {})
        pr = data.get("prices", {})
        pv = np.asarray(data["pv_kw"], dtype=float) if "pv_kw" in data else base.pv_kw
        crl = (np.asarray(data["crucial_kw"], dtype=float)
               if "crucial_kw" in data else base.crucial_kw)
        buy = (np.asarray(pr["buy_from_grid"], dtype=float)
               if "buy_from_grid" in pr else base.prices.p_bgrid)
        if "profiles_csv" in data and data["profiles_csv"]:
            path = data["profiles_csv"]
            if base_dir is not None:
                import os
                path = os.path.join(base_dir, path)
            prof = load_profiles_csv(path)
            pv, crl, buy = prof["pv_kw"], prof["crucial_kw"], prof["p_bgrid"]
        devices = base.devices
        if "devices" in data:
            devices = []
            for row in data["devices"]:
                try:
                    devices.append(DeviceSpec(
                        id=int(row["id"]),
                        window_start=int(row["window"][0]),
                        window_end=int(row["window"][1]),
                        duration=int(row["duration"]),
                        power_kw=None if row.get("power_kw") is None
                        else float(row["power_kw"]),
                    ))
                except KeyError as exc:
                    raise ConfigError(f"device entry missing field {exc}") from exc
            devices = tuple(devices)
        return cls(
            horizon=int(data.get("horizon_hours", base.horizon)),
            devices=devices,
            capacity_kwh=float(ess.get("capacity_kwh", base.capacity_kwh)),
            charge_power_kw=float(ess.get("charge_power_kw", base.charge_power_kw)),
            soc_min=float(ess.get("soc_min", base.soc_min)),
            soc_max=float(ess.get("soc_max", base.soc_max)),
            initial_soc=float(ess.get("initial_soc", base.initial_soc)),
            prices=PriceSchedule(buy, p_sgrid=float(pr.get("sell_to_grid", base.prices.p_sgrid)),
                                 p_pv=float(pr.get("pv", base.prices.p_pv))),
            pv_kw=pv,
            crucial_kw=crl,
            pv_scale=float(data.get("pv_scale", base.pv_scale)),
            device_power_range=tuple(data.get("device_power_range",
                                              base.device_power_range)),
        )

    @classmethod
    def from_json(cls, path):
        import os
        try:
            with open(path) as fh:
                data = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}")
        return cls.from_dict(data, base_dir=os.path.dirname(os.path.abspath(path)))


def default_scenario(**overrides):
    return replace(Scenario(), **overrides) if overrides else Scenario()


def load_profiles_csv(path):
    """Read an hourly profile table: header hour,pv_kw,crucial_kw,p_bgrid."""
    try:
        fh = open(path, newline="")
    except FileNotFoundError:
        raise ConfigError(f"profile file not found: {path}")
    with fh:
        reader = csv.DictReader(row for row in fh if not row.startswith("#"))
        need = {"hour", "pv_kw", "crucial_kw", "p_bgrid"}
        if reader.fieldnames is None or not need.issubset(reader.fieldnames):
            raise ConfigError(
                f"profile file {path} must have columns hour,pv_kw,crucial_kw,p_bgrid")
        rows = sorted((int(r["hour"]), float(r["pv_kw"]), float(r["crucial_kw"]),
                       float(r["p_bgrid"])) for r in reader)
    if not 24 <= len(rows) <= 48:
        raise ConfigError(f"profile file {path} needs 24-48 rows, got {len(rows)}")
    hours = [r[0] for r in rows]
    if hours != list(range(1, len(rows) + 1)):
        raise ConfigError(f"profile file {path} must cover hours 1..{len(rows)} exactly once")
    arr = np.array(rows, dtype=float)
    return {"pv_kw": arr[:, 1], "crucial_kw": arr[:, 2], "p_bgrid": arr[:, 3]}


# ------------------------------------------------------------------ settlement


def _stance_price(y_coop, x_coop, ps, pb):
    if y_coop and x_coop:
        return 0.5 * ps + 0.5 * pb
    if y_coop:  # storage threatens, demand cooperates
        return 0.25 * ps + 0.75 * pb
    if x_coop:  # demand threatens, storage cooperates
        return 0.75 * ps + 0.25 * pb
    return BROKEN


def trade_price(y_stance, x_stance, t, prices):
    """Bilateral $/kWh for hour t given both stances, or BROKEN.

    Cooperation on both sides trades at the mid-market rate; a lone
    threatener pulls the price toward its own grid alternative; mutual
    threats break the trade entirely.
    """
    return _stance_price(y_stance == Stance.COOPERATE,
                         x_stance == Stance.COOPERATE,
                         prices.p_sgrid, prices.buy(t))


def step_soc(soc, q, charge_power_kw=30.0, capacity_kwh=120.0,
             soc_min=0.0, soc_max=1.0):
    """Next state of charge; discharge lowers it by q * charge/capacity."""
    nxt = soc - (charge_power_kw / capacity_kwh) * q
    if nxt < soc_min - 1e-9 or nxt > soc_max + 1e-9:
        raise SocOutOfRange(f"soc {soc} with level {q} leaves [{soc_min}, {soc_max}]")
    return nxt


@dataclass(frozen=True)
class TradeOutcome:
    """Settled power flows and money for one hour.

    Sign conventions: p_ess_kw > 0 discharging, p_grid_kw > 0 importing.
    The balance identity surplus_pv + p_grid + p_ess == p_dsm holds exactly
    because p_grid is defined as that residual. trade_price is the rate
    actually applied between the agents (0 when nothing was traded).
    """

    p_dsm_kw: float
    p_ess_kw: float
    p_grid_kw: float
    surplus_pv_kw: float
    alpha: float
    beta: float
    gamma: float
    trade_price: float
    r_ess: float
    r_dsm: float


class MicrogridEnv:
    """Stateful one-episode simulator over a Scenario.

    The Q-learning state (hour, state of charge, pending vector) is a value
    object; residual run-hours of started multi-hour devices live inside the
    environment so the state space keeps the published shape. One instance
    drives one episode at a time (reset between episodes); instances are
    independent, so concurrent runs each use their own.
    """

    def __init__(self, scenario: Scenario):
        self.scenario = scenario
        for d in scenario.devices:
            if d.power_kw is None:
                raise ConfigError(
                    f"device {d.id} has no power draw; call Scenario.realize_powers first")
        self.horizon = scenario.horizon
        self.n_devices = len(scenario.devices)
        self.quantum = scenario.soc_quantum
        self.n_soc_levels = scenario.n_soc_levels
        self.n_ess_actions = 2 * len(ESS_LEVELS)
        self.n_dsm_actions = 2 * (1 << self.n_devices)
        self.n_states = self.horizon * self.n_soc_levels * (1 << self.n_devices)
        T = self.horizon
        pv = np.array([scenario.pv_kw[_hour_row(t, scenario.pv_kw.size)]
                       for t in range(1, T + 1)]) * scenario.pv_scale
        crl = np.array([scenario.crucial_kw[_hour_row(t, scenario.crucial_kw.size)]
                        for t in range(1, T + 1)])
        self._surplus = [float(v) for v in np.maximum(0.0, pv - crl)]
        self._p_buy = [scenario.prices.buy(t) for t in range(1, T + 1)]
        self._powers = [d.power_kw for d in scenario.devices]
        self._durations = [d.duration for d in scenario.devices]
        self._remaining = [0] * self.n_devices
        self._elig_cache = {}
        self._ids_cache = {}

    # ------------------------------------------------------------ state plumbing

    def reset(self) -> SystemState:
        self._remaining = [0] * self.n_devices
        return SystemState(t=1, soc=self.scenario.initial_soc,
                           pending=(True,) * self.n_devices)

    def soc_level(self, soc):
        lvl = int(round((soc - self.scenario.soc_min) / self.quantum))
        if not 0 <= lvl < self.n_soc_levels or \
                abs(self.scenario.soc_min + lvl * self.quantum - soc) > 1e-9:
            raise SocOutOfRange(f"soc {soc} is off the quantum grid")
        return lvl

    def state_index(self, state: SystemState) -> int:
        bits = 0
        for i, p in enumerate(state.pending):
            if p:
                bits |= 1 << i
        return ((state.t - 1) * self.n_soc_levels + self.soc_level(state.soc)) \
            * (1 << self.n_devices) + bits

    def is_terminal(self, state: SystemState) -> bool:
        return state.t > self.horizon

    def ess_action_index(self, action: EssAction) -> int:
        return int(action.stance) * len(ESS_LEVELS) + _LEVEL_INDEX[action.level]

    def dsm_action_index(self, action: DsmAction) -> int:
        bits = 0
        for i, s in enumerate(action.starts):
            if s:
                bits |= 1 << i
        return int(action.stance) * (1 << self.n_devices) + bits

    # ---------------------------------------------------------------- dynamics

    def surplus_pv(self, t) -> float:
        """PV power left over after the crucial load, clamped at zero."""
        return self._surplus[t - 1]

    def _startable(self, state):
        startable, forced = [], []
        for i, dev in enumerate(self.scenario.devices):
            if state.pending[i] and dev.window_start <= state.t <= dev.latest_start:
                startable.append(i)
                if dev.latest_start == state.t:
                    forced.append(i)
        return startable, forced

    def eligible_actions(self, state: SystemState):
        """All masked actions at a state: storage levels that keep the SOC in
        bounds, start vectors inside windows, deadline devices forced on."""
        idx = self.state_index(state)
        cached = self._elig_cache.get(idx)
        if cached is not None:
            return cached
        lvl = self.soc_level(state.soc)
        ess = []
        for stance in (Stance.COOPERATE, Stance.THREAT):
            for q in ESS_LEVELS:
                nxt = lvl - int(round(2 * q))
                if 0 <= nxt < self.n_soc_levels:
                    ess.append(EssAction(stance, q))
        startable, forced = self._startable(state)
        optional = [i for i in startable if i not in forced]
        dsm = []
        for stance in (Stance.COOPERATE, Stance.THREAT):
            for mask in range(1 << len(optional)):
                starts = [0] * self.n_devices
                for i in forced:
                    starts[i] = 1
                for j, i in enumerate(optional):
                    if mask >> j & 1:
                        starts[i] = 1
                dsm.append(DsmAction(stance, tuple(starts)))
        out = (tuple(ess), tuple(dsm))
        self._elig_cache[idx] = out
        return out

    def eligible_ids(self, state: SystemState):
        """Full-action-space indices of the eligible actions, cached."""
        idx = self.state_index(state)
        cached = self._ids_cache.get(idx)
        if cached is not None:
            return cached
        ess, dsm = self.eligible_actions(state)
        out = (np.array([self.ess_action_index(a) for a in ess], dtype=np.intp),
               np.array([self.dsm_action_index(a) for a in dsm], dtype=np.intp))
        self._ids_cache[idx] = out
        return out

    def _check_eligible(self, state, ess_action, dsm_action):
        lvl = self.soc_level(state.soc)
        nxt = lvl - int(round(2 * ess_action.level))
        if not 0 <= nxt < self.n_soc_levels:
            raise IneligibleAction(
                f"storage level {ess_action.level} leaves the SOC bounds at t={state.t}")
        if len(dsm_action.starts) != self.n_devices:
            raise IneligibleAction(
                f"start vector has {len(dsm_action.starts)} entries for "
                f"{self.n_devices} devices")
        startable, forced = self._startable(state)
        for i, s in enumerate(dsm_action.starts):
            if s and i not in startable:
                raise IneligibleAction(
                    f"device {self.scenario.devices[i].id} cannot start at t={state.t}")
        for i in forced:
            if not dsm_action.starts[i]:
                raise IneligibleAction(
                    f"device {self.scenario.devices[i].id} hits its deadline at "
                    f"t={state.t} and must start")

    def settle(self, state: SystemState, ess_action: EssAction,
               dsm_action: DsmAction) -> TradeOutcome:
        """Price one hour. Pure: repeated calls do not advance the episode.

        Charging draws PV surplus first and the grid for the remainder, with
        no bilateral trade (the battery cannot charge and serve load at
        once). Discharging with the trade alive moves energy up to the
        deferrable load at the negotiated rate; leftover discharge sells to
        the grid and uncovered load buys from it.
        """
        self._check_eligible(state, ess_action, dsm_action)
        sc = self.scenario
        t = state.t
        q = ess_action.level
        p_ess = sc.charge_power_kw * q
        p_dsm = 0.0
        remaining = self._remaining
        starts = dsm_action.starts
        for i in range(self.n_devices):
            if remaining[i] > 0 or starts[i]:
                p_dsm += self._powers[i]
        surplus = self._surplus[t - 1]
        pb = self._p_buy[t - 1]
        alpha = beta = gamma = 0.0
        applied = 0.0
        if q < 0:
            alpha = min(surplus / -p_ess, 1.0)
            r_ess = p_ess * (alpha * sc.prices.p_pv + (1.0 - alpha) * pb)
            r_dsm = -p_dsm * pb
        elif q > 0:
            price = _stance_price(dsm_action.stance is Stance.COOPERATE,
                                  ess_action.stance is Stance.COOPERATE,
                                  sc.prices.p_sgrid, pb)
            if price is BROKEN:
                r_ess = p_ess * sc.prices.p_sgrid
                r_dsm = -p_dsm * pb
            else:
                traded = min(p_ess, p_dsm)
                beta = traded / p_ess
                gamma = 0.0 if p_dsm == 0.0 else traded / p_dsm
                if traded > 0.0:
                    applied = price
                r_ess = traded * applied + (p_ess - traded) * sc.prices.p_sgrid
                r_dsm = -(traded * applied + (p_dsm - traded) * pb)
        else:
            r_ess = 0.0
            r_dsm = -p_dsm * pb
        return TradeOutcome(
            p_dsm_kw=p_dsm,
            p_ess_kw=p_ess,
            p_grid_kw=p_dsm - surplus - p_ess,
            surplus_pv_kw=surplus,
            alpha=alpha, beta=beta, gamma=gamma,
            trade_price=applied,
            r_ess=float(r_ess), r_dsm=float(r_dsm),
        )

    def advance(self, state: SystemState, ess_action: EssAction,
                dsm_action: DsmAction) -> SystemState:
        """Move to the next hour: start devices, run down residual hours,
        step the state of charge. Mutates the internal run counters."""
        self._check_eligible(state, ess_action, dsm_action)
        pending = list(state.pending)
        remaining = self._remaining
        for i, s in enumerate(dsm_action.starts):
            if s:
                remaining[i] = self._durations[i]
                pending[i] = False
        for i in range(self.n_devices):
            if remaining[i] > 0:
                remaining[i] -= 1
        soc = step_soc(state.soc, ess_action.level, self.scenario.charge_power_kw,
                       self.scenario.capacity_kwh, self.scenario.soc_min,
                       self.scenario.soc_max)
        # resnap to the level grid so float drift can never leave it
        soc = self.scenario.soc_min + self.soc_level(soc) * self.quantum
        return SystemState(t=state.t + 1, soc=soc, pending=tuple(pending))

    def step(self, state, ess_action, dsm_action):
        outcome = self.settle(state, ess_action, dsm_action)
        return outcome, self.advance(state, ess_action, dsm_action)

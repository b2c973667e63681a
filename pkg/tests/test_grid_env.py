import numpy as np
import pytest

from ceqgrid.grid_env import (
    BROKEN,
    ConfigError,
    DeviceSpec,
    DsmAction,
    EssAction,
    IneligibleAction,
    MicrogridEnv,
    PriceSchedule,
    Scenario,
    SocOutOfRange,
    Stance,
    SystemState,
    default_scenario,
    load_profiles_csv,
    step_soc,
    trade_price,
)


def realized(scenario=None, seed=0):
    sc = scenario or default_scenario()
    return sc.realize_powers(np.random.default_rng(seed))


def make_env(seed=0, **overrides):
    return MicrogridEnv(realized(default_scenario(**overrides), seed=seed))


def random_episode(env, rng):
    """Run one episode under uniformly random eligible actions; yield steps."""
    state = env.reset()
    while not env.is_terminal(state):
        ess, dsm = env.eligible_actions(state)
        ea = ess[rng.integers(len(ess))]
        da = dsm[rng.integers(len(dsm))]
        outcome, nxt = env.step(state, ea, da)
        yield state, ea, da, outcome
        state = nxt


# ------------------------------------------------------------------- step_soc

def test_step_soc_charge():
    assert step_soc(0.5, -1.0) == pytest.approx(0.75, abs=1e-12)


def test_step_soc_identity():
    assert step_soc(0.5, 0.0) == 0.5


def test_step_soc_half_discharge():
    assert step_soc(0.25, 0.5) == pytest.approx(0.125, abs=1e-12)


def test_step_soc_out_of_range():
    with pytest.raises(SocOutOfRange):
        step_soc(1.0, -1.0)
    with pytest.raises(SocOutOfRange):
        step_soc(0.0, 0.5)


# ---------------------------------------------------------------- trade_price

def test_trade_price_table():
    prices = PriceSchedule(np.full(24, 0.132), p_sgrid=0.08, p_pv=0.03)
    assert trade_price(Stance.COOPERATE, Stance.COOPERATE, 1, prices) == \
        pytest.approx(0.106, abs=1e-12)
    assert trade_price(Stance.COOPERATE, Stance.THREAT, 1, prices) == \
        pytest.approx(0.119, abs=1e-12)
    assert trade_price(Stance.THREAT, Stance.COOPERATE, 1, prices) == \
        pytest.approx(0.093, abs=1e-12)
    assert trade_price(Stance.THREAT, Stance.THREAT, 1, prices) is BROKEN


# ------------------------------------------------------------------ surplus PV

def test_surplus_subtracts_crucial_load():
    env = make_env(pv_kw=np.full(24, 40.0), crucial_kw=np.full(24, 10.0))
    assert env.surplus_pv(1) == pytest.approx(30.0)


def test_surplus_clamped_at_zero():
    env = make_env(pv_kw=np.full(24, 5.0), crucial_kw=np.full(24, 10.0))
    assert env.surplus_pv(3) == 0.0


def test_default_surplus_is_contiguous_midday_band():
    env = make_env()
    hours = [t for t in range(1, env.horizon + 1) if env.surplus_pv(t) > 0]
    assert hours, "default profile must have some PV surplus"
    assert hours == list(range(hours[0], hours[-1] + 1))
    assert 6 < hours[0] and hours[-1] < 20


# ------------------------------------------------------------------ eligibility

def test_full_soc_masks_charging():
    env = make_env()
    state = SystemState(t=1, soc=1.0, pending=(True,) * env.n_devices)
    ess, _ = env.eligible_actions(state)
    assert all(a.level >= 0 for a in ess)
    assert len(ess) == 6  # 3 levels x 2 stances


def test_empty_soc_masks_discharge():
    env = make_env()
    state = SystemState(t=1, soc=0.0, pending=(True,) * env.n_devices)
    ess, _ = env.eligible_actions(state)
    assert all(a.level <= 0 for a in ess)


def test_deadline_forces_device_start():
    # Table-2 device 1 has window 1..8 with duration 1: at t=8 it must start
    env = make_env()
    state = SystemState(t=8, soc=0.25, pending=(True,) * env.n_devices)
    _, dsm = env.eligible_actions(state)
    assert all(a.starts[0] == 1 for a in dsm)


def test_no_pending_devices_leaves_empty_start_vector():
    env = make_env()
    state = SystemState(t=23, soc=0.25, pending=(False,) * env.n_devices)
    _, dsm = env.eligible_actions(state)
    empty = (0,) * env.n_devices
    assert [(a.stance, a.starts) for a in dsm] == \
        [(Stance.COOPERATE, empty), (Stance.THREAT, empty)]


def test_start_outside_window_rejected():
    env = make_env()
    state = env.reset()
    # device 5's window opens at t=20; starting it at t=1 is illegal
    starts = [0] * env.n_devices
    starts[4] = 1
    with pytest.raises(IneligibleAction):
        env.settle(state, EssAction(Stance.COOPERATE, 0.0),
                   DsmAction(Stance.COOPERATE, tuple(starts)))


def test_bypassed_soc_mask_raises():
    env = make_env()
    state = SystemState(t=1, soc=1.0, pending=(True,) * env.n_devices)
    with pytest.raises(IneligibleAction):
        env.settle(state, EssAction(Stance.COOPERATE, -1.0),
                   DsmAction(Stance.COOPERATE, (0,) * env.n_devices))


# ------------------------------------------------------------------ settlement

def charging_env(surplus_kw):
    return make_env(pv_kw=np.full(24, surplus_kw + 10.0),
                    crucial_kw=np.full(24, 10.0))


def test_settle_charge_full_pv():
    # 40 kW of surplus covers the whole 30 kW charge at the PV price
    env = charging_env(40.0)
    state = env.reset()
    out = env.settle(state, EssAction(Stance.COOPERATE, -1.0),
                     DsmAction(Stance.COOPERATE, (0,) * env.n_devices))
    assert out.alpha == pytest.approx(1.0)
    assert out.r_ess == pytest.approx(-30.0 * 0.03, abs=1e-12)
    assert out.p_ess_kw == -30.0


def test_settle_charge_partial_pv():
    env = charging_env(12.0)
    state = env.reset()
    out = env.settle(state, EssAction(Stance.THREAT, -1.0),
                     DsmAction(Stance.COOPERATE, (0,) * env.n_devices))
    pb = env.scenario.prices.buy(1)
    assert out.alpha == pytest.approx(0.4)
    assert out.r_ess == pytest.approx(-30.0 * (0.4 * 0.03 + 0.6 * pb), abs=1e-12)


def test_settle_charge_ignores_stances():
    env = charging_env(12.0)
    results = []
    for y in (Stance.COOPERATE, Stance.THREAT):
        for x in (Stance.COOPERATE, Stance.THREAT):
            env.reset()
            out = env.settle(env.reset(), EssAction(x, -1.0),
                             DsmAction(y, (0,) * env.n_devices))
            results.append((out.r_ess, out.r_dsm))
    assert len(set(results)) == 1


def discharge_setup():
    # one device, 15 kW, to get a known deferrable load; flat prices
    devices = (DeviceSpec(1, 1, 8, 1, power_kw=15.0),)
    sc = default_scenario(devices=devices, device_power_range=(8, 15),
                          pv_kw=np.zeros(24),
                          prices=PriceSchedule(np.full(24, 0.132), 0.08, 0.03))
    env = MicrogridEnv(sc)
    state = env.reset()
    starts = (1,)
    return env, state, starts


def test_settle_discharge_coop_split():
    env, state, starts = discharge_setup()
    out = env.settle(state, EssAction(Stance.COOPERATE, 1.0),
                     DsmAction(Stance.COOPERATE, starts))
    assert out.beta == pytest.approx(0.5)
    assert out.gamma == pytest.approx(1.0)
    assert out.trade_price == pytest.approx(0.106)
    assert out.r_ess == pytest.approx(30.0 * (0.5 * 0.106 + 0.5 * 0.08), abs=1e-12)
    assert out.r_ess == pytest.approx(2.79, abs=1e-12)
    assert out.r_dsm == pytest.approx(-15.0 * 0.106, abs=1e-12)
    assert out.r_dsm == pytest.approx(-1.59, abs=1e-12)


def test_settle_discharge_broken_trade():
    env, state, starts = discharge_setup()
    out = env.settle(state, EssAction(Stance.THREAT, 1.0),
                     DsmAction(Stance.THREAT, starts))
    assert out.beta == 0.0 and out.gamma == 0.0
    assert out.r_ess == pytest.approx(30.0 * 0.08)
    assert out.r_dsm == pytest.approx(-15.0 * 0.132)


def test_settle_idle_ess():
    env, state, starts = discharge_setup()
    out = env.settle(state, EssAction(Stance.COOPERATE, 0.0),
                     DsmAction(Stance.COOPERATE, starts))
    assert out.r_ess == 0.0
    assert out.r_dsm == pytest.approx(-15.0 * 0.132)


def test_zero_sum_internal_transfer_exact():
    # payment leg from the demand side must equal the storage receipt exactly
    rng = np.random.default_rng(5)
    env = make_env(seed=3)
    for _ in range(200):
        state = env.reset()
        while not env.is_terminal(state):
            ess, dsm = env.eligible_actions(state)
            ea = ess[rng.integers(len(ess))]
            da = dsm[rng.integers(len(dsm))]
            out = env.settle(state, ea, da)
            if ea.level > 0 and out.trade_price > 0:
                # both rewards must decompose around the SAME transfer term
                traded = min(out.p_ess_kw, out.p_dsm_kw)
                transfer = traded * out.trade_price
                ps = env.scenario.prices.p_sgrid
                pb = env.scenario.prices.buy(state.t)
                assert out.r_ess == transfer + (out.p_ess_kw - traded) * ps
                assert -out.r_dsm == transfer + (out.p_dsm_kw - traded) * pb
            state = env.advance(state, ea, da)


def test_trade_price_monotonicity_in_rewards():
    env, state, starts = discharge_setup()
    coop = env.settle(state, EssAction(Stance.COOPERATE, 1.0),
                      DsmAction(Stance.COOPERATE, starts))
    ess_threat = env.settle(state, EssAction(Stance.THREAT, 1.0),
                            DsmAction(Stance.COOPERATE, starts))
    assert ess_threat.trade_price > coop.trade_price
    assert ess_threat.r_ess > coop.r_ess
    assert ess_threat.r_dsm < coop.r_dsm


# -------------------------------------------------------------------- advance

def test_advance_idle_only_increments_time():
    env = make_env()
    state = env.reset()
    nxt = env.advance(state, EssAction(Stance.COOPERATE, 0.0),
                      DsmAction(Stance.COOPERATE, (0,) * env.n_devices))
    assert nxt.t == state.t + 1
    assert nxt.soc == state.soc
    assert nxt.pending == state.pending


def test_multi_hour_device_power_spans_duration():
    # Table-2 device 3: window 10..17, duration 2
    env = make_env()
    state = env.reset()
    idle = (EssAction(Stance.COOPERATE, 0.0),)
    while state.t < 10:
        _, dsm = env.eligible_actions(state)
        state = env.advance(state, idle[0], dsm[0])
    starts = [0] * env.n_devices
    starts[2] = 1
    da = DsmAction(Stance.COOPERATE, tuple(starts))
    out10, state = env.step(state, idle[0], da)
    assert state.pending[2] is False
    power = env.scenario.devices[2].power_kw
    assert out10.p_dsm_kw >= power
    none = DsmAction(Stance.COOPERATE, (0,) * env.n_devices)
    out11, state = env.step(state, idle[0], none)
    assert out11.p_dsm_kw >= power  # still running in its second hour
    out12, _ = env.step(state, idle[0], none)
    assert out12.p_dsm_kw < power  # done


def test_episode_terminates_with_all_devices_served():
    env = make_env(seed=11)
    rng = np.random.default_rng(0)
    for _ in range(50):
        steps = list(random_episode(env, rng))
        assert len(steps) == env.horizon
        started = set()
        for state, _, da, _ in steps:
            for i, s in enumerate(da.starts):
                if s:
                    started.add(i)
        assert started == set(range(env.n_devices))


# --------------------------------------------------------- episode invariants

def test_random_episode_invariants():
    """Balance identity, SOC bounds/quantization, single service per device,
    allocation fractions in range, over a batch of random-policy episodes.
    All flow terms are recomputed independently here (own run counters, own
    profile lookups) and the reported grid residual must match exactly."""
    env = make_env(seed=7)
    sc = env.scenario
    rng = np.random.default_rng(123)
    q = env.quantum
    powers = [d.power_kw for d in sc.devices]
    for _ in range(300):
        start_hours = {}
        left = [0] * env.n_devices
        for state, ea, da, out in random_episode(env, rng):
            my_dsm = sum(p for p, r in zip(powers, left) if r > 0)
            my_dsm += sum(powers[i] for i, s in enumerate(da.starts) if s)
            hod = state.t if state.t <= 24 else (state.t - 1) % 24 + 1
            my_surplus = max(0.0, sc.pv_kw[hod - 1] * sc.pv_scale - sc.crucial_kw[hod - 1])
            my_ess = sc.charge_power_kw * ea.level
            assert out.p_dsm_kw == my_dsm
            assert out.surplus_pv_kw == my_surplus
            assert out.p_ess_kw == my_ess
            assert out.p_grid_kw == my_dsm - my_surplus - my_ess  # exact residual
            for i, s in enumerate(da.starts):
                if s:
                    left[i] = sc.devices[i].duration
            left = [max(0, r - 1) for r in left]
            assert env.scenario.soc_min - 1e-12 <= state.soc <= env.scenario.soc_max + 1e-12
            lvl = (state.soc - env.scenario.soc_min) / q
            assert abs(lvl - round(lvl)) < 1e-9
            assert 0.0 <= out.alpha <= 1.0
            assert 0.0 <= out.beta <= 1.0
            assert 0.0 <= out.gamma <= 1.0
            if out.p_dsm_kw == 0.0:
                assert out.gamma == 0.0
            for i, s in enumerate(da.starts):
                if s:
                    assert i not in start_hours
                    start_hours[i] = state.t
        assert len(start_hours) == env.n_devices
        for i, t0 in start_hours.items():
            dev = env.scenario.devices[i]
            assert dev.window_start <= t0 <= dev.latest_start


def test_eligible_actions_cached_per_state():
    env = make_env()
    state = env.reset()
    a = env.eligible_actions(state)
    b = env.eligible_actions(SystemState(state.t, state.soc, state.pending))
    assert a is b


# ------------------------------------------------------------- config loading

def test_scenario_validation_errors():
    with pytest.raises(ConfigError):
        default_scenario(initial_soc=0.3)  # off the 0.125 grid
    with pytest.raises(ConfigError):
        default_scenario(soc_min=0.5, soc_max=0.5)
    with pytest.raises(ConfigError):
        DeviceSpec(9, 5, 5, 2)  # window shorter than duration
    with pytest.raises(ConfigError):
        default_scenario(horizon=20)  # device 5's window needs 29 hours
    with pytest.raises(ConfigError):
        PriceSchedule(np.full(24, 0.1), p_sgrid=0.2, p_pv=0.03)  # sell >= buy


def test_power_draw_and_range_check():
    sc = default_scenario()
    assert all(d.power_kw is None for d in sc.devices)
    with pytest.raises(ConfigError):
        MicrogridEnv(sc)  # powers not drawn yet
    re = sc.realize_powers(np.random.default_rng(1))
    for d in re.devices:
        assert 8 <= d.power_kw <= 14
        assert d.power_kw == int(d.power_kw)
    re2 = sc.realize_powers(np.random.default_rng(1))
    assert [d.power_kw for d in re.devices] == [d.power_kw for d in re2.devices]


def test_scenario_dict_round_trip():
    sc = realized()
    again = Scenario.from_dict(sc.to_dict())
    assert again.to_dict() == sc.to_dict()


def test_from_dict_rejects_unknown_keys():
    with pytest.raises(ConfigError):
        Scenario.from_dict({"horizon": 29})  # must be horizon_hours


def test_profiles_csv_round_trip(tmp_path):
    path = tmp_path / "profiles.csv"
    rows = ["hour,pv_kw,crucial_kw,p_bgrid"]
    for h in range(1, 25):
        rows.append(f"{h},{float(h)},{10.0},{0.1 + 0.001 * h}")
    path.write_text("\n".join(rows) + "\n")
    prof = load_profiles_csv(path)
    assert prof["pv_kw"][0] == 1.0 and prof["pv_kw"][23] == 24.0
    assert prof["p_bgrid"][5] == pytest.approx(0.106)
    sc = Scenario.from_dict({
        "profiles_csv": str(path),
        "prices": {"sell_to_grid": 0.08, "pv": 0.03},
    })
    assert sc.pv_kw[23] == 24.0


def test_profiles_csv_validation(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("hour,pv_kw\n1,2\n")
    with pytest.raises(ConfigError):
        load_profiles_csv(path)
    with pytest.raises(ConfigError):
        load_profiles_csv(tmp_path / "missing.csv")

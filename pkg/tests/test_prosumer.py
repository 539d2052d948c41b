import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from p2plab.errors import DataError
from p2plab.prosumer import (
    Action,
    BessParams,
    CdgParams,
    ClParams,
    DeviceState,
    PriceStep,
    ProsumerSpec,
    RdgParams,
    action_bounds,
    advance_state,
    device_mask,
    grid_exchange,
    net_export,
    operational_cost,
    project_action,
    step_soc,
)


def commercial():
    return ProsumerSpec(
        bus_id=3, scenario_tag="Commercial",
        cdg=CdgParams(0.0, 0.4, 0.1, 0.5, 8.0),
        rdg=RdgParams(0.5, "PV"),
        bess=BessParams(-0.3, 0.3, 0.1, 0.9, 0.95, 0.2, e_cap=2.0),
        cl=ClParams(0.2, 12.0),
        name="c3",
    )


def test_step_soc_examples():
    assert step_soc(0.5, 0.2, 0.9, 0.1) == pytest.approx(0.5 + 0.9 * 0.2 * 0.1)
    assert step_soc(0.5, -0.2, 0.9, 0.1) == pytest.approx(0.5 - 0.2 * 0.1 / 0.9)
    assert step_soc(0.5, 0.0, 0.9) == 0.5
    with pytest.raises(ValueError):
        step_soc(0.5, 0.1, 0.0)


def test_round_trip_loses_energy():
    dt = 0.125
    up = step_soc(0.5, 0.2, 0.9, dt)
    back = step_soc(up, -0.2, 0.9, dt)
    assert back < 0.5


def test_archetype_validation():
    commercial().validate_archetype()
    bad = ProsumerSpec(bus_id=2, scenario_tag="Industrial", rdg=RdgParams(0.3, "PV"))
    with pytest.raises(DataError):
        bad.validate_archetype()
    with pytest.raises(DataError):
        ProsumerSpec(bus_id=1, scenario_tag="Rural")


def test_spec_round_trip():
    s = commercial()
    assert ProsumerSpec.from_dict(s.to_dict()) == s


def test_device_mask():
    m = device_mask(ProsumerSpec(bus_id=1, scenario_tag="Industrial", cdg=CdgParams(0, 1, 1, 0, 1),
                                 rdg=RdgParams(0.5, "WT"), cl=ClParams(0.1, 5.0)))
    assert m.tolist() == [True, True, True, False, True]


def test_net_export_and_grid_balance():
    a = Action(0.2, 0.3, 0.05, 0.1, 0.02)
    p_ex, q_ex = net_export(a, 0.6, 0.18)
    assert p_ex == pytest.approx(0.2 + 0.3 + 0.02 - 0.6 - 0.1)
    assert q_ex == pytest.approx(0.05 - 0.18)
    _, _, p_grid = grid_exchange(a, 0.6, 0.18, 0.05)
    assert p_ex == pytest.approx(-p_grid - 0.05)


def test_cost_components():
    s = commercial()
    prices = PriceStep(buy=20.0, sell=7.5, p2p=12.0, dso=0.5)
    a = Action(0.2, 0.0, 0.0, -0.1, 0.05)
    buy = operational_cost(s, a, 0.3, -0.1, prices)
    assert buy.grid == pytest.approx(6.0)
    assert buy.cdg == pytest.approx(0.5 * 0.04 + 8.0 * 0.2)
    assert buy.bess == pytest.approx(0.02)
    assert buy.cl == pytest.approx(0.6)
    assert buy.p2p == pytest.approx(0.05 - 1.2)
    sell = operational_cost(s, a, -0.3, 0.0, prices)
    assert sell.grid == pytest.approx(-2.25)


state_st = st.builds(DeviceState, st.floats(0.0, 0.4), st.floats(0.1, 0.9), st.just(0.0), st.just(1.0))


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=5, max_size=5), state_st,
       st.floats(0.0, 0.6), st.floats(0.0, 1.0))
def test_projection_is_feasible_and_idempotent(raw, state, rdg, load):
    s = commercial()
    a = project_action(Action.from_array(raw), s, state, rdg, load)
    lo, hi = action_bounds(s, state, rdg, load)
    x = a.to_array()
    assert np.all(x >= lo - 1e-12) and np.all(x <= hi + 1e-12)
    assert np.hypot(x[1], x[2]) <= s.rdg.s_max * (1 + 1e-9)
    nxt = advance_state(state, a, s, 0.0, 1.0)
    assert s.bess.soc_min - 1e-12 <= nxt.soc_prev <= s.bess.soc_max + 1e-12
    again = project_action(a, s, state, rdg, load)
    assert np.allclose(again.to_array(), x)


def test_projection_handles_nan():
    a = project_action(Action(float("nan"), 0.1, 0.0, 0.0, 0.0), commercial(), DeviceState(), 0.5, 0.5)
    assert np.all(np.isfinite(a.to_array()))


def test_cdg_ramp_window():
    s = commercial()
    a = project_action(Action(p_cdg=0.4), s, DeviceState(p_cdg_prev=0.0), 0.0, 0.0)
    assert a.p_cdg == pytest.approx(0.1)

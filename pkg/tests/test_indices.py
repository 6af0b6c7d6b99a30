import math

import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ampsim.data import AreaRecord, Dataset
from ampsim.errors import NegativeInput, NoLaggedData, ZeroDenominator, ZeroTotalLoad
from ampsim.indices import (
    ScoreKind,
    Side,
    congestion_index,
    congestion_series,
    is_treated,
    market_rsi_series,
    pivotal_hour_share,
    rsi,
)

from conftest import hour, make_dataset, market_frame, offers_frame


def test_rsi_examples():
    assert rsi(1200, 300, 1000, 100) == pytest.approx(900 / 1100, abs=1e-12)
    assert rsi(1100, 0, 1000, 100) == 1.0
    assert rsi(1000, 1000, 900, 100) == 0.0


def test_rsi_errors():
    with pytest.raises(ZeroDenominator):
        rsi(100, 10, 0, 0)
    with pytest.raises(NegativeInput):
        rsi(100, -1, 10, 0)
    with pytest.raises(NegativeInput):
        rsi(100, 200, 10, 0)


def _two_firms(cap=100.0, unavailable=False):
    rows = [
        (0, "A1", "A", 1, 20.0, cap),
        (0, "B1", "B", 1, 25.0, cap / 2),
        (0, "B2", "B", 1, 30.0, cap / 2, "UNAVAILABLE" if unavailable else "ECONOMIC"),
    ]
    return make_dataset(rows, [cap * 0.9], cap * 0.1)


def test_symmetric_firms_sit_at_cutoff():
    s = market_rsi_series(_two_firms()).values
    assert s["score"].tolist() == [1.0, 1.0]


def test_unavailable_unit_lowers_rivals_rsi():
    before = market_rsi_series(_two_firms()).values.set_index("bidder_id")["score"]
    after = market_rsi_series(_two_firms(unavailable=True)).values.set_index("bidder_id")["score"]
    # market supply drops by B2's 50 MW, so A's residual shrinks by 50/100
    assert after["A"] == pytest.approx(before["A"] - 0.5)
    assert after["A"] < before["A"]


def test_all_must_run_fleet_gives_zero():
    rows = [(0, "A1", "A", 1, 0.0, 100.0, "MUST_RUN"), (0, "B1", "B", 1, 0.0, 80.0, "MUST_RUN")]
    s = market_rsi_series(make_dataset(rows, [150.0], 10.0)).values
    assert s["score"].tolist() == [0.0, 0.0]


def test_must_take_segments_mode():
    rows = [
        (0, "A1", "A", 1, 0.0, 30.0, "MUST_RUN", 100.0),
        (0, "A1", "A", 2, 20.0, 70.0, "ECONOMIC", 100.0),
        (0, "B1", "B", 1, 25.0, 100.0, "ECONOMIC", 100.0),
    ]
    ds = make_dataset(rows, [100.0], 0.0)
    full = market_rsi_series(ds).values.set_index("bidder_id")["score"]
    seg = market_rsi_series(ds, must_take="segments").values.set_index("bidder_id")["score"]
    # default removes A1 entirely; segment mode only its 30 MW must-run block
    assert full["B"] == 0.0
    assert seg["B"] == pytest.approx(0.7)
    assert seg["A"] == pytest.approx(1.0)


def test_pivotal_share():
    s = market_rsi_series(_two_firms())
    assert pivotal_hour_share(s) == 1.0


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(1, 500), min_size=2, max_size=6), st.floats(10, 2000), st.floats(0, 200))
def test_rsi_matches_hand_formula(caps, load, reserves):
    rows = [(0, f"U{i}", f"B{i % 3}", 1, 10.0, c) for i, c in enumerate(caps)]
    s = market_rsi_series(make_dataset(rows, [load], reserves)).values
    total = sum(caps)
    for b, g in s.groupby("bidder_id"):
        firm = sum(c for i, c in enumerate(caps) if f"B{i % 3}" == b)
        assert g["score"].iloc[0] == pytest.approx((total - firm) / (load + reserves), rel=1e-12)


def test_congestion_examples():
    a = [AreaRecord("X", 100, 2, False), AreaRecord("Y", 100, 4, False)]
    assert congestion_index(a) == 3.0
    b = [AreaRecord("X", 100, 0, False), AreaRecord("Y", 300, 4, False)]
    assert congestion_index(b) == 3.0
    c = [AreaRecord("X", 50, 7.5, False), AreaRecord("NYC", 500, 99, True)]
    assert congestion_index(c) == 7.5


def test_congestion_errors():
    with pytest.raises(NoLaggedData):
        congestion_index(None)
    with pytest.raises(NoLaggedData):
        congestion_index([])
    with pytest.raises(ZeroTotalLoad):
        congestion_index([AreaRecord("X", 0, 5, False)])
    with pytest.raises(ZeroTotalLoad):
        congestion_index([AreaRecord("X", 10, 5, True)])


def test_congestion_series_is_lagged():
    areas = pd.DataFrame(
        {
            "hour": [hour(0), hour(0), hour(1), hour(1)],
            "area_id": ["X", "Y", "X", "Y"],
            "load": [100.0, 300.0, 100.0, 100.0],
            "shadow_price": [0.0, 4.0, 2.0, 4.0],
            "is_excluded": [False, False, False, False],
        }
    )
    rows = [(h, "U", "B", 1, 10.0, 100.0) for h in range(3)]
    ds = Dataset(offers_frame(rows), market_frame([50.0] * 3), areas)
    s = congestion_series(ds)
    assert s.kind is ScoreKind.CONGESTION and not s.per_bidder
    v = s.values["score"].tolist()
    assert math.isnan(v[0]) and v[1] == 3.0 and v[2] == 3.0
    # direct route over the record type agrees
    rec = ds.market_record(hour(0)).areas
    assert congestion_index(rec) == v[1]
    assert s.treated().tolist() == [False, True, True]


def test_is_treated_sides():
    assert is_treated(1.0, 1.0, Side.LEQ) and is_treated(0.04, 0.04, Side.GEQ)
    assert not is_treated(1.01, 1.0, Side.LEQ) and not is_treated(0.03, 0.04, Side.GEQ)

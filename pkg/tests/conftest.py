import numpy as np
import pandas as pd
import pytest

from ampsim.data import Dataset, Status, empty_areas, sort_offers

H0 = pd.Timestamp("2019-06-01T00:00Z")


def hour(i: int) -> pd.Timestamp:
    return H0 + pd.Timedelta(hours=i)


def offers_frame(rows) -> pd.DataFrame:
    """rows: (hour_index, unit, bidder, segment, price, quantity[, status[, max_output]])."""
    out = []
    for r in rows:
        h, u, b, s, p, q = r[:6]
        status = r[6] if len(r) > 6 else Status.ECONOMIC.value
        max_out = r[7] if len(r) > 7 else None
        out.append([hour(h), u, b, int(s), float(p), float(q), status, max_out])
    f = pd.DataFrame(out, columns=["hour", "unit_id", "bidder_id", "segment", "price", "quantity", "status", "max_output"])
    # default max_output: the unit-hour's total offered quantity
    tot = f.groupby(["hour", "unit_id"])["quantity"].transform("sum")
    f["max_output"] = f["max_output"].astype(float).fillna(tot)
    f["segment"] = f["segment"].astype(np.int64)
    return sort_offers(f)


def market_frame(loads, reserves=0.0, gas=3.0, demand=None) -> pd.DataFrame:
    n = len(loads)
    m = pd.DataFrame(
        {
            "hour": [hour(i) for i in range(n)],
            "load_forecast": np.asarray(loads, dtype=float),
            "reserves": np.broadcast_to(np.asarray(reserves, dtype=float), (n,)).copy(),
            "gas_price": np.broadcast_to(np.asarray(gas, dtype=float), (n,)).copy(),
        }
    )
    if demand is not None:
        m["demand"] = np.asarray(demand, dtype=float)
    return m


def make_dataset(rows, loads, reserves=0.0, areas=None, demand=None) -> Dataset:
    return Dataset(offers_frame(rows), market_frame(loads, reserves, demand=demand), areas if areas is not None else empty_areas())


def spike_dataset(n_calm: int = 3, spike_price: float = 54.35, ref_price: float = 15.0, load: float = 10_000.0) -> Dataset:
    """Two firms; firm BA is pivotal and bids ``spike_price`` in the last hour.

    Unit A (10,000 MW) bids ``ref_price`` in every calm hour, so its reference
    level at the spike hour is exactly ``ref_price``; unit B (5,000 MW) bids 10.
    """
    rows = []
    for h in range(n_calm + 1):
        rows.append((h, "A", "BA", 1, ref_price if h < n_calm else spike_price, 10_000.0))
        rows.append((h, "B", "BB", 1, 10.0, 5_000.0))
    return make_dataset(rows, [load] * (n_calm + 1), 0.0, demand=[load] * (n_calm + 1))


@pytest.fixture
def toy_dataset():
    rows = [
        (0, "U1", "B1", 1, 20.0, 50.0),
        (0, "U1", "B1", 2, 30.0, 50.0),
        (0, "U2", "B2", 1, 25.0, 80.0),
        (1, "U1", "B1", 1, 21.0, 50.0),
        (1, "U1", "B1", 2, 31.0, 50.0),
        (1, "U2", "B2", 1, 26.0, 80.0),
    ]
    return make_dataset(rows, [120.0, 130.0], 10.0)

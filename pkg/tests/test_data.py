import numpy as np
import pytest

from fusedpoisson.data import (CalendarDims, MissingCovariateError, RentalPanel, SchemaError,
                               StationRegistry, ValidationError, encode_air, load_panel,
                               make_panel_frame, planted_clusters, synth_panel, write_panel)
from fusedpoisson.graph import build_proximity
from fusedpoisson.model import ParamState


def _write(tmp_path, rentals, stations, weather):
    for name, text in (("rentals", rentals), ("stations", stations), ("weather", weather)):
        (tmp_path / f"{name}.csv").write_text(text, encoding="utf-8")
    return [tmp_path / f"{n}.csv" for n in ("rentals", "stations", "weather")]


STATIONS = "station_id,latitude,longitude,capacity\nA,37.5,127.0,10\nB,37.51,127.0,5\n"
WEATHER = "date,rain,air\n2018-04-02,0,good\n2018-04-03,1,bad\n"


def test_grid_is_zero_filled(tmp_path):
    paths = _write(tmp_path, "station_id,date,hour,count\nA,2018-04-02,8,3\nB,2018-04-03,23,1\n",
                   STATIONS, WEATHER)
    panel = load_panel(*paths)
    assert panel.counts.shape == (2, 2, 24)
    assert panel.counts.sum() == 4
    assert panel.counts[0, 0, 8] == 3 and panel.counts[1, 1, 23] == 1
    assert panel.dow.tolist() == [0, 1]        # Monday, Tuesday
    assert panel.air.tolist() == [3, 1]
    assert panel.rain.tolist() == [0, 1]


def test_repeated_rows_are_summed(tmp_path):
    paths = _write(tmp_path, "station_id,date,hour,count\nA,2018-04-02,8,3\nA,2018-04-02,8,2\n",
                   STATIONS, WEATHER)
    assert load_panel(*paths).counts[0, 0, 8] == 5


def test_missing_column(tmp_path):
    paths = _write(tmp_path, "station_id,date,count\nA,2018-04-02,3\n", STATIONS, WEATHER)
    with pytest.raises(SchemaError):
        load_panel(*paths)


def test_unknown_station(tmp_path):
    paths = _write(tmp_path, "station_id,date,hour,count\nZ,2018-04-02,1,3\n", STATIONS, WEATHER)
    with pytest.raises(SchemaError):
        load_panel(*paths)


def test_day_without_weather(tmp_path):
    paths = _write(tmp_path, "station_id,date,hour,count\nA,2018-04-09,1,3\n", STATIONS, WEATHER)
    with pytest.raises(MissingCovariateError):
        load_panel(*paths)
    panel = load_panel(*paths, drop_days_without_weather=True)
    assert panel.counts.sum() == 0


@pytest.mark.parametrize("row", ["A,2018-04-02,24,1", "A,2018-04-02,3,-1"])
def test_bad_values(tmp_path, row):
    paths = _write(tmp_path, "station_id,date,hour,count\n" + row + "\n", STATIONS, WEATHER)
    with pytest.raises(ValidationError):
        load_panel(*paths)


def test_air_encoding():
    assert encode_air("average").tolist() == [0, 0, 1, 0]
    with pytest.raises(ValidationError):
        encode_air("fine")


def test_registry_checks():
    with pytest.raises(ValidationError):
        StationRegistry.from_arrays(["a", "a"], [0, 0], [0, 0], [1, 1])
    with pytest.raises(ValidationError):
        StationRegistry.from_arrays(["a"], [0], [0], [0])


def test_write_then_load_round_trip(tmp_path):
    truth = ParamState.zeros(3)
    truth.theta[:] = [0.5, 1.0, 1.5]
    panel = synth_panel(truth, 9, seed=4)
    paths = [tmp_path / f"{n}.csv" for n in ("rentals", "stations", "weather")]
    write_panel(panel, *paths)
    again = load_panel(*paths)
    np.testing.assert_array_equal(again.counts, panel.counts)
    np.testing.assert_array_equal(again.air, panel.air)
    assert again.dates == panel.dates


def test_synthesis_is_deterministic():
    truth = ParamState.zeros(2, CalendarDims(3, 2))
    a = synth_panel(truth, 5, seed=11)
    b = synth_panel(truth, 5, seed=11)
    c = synth_panel(truth, 5, seed=12)
    np.testing.assert_array_equal(a.counts, b.counts)
    assert not np.array_equal(a.counts, c.counts)


def test_subset_keeps_trend_position():
    frame = make_panel_frame(2, 10, CalendarDims(3, 7))
    sub = frame.subset_days([2, 5])
    assert sub.day_index.tolist() == [2, 5]
    assert sub.obs.time[0] == 2.0
    assert sub.n == 2 * 2 * 3


def test_time_scale():
    frame = make_panel_frame(1, 14, CalendarDims(2, 7), time_scale=7.0)
    assert frame.time[-1] == pytest.approx(13 / 7)


def test_counts_shape_checked():
    frame = make_panel_frame(2, 3, CalendarDims(4, 7))
    with pytest.raises(ValidationError):
        RentalPanel(frame.station_ids, frame.capacity, frame.dates, frame.day_index, frame.dow,
                    frame.rain, frame.air, np.zeros((2, 3, 5), dtype=int), frame.dims)


def test_planted_clusters_match_graph_components():
    reg, truth, labels = planted_clusters(12, 3, CalendarDims(5, 7), seed=2)
    g = build_proximity(reg, 500.0)
    assert g.n_components() == 3
    for c in range(3):
        idx = np.flatnonzero(labels == c)
        phi = truth.phi()
        assert np.ptp(phi.phi_hod[idx], axis=0).max() < 1e-12
        assert np.ptp(phi.phi_dow[idx], axis=0).max() < 1e-12

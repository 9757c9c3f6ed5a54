"""Rental panels: CSV ingestion, grid completion, covariate encoding and synthesis.

A panel is the complete station x day x hour grid of hourly rental counts.
Cells missing from the rentals file are explicit zeros, because the Poisson
likelihood needs every zero observation.
"""

from __future__ import annotations

import csv
import datetime as dt
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

AIR_CATEGORIES = ("very_bad", "bad", "average", "good")
WEEKDAY_NAMES = ("Mo", "Tu", "We", "Th", "Fr", "Sa", "Su")


class PanelError(ValueError):
    """Base class for input problems found while building a panel."""


class SchemaError(PanelError):
    pass


class MissingCovariateError(PanelError):
    pass


class ValidationError(PanelError):
    pass


@dataclass(frozen=True)
class CalendarDims:
    n_hours: int = 24
    n_days_of_week: int = 7

    def __post_init__(self):
        if self.n_hours < 2:
            raise ValueError("n_hours must be >= 2")
        if self.n_days_of_week < 1:
            raise ValueError("n_days_of_week must be >= 1")

    @property
    def hod_free(self) -> int:
        """Number of non-baseline hours."""
        return self.n_hours - 1

    @property
    def dow_free(self) -> int:
        return self.n_days_of_week - 1

    @property
    def n_unpenalized(self) -> int:
        # alpha, rain, three air levels, shared hour and day effects
        return 5 + self.hod_free + self.dow_free

    def n_params(self, n_stations: int) -> int:
        return self.n_unpenalized + n_stations + (n_stations - 1) * (self.hod_free + self.dow_free)


@dataclass(frozen=True)
class StationRegistry:
    station_ids: tuple[str, ...]
    latitude: np.ndarray
    longitude: np.ndarray
    capacity: np.ndarray

    def __post_init__(self):
        n = len(self.station_ids)
        if len(set(self.station_ids)) != n:
            raise ValidationError("station ids must be unique")
        for name in ("latitude", "longitude", "capacity"):
            arr = getattr(self, name)
            if len(arr) != n:
                raise ValidationError(f"{name} has length {len(arr)}, expected {n}")
        if n and np.any(np.asarray(self.capacity) < 1):
            raise ValidationError("capacity must be >= 1")
        if np.any(np.abs(self.latitude) > 90) or np.any(np.abs(self.longitude) > 180):
            raise ValidationError("coordinates out of range")

    def __len__(self):
        return len(self.station_ids)

    @classmethod
    def from_arrays(cls, station_ids, latitude, longitude, capacity) -> "StationRegistry":
        return cls(
            tuple(str(s) for s in station_ids),
            np.asarray(latitude, dtype=float),
            np.asarray(longitude, dtype=float),
            np.asarray(capacity, dtype=np.int64),
        )


@dataclass(frozen=True)
class ObservationIndex:
    """Flattened per-observation coordinates of a panel, in (station, day, hour) C order."""

    station: np.ndarray
    day: np.ndarray
    hour: np.ndarray
    dow: np.ndarray
    time: np.ndarray
    rain: np.ndarray
    air: np.ndarray
    log_offset: np.ndarray


@dataclass(frozen=True)
class RentalPanel:
    """Complete count grid with per-day covariates.

    ``day_index`` holds the time index t of each retained day, so that subsets
    of days (cross-validation folds) keep their original position in the trend.
    ``dow`` holds the day-of-week code, 0 being the baseline (Monday by default).
    """

    station_ids: tuple[str, ...]
    capacity: np.ndarray
    dates: tuple[str, ...]
    day_index: np.ndarray
    dow: np.ndarray
    rain: np.ndarray
    air: np.ndarray
    counts: np.ndarray
    dims: CalendarDims = field(default_factory=CalendarDims)
    time_scale: float = 1.0

    def __post_init__(self):
        S, T = len(self.station_ids), len(self.dates)
        if self.counts.shape != (S, T, self.dims.n_hours):
            raise ValidationError(
                f"counts shape {self.counts.shape} != {(S, T, self.dims.n_hours)}")
        if np.any(self.counts < 0):
            raise ValidationError("negative count")
        for name in ("day_index", "dow", "rain", "air"):
            if len(getattr(self, name)) != T:
                raise ValidationError(f"{name} must have one entry per day")
        if len(self.capacity) != S:
            raise ValidationError("capacity must have one entry per station")
        if T and (self.dow.min() < 0 or self.dow.max() >= self.dims.n_days_of_week):
            raise ValidationError("day-of-week code out of range")
        if T and (self.air.min() < 0 or self.air.max() > 3):
            raise ValidationError("air category code out of range")
        if self.time_scale <= 0:
            raise ValueError("time_scale must be positive")

    @property
    def n_stations(self) -> int:
        return len(self.station_ids)

    @property
    def n_days(self) -> int:
        return len(self.dates)

    @property
    def n(self) -> int:
        return self.counts.size

    @property
    def y(self) -> np.ndarray:
        return self.counts.reshape(-1).astype(float)

    @property
    def time(self) -> np.ndarray:
        """t(i) per day after rescaling."""
        return self.day_index / self.time_scale

    @cached_property
    def obs(self) -> ObservationIndex:
        S, T, H = self.counts.shape
        s, t, h = np.meshgrid(np.arange(S), np.arange(T), np.arange(H), indexing="ij")
        s, t, h = s.ravel(), t.ravel(), h.ravel()
        return ObservationIndex(
            station=s,
            day=t,
            hour=h,
            dow=self.dow[t],
            time=self.time[t],
            rain=self.rain[t].astype(float),
            air=self.air[t],
            log_offset=np.log(self.capacity.astype(float))[s],
        )

    def subset_days(self, keep) -> "RentalPanel":
        """Panel restricted to the days selected by a boolean mask or index array."""
        keep = np.asarray(keep)
        if keep.dtype == bool:
            keep = np.flatnonzero(keep)
        return RentalPanel(
            station_ids=self.station_ids,
            capacity=self.capacity,
            dates=tuple(self.dates[k] for k in keep),
            day_index=self.day_index[keep],
            dow=self.dow[keep],
            rain=self.rain[keep],
            air=self.air[keep],
            counts=self.counts[:, keep, :],
            dims=self.dims,
            time_scale=self.time_scale,
        )

    def with_counts(self, counts) -> "RentalPanel":
        return RentalPanel(
            self.station_ids, self.capacity, self.dates, self.day_index, self.dow,
            self.rain, self.air, np.asarray(counts, dtype=np.int64), self.dims, self.time_scale)


def encode_air(category: str) -> np.ndarray:
    """One-hot air-quality indicator over (very_bad, bad, average, good)."""
    try:
        k = AIR_CATEGORIES.index(category)
    except ValueError:
        raise ValidationError(f"unknown air category {category!r}") from None
    out = np.zeros(4, dtype=int)
    out[k] = 1
    return out


def _read_rows(path, required):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise SchemaError(f"{path}: missing header row")
        missing = [c for c in required if c not in reader.fieldnames]
        if missing:
            raise SchemaError(f"{path}: missing columns {missing}")
        return list(reader)


def load_registry(path) -> StationRegistry:
    rows = _read_rows(path, ("station_id", "latitude", "longitude", "capacity"))
    if not rows:
        raise ValidationError(f"{path}: empty station registry")
    try:
        return StationRegistry.from_arrays(
            [r["station_id"] for r in rows],
            [float(r["latitude"]) for r in rows],
            [float(r["longitude"]) for r in rows],
            [int(r["capacity"]) for r in rows],
        )
    except ValueError as exc:
        if isinstance(exc, PanelError):
            raise
        raise ValidationError(f"{path}: {exc}") from exc


def load_panel(rentals_path, stations_path, weather_path, *, dims: CalendarDims | None = None,
               time_scale: float = 1.0, drop_days_without_weather: bool = False) -> RentalPanel:
    """Read the three CSV files and build the zero-filled grid.

    Days are the dates listed in the weather file plus any date seen in the
    rentals file; the latter must have weather unless
    ``drop_days_without_weather`` is set, in which case their rows are discarded.
    """
    dims = dims or CalendarDims()
    if dims.n_days_of_week != 7:
        raise ValueError("calendar files require 7 days of the week")
    registry = load_registry(stations_path)
    station_pos = {sid: k for k, sid in enumerate(registry.station_ids)}

    weather = {}
    for r in _read_rows(weather_path, ("date", "rain", "air")):
        date = dt.date.fromisoformat(r["date"].strip())
        if r["rain"].strip() not in ("0", "1"):
            raise ValidationError(f"rain flag must be 0 or 1, got {r['rain']!r}")
        air = r["air"].strip()
        if air not in AIR_CATEGORIES:
            raise ValidationError(f"unknown air category {air!r}")
        weather[date] = (int(r["rain"]), AIR_CATEGORIES.index(air))

    rentals = []
    for r in _read_rows(rentals_path, ("station_id", "date", "hour", "count")):
        sid = r["station_id"].strip()
        if sid not in station_pos:
            raise SchemaError(f"rentals reference unknown station {sid!r}")
        date = dt.date.fromisoformat(r["date"].strip())
        hour, count = int(r["hour"]), int(r["count"])
        if not 0 <= hour < dims.n_hours:
            raise ValidationError(f"hour {hour} out of range")
        if count < 0:
            raise ValidationError(f"negative count at {sid} {date} {hour}")
        rentals.append((station_pos[sid], date, hour, count))

    missing = sorted({d for _, d, _, _ in rentals} - weather.keys())
    if missing and not drop_days_without_weather:
        raise MissingCovariateError(f"no weather row for {len(missing)} day(s), first {missing[0]}")

    days = sorted(weather)
    day_pos = {d: k for k, d in enumerate(days)}
    counts = np.zeros((len(registry), len(days), dims.n_hours), dtype=np.int64)
    for s, date, hour, count in rentals:
        if date in day_pos:
            counts[s, day_pos[date], hour] += count

    return RentalPanel(
        station_ids=registry.station_ids,
        capacity=registry.capacity,
        dates=tuple(d.isoformat() for d in days),
        day_index=np.arange(len(days)),
        dow=np.array([d.weekday() for d in days], dtype=int),
        rain=np.array([weather[d][0] for d in days], dtype=int),
        air=np.array([weather[d][1] for d in days], dtype=int),
        counts=counts,
        dims=dims,
        time_scale=time_scale,
    )


def write_panel(panel: RentalPanel, rentals_path, stations_path, weather_path,
                registry: StationRegistry | None = None) -> None:
    """Write a panel as the three CSV inputs; only nonzero counts are listed."""
    if registry is None:
        S = panel.n_stations
        registry = StationRegistry.from_arrays(panel.station_ids, np.zeros(S), np.zeros(S),
                                               panel.capacity)
    with open(stations_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["station_id", "latitude", "longitude", "capacity"])
        for k, sid in enumerate(registry.station_ids):
            w.writerow([sid, repr(float(registry.latitude[k])), repr(float(registry.longitude[k])),
                        int(registry.capacity[k])])
    with open(weather_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["date", "rain", "air"])
        for t, date in enumerate(panel.dates):
            w.writerow([date, int(panel.rain[t]), AIR_CATEGORIES[panel.air[t]]])
    with open(rentals_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["station_id", "date", "hour", "count"])
        for s, t, h in zip(*np.nonzero(panel.counts)):
            w.writerow([panel.station_ids[s], panel.dates[t], h, int(panel.counts[s, t, h])])


def calendar_dates(n_days: int, start: str = "2018-04-02") -> tuple[str, ...]:
    first = dt.date.fromisoformat(start)
    return tuple((first + dt.timedelta(days=k)).isoformat() for k in range(n_days))


def make_panel_frame(n_stations: int, n_days: int, dims: CalendarDims | None = None, *,
                     seed: int = 0, capacity=None, rain=None, air=None, station_ids=None,
                     start: str = "2018-04-02", time_scale: float = 1.0) -> RentalPanel:
    """A panel with all-zero counts and (seeded) random weather, to be filled by synthesis."""
    dims = dims or CalendarDims()
    rng = np.random.default_rng(seed)
    if rain is None:
        rain = (rng.random(n_days) < 0.25).astype(int)
    if air is None:
        air = rng.integers(0, 4, size=n_days)
    if capacity is None:
        capacity = np.ones(n_stations, dtype=np.int64)
    if station_ids is None:
        station_ids = tuple(f"ST-{k + 1:03d}" for k in range(n_stations))
    dates = calendar_dates(n_days, start)
    if dims.n_days_of_week == 7:
        dow = np.array([dt.date.fromisoformat(d).weekday() for d in dates], dtype=int)
    else:
        dow = np.arange(n_days) % dims.n_days_of_week
    return RentalPanel(
        station_ids=tuple(station_ids),
        capacity=np.asarray(capacity, dtype=np.int64),
        dates=dates,
        day_index=np.arange(n_days),
        dow=dow,
        rain=np.asarray(rain, dtype=int),
        air=np.asarray(air, dtype=int),
        counts=np.zeros((n_stations, n_days, dims.n_hours), dtype=np.int64),
        dims=dims,
        time_scale=time_scale,
    )


def synth_panel(truth, n_days: int, *, seed: int, dims: CalendarDims | None = None,
                frame: RentalPanel | None = None, **frame_kwargs) -> RentalPanel:
    """Draw Poisson counts with means given by ``truth`` on a panel grid.

    Either pass an existing ``frame`` (its counts are replaced) or let one be
    built from ``n_days``, ``dims`` and ``frame_kwargs``. Deterministic per seed.
    """
    from .model import mean_surface

    if frame is None:
        frame = make_panel_frame(truth.n_stations, n_days, dims or truth.dims, seed=seed,
                                 **frame_kwargs)
    if truth.n_stations != frame.n_stations or truth.dims != frame.dims:
        raise ValueError("truth dimensions do not match the panel")
    mu = mean_surface(truth, frame)
    rng = np.random.default_rng([seed, 1])
    counts = rng.poisson(mu).reshape(frame.counts.shape)
    return frame.with_counts(counts)


def weekday_name(code: int, dims: CalendarDims) -> str:
    return WEEKDAY_NAMES[code] if dims.n_days_of_week == 7 else f"D{code}"


def parse_weekday(label: str, dims: CalendarDims) -> int:
    if label in WEEKDAY_NAMES and dims.n_days_of_week == 7:
        return WEEKDAY_NAMES.index(label)
    code = int(label.lstrip("D"))
    if not 0 <= code < dims.n_days_of_week:
        raise ValueError(f"day-of-week {label!r} out of range")
    return code


def stack_registry(ids: Sequence[str], coords: np.ndarray, capacity=None) -> StationRegistry:
    coords = np.asarray(coords, dtype=float)
    if capacity is None:
        capacity = np.ones(len(ids), dtype=np.int64)
    return StationRegistry.from_arrays(ids, coords[:, 0], coords[:, 1], capacity)


def planted_clusters(n_stations: int, n_clusters: int = 3, dims: CalendarDims | None = None, *,
                     seed: int = 0, base_rate: float = 0.5, spread: tuple[float, float, float] = (0.3, 0.4, 0.3),
                     station_gap_m: float = 200.0, cluster_gap_m: float = 5000.0):
    """Stations in spatial clusters that share all of their time effects.

    Each cluster is a row of stations ``station_gap_m`` apart; clusters are
    ``cluster_gap_m`` apart, so a radius between the two gaps recovers the
    clusters as graph components. Returns (registry, truth ParamState,
    cluster label per station).
    """
    from .model import ParamState

    dims = dims or CalendarDims()
    if not 1 <= n_clusters <= n_stations:
        raise ValueError("need 1 <= n_clusters <= n_stations")
    rng = np.random.default_rng(seed)
    labels = np.sort(np.arange(n_stations) % n_clusters)
    sd_theta, sd_hod, sd_dow = spread
    theta = rng.normal(base_rate, sd_theta, n_clusters)
    hod = rng.normal(0.0, sd_hod, (n_clusters, dims.n_hours))
    dow = rng.normal(0.0, sd_dow, (n_clusters, dims.n_days_of_week))
    hod = hod[:, 1:] - hod[:, :1]
    dow = dow[:, 1:] - dow[:, :1]
    c0 = labels[0]
    truth = ParamState.zeros(n_stations, dims)
    truth.theta[:] = theta[labels]
    truth.hod_shared[:] = hod[c0]
    truth.dow_shared[:] = dow[c0]
    truth.hod_int[:] = hod[labels] - hod[c0]
    truth.dow_int[:] = dow[labels] - dow[c0]

    # metres to degrees near 37.5N
    lat0, lon0 = 37.5, 127.0
    m_lat = 1.0 / 111_320.0
    m_lon = m_lat / np.cos(np.radians(lat0))
    pos = np.zeros(n_stations)
    for c in range(n_clusters):
        idx = np.flatnonzero(labels == c)
        pos[idx] = c * cluster_gap_m + np.arange(idx.size) * station_gap_m
    registry = StationRegistry.from_arrays(
        tuple(f"ST-{k + 1:03d}" for k in range(n_stations)),
        np.full(n_stations, lat0), lon0 + pos * m_lon, np.ones(n_stations, dtype=np.int64))
    return registry, truth, labels

"""Flow panels, covariate panels, sliding-window features and scalers."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import pandas as pd
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DataError

WEATHER_COLUMNS = (
    "temperature", "humidity", "rain", "wind", "aqi",
    "pm25", "pm10", "so2", "no2", "o3", "co",
)


@dataclass(frozen=True)
class StationSet:
    city_id: str
    station_ids: tuple[str, ...]

    def __post_init__(self):
        ids = tuple(str(s) for s in self.station_ids)
        if not ids:
            raise DataError(f"city {self.city_id!r} has no stations")
        if len(set(ids)) != len(ids):
            raise DataError(f"duplicate station ids in city {self.city_id!r}")
        object.__setattr__(self, "station_ids", ids)

    @property
    def count(self) -> int:
        return len(self.station_ids)

    def index(self, station_id: str) -> int:
        return self.station_ids.index(str(station_id))


def _check_timestamps(timestamps: np.ndarray, granularity_minutes: int) -> np.ndarray:
    ts = np.asarray(timestamps, dtype="datetime64[m]")
    if ts.ndim != 1 or ts.size == 0:
        raise DataError("timestamps must be a non-empty 1-d sequence")
    if ts.size > 1:
        steps = np.diff(ts).astype(np.int64)
        if np.any(steps != granularity_minutes):
            raise DataError(
                f"timestamps are not evenly spaced at {granularity_minutes} minutes"
            )
    return ts


@dataclass(frozen=True, eq=False)
class FlowPanel:
    """Station inflow counts, one row per station and one column per period."""

    stations: StationSet
    granularity_minutes: int
    timestamps: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        if self.granularity_minutes <= 0:
            raise DataError("granularity_minutes must be positive")
        ts = _check_timestamps(self.timestamps, self.granularity_minutes)
        vals = np.array(self.values, dtype=np.float64)
        if vals.shape != (self.stations.count, ts.size):
            raise DataError(
                f"values shape {vals.shape} != ({self.stations.count}, {ts.size})"
            )
        if not np.all(np.isfinite(vals)):
            raise DataError("flow values contain NaN or Inf")
        if np.any(vals < 0):
            raise DataError("flow values must be non-negative")
        vals.setflags(write=False)
        ts.setflags(write=False)
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "values", vals)

    @property
    def n_periods(self) -> int:
        return self.timestamps.size

    @property
    def periods_per_day(self) -> int:
        return (24 * 60) // self.granularity_minutes

    def slice(self, start: int, stop: int) -> "FlowPanel":
        return replace(
            self,
            timestamps=self.timestamps[start:stop],
            values=self.values[:, start:stop],
        )


@dataclass(frozen=True, eq=False)
class CovariatePanel:
    """Network-wide dynamic covariates (weather, air quality) on the flow clock."""

    names: tuple[str, ...]
    granularity_minutes: int
    timestamps: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        ts = _check_timestamps(self.timestamps, self.granularity_minutes)
        vals = np.array(self.values, dtype=np.float64)
        if vals.shape != (len(self.names), ts.size):
            raise DataError(f"covariate values shape {vals.shape} does not match names/timestamps")
        if not np.all(np.isfinite(vals)):
            raise DataError("covariate values contain NaN or Inf")
        vals.setflags(write=False)
        ts.setflags(write=False)
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "values", vals)

    def slice(self, start: int, stop: int) -> "CovariatePanel":
        return replace(
            self,
            timestamps=self.timestamps[start:stop],
            values=self.values[:, start:stop],
        )


@dataclass(frozen=True)
class WindowSpec:
    h: int = 5
    include_mean: bool = True

    def __post_init__(self):
        if self.h < 1:
            raise DataError("history length h must be >= 1")
        if not self.include_mean:
            raise DataError("window features always carry the lag mean")

    @property
    def width(self) -> int:
        return self.h + 1


@dataclass(frozen=True)
class FeatureBundle:
    """Inputs and target for a single time period of one city."""

    L: np.ndarray
    A: np.ndarray
    D: np.ndarray
    target: np.ndarray
    t_index: int


@dataclass(frozen=True, eq=False)
class FeatureWindows(Sequence[FeatureBundle]):
    """Stacked feature bundles for a run of consecutive target periods.

    ``L`` is ``[n_t, n_stations, h+1]``, ``D`` is ``[n_t, n_dyn, h+1]``,
    ``target`` is ``[n_t, n_stations]`` and ``A`` is shared by all periods.
    ``t_index`` holds the panel positions of the targets.
    """

    L: np.ndarray
    A: np.ndarray
    D: np.ndarray
    target: np.ndarray
    t_index: np.ndarray
    station_ids: tuple[str, ...] = ()
    timestamps: np.ndarray = field(default_factory=lambda: np.array([], dtype="datetime64[m]"))

    def __len__(self) -> int:
        return self.target.shape[0]

    def __getitem__(self, i):
        if isinstance(i, slice):
            return self.subset(np.arange(len(self))[i])
        return FeatureBundle(self.L[i], self.A, self.D[i], self.target[i], int(self.t_index[i]))

    def __iter__(self) -> Iterator[FeatureBundle]:
        for i in range(len(self)):
            yield self[i]

    @property
    def n_stations(self) -> int:
        return self.L.shape[1]

    @property
    def h(self) -> int:
        return self.L.shape[2] - 1

    def subset(self, idx) -> "FeatureWindows":
        idx = np.asarray(idx)
        ts = self.timestamps[idx] if self.timestamps.size else self.timestamps
        return replace(
            self, L=self.L[idx], D=self.D[idx], target=self.target[idx],
            t_index=self.t_index[idx], timestamps=ts,
        )


def _lag_windows(values: np.ndarray, h: int, targets: np.ndarray) -> np.ndarray:
    """``[n_t, rows, h+1]`` windows of ``h`` lags plus their mean."""
    lags = sliding_window_view(values, h, axis=1)[:, targets - h, :]  # rows, n_t, h
    lags = np.moveaxis(lags, 1, 0)
    mean = lags.mean(axis=2, keepdims=True)
    return np.concatenate([lags, mean], axis=2)


def build_feature_bundles(
    panel: FlowPanel,
    spec: WindowSpec,
    statics: np.ndarray | None = None,
    dynamics: CovariatePanel | None = None,
    start: int | None = None,
    stop: int | None = None,
) -> FeatureWindows:
    """Sliding-window features for every target period in ``[start, stop)``.

    Target periods default to every position with a full history, i.e.
    ``h .. n_periods-1``. Each station row of ``L`` is
    ``[x(t-h), ..., x(t-1), mean of those h values]`` and the target is ``x(t)``.
    """
    h = spec.h
    start = h if start is None else start
    stop = panel.n_periods if stop is None else stop
    if panel.n_periods < h + 1:
        raise DataError(f"panel has {panel.n_periods} periods, need at least h+1={h + 1}")
    if start < h:
        raise DataError(f"first target position {start} leaves fewer than h={h} lags")
    stop = min(stop, panel.n_periods)
    if stop <= start:
        raise DataError(f"empty target range [{start}, {stop})")
    targets = np.arange(start, stop)

    if dynamics is None:
        D = np.zeros((targets.size, 0, h + 1))
    else:
        if dynamics.timestamps.shape != panel.timestamps.shape or np.any(
            dynamics.timestamps != panel.timestamps
        ):
            raise DataError("dynamic covariates are not aligned with the flow timestamps")
        D = _lag_windows(dynamics.values, h, targets)

    if statics is None:
        A = np.zeros((panel.stations.count, 0))
    else:
        A = np.asarray(statics, dtype=np.float64)
        if A.ndim != 2 or A.shape[0] != panel.stations.count:
            raise DataError(
                f"static covariates must have {panel.stations.count} rows, got shape {A.shape}"
            )

    L = _lag_windows(panel.values, h, targets)
    target = panel.values[:, targets].T.copy()
    return FeatureWindows(
        L=L, A=A, D=D, target=target, t_index=targets,
        station_ids=panel.stations.station_ids,
        timestamps=panel.timestamps[targets],
    )


@dataclass(frozen=True, eq=False)
class Normalizer:
    """Per-column affine scaler. Degenerate columns map to 0."""

    kind: str
    loc: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray, kind: str = "min-max") -> "Normalizer":
        """Fit on a ``[rows, cols]`` array, one statistic per column."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] == 0:
            raise DataError("normalizer needs a non-empty [rows, cols] training array")
        if kind == "min-max":
            loc = x.min(axis=0)
            scale = x.max(axis=0) - loc
        elif kind == "z-score":
            loc = x.mean(axis=0)
            scale = x.std(axis=0)
        else:
            raise ValueError(f"unknown normalizer kind {kind!r}")
        return cls(kind, loc, scale)

    def _stats(self, ndim: int, axis: int):
        shape = [1] * ndim
        shape[axis] = -1
        return self.loc.reshape(shape), self.scale.reshape(shape)

    def transform(self, x: np.ndarray, axis: int = -1) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        loc, scale = self._stats(x.ndim, axis)
        safe = np.where(scale > 0, scale, 1.0)
        return np.where(scale > 0, (x - loc) / safe, 0.0)

    def inverse_transform(self, z: np.ndarray, axis: int = -1) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        loc, scale = self._stats(z.ndim, axis)
        return z * scale + loc


@dataclass(frozen=True, eq=False)
class CityScalers:
    flow: Normalizer
    static: Normalizer
    dynamic: Normalizer

    def apply(self, windows: FeatureWindows) -> FeatureWindows:
        return replace(
            windows,
            L=self.flow.transform(windows.L, axis=1),
            target=self.flow.transform(windows.target, axis=1),
            A=self.static.transform(windows.A, axis=1),
            D=self.dynamic.transform(windows.D, axis=1),
        )

    def invert_flow(self, values: np.ndarray) -> np.ndarray:
        """Undo flow scaling on a ``[n_t, n_stations]`` array."""
        return self.flow.inverse_transform(values, axis=1)


def fit_normalizers(windows: FeatureWindows) -> CityScalers:
    """Fit flow, static and dynamic scalers on a training slice.

    Flows are min-max scaled per station, statics z-scored across stations
    and dynamic covariates min-max scaled per covariate.
    """
    if len(windows) == 0:
        raise DataError("cannot fit normalizers on an empty training slice")
    h = windows.h
    n = windows.n_stations
    n_t = len(windows)
    flows = np.concatenate([windows.L[:, :, :h].transpose(0, 2, 1).reshape(n_t * h, n), windows.target])
    dyn = windows.D[:, :, :h].transpose(0, 2, 1).reshape(n_t * h, windows.D.shape[1])
    return CityScalers(
        flow=Normalizer.fit(flows, "min-max"),
        static=Normalizer.fit(windows.A, "z-score") if windows.A.shape[1] else Normalizer("z-score", np.zeros(0), np.zeros(0)),
        dynamic=Normalizer.fit(dyn, "min-max") if dyn.shape[1] else Normalizer("min-max", np.zeros(0), np.zeros(0)),
    )


def split_positions(
    n_periods: int, periods_per_day: int, train_days: int, test_days: int
) -> tuple[range, range]:
    """Train and test period positions; the test block is the final ``test_days``."""
    test_len = test_days * periods_per_day
    train_len = train_days * periods_per_day
    if test_days < 1 or train_days < 1:
        raise DataError("train_days and test_days must be positive")
    if test_len + train_len > n_periods:
        raise DataError(
            f"{train_days}+{test_days} days need {train_len + test_len} periods, panel has {n_periods}"
        )
    test_start = n_periods - test_len
    return range(test_start - train_len, test_start), range(test_start, n_periods)


# --- file formats -------------------------------------------------------------


def read_flow_csv(path, city_id: str = "", granularity_minutes: int | None = None,
                  missing: str = "reject") -> FlowPanel:
    """Read ``station_id,timestamp,inflow`` rows into a panel.

    Station order follows first appearance in the file. Missing
    (station, period) cells are rejected unless ``missing="zero"``.
    """
    df = pd.read_csv(path, dtype={"station_id": str}, comment="#")
    expected = {"station_id", "timestamp", "inflow"}
    if not expected <= set(df.columns):
        raise DataError(f"{path}: flow CSV needs columns {sorted(expected)}")
    if df.empty:
        raise DataError(f"{path}: no flow rows")
    df["timestamp"] = pd.to_datetime(df["timestamp"])
    if df.duplicated(["station_id", "timestamp"]).any():
        raise DataError(f"{path}: duplicate (station_id, timestamp) rows")
    stations = tuple(pd.unique(df["station_id"]))
    times = np.sort(df["timestamp"].unique())
    if granularity_minutes is None:
        if times.size < 2:
            raise DataError(f"{path}: cannot infer granularity from a single timestamp")
        granularity_minutes = int(np.diff(times).min() / np.timedelta64(1, "m"))
    grid = pd.date_range(times[0], times[-1], freq=f"{granularity_minutes}min")
    wide = df.pivot(index="station_id", columns="timestamp", values="inflow")
    wide = wide.reindex(index=list(stations), columns=grid)
    if wide.isna().any().any():
        if missing != "zero":
            n_missing = int(wide.isna().sum().sum())
            raise DataError(f"{path}: {n_missing} missing (station, period) cells")
        wide = wide.fillna(0.0)
    return FlowPanel(
        stations=StationSet(city_id or Path(path).parent.name, stations),
        granularity_minutes=granularity_minutes,
        timestamps=grid.values.astype("datetime64[m]"),
        values=wide.to_numpy(dtype=np.float64),
    )


def write_flow_csv(panel: FlowPanel, path, float_format: str = "%.4f") -> None:
    ts = pd.DatetimeIndex(panel.timestamps.astype("datetime64[ns]"))
    df = pd.DataFrame({
        "station_id": np.repeat(panel.stations.station_ids, panel.n_periods),
        "timestamp": np.tile(ts.strftime("%Y-%m-%dT%H:%M:%S"), panel.stations.count),
        "inflow": panel.values.reshape(-1),
    })
    df.to_csv(path, index=False, float_format=float_format, lineterminator="\n")


def read_weather_csv(path) -> pd.DataFrame:
    df = pd.read_csv(path, dtype={"date": str}, comment="#")
    missing = [c for c in ("date", "hour", *WEATHER_COLUMNS) if c not in df.columns]
    if missing:
        raise DataError(f"{path}: weather CSV lacks columns {missing}")
    return df


def write_weather_csv(df: pd.DataFrame, path, float_format: str = "%.4f") -> None:
    df.loc[:, ["date", "hour", *WEATHER_COLUMNS]].to_csv(
        path, index=False, float_format=float_format, lineterminator="\n"
    )


def align_weather(weather: pd.DataFrame, timestamps: np.ndarray, granularity_minutes: int) -> CovariatePanel:
    """Spread hourly weather rows onto every flow period within that hour."""
    ts = pd.DatetimeIndex(np.asarray(timestamps).astype("datetime64[ns]"))
    hourly = weather.assign(
        _key=pd.to_datetime(weather["date"].astype(str), format="%Y%m%d")
        + pd.to_timedelta(weather["hour"].astype(int), unit="h")
    )
    if hourly["_key"].duplicated().any():
        raise DataError("weather CSV has duplicate (date, hour) rows")
    hourly = hourly.set_index("_key")
    keys = ts.floor("h")
    missing = keys.difference(hourly.index)
    if len(missing):
        raise DataError(f"weather CSV lacks {len(missing)} hours covered by the flows, first {missing[0]}")
    values = hourly.loc[keys, list(WEATHER_COLUMNS)].to_numpy(dtype=np.float64).T
    return CovariatePanel(WEATHER_COLUMNS, granularity_minutes, ts.values.astype("datetime64[m]"), values)


def read_static_csv(path, stations: StationSet) -> tuple[tuple[str, ...], np.ndarray]:
    """Static covariates reordered to ``stations``; returns (column names, matrix)."""
    df = pd.read_csv(path, dtype={"station_id": str}, comment="#")
    if "station_id" not in df.columns:
        raise DataError(f"{path}: static CSV needs a station_id column")
    df = df.set_index("station_id")
    absent = [s for s in stations.station_ids if s not in df.index]
    if absent:
        raise DataError(f"{path}: no static covariates for stations {absent[:5]}")
    df = df.loc[list(stations.station_ids)]
    return tuple(df.columns), df.to_numpy(dtype=np.float64)


def write_static_csv(station_ids: Sequence[str], names: Sequence[str], matrix: np.ndarray, path,
                     float_format: str = "%.6f") -> None:
    df = pd.DataFrame(np.asarray(matrix), columns=list(names))
    df.insert(0, "station_id", list(station_ids))
    df.to_csv(path, index=False, float_format=float_format, lineterminator="\n")

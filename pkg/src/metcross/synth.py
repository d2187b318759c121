"""Deterministic synthetic source/target metro cities.

Each station's flow is a scaled, weather-suppressed mixture of shared daily
profiles plus noise. With coupling ``c`` a target station's mixture weights
are ``c`` times those of its ground-truth source station plus ``1-c`` times
its own independent weights, so coupling 1 makes the pair identical up to
scale, weather and noise, and coupling 0 leaves the cities unrelated.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from .city import City, save_city
from .covariates import STATIC_SLOTS, CityInputs, MetroGraph, build_static_matrix
from .data import WEATHER_COLUMNS, FlowPanel, StationSet, align_weather

# Profile peaks (hour of day) and widths (hours); cycled when more profiles are asked for.
_PEAKS = ((8.0, 1.0), (18.0, 1.2), (12.5, 1.5), (7.25, 0.6), (21.0, 1.5), (16.5, 0.8), (10.0, 2.0))


@dataclass(frozen=True)
class SynthSpec:
    """Generator settings. ``noise`` is the relative flow noise; ``weather_noise``
    scales the random part of every weather series around its daily cycle."""

    S: int = 115
    G: int = 44
    days: int = 30
    granularity_minutes: int = 10
    n_profiles: int = 6
    coupling: float = 0.8
    noise: float = 0.1
    seed: int = 0
    start: str = "2017-03-01"
    source_lines: int = 4
    target_lines: int = 2
    rain_effect: float = 0.35
    informative_statics: bool = True
    weather: bool = True
    weather_noise: float = 0.3

    def __post_init__(self):
        if min(self.S, self.G, self.days, self.granularity_minutes, self.n_profiles) < 1:
            raise ValueError("station counts, days, granularity and profile count must be positive")
        if (24 * 60) % self.granularity_minutes:
            raise ValueError("granularity must divide a day")
        if not 0.0 <= self.coupling <= 1.0:
            raise ValueError("coupling must lie in [0, 1]")
        if self.noise < 0 or self.weather_noise < 0:
            raise ValueError("noise levels must be non-negative")
        if self.source_lines < 1 or self.target_lines < 1:
            raise ValueError("each city needs at least one line")

    @property
    def periods_per_day(self) -> int:
        return (24 * 60) // self.granularity_minutes


@dataclass(eq=False)
class SynthCity:
    city: City
    weather: pd.DataFrame | None
    inputs: CityInputs
    weights: np.ndarray          # profile mixture weights per station
    scale: np.ndarray

    def latent(self, spec: SynthSpec) -> np.ndarray:
        """Noise- and weather-free daily component, ``[stations, periods_per_day]``."""
        return latent_component(self.weights, spec)


@dataclass(eq=False)
class SynthPair:
    spec: SynthSpec
    source: SynthCity
    target: SynthCity
    pairs_truth: np.ndarray      # pairs_truth[g] = source station index

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        for name, sc in (("source", self.source), ("target", self.target)):
            write_synth_city(sc, out / name)
        src_ids = self.source.city.panel.stations.station_ids
        pd.DataFrame({
            "target_station": self.target.city.panel.stations.station_ids,
            "source_station": [src_ids[i] for i in self.pairs_truth],
        }).to_csv(out / "pairs_truth.csv", index=False, lineterminator="\n")
        (out / "synth_spec.json").write_text(json.dumps(asdict(self.spec), indent=2, sort_keys=True) + "\n")


def profile_basis(spec: SynthSpec) -> np.ndarray:
    """``[n_profiles, periods_per_day]`` zero-mean, unit-variance daily bumps."""
    tod = np.arange(spec.periods_per_day) * spec.granularity_minutes / 60.0
    rows = []
    for k in range(spec.n_profiles):
        peak, width = _PEAKS[k % len(_PEAKS)]
        peak = (peak + 0.37 * (k // len(_PEAKS))) % 24
        kappa = (24.0 / (2 * np.pi * width)) ** 2
        bump = np.exp(kappa * (np.cos(2 * np.pi * (tod - peak) / 24.0) - 1.0))
        bump = bump - bump.mean()
        rows.append(bump / bump.std())
    return np.array(rows)


def latent_component(weights: np.ndarray, spec: SynthSpec) -> np.ndarray:
    """Relative daily profile in ``[0.2, 1.8]`` for each row of mixture weights."""
    mix = weights @ profile_basis(spec)
    peak = np.abs(mix).max(axis=1, keepdims=True)
    return 1.0 + 0.8 * np.divide(mix, peak, out=np.zeros_like(mix), where=peak > 0)


def _weather(rng: np.random.Generator, spec: SynthSpec, hours: pd.DatetimeIndex) -> pd.DataFrame:
    n = hours.size
    hod = hours.hour.to_numpy()
    day = np.arange(n) // 24

    wn = spec.weather_noise

    def noise(scale):
        return rng.normal(0.0, scale * wn, n)

    def ar(scale, phi=0.95):
        e = noise(scale)
        out = np.empty(n)
        acc = 0.0
        for i in range(n):
            acc = phi * acc + e[i]
            out[i] = acc
        return out

    def cyc(peak_hour):
        return np.cos(2 * np.pi * (hod - peak_hour) / 24.0)

    drift = np.repeat(rng.normal(0.0, 2.0 * wn, day.max() + 1), 24)[:n]
    rain = np.zeros(n)
    i = 0
    while i < n:
        if rng.random() < 0.03:
            length = int(rng.integers(2, 9))
            rain[i:i + length] = np.round(rng.gamma(1.5, 1.2, min(length, n - i)), 2)
            i += length
        else:
            i += 1
    aqi = np.clip(80 + 20 * cyc(9) + ar(3.0), 10, None)
    df = pd.DataFrame({
        "date": hours.strftime("%Y%m%d"),
        "hour": hod,
        "temperature": 12 + 6 * cyc(15) + drift + noise(0.4),
        "humidity": np.clip(70 + 15 * cyc(5) + 10 * (rain > 0) + noise(2), 5, 100),
        "rain": rain,
        "wind": np.clip(2 + 0.8 * cyc(14) + ar(0.2), 0, None),
        "aqi": aqi,
        "pm25": np.clip(0.7 * aqi + noise(4), 1, None),
        "pm10": np.clip(1.2 * aqi + noise(6), 1, None),
        "so2": np.clip(18 + 4 * cyc(8) + noise(1.5), 1, None),
        "no2": np.clip(55 + 10 * cyc(8) + 8 * cyc(18) + noise(3), 1, None),
        "o3": np.clip(30 + 25 * cyc(15) + noise(3), 1, None),
        "co": np.clip(1.1 + 0.2 * cyc(8) + noise(0.05), 0.1, None),
    })
    for c in WEATHER_COLUMNS:
        df[c] = df[c].round(2)
    return df


def _lines(rng: np.random.Generator, n: int, n_lines: int, prefix: str):
    """Station ids, edges and planar offsets (km) for ``n_lines`` crossing lines."""
    n_lines = min(n_lines, max(1, (n - 1) // 2))
    sizes = np.full(n_lines, n // n_lines)
    sizes[: n % n_lines] += 1
    # later lines reuse one transfer station, so they get one extra slot each
    ids = [f"{prefix}{i:03d}" for i in range(n)]
    xy = np.zeros((n, 2))
    edges = []
    nxt = 0
    first = list(range(sizes[0]))
    nxt = sizes[0]
    angle = rng.uniform(0, np.pi)
    d = np.array([np.cos(angle), np.sin(angle)])
    for j, s in enumerate(first):
        xy[s] = (j - (len(first) - 1) / 2) * 1.3 * d
    edges += [(first[j], first[j + 1]) for j in range(len(first) - 1)]
    placed = list(first)
    for line in range(1, n_lines):
        hub = int(rng.choice(placed))
        new = list(range(nxt, nxt + sizes[line]))
        nxt += sizes[line]
        k = len(new) // 2
        members = new[:k] + [hub] + new[k:]
        angle = rng.uniform(0, np.pi)
        d = np.array([np.cos(angle), np.sin(angle)])
        for j, s in enumerate(members):
            if s != hub:
                xy[s] = xy[hub] + (j - k) * 1.3 * d
        edges += [(members[j], members[j + 1]) for j in range(len(members) - 1)]
        placed += new
    xy += rng.normal(0, 0.15, xy.shape)
    return ids, [(ids[a], ids[b]) for a, b in edges], xy


def _city(rng: np.random.Generator, spec: SynthSpec, name: str, n: int, n_lines: int,
          weights: np.ndarray, scale: np.ndarray, center: tuple[float, float],
          scalars: dict, hours: pd.DatetimeIndex, timestamps: np.ndarray) -> SynthCity:
    ids, edges, xy = _lines(rng, n, n_lines, name[0].upper())
    stations = StationSet(name, tuple(ids))
    graph = MetroGraph(stations, tuple(edges))
    weather, dyn, suppress = None, None, np.ones(timestamps.size)
    if spec.weather:
        weather = _weather(rng, spec, hours)
        dyn = align_weather(weather, timestamps, spec.granularity_minutes)
        rain = dyn.values[WEATHER_COLUMNS.index("rain")]
        suppress = 1.0 - spec.rain_effect * (1.0 - np.exp(-rain / 2.0))

    ppd = spec.periods_per_day
    lat = latent_component(weights, spec)
    n_t = timestamps.size
    base = np.tile(lat, (1, int(np.ceil(n_t / ppd))))[:, :n_t]
    lam = scale[:, None] * base * suppress[None, :]
    eps = rng.normal(0.0, 1.0, lam.shape)
    flows = np.round(np.clip(lam * (1.0 + spec.noise * eps), 0.0, None), 4)
    panel = FlowPanel(stations, spec.granularity_minutes, timestamps, flows)

    k = weights.shape[1]
    if spec.informative_statics:
        poi = rng.poisson(15.0 * np.exp(0.8 * weights))
        nightlight = np.round(20 + 6 * weights[:, 0] + rng.normal(0, 1, n), 3)
        bus = rng.poisson(20.0 * np.exp(0.5 * weights[:, 1 % k]))
    else:
        poi = rng.poisson(15.0, (n, k))
        nightlight = np.round(20 + rng.normal(0, 6, n), 3)
        bus = rng.poisson(6.0, n)
    poi[:, 0] += (poi.sum(axis=1) == 0)
    km_per_deg = 111.195
    lat_deg = center[0] + xy[:, 1] / km_per_deg
    lon_deg = center[1] + xy[:, 0] / (km_per_deg * np.cos(np.radians(center[0])))
    inputs = CityInputs(graph, poi.astype(float), np.round(lat_deg, 6), np.round(lon_deg, 6),
                        nightlight, bus.astype(float), center, scalars)
    statics = build_static_matrix(inputs)
    return SynthCity(City(panel, dyn, statics, STATIC_SLOTS), weather, inputs, weights, scale)


def generate(spec: SynthSpec = SynthSpec()) -> SynthPair:
    rng = np.random.default_rng(spec.seed)
    ppd = spec.periods_per_day
    n_t = spec.days * ppd
    start = np.datetime64(spec.start, "m")
    timestamps = start + np.arange(n_t) * np.timedelta64(spec.granularity_minutes, "m")
    hours = pd.date_range(pd.Timestamp(spec.start), periods=spec.days * 24, freq="h")

    w_source = rng.normal(0.0, 1.0, (spec.S, spec.n_profiles))
    truth = rng.integers(0, spec.S, spec.G)
    own = rng.normal(0.0, 1.0, (spec.G, spec.n_profiles))
    w_target = spec.coupling * w_source[truth] + (1.0 - spec.coupling) * own
    scale_s = np.exp(rng.normal(np.log(60.0), 0.5, spec.S))
    scale_g = np.exp(rng.normal(np.log(35.0), 0.5, spec.G))

    source = _city(rng, spec, "source", spec.S, spec.source_lines, w_source, scale_s,
                   (29.56, 106.55), {"population": 3048.4, "gdp_per_capita": 6.3,
                                     "population_density": 370.0, "bus_network_density": 2.1},
                   hours, timestamps)
    target = _city(rng, spec, "target", spec.G, spec.target_lines, w_target, scale_g,
                   (31.49, 120.31), {"population": 655.3, "gdp_per_capita": 16.1,
                                     "population_density": 1416.0, "bus_network_density": 3.4},
                   hours, timestamps)
    return SynthPair(spec, source, target, truth)


def write_synth_city(sc: SynthCity, path) -> None:
    """Flows, weather, statics and every raw covariate input for one city."""
    path = Path(path)
    save_city(sc.city, path, sc.weather)
    inp = sc.inputs
    ids = sc.city.panel.stations.station_ids
    inp.graph.to_csv(path / "topology.csv")
    poi = pd.DataFrame(inp.poi_counts.astype(np.int64),
                       columns=[f"category_{k}" for k in range(inp.poi_counts.shape[1])])
    poi.insert(0, "station_id", ids)
    poi.to_csv(path / "poi.csv", index=False, lineterminator="\n")
    pd.DataFrame({"station_id": ids, "lat": inp.lat, "lon": inp.lon, "nightlight": inp.nightlight,
                  "bus_stations": inp.bus_stations.astype(np.int64)}).to_csv(
        path / "stations.csv", index=False, lineterminator="\n", float_format="%.6f")
    meta = {"center_lat": inp.center[0], "center_lon": inp.center[1], "scalars": dict(inp.scalars),
            "reserved": {}}
    (path / "city.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")

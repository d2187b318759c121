"""A city's complete dataset and its on-disk directory layout.

A city directory holds ``flows.csv`` and ``weather.csv`` and either a ready
``statics.csv`` or the raw inputs it is computed from: ``topology.csv``,
``poi.csv``, ``stations.csv`` and ``city.json``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from .covariates import STATIC_SLOTS, CityInputs, MetroGraph, build_static_matrix
from .data import (CovariatePanel, FlowPanel, align_weather, read_flow_csv, read_static_csv,
                   read_weather_csv, write_flow_csv, write_static_csv, write_weather_csv)
from .errors import DataError


@dataclass(frozen=True, eq=False)
class City:
    panel: FlowPanel
    dynamics: CovariatePanel | None
    statics: np.ndarray | None
    static_names: tuple[str, ...] = STATIC_SLOTS

    @property
    def name(self) -> str:
        return self.panel.stations.city_id


def read_city_inputs(path, panel: FlowPanel) -> CityInputs:
    path = Path(path)
    stations = panel.stations
    graph = MetroGraph.from_csv(path / "topology.csv", stations)
    poi = pd.read_csv(path / "poi.csv", dtype={"station_id": str}, comment="#").set_index("station_id")
    info = pd.read_csv(path / "stations.csv", dtype={"station_id": str}, comment="#").set_index("station_id")
    order = list(stations.station_ids)
    for name, df in (("poi.csv", poi), ("stations.csv", info)):
        absent = [s for s in order if s not in df.index]
        if absent:
            raise DataError(f"{path / name}: missing stations {absent[:5]}")
    meta = json.loads((path / "city.json").read_text())
    info = info.loc[order]
    return CityInputs(
        graph=graph,
        poi_counts=poi.loc[order].to_numpy(dtype=np.float64),
        lat=info["lat"].to_numpy(float), lon=info["lon"].to_numpy(float),
        nightlight=info["nightlight"].to_numpy(float),
        bus_stations=info["bus_stations"].to_numpy(float),
        center=(float(meta["center_lat"]), float(meta["center_lon"])),
        scalars={k: float(v) for k, v in meta.get("scalars", {}).items()},
        reserved=meta.get("reserved", {}),
    )


def load_city(path, missing: str = "reject") -> City:
    """Read a city directory; statics are computed from raw inputs when no ``statics.csv`` exists."""
    path = Path(path)
    if not (path / "flows.csv").exists():
        raise DataError(f"{path}: no flows.csv")
    panel = read_flow_csv(path / "flows.csv", city_id=path.name, missing=missing)
    dynamics = None
    if (path / "weather.csv").exists():
        dynamics = align_weather(read_weather_csv(path / "weather.csv"), panel.timestamps,
                                 panel.granularity_minutes)
    statics, names = None, STATIC_SLOTS
    if (path / "statics.csv").exists():
        names, statics = read_static_csv(path / "statics.csv", panel.stations)
    elif (path / "topology.csv").exists():
        statics = build_static_matrix(read_city_inputs(path, panel))
    return City(panel, dynamics, statics, tuple(names))


def save_city(city: City, path, weather: pd.DataFrame | None = None) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    write_flow_csv(city.panel, path / "flows.csv")
    if weather is not None:
        write_weather_csv(weather, path / "weather.csv")
    if city.statics is not None:
        write_static_csv(city.panel.stations.station_ids, city.static_names, city.statics,
                         path / "statics.csv")

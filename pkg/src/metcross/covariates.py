"""Static station covariates: POI entropy, metro network indicators, geography."""

from __future__ import annotations

import heapq
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from .data import StationSet
from .errors import DataError

EARTH_RADIUS_KM = 6371.0

# Column order of the static covariate matrix.
STATIC_SLOTS = (
    "population",
    "gdp_per_capita",
    "population_density",
    "bus_network_density",
    "network_efficiency",
    "avg_shortest_path",
    "network_density",
    "poi_entropy",
    "nightlight",
    "degree",
    "closeness",
    "betweenness",
    "is_terminal",
    "is_transfer",
    "bus_stations",
    "distance_to_center",
    "reserved_1",
    "reserved_2",
)
CITY_SLOTS = (
    "population", "gdp_per_capita", "population_density", "bus_network_density",
    "network_efficiency", "avg_shortest_path", "network_density",
)


def poi_entropy(counts) -> float:
    """Shannon entropy (natural log) of POI category counts."""
    c = np.asarray(counts, dtype=np.float64)
    if c.ndim != 1 or np.any(c < 0):
        raise DataError("POI counts must be a non-negative vector")
    total = c.sum()
    if total <= 0:
        raise DataError("POI counts are all zero")
    p = c[c > 0] / total
    return float(-(p * np.log(p)).sum())


@dataclass(frozen=True, eq=False)
class MetroGraph:
    """Undirected physical adjacency between the stations of one city."""

    stations: StationSet
    edges: tuple[tuple[str, str], ...]
    lengths: tuple[float, ...] | None = None
    _adj: list = field(init=False, repr=False)

    def __post_init__(self):
        known = set(self.stations.station_ids)
        seen = set()
        adj: list[list[tuple[int, float]]] = [[] for _ in range(self.stations.count)]
        if self.lengths is not None and len(self.lengths) != len(self.edges):
            raise DataError("edge lengths must match edges one to one")
        for k, (a, b) in enumerate(self.edges):
            a, b = str(a), str(b)
            if a not in known or b not in known:
                raise DataError(f"edge ({a}, {b}) references an unknown station")
            if a == b:
                raise DataError(f"self-loop at station {a}")
            key = frozenset((a, b))
            if key in seen:
                raise DataError(f"duplicate edge ({a}, {b})")
            seen.add(key)
            w = 1.0 if self.lengths is None else float(self.lengths[k])
            if w <= 0:
                raise DataError(f"edge ({a}, {b}) has non-positive length")
            i, j = self.stations.index(a), self.stations.index(b)
            adj[i].append((j, w))
            adj[j].append((i, w))
        object.__setattr__(self, "_adj", adj)

    @property
    def n(self) -> int:
        return self.stations.count

    @property
    def m(self) -> int:
        return len(self.edges)

    def neighbors(self, i: int) -> list[tuple[int, float]]:
        return self._adj[i]

    def degrees(self) -> np.ndarray:
        return np.array([len(a) for a in self._adj], dtype=np.float64)

    def components(self) -> list[list[str]]:
        label = [-1] * self.n
        comps = []
        for s in range(self.n):
            if label[s] >= 0:
                continue
            label[s] = len(comps)
            members, queue = [s], deque([s])
            while queue:
                u = queue.popleft()
                for v, _ in self._adj[u]:
                    if label[v] < 0:
                        label[v] = label[s]
                        members.append(v)
                        queue.append(v)
            comps.append(sorted(self.stations.station_ids[i] for i in members))
        return comps

    def require_connected(self) -> None:
        if self.n < 2:
            raise DataError("network indicators need at least 2 stations")
        comps = self.components()
        if len(comps) > 1:
            desc = "; ".join("{" + ", ".join(c[:5]) + (", ..." if len(c) > 5 else "") + "}" for c in comps)
            raise DataError(f"metro graph is disconnected into {len(comps)} components: {desc}")

    @classmethod
    def from_csv(cls, path, stations: StationSet) -> "MetroGraph":
        df = pd.read_csv(path, dtype={"station_a": str, "station_b": str}, comment="#")
        if not {"station_a", "station_b"} <= set(df.columns):
            raise DataError(f"{path}: topology CSV needs station_a,station_b")
        lengths = tuple(df["length_km"].astype(float)) if "length_km" in df.columns else None
        return cls(stations, tuple(zip(df["station_a"], df["station_b"])), lengths)

    def to_csv(self, path) -> None:
        df = pd.DataFrame(self.edges, columns=["station_a", "station_b"])
        if self.lengths is not None:
            df["length_km"] = self.lengths
        df.to_csv(path, index=False, lineterminator="\n")


def _single_source(g: MetroGraph, s: int):
    """Brandes single-source pass: visit order, predecessors, path counts, distances."""
    n = g.n
    sigma = [0.0] * n
    dist = [math.inf] * n
    preds: list[list[int]] = [[] for _ in range(n)]
    order: list[int] = []
    sigma[s] = 1.0
    dist[s] = 0.0
    if g.lengths is None:
        queue = deque([s])
        while queue:
            u = queue.popleft()
            order.append(u)
            for v, _ in g.neighbors(u):
                if dist[v] == math.inf:
                    dist[v] = dist[u] + 1.0
                    queue.append(v)
                if dist[v] == dist[u] + 1.0:
                    sigma[v] += sigma[u]
                    preds[v].append(u)
    else:
        done = [False] * n
        heap = [(0.0, s)]
        while heap:
            d, u = heapq.heappop(heap)
            if done[u]:
                continue
            done[u] = True
            order.append(u)
            for v, w in g.neighbors(u):
                nd = d + w
                if nd < dist[v] - 1e-12:
                    dist[v] = nd
                    sigma[v] = sigma[u]
                    preds[v] = [u]
                    heapq.heappush(heap, (nd, v))
                elif abs(nd - dist[v]) <= 1e-12 and not done[v]:
                    sigma[v] += sigma[u]
                    preds[v].append(u)
    return order, preds, sigma, dist


def shortest_path_lengths(g: MetroGraph) -> np.ndarray:
    """All-pairs shortest path matrix (hops, or km when lengths are given)."""
    return np.array([_single_source(g, s)[3] for s in range(g.n)])


def network_indicators(g: MetroGraph) -> tuple[float, float, float]:
    """(efficiency, average shortest-path distance, density) of a connected graph."""
    g.require_connected()
    n = g.n
    d = shortest_path_lengths(g)
    iu = np.triu_indices(n, k=1)
    pair_d = d[iu]
    density = 2.0 * g.m / (n * (n - 1))
    return float(np.mean(1.0 / pair_d)), float(np.mean(pair_d)), density


def station_indicators(g: MetroGraph) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-station (degree, closeness, normalized betweenness).

    Betweenness splits credit evenly across equal-length shortest paths and
    is divided by the number of unordered pairs excluding the station.
    """
    g.require_connected()
    n = g.n
    closeness = np.zeros(n)
    between = np.zeros(n)
    for s in range(n):
        order, preds, sigma, dist = _single_source(g, s)
        closeness[s] = (n - 1) / sum(dist)
        delta = [0.0] * n
        for w in reversed(order):
            for v in preds[w]:
                delta[v] += sigma[v] / sigma[w] * (1.0 + delta[w])
            if w != s:
                between[w] += delta[w]
    # each unordered pair was counted from both endpoints
    between /= 2.0
    pairs = (n - 1) * (n - 2) / 2.0
    if pairs > 0:
        between /= pairs
    return g.degrees(), closeness, between


def distance_to_center(lat, lon, center_lat: float, center_lon: float) -> np.ndarray | float:
    """Haversine great-circle distance in km."""
    lat = np.asarray(lat, dtype=np.float64)
    lon = np.asarray(lon, dtype=np.float64)
    for name, arr, lim in (("latitude", lat, 90), ("longitude", lon, 180),
                           ("center latitude", np.asarray(center_lat), 90),
                           ("center longitude", np.asarray(center_lon), 180)):
        if np.any(np.abs(arr) > lim) or not np.all(np.isfinite(arr)):
            raise DataError(f"{name} out of range [-{lim}, {lim}]")
    p1, p2 = np.radians(lat), np.radians(center_lat)
    dphi = p2 - p1
    dlmb = np.radians(center_lon) - np.radians(lon)
    a = np.sin(dphi / 2) ** 2 + np.cos(p1) * np.cos(p2) * np.sin(dlmb / 2) ** 2
    out = 2 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))
    return float(out) if out.ndim == 0 else out


@dataclass
class CityInputs:
    """Raw per-city inputs from which the static covariate matrix is built."""

    graph: MetroGraph
    poi_counts: np.ndarray                 # [n_stations, n_categories]
    lat: np.ndarray
    lon: np.ndarray
    nightlight: np.ndarray
    bus_stations: np.ndarray
    center: tuple[float, float]
    scalars: Mapping[str, float]           # population, gdp_per_capita, ...
    reserved: Mapping[str, Sequence[float] | float] = field(default_factory=dict)


def static_slot_values(inputs: CityInputs) -> dict[str, np.ndarray]:
    """Every named slot as a per-station array (city-level values broadcast)."""
    g = inputs.graph
    n = g.n
    eff, avg, dens = network_indicators(g)
    deg, clo, btw = station_indicators(g)
    poi = np.asarray(inputs.poi_counts, dtype=np.float64)
    if poi.shape[0] != n:
        raise DataError(f"POI counts have {poi.shape[0]} rows for {n} stations")
    slots = {
        "network_efficiency": eff, "avg_shortest_path": avg, "network_density": dens,
        "poi_entropy": np.array([poi_entropy(row) for row in poi]),
        "nightlight": inputs.nightlight,
        "degree": deg, "closeness": clo, "betweenness": btw,
        "is_terminal": (deg == 1).astype(np.float64),
        "is_transfer": (deg >= 3).astype(np.float64),
        "bus_stations": inputs.bus_stations,
        "distance_to_center": distance_to_center(inputs.lat, inputs.lon, *inputs.center),
    }
    for key in ("population", "gdp_per_capita", "population_density", "bus_network_density"):
        if key in inputs.scalars:
            slots[key] = inputs.scalars[key]
    for key in ("reserved_1", "reserved_2"):
        slots[key] = inputs.reserved.get(key, 0.0)
    return {k: np.broadcast_to(np.asarray(v, dtype=np.float64), (n,)).copy() for k, v in slots.items()}


def assemble_static_vector(values: Mapping[str, object], n_stations: int,
                           slots: Sequence[str] = STATIC_SLOTS) -> np.ndarray:
    """Stack named slot values into a ``[n_stations, len(slots)]`` matrix.

    Scalars are broadcast to every station row.
    """
    missing = [s for s in slots if s not in values]
    if missing:
        raise DataError(f"static covariate slots not resolvable: {missing}")
    cols = []
    for s in slots:
        v = np.asarray(values[s], dtype=np.float64)
        if v.ndim == 0:
            v = np.full(n_stations, float(v))
        if v.shape != (n_stations,):
            raise DataError(f"slot {s!r} has shape {v.shape}, expected ({n_stations},)")
        cols.append(v)
    return np.stack(cols, axis=1)


def build_static_matrix(inputs: CityInputs, slots: Sequence[str] = STATIC_SLOTS) -> np.ndarray:
    return assemble_static_vector(static_slot_values(inputs), inputs.graph.n, slots)

"""Cross-city station similarity and the source-to-target transformation matrices."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from .data import FlowPanel
from .errors import DataError, ShapeError

TRANSFORM_KINDS = ("AJ", "We", "Si")


def pearson(x, y) -> float:
    """Sample Pearson coefficient; 0 when either sequence is constant."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise DataError(f"pearson needs equal-length 1-d sequences, got {x.shape} and {y.shape}")
    if x.size < 2:
        raise DataError("pearson needs at least 2 observations")
    xc = x - x.mean()
    yc = y - y.mean()
    sx = np.sqrt(np.dot(xc, xc))
    sy = np.sqrt(np.dot(yc, yc))
    if sx == 0 or sy == 0:
        return 0.0
    return float(np.clip(np.dot(xc, yc) / (sx * sy), -1.0, 1.0))


def pearson_matrix(target: np.ndarray, source: np.ndarray) -> np.ndarray:
    """``[G, S]`` Pearson coefficients between rows of two series matrices."""
    target = np.asarray(target, dtype=np.float64)
    source = np.asarray(source, dtype=np.float64)
    if target.shape[1] != source.shape[1]:
        raise DataError("series lengths differ between cities")
    if target.shape[1] < 2:
        raise DataError("pearson needs at least 2 observations")

    def unit_rows(a):
        c = a - a.mean(axis=1, keepdims=True)
        norm = np.sqrt(np.einsum("ij,ij->i", c, c))
        return np.divide(c, norm[:, None], out=np.zeros_like(c), where=norm[:, None] > 0)

    return np.clip(unit_rows(target) @ unit_rows(source).T, -1.0, 1.0)


@dataclass(frozen=True, eq=False)
class StationMatch:
    """Similarity ``Si``, adjacency ``AJ`` and weight ``We``; rows are target stations."""

    Si: np.ndarray
    AJ: np.ndarray
    We: np.ndarray
    pairs: np.ndarray                      # pairs[g] = index of the best source station
    target_ids: tuple[str, ...] = ()
    source_ids: tuple[str, ...] = ()

    @classmethod
    def from_similarity(cls, Si: np.ndarray, target_ids=(), source_ids=()) -> "StationMatch":
        Si = np.asarray(Si, dtype=np.float64)
        if Si.ndim != 2 or 0 in Si.shape:
            raise DataError("similarity matrix must be a non-empty 2-d array")
        pairs = np.argmax(Si, axis=1)      # first maximum wins ties
        AJ = np.zeros_like(Si)
        AJ[np.arange(Si.shape[0]), pairs] = 1.0
        return cls(Si, AJ, Si * AJ, pairs, tuple(target_ids), tuple(source_ids))

    @property
    def G(self) -> int:
        return self.Si.shape[0]

    @property
    def S(self) -> int:
        return self.Si.shape[1]

    @property
    def pair_similarity(self) -> np.ndarray:
        return self.Si[np.arange(self.G), self.pairs]

    def operator(self, kind: str, raw_si: bool = False) -> np.ndarray:
        """The ``[G, S]`` matrix used to carry source arrays onto target stations.

        ``Si`` is clipped at 0 and row-normalized unless ``raw_si``; rows with no
        positive similarity become zero.
        """
        if kind == "AJ":
            return self.AJ
        if kind == "We":
            return self.We
        if kind == "Si":
            if raw_si:
                return self.Si
            pos = np.clip(self.Si, 0.0, None)
            total = pos.sum(axis=1, keepdims=True)
            return np.divide(pos, total, out=np.zeros_like(pos), where=total > 0)
        raise ValueError(f"unknown transform kind {kind!r}; expected one of {TRANSFORM_KINDS}")

    def to_csv(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for name in ("Si", "AJ", "We"):
            df = pd.DataFrame(getattr(self, name), index=list(self.target_ids) or None,
                              columns=list(self.source_ids) or None)
            df.index.name = "target_station"
            df.to_csv(out / f"{name}.csv", float_format="%.10g", lineterminator="\n")
        pd.DataFrame({
            "target_station": list(self.target_ids) or range(self.G),
            "source_station": [self.source_ids[p] for p in self.pairs] if self.source_ids else self.pairs,
            "similarity": self.pair_similarity,
        }).to_csv(out / "pairs.csv", index=False, float_format="%.10g", lineterminator="\n")


def build_match(source: FlowPanel, target: FlowPanel, train_range: range | slice) -> StationMatch:
    """Match every target station to its most correlated source station.

    Only periods inside ``train_range`` are read.
    """
    if source.granularity_minutes != target.granularity_minutes:
        raise DataError("source and target panels differ in granularity")
    if isinstance(train_range, range):
        train_range = slice(train_range.start, train_range.stop)
    xs = source.values[:, train_range]
    xg = target.values[:, train_range]
    if xs.shape[1] == 0 or xg.shape[1] == 0:
        raise DataError("empty training range for station matching")
    if xs.shape[1] != xg.shape[1]:
        raise DataError("training range covers a different number of periods in each city")
    return StationMatch.from_similarity(
        pearson_matrix(xg, xs), target.stations.station_ids, source.stations.station_ids
    )


def transform(source_array: np.ndarray, kind: str, match: StationMatch, raw_si: bool = False) -> np.ndarray:
    """Map a source-indexed array ``[..., S, k]`` (or ``[S]``) onto target stations."""
    x = np.asarray(source_array)
    station_axis = 0 if x.ndim == 1 else -2
    if x.shape[station_axis] != match.S:
        raise ShapeError(f"source array has {x.shape[station_axis]} station rows, match expects {match.S}")
    op = match.operator(kind, raw_si)
    if x.ndim == 1:
        return op @ x
    return np.einsum("gs,...sk->...gk", op, x)

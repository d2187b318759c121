"""Hyperparameters and the mini-batch loop shared by every model."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from .data import FeatureWindows
from .errors import DataError, DivergenceError
from .nn import Adam, Module, child_rng


@dataclass(frozen=True)
class HyperParams:
    epochs: int = 100
    batch: int = 256            # time periods per optimizer step
    lr: float = 1e-3
    hidden: int = 128
    emb: int = 128
    dropout: float = 0.0
    activation: str = "relu"
    seed: int = 0
    dtype: str = "float64"

    def __post_init__(self):
        if self.epochs < 0 or self.batch < 1 or self.lr <= 0:
            raise ValueError("epochs >= 0, batch >= 1 and lr > 0 are required")
        if self.hidden < 1 or self.emb < 1:
            raise ValueError("hidden and emb must be positive")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        return config_hash(self.to_dict())


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def run_epochs(
    n_items: int,
    hp: HyperParams,
    modules: Sequence[Module],
    step: Callable[[np.ndarray], float],
    stream: str = "batches",
) -> list[float]:
    """Shuffle ``n_items`` periods each epoch and call ``step`` per mini-batch.

    ``step`` runs forward and backward for the batch indices and returns the
    batch loss; gradients are zeroed before and Adam applied after each call.
    Returns the size-weighted mean loss per epoch.
    """
    if n_items < 1:
        raise DataError("no training periods")
    opt = Adam(modules, lr=hp.lr)
    rng = child_rng(hp.seed, stream)
    history = []
    for _ in range(hp.epochs):
        order = rng.permutation(n_items)
        total = 0.0
        for start in range(0, n_items, hp.batch):
            idx = order[start:start + hp.batch]
            for m in modules:
                m.zero_grad()
            loss = step(idx)
            if not np.isfinite(loss):
                raise DivergenceError("loss became non-finite", step=opt.t + 1)
            opt.step()
            total += loss * idx.size
        history.append(total / n_items)
    return history


def check_aligned(source: FeatureWindows, target: FeatureWindows) -> None:
    if source.t_index.shape != target.t_index.shape or np.any(source.t_index != target.t_index):
        raise DataError("source and target windows cover different periods")


def cast(windows: FeatureWindows, dtype) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    return (windows.L.astype(dtype, copy=False), windows.A.astype(dtype, copy=False),
            windows.D.astype(dtype, copy=False), windows.target.astype(dtype, copy=False))


def predict_batched(n_items: int, fn: Callable[[np.ndarray], np.ndarray], batch: int = 512) -> np.ndarray:
    return np.concatenate([fn(np.arange(s, min(s + batch, n_items))) for s in range(0, n_items, batch)])

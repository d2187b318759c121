"""Single-city and cross-city reference models: NF, DF, FF, PF, FT-P and FT-F.

All models read normalized :class:`FeatureWindows` and predict the normalized
target flow of every target station, ``[n_periods, G]``. Source windows must
cover the same periods as the target windows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import FeatureWindows
from .errors import DataError
from .matching import TRANSFORM_KINDS, StationMatch
from .nn import FeatureNetwork, Module, child_rng, mae_loss
from .training import HyperParams, cast, check_aligned, predict_batched, run_epochs

REGIMES = ("NF", "DF", "FF", "PF", "FT-P", "FT-F")
_PREFIX = {"MLP": "ML", "LSTM": "LS"}


@dataclass(frozen=True)
class FusionConfig:
    regime: str
    transform_kind: str | None = None
    base_kind: str = "MLP"

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}")
        if self.base_kind not in _PREFIX:
            raise ValueError(f"unknown base kind {self.base_kind!r}")
        needs = self.regime in ("DF", "FF", "PF")
        if needs and self.transform_kind not in TRANSFORM_KINDS:
            raise ValueError(f"{self.regime} needs a transform kind in {TRANSFORM_KINDS}")
        if not needs and self.transform_kind is not None:
            raise ValueError(f"{self.regime} takes no transform kind")

    @property
    def key(self) -> str:
        k = self.regime.lower().replace("-", "_")
        return f"{k}_{self.transform_kind.lower()}" if self.transform_kind else k

    @property
    def label(self) -> str:
        """Model name as printed in the comparison tables, e.g. ``MLDF_AJ``."""
        p = _PREFIX[self.base_kind]
        if self.regime == "NF":
            return self.base_kind
        if self.regime.startswith("FT"):
            return f"{p}_{self.regime}"
        return f"{p}{self.regime}_{self.transform_kind}"


def table3_grid(base_kind: str = "MLP") -> list[FusionConfig]:
    """Every reference configuration for one base predictor kind."""
    grid = [FusionConfig("NF", None, base_kind)]
    for regime in ("DF", "FF", "PF"):
        grid += [FusionConfig(regime, k, base_kind) for k in TRANSFORM_KINDS]
    grid += [FusionConfig("FT-P", None, base_kind), FusionConfig("FT-F", None, base_kind)]
    return grid


def _net(kind, n_in, n_out, hp: HyperParams, name: str) -> FeatureNetwork:
    return FeatureNetwork(kind, n_in, n_out, hp.hidden, child_rng(hp.seed, name),
                          hp.dropout, hp.activation, hp.np_dtype)


class LastValueModel:
    """Naive reference: the most recent observed flow."""

    label = "LastValue"
    key = "last_value"

    def fit(self, target, source=None, match=None):
        return []

    def modules(self) -> dict[str, Module]:
        return {}

    def predict(self, target: FeatureWindows, source=None) -> np.ndarray:
        return target.L[:, :, target.h - 1].copy()


class NFModel:
    """Base predictor on the target city's own flow windows."""

    def __init__(self, base_kind: str = "MLP", h: int = 5, hp: HyperParams = HyperParams()):
        self.config = FusionConfig("NF", None, base_kind)
        self.hp = hp
        self.pre = _net(base_kind, h + 1, 1, hp, "pre")

    def fit(self, target: FeatureWindows, source=None, match=None) -> list[float]:
        L, _, _, y = cast(target, self.hp.np_dtype)

        def step(idx):
            pred = self.pre(L[idx], train=True)[..., 0]
            loss, g = mae_loss(pred, y[idx])
            self.pre.backward(g[..., None])
            return loss

        return run_epochs(len(target), self.hp, [self.pre], step)

    def predict(self, target: FeatureWindows, source=None) -> np.ndarray:
        L = target.L.astype(self.hp.np_dtype)
        return predict_batched(len(target), lambda i: self.pre(L[i])[..., 0]).astype(np.float64)

    def modules(self) -> dict[str, Module]:
        return {"pre": self.pre}


class DFModel:
    """Base predictor on the elementwise sum of transformed source and target inputs."""

    def __init__(self, transform_kind: str, base_kind: str = "MLP", h: int = 5,
                 hp: HyperParams = HyperParams(), raw_si: bool = False):
        self.config = FusionConfig("DF", transform_kind, base_kind)
        self.hp = hp
        self.raw_si = raw_si
        self.pre = _net(base_kind, h + 1, 1, hp, "pre")
        self.op = None

    def fused_input(self, source: FeatureWindows, target: FeatureWindows) -> np.ndarray:
        check_aligned(source, target)
        dt = self.hp.np_dtype
        return (np.einsum("gs,nsk->ngk", self.op, source.L.astype(dt)) + target.L.astype(dt)).astype(dt)

    def fit(self, target: FeatureWindows, source: FeatureWindows, match: StationMatch) -> list[float]:
        self.op = match.operator(self.config.transform_kind, self.raw_si).astype(self.hp.np_dtype)
        X = self.fused_input(source, target)
        y = target.target.astype(self.hp.np_dtype)

        def step(idx):
            pred = self.pre(X[idx], train=True)[..., 0]
            loss, g = mae_loss(pred, y[idx])
            self.pre.backward(g[..., None])
            return loss

        return run_epochs(len(target), self.hp, [self.pre], step)

    def predict(self, target: FeatureWindows, source: FeatureWindows) -> np.ndarray:
        X = self.fused_input(source, target)
        return predict_batched(len(target), lambda i: self.pre(X[i])[..., 0]).astype(np.float64)

    def modules(self) -> dict[str, Module]:
        return {"pre": self.pre}


class FFModel:
    """Concatenate target embeddings with transformed source embeddings, then predict."""

    def __init__(self, transform_kind: str, base_kind: str = "MLP", h: int = 5,
                 hp: HyperParams = HyperParams(), raw_si: bool = False):
        self.config = FusionConfig("FF", transform_kind, base_kind)
        self.hp = hp
        self.raw_si = raw_si
        self.feat_s = _net(base_kind, h + 1, hp.emb, hp, "ff_source")
        self.feat_g = _net(base_kind, h + 1, hp.emb, hp, "ff_target")
        self.head = _net("MLP", 2 * hp.emb, 1, hp, "ff_head")
        self.op = None

    def _forward(self, LS, LG, train=False):
        es = self.feat_s(LS, train)
        eg = self.feat_g(LG, train)
        z = np.concatenate([np.einsum("gs,nsk->ngk", self.op, es), eg], axis=-1)
        return self.head(z, train)[..., 0]

    def _backward(self, g):
        dz = self.head.backward(g[..., None])
        emb = self.hp.emb
        self.feat_g.backward(dz[..., emb:])
        self.feat_s.backward(np.einsum("gs,ngk->nsk", self.op, dz[..., :emb]))

    def fit(self, target: FeatureWindows, source: FeatureWindows, match: StationMatch) -> list[float]:
        check_aligned(source, target)
        dt = self.hp.np_dtype
        self.op = match.operator(self.config.transform_kind, self.raw_si).astype(dt)
        LS, LG, y = source.L.astype(dt), target.L.astype(dt), target.target.astype(dt)

        def step(idx):
            loss, g = mae_loss(self._forward(LS[idx], LG[idx], train=True), y[idx])
            self._backward(g)
            return loss

        return run_epochs(len(target), self.hp, [self.feat_s, self.feat_g, self.head], step)

    def predict(self, target: FeatureWindows, source: FeatureWindows) -> np.ndarray:
        check_aligned(source, target)
        dt = self.hp.np_dtype
        LS, LG = source.L.astype(dt), target.L.astype(dt)
        return predict_batched(len(target), lambda i: self._forward(LS[i], LG[i])).astype(np.float64)

    def modules(self) -> dict[str, Module]:
        return {"ff_source": self.feat_s, "ff_target": self.feat_g, "ff_head": self.head}


class StationAffine(Module):
    """Per-station weights combining two prediction streams: ``a*p + b*q``."""

    def __init__(self, n: int, a0: float = 1.0, b0: float = 0.0, dtype=np.float64):
        super().__init__()
        self.add_param("a", np.full(n, a0, dtype=dtype))
        self.add_param("b", np.full(n, b0, dtype=dtype))
        self._cache = None

    def forward(self, pq, train=False):
        p, q = pq
        self._cache = (p, q)
        return self.params["a"] * p + self.params["b"] * q

    def backward(self, grad):
        p, q = self._cache
        self._cache = None
        self.grads["a"] += (grad * p).reshape(-1, p.shape[-1]).sum(axis=0)
        self.grads["b"] += (grad * q).reshape(-1, q.shape[-1]).sum(axis=0)
        return grad * self.params["a"], grad * self.params["b"]


def pretrain_source_predictor(source: FeatureWindows, base_kind: str, h: int, hp: HyperParams,
                              cache: dict | None = None) -> FeatureNetwork:
    """NF-style predictor trained on the source city (shared by PF and FT-P)."""
    key = ("pre", base_kind, h, hp.config_hash())
    if cache is not None and key in cache:
        return cache[key]
    model = NFModel(base_kind, h, hp)
    model.fit(source)
    if cache is not None:
        cache[key] = model.pre
    return model.pre


class PFModel:
    """Fuse target predictions with transformed predictions of a frozen source predictor."""

    def __init__(self, transform_kind: str, base_kind: str = "MLP", h: int = 5,
                 hp: HyperParams = HyperParams(), raw_si: bool = False,
                 fixed_weights: tuple[float, float] | None = None, cache: dict | None = None):
        self.config = FusionConfig("PF", transform_kind, base_kind)
        self.hp = hp
        self.h = h
        self.raw_si = raw_si
        self.fixed_weights = fixed_weights
        self.cache = cache
        self.pre = _net(base_kind, h + 1, 1, hp, "pre")
        self.source_pre = None
        self.fusion = None
        self.op = None

    def _source_stream(self, source: FeatureWindows) -> np.ndarray:
        LS = source.L.astype(self.hp.np_dtype)
        ps = predict_batched(len(source), lambda i: self.source_pre(LS[i])[..., 0])
        return ps @ self.op.T

    def fit(self, target: FeatureWindows, source: FeatureWindows, match: StationMatch) -> list[float]:
        check_aligned(source, target)
        dt = self.hp.np_dtype
        self.op = match.operator(self.config.transform_kind, self.raw_si).astype(dt)
        self.source_pre = pretrain_source_predictor(source, self.config.base_kind, self.h, self.hp, self.cache)
        a0, b0 = self.fixed_weights or (1.0, 0.0)
        self.fusion = StationAffine(match.G, a0, b0, dt)
        Q = self._source_stream(source)
        LG, y = target.L.astype(dt), target.target.astype(dt)
        trainable = [self.pre] if self.fixed_weights else [self.pre, self.fusion]

        def step(idx):
            pred = self.fusion((self.pre(LG[idx], train=True)[..., 0], Q[idx]))
            loss, g = mae_loss(pred, y[idx])
            gp, _ = self.fusion.backward(g)
            self.pre.backward(gp[..., None])
            return loss

        return run_epochs(len(target), self.hp, trainable, step)

    def predict(self, target: FeatureWindows, source: FeatureWindows) -> np.ndarray:
        check_aligned(source, target)
        Q = self._source_stream(source)
        LG = target.L.astype(self.hp.np_dtype)
        return predict_batched(
            len(target), lambda i: self.fusion((self.pre(LG[i])[..., 0], Q[i]))).astype(np.float64)

    def modules(self) -> dict[str, Module]:
        out = {"pre": self.pre, "source_pre": self.source_pre, "fusion": self.fusion}
        return {k: v for k, v in out.items() if v is not None}


class FTModel:
    """Fine-tuning: FT-P starts from the source-trained predictor, FT-F from its feature network."""

    def __init__(self, variant: str, base_kind: str = "MLP", h: int = 5,
                 hp: HyperParams = HyperParams(), cache: dict | None = None):
        if variant not in ("FT-P", "FT-F"):
            raise ValueError("variant must be FT-P or FT-F")
        self.config = FusionConfig(variant, None, base_kind)
        self.hp = hp
        self.h = h
        self.cache = cache
        if variant == "FT-P":
            self.nets = [_net(base_kind, h + 1, 1, hp, "pre")]
        else:
            self.nets = [_net(base_kind, h + 1, hp.emb, hp, "ft_feature"),
                            _net("MLP", hp.emb, 1, hp, "ft_head")]
        self.source_state = None

    def _forward(self, L, train=False):
        x = L
        for m in self.nets:
            x = m(x, train)
        return x[..., 0]

    def _backward(self, g):
        g = g[..., None]
        for m in reversed(self.nets):
            g = m.backward(g)

    def _train(self, windows: FeatureWindows) -> list[float]:
        dt = self.hp.np_dtype
        L, y = windows.L.astype(dt), windows.target.astype(dt)

        def step(idx):
            loss, g = mae_loss(self._forward(L[idx], train=True), y[idx])
            self._backward(g)
            return loss

        return run_epochs(len(windows), self.hp, self.nets, step)

    def pretrain(self, source: FeatureWindows) -> None:
        """Train on the source city and keep the transferable part as initial values."""
        if self.config.regime == "FT-P":
            net = pretrain_source_predictor(source, self.config.base_kind, self.h, self.hp, self.cache)
            self.source_state = {"pre": net.state_dict()}
            self.nets[0].load_state_dict(self.source_state["pre"])
            return
        key = ("ft_f", self.config.base_kind, self.h, self.hp.config_hash())
        if self.cache is not None and key in self.cache:
            self.source_state = self.cache[key]
        else:
            src = FTModel("FT-F", self.config.base_kind, self.h, self.hp)
            src.nets[1] = _net("MLP", self.hp.emb, 1, self.hp, "ft_source_head")
            src._train(source)
            self.source_state = {"feature": src.nets[0].state_dict(),
                                 "head": src.nets[1].state_dict()}
            if self.cache is not None:
                self.cache[key] = self.source_state
        self.nets[0].load_state_dict(self.source_state["feature"])

    def fit(self, target: FeatureWindows, source: FeatureWindows | None = None, match=None) -> list[float]:
        if self.source_state is None:
            if source is None:
                raise DataError("fine-tuning needs a source pre-training checkpoint or source data")
            self.pretrain(source)
        return self._train(target)

    def predict(self, target: FeatureWindows, source=None) -> np.ndarray:
        L = target.L.astype(self.hp.np_dtype)
        return predict_batched(len(target), lambda i: self._forward(L[i])).astype(np.float64)

    def modules(self) -> dict[str, Module]:
        names = ("pre",) if self.config.regime == "FT-P" else ("ft_feature", "ft_head")
        return dict(zip(names, self.nets))


def make_baseline(config: FusionConfig, h: int = 5, hp: HyperParams = HyperParams(),
                  raw_si: bool = False, cache: dict | None = None):
    if config.regime == "NF":
        return NFModel(config.base_kind, h, hp)
    if config.regime == "DF":
        return DFModel(config.transform_kind, config.base_kind, h, hp, raw_si)
    if config.regime == "FF":
        return FFModel(config.transform_kind, config.base_kind, h, hp, raw_si)
    if config.regime == "PF":
        return PFModel(config.transform_kind, config.base_kind, h, hp, raw_si, cache=cache)
    return FTModel(config.regime, config.base_kind, h, hp, cache)

"""METcross: source-city pre-training and target-city fine-tuning.

Pre-training learns a dynamic-covariate network ``F_D``, an encoder-decoder
``F_ED`` and a prediction head on the source city. Fine-tuning copies
``F_D``/``F_ED`` into target-side networks, keeps the source copies frozen to
produce source embeddings, and trains the target copies together with a
basic predictor ``F_b``, a transformation network ``F_tr`` and an initial
prediction network ``F_I`` under the weighted joint loss.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from .data import FeatureWindows
from .errors import DataError, ShapeError
from .matching import StationMatch
from .nn import (EncoderDecoder, FeatureNetwork, Module, child_rng, load_checkpoint,
                 mae_loss, read_checkpoint_meta, save_checkpoint)
from .training import HyperParams, check_aligned, predict_batched, run_epochs


@dataclass(frozen=True)
class MetcrossConfig(HyperParams):
    w: float = 0.5
    n_e: int = 1
    n_d: int = 1
    h: int = 5
    base_kind: str = "MLP"
    with_residual: bool = True
    with_covariates: bool = True
    align: str = "We"
    pretrain_epochs: int | None = None

    def __post_init__(self):
        super().__post_init__()
        if self.pretrain_epochs is not None and self.pretrain_epochs < 0:
            raise ValueError("pretrain_epochs must be >= 0")
        if not 0.0 <= self.w <= 1.0:
            raise ValueError(f"balance coefficient w={self.w} outside [0, 1]")
        if self.n_e < 1 or self.n_d < 1 or self.h < 1:
            raise ValueError("n_e, n_d and h must be >= 1")
        if self.align not in ("We", "AJ"):
            raise ValueError("align must be 'We' or 'AJ'")

    @classmethod
    def from_dict(cls, d: dict) -> "MetcrossConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def input_width(self, a_dim: int, d_dim: int) -> int:
        return self.h + 1 + (a_dim + d_dim if self.with_covariates else 0)


def _net(kind, n_in, n_out, cfg: MetcrossConfig, name: str) -> FeatureNetwork:
    return FeatureNetwork(kind, n_in, n_out, cfg.hidden, child_rng(cfg.seed, name),
                          cfg.dropout, cfg.activation, cfg.np_dtype)


def replicate(d_tilde: np.ndarray, n_stations: int) -> np.ndarray:
    """``[..., D]`` network-wide covariates copied onto every station row."""
    return np.broadcast_to(d_tilde[..., None, :], (*d_tilde.shape[:-1], n_stations, d_tilde.shape[-1]))


def dynamic_feature_forward(F_D: FeatureNetwork, D_window: np.ndarray, train: bool = False) -> np.ndarray:
    """Estimate each upcoming covariate from its window, ``[..., D, h+1] -> [..., D]``."""
    if D_window.shape[-1] != F_D.input_dim:
        raise ShapeError(f"covariate windows are {D_window.shape[-1]} wide, F_D expects {F_D.input_dim}")
    return F_D(D_window, train)[..., 0]


class CityEncoder(Module):
    """``F_D`` plus ``F_ED``: station inputs to feature embeddings."""

    def __init__(self, cfg: MetcrossConfig, a_dim: int, d_dim: int, prefix: str = "source"):
        super().__init__()
        self.cfg = cfg
        self.a_dim, self.d_dim = a_dim, d_dim
        self.use_cov = cfg.with_covariates
        self.F_D = None
        if self.use_cov and d_dim:
            self.F_D = self.add_child("F_D", _net(cfg.base_kind, cfg.h + 1, 1, cfg, f"{prefix}.F_D"))
        self.F_ED = self.add_child("F_ED", EncoderDecoder(
            cfg.n_e, cfg.n_d, cfg.input_width(a_dim, d_dim), cfg.emb, cfg.hidden,
            child_rng(cfg.seed, f"{prefix}.F_ED"), cfg.dropout, cfg.activation, cfg.np_dtype))
        self._n = None

    def inputs(self, L, A, D, train=False):
        """Concatenated encoder input ``[..., n, (h+1)+A+D]``."""
        if not self.use_cov:
            return L
        n = L.shape[-2]
        parts = [L, np.broadcast_to(A, (*L.shape[:-2], *A.shape))]
        if self.F_D is not None:
            parts.append(replicate(dynamic_feature_forward(self.F_D, D, train), n))
        return np.concatenate(parts, axis=-1)

    def forward(self, LAD, train=False):
        L, A, D = LAD
        self._n = L.shape[-2]
        return self.F_ED(self.inputs(L, A, D, train), train)

    def backward(self, grad):
        dx = self.F_ED.backward(grad)
        if self.F_D is not None:
            d_rep = dx[..., -self.d_dim:].sum(axis=-2)
            self.F_D.backward(d_rep[..., None])
        return dx


@dataclass(eq=False)
class PretrainedSource:
    encoder: CityEncoder
    head: FeatureNetwork
    config: MetcrossConfig
    a_dim: int
    d_dim: int
    history: list

    @property
    def config_hash(self) -> str:
        return self.config.config_hash()

    def predict(self, windows: FeatureWindows) -> np.ndarray:
        dt = self.config.np_dtype
        L, A, D = (windows.L.astype(dt), windows.A.astype(dt), windows.D.astype(dt))
        return predict_batched(
            len(windows), lambda i: self.head(self.encoder((L[i], A, D[i])))[..., 0]).astype(np.float64)

    def save(self, path) -> None:
        meta = {"config": asdict(self.config), "config_hash": self.config_hash, "seed": self.config.seed,
                "a_dim": self.a_dim, "d_dim": self.d_dim, "history": list(map(float, self.history)),
                "kind": "metcross-pretrained-source"}
        save_checkpoint(path, {"encoder": self.encoder, "head": self.head}, meta)

    @classmethod
    def load(cls, path) -> "PretrainedSource":
        meta = read_checkpoint_meta(path)
        if meta.get("kind") != "metcross-pretrained-source":
            raise DataError(f"{path} is not a METcross source checkpoint")
        cfg = MetcrossConfig.from_dict(meta["config"])
        enc = CityEncoder(cfg, meta["a_dim"], meta["d_dim"], "source")
        head = _net("MLP", cfg.emb, 1, cfg, "source.Pre")
        load_checkpoint(path, {"encoder": enc, "head": head})
        return cls(enc, head, cfg, meta["a_dim"], meta["d_dim"], meta["history"])


def _dims(windows: FeatureWindows) -> tuple[int, int]:
    return windows.A.shape[1], windows.D.shape[1]


def pretrain(source: FeatureWindows, cfg: MetcrossConfig) -> PretrainedSource:
    """Fit ``F_D``, ``F_ED`` and the source prediction head on source-city MAE."""
    a_dim, d_dim = _dims(source)
    enc = CityEncoder(cfg, a_dim, d_dim, "source")
    head = _net("MLP", cfg.emb, 1, cfg, "source.Pre")
    dt = cfg.np_dtype
    L, A, D, y = (source.L.astype(dt), source.A.astype(dt), source.D.astype(dt), source.target.astype(dt))

    def step(idx):
        pred = head(enc((L[idx], A, D[idx]), train=True), train=True)[..., 0]
        loss, g = mae_loss(pred, y[idx])
        enc.backward(head.backward(g[..., None]))
        return loss

    n_epochs = cfg.epochs if cfg.pretrain_epochs is None else cfg.pretrain_epochs
    history = run_epochs(len(source), replace(cfg, epochs=n_epochs), [enc, head], step, stream="pretrain")
    return PretrainedSource(enc, head, cfg, a_dim, d_dim, history)


def embedding_loss(Fa_G: np.ndarray, Fa_S: np.ndarray, match: StationMatch,
                   return_grad: bool = False, paired: bool = False):
    """Similarity-weighted Euclidean distance between paired station embeddings.

    ``Fa_G`` is ``[..., G, emb]`` and ``Fa_S`` is ``[..., S, emb]``, or already
    gathered to the paired rows (``[..., G, emb]``) when ``paired``. Negative
    pair similarities are clamped to 0. The mean runs over target stations
    and any leading axes.
    """
    if match.pairs.shape[0] != Fa_G.shape[-2]:
        raise DataError(f"match covers {match.pairs.shape[0]} target stations, embeddings have {Fa_G.shape[-2]}")
    if not paired:
        if Fa_S.shape[-2] != match.S:
            raise DataError(f"source embeddings have {Fa_S.shape[-2]} rows, match expects {match.S}")
        Fa_S = Fa_S[..., match.pairs, :]
    weights = np.clip(match.pair_similarity, 0.0, None).astype(Fa_G.dtype)
    diff = Fa_G - Fa_S
    dist = np.sqrt(np.einsum("...k,...k->...", diff, diff))
    count = dist.size
    value = float((weights * dist).sum() / count)
    if not return_grad:
        return value
    safe = np.where(dist > 0, dist, 1.0)
    grad = np.where(dist[..., None] > 0, diff / safe[..., None], 0.0) * (weights[:, None] / count)
    return value, grad


def joint_loss(loss_r: float, loss_st: float, w: float) -> float:
    if not 0.0 <= w <= 1.0:
        raise ValueError(f"balance coefficient w={w} outside [0, 1]")
    return (1.0 - w) * loss_r + w * loss_st


class FusionHead(Module):
    """``F_b``, ``F_tr`` and ``F_I`` with the residual addition."""

    def __init__(self, cfg: MetcrossConfig):
        super().__init__()
        self.with_residual = cfg.with_residual
        self.F_b = self.add_child("F_b", _net(cfg.base_kind, cfg.h + 1, 1, cfg, "F_b"))
        self.F_tr = self.add_child("F_tr", _net("MLP", cfg.emb, cfg.emb, cfg, "F_tr"))
        self.F_I = self.add_child("F_I", _net("MLP", 2 * cfg.emb, 1, cfg, "F_I").zero_output())
        self.emb = cfg.emb
        self.last_base = None
        self.last_initial = None

    def forward(self, inputs, train=False):
        """``(aligned source embeddings, target embeddings, L^G) -> x_hat``."""
        S_al, Fa_G, LG = inputs
        s_prime = self.F_tr(S_al, train)
        initial = self.F_I(np.concatenate([s_prime, Fa_G], axis=-1), train)[..., 0]
        self.last_initial = initial
        if not self.with_residual:
            self.last_base = None
            return initial
        base = self.F_b(LG, train)[..., 0]
        self.last_base = base
        return base + initial

    def backward(self, grad):
        """Returns the gradient with respect to the target embeddings."""
        if self.with_residual:
            self.F_b.backward(grad[..., None])
        dz = self.F_I.backward(grad[..., None])
        self.F_tr.backward(dz[..., :self.emb])
        return dz[..., self.emb:]


def fuse_predict(Fa_S: np.ndarray, Fa_G: np.ndarray, L_G: np.ndarray, match: StationMatch,
                 head: FusionHead, align: str = "We") -> np.ndarray:
    """Final target prediction from source/target embeddings and target flow windows."""
    op = match.operator(align).astype(Fa_S.dtype)
    return head((np.einsum("gs,...sk->...gk", op, Fa_S), Fa_G, L_G))


@dataclass(eq=False)
class MetcrossModel:
    source: PretrainedSource
    encoder: CityEncoder
    head: FusionHead
    match: StationMatch
    config: MetcrossConfig
    history: list
    zero_source: bool = False

    def source_embeddings(self, source: FeatureWindows) -> tuple[np.ndarray, np.ndarray]:
        """Frozen source embeddings carried to target rows: (aligned, paired)."""
        dt = self.config.np_dtype
        op = self.match.operator(self.config.align)
        needed = np.union1d(np.flatnonzero(np.any(op != 0, axis=0)), self.match.pairs)
        L = source.L[:, needed].astype(dt)
        A = source.A[needed].astype(dt)
        D = source.D.astype(dt)
        E = predict_batched(len(source), lambda i: self.source.encoder((L[i], A, D[i])))
        if self.zero_source:
            E = np.zeros_like(E)
        full = np.zeros((len(source), self.match.S, E.shape[-1]), dtype=dt)
        full[:, needed] = E
        aligned = np.einsum("gs,nsk->ngk", op.astype(dt), full)
        return aligned, full[:, self.match.pairs]

    def predict(self, target: FeatureWindows, source: FeatureWindows) -> np.ndarray:
        check_aligned(source, target)
        dt = self.config.np_dtype
        S_al, _ = self.source_embeddings(source)
        L, A, D = target.L.astype(dt), target.A.astype(dt), target.D.astype(dt)

        def fn(i):
            return self.head((S_al[i], self.encoder((L[i], A, D[i])), L[i]))

        return predict_batched(len(target), fn).astype(np.float64)

    def base_predictions(self, target: FeatureWindows) -> np.ndarray:
        L = target.L.astype(self.config.np_dtype)
        return predict_batched(len(target), lambda i: self.head.F_b(L[i])[..., 0]).astype(np.float64)

    def modules(self) -> dict[str, Module]:
        return {"encoder": self.encoder, "head": self.head, "source_encoder": self.source.encoder}

    def save(self, path) -> None:
        meta = {"config": asdict(self.config), "config_hash": self.config.config_hash(),
                "seed": self.config.seed, "kind": "metcross-target",
                "history": [list(map(float, h)) for h in self.history]}
        save_checkpoint(path, {"encoder": self.encoder, "head": self.head}, meta)


def finetune(target: FeatureWindows, source: FeatureWindows, pretrained: PretrainedSource,
             match: StationMatch, cfg: MetcrossConfig | None = None,
             zero_source: bool = False) -> MetcrossModel:
    """Train the target-city model under ``(1-w)*loss_r + w*loss_st``.

    History entries are ``(loss_f, loss_r, loss_st)`` epoch means.
    """
    cfg = pretrained.config if cfg is None else cfg
    check_aligned(source, target)
    a_dim, d_dim = _dims(target)
    if (a_dim, d_dim) != (pretrained.a_dim, pretrained.d_dim):
        raise ShapeError(f"target covariate widths {(a_dim, d_dim)} differ from the source checkpoint "
                         f"{(pretrained.a_dim, pretrained.d_dim)}")
    if pretrained.config.with_covariates != cfg.with_covariates or pretrained.config.emb != cfg.emb:
        raise ShapeError("fine-tuning config is incompatible with the source checkpoint")
    if match.G != target.n_stations or match.S != source.n_stations:
        raise DataError("station match does not fit the given cities")

    encoder = copy.deepcopy(pretrained.encoder)
    head = FusionHead(cfg)
    model = MetcrossModel(pretrained, encoder, head, match, cfg, [], zero_source)
    S_al, S_pair = model.source_embeddings(source)
    dt = cfg.np_dtype
    L, A, D, y = target.L.astype(dt), target.A.astype(dt), target.D.astype(dt), target.target.astype(dt)
    w = cfg.w
    parts = []

    def step(idx):
        Fa_G = encoder((L[idx], A, D[idx]), train=True)
        pred = head((S_al[idx], Fa_G, L[idx]), train=True)
        loss_r, g_pred = mae_loss(pred, y[idx])
        loss_st, g_st = embedding_loss(Fa_G, S_pair[idx], match, return_grad=True, paired=True)
        dFa = head.backward((1.0 - w) * g_pred) + w * g_st
        encoder.backward(dFa.astype(dt, copy=False))
        parts.append((idx.size, loss_r, loss_st))
        return joint_loss(loss_r, loss_st, w)

    n = len(target)
    totals = run_epochs(n, cfg, [encoder, head], step, stream="finetune")
    per_epoch = int(np.ceil(n / cfg.batch))
    for e, loss_f in enumerate(totals):
        chunk = parts[e * per_epoch:(e + 1) * per_epoch]
        model.history.append((loss_f,
                              sum(k * r for k, r, _ in chunk) / n,
                              sum(k * s for k, _, s in chunk) / n))
    return model

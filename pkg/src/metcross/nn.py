"""Small numpy networks with hand-written backward passes and an Adam optimizer.

Every module caches what it needs during ``forward`` and consumes the cache
in ``backward``, accumulating parameter gradients into persistent buffers.
Networks act on the last axis and treat all leading axes as a batch, so the
same weights are shared by every station row.
"""

from __future__ import annotations

import json
import zlib
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .errors import DivergenceError, ShapeError

NETWORK_KINDS = ("MLP", "LSTM")


def child_rng(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named network, stable across runs."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


class Module:
    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.children: dict[str, Module] = {}

    def add_param(self, name: str, value: np.ndarray) -> np.ndarray:
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)
        return value

    def add_child(self, name: str, module: "Module") -> "Module":
        self.children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray, np.ndarray]]:
        for name, p in self.params.items():
            yield prefix + name, p, self.grads[name]
        for cname, child in self.children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def zero_grad(self) -> None:
        for _, _, g in self.named_parameters():
            g.fill(0.0)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.copy() for name, p, _ in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = {name: p for name, p, _ in self.named_parameters()}
        if set(own) != set(state):
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            raise ShapeError(f"state mismatch: missing {missing[:4]}, unexpected {extra[:4]}")
        for name, p in own.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ShapeError(f"parameter {name}: shape {value.shape} != {p.shape}")
            p[...] = value

    def n_parameters(self) -> int:
        return sum(p.size for _, p, _ in self.named_parameters())

    def forward(self, x, train: bool = False):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def __call__(self, x, train: bool = False):
        return self.forward(x, train)


class Dense(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        bound = 1.0 / np.sqrt(n_in)
        self.add_param("W", rng.uniform(-bound, bound, (n_in, n_out)).astype(dtype))
        self.add_param("b", rng.uniform(-bound, bound, n_out).astype(dtype))
        self._x = None

    def forward(self, x, train=False):
        self._x = x
        return x @ self.params["W"] + self.params["b"]

    def backward(self, grad):
        if self._x is None:
            raise RuntimeError("Dense.backward called without a cached forward pass")
        x, self._x = self._x, None
        self.grads["W"] += x.T @ grad
        self.grads["b"] += grad.sum(axis=0)
        return grad @ self.params["W"].T

    def zero_init(self) -> None:
        self.params["W"].fill(0.0)
        self.params["b"].fill(0.0)


class Activation(Module):
    def __init__(self, kind: str = "relu"):
        super().__init__()
        if kind not in ("relu", "tanh"):
            raise ValueError(f"unknown activation {kind!r}")
        self.kind = kind
        self._cache = None

    def forward(self, x, train=False):
        if self.kind == "relu":
            y = np.maximum(x, 0.0)
            self._cache = x > 0
        else:
            y = np.tanh(x)
            self._cache = y
        return y

    def backward(self, grad):
        if self._cache is None:
            raise RuntimeError("activation backward without forward")
        c, self._cache = self._cache, None
        return grad * c if self.kind == "relu" else grad * (1.0 - c * c)


class Dropout(Module):
    def __init__(self, rate: float, rng: np.random.Generator):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ValueError("dropout rate must be in [0, 1)")
        self.rate = rate
        self.rng = rng
        self._mask = None

    def forward(self, x, train=False):
        if not train or self.rate == 0.0:
            self._mask = None
            return x
        self._mask = (self.rng.random(x.shape) >= self.rate) / (1.0 - self.rate)
        return x * self._mask

    def backward(self, grad):
        return grad if self._mask is None else grad * self._mask


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


class LSTM(Module):
    """Single-layer LSTM returning the final hidden state."""

    def __init__(self, input_size: int, hidden: int, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.hidden = hidden
        bound = 1.0 / np.sqrt(hidden)
        self.add_param("Wx", rng.uniform(-bound, bound, (input_size, 4 * hidden)).astype(dtype))
        self.add_param("Wh", rng.uniform(-bound, bound, (hidden, 4 * hidden)).astype(dtype))
        self.add_param("b", rng.uniform(-bound, bound, 4 * hidden).astype(dtype))
        self._cache = None

    def forward(self, x, train=False):
        # x: [N, T, input_size]
        N, T, _ = x.shape
        H = self.hidden
        Wx, Wh, b = self.params["Wx"], self.params["Wh"], self.params["b"]
        h = np.zeros((N, H), dtype=Wx.dtype)
        c = np.zeros((N, H), dtype=Wx.dtype)
        xz = x @ Wx + b                                   # [N, T, 4H]
        steps = []
        for t in range(T):
            z = xz[:, t] + h @ Wh
            i = _sigmoid(z[:, :H])
            f = _sigmoid(z[:, H:2 * H])
            g = np.tanh(z[:, 2 * H:3 * H])
            o = _sigmoid(z[:, 3 * H:])
            c_prev, h_prev = c, h
            c = f * c_prev + i * g
            tc = np.tanh(c)
            h = o * tc
            steps.append((i, f, g, o, c_prev, h_prev, tc))
        self._cache = (x, steps)
        return h

    def backward(self, grad):
        if self._cache is None:
            raise RuntimeError("LSTM.backward called without a cached forward pass")
        x, steps = self._cache
        self._cache = None
        Wx, Wh = self.params["Wx"], self.params["Wh"]
        dx = np.zeros_like(x)
        dh = grad
        dc = np.zeros_like(grad)
        dz_all = np.empty((x.shape[0], x.shape[1], Wx.shape[1]), dtype=grad.dtype)
        for t in reversed(range(x.shape[1])):
            i, f, g, o, c_prev, h_prev, tc = steps[t]
            dc = dc + dh * o * (1.0 - tc * tc)
            dz = np.concatenate([
                dc * g * i * (1.0 - i),
                dc * c_prev * f * (1.0 - f),
                dc * i * (1.0 - g * g),
                dh * tc * o * (1.0 - o),
            ], axis=1)
            dz_all[:, t] = dz
            self.grads["Wh"] += h_prev.T @ dz
            dh = dz @ Wh.T
            dc = dc * f
        flat = dz_all.reshape(-1, dz_all.shape[2])
        self.grads["Wx"] += x.reshape(-1, x.shape[2]).T @ flat
        self.grads["b"] += flat.sum(axis=0)
        dx[...] = dz_all @ Wx.T
        return dx


class FeatureNetwork(Module):
    """One hidden-layer block: MLP (dense, activation, dense) or LSTM plus linear head.

    The LSTM kind reads the last input axis as a sequence of scalars.
    """

    def __init__(self, kind: str, input_dim: int, output_dim: int, hidden_dim: int = 128,
                 rng: np.random.Generator | None = None, dropout: float = 0.0,
                 activation: str = "relu", dtype=np.float64):
        super().__init__()
        if kind not in NETWORK_KINDS:
            raise ValueError(f"unknown network kind {kind!r}")
        rng = np.random.default_rng(0) if rng is None else rng
        self.kind = kind
        self.input_dim = input_dim
        self.output_dim = output_dim
        self.hidden_dim = hidden_dim
        if kind == "MLP":
            self.hidden = self.add_child("hidden", Dense(input_dim, hidden_dim, rng, dtype))
            self.act = self.add_child("act", Activation(activation))
        else:
            self.hidden = self.add_child("lstm", LSTM(1, hidden_dim, rng, dtype))
        self.drop = self.add_child("drop", Dropout(dropout, rng))
        self.out = self.add_child("out", Dense(hidden_dim, output_dim, rng, dtype))
        self._lead = None

    def forward(self, x, train=False):
        if x.shape[-1] != self.input_dim:
            raise ShapeError(f"{self.kind} network expects input width {self.input_dim}, got {x.shape[-1]}")
        self._lead = x.shape[:-1]
        z = x.reshape(-1, self.input_dim)
        if self.kind == "MLP":
            z = self.act(self.hidden(z))
        else:
            z = self.hidden(z[:, :, None])
        z = self.out(self.drop(z, train))
        return z.reshape(*self._lead, self.output_dim)

    def backward(self, grad):
        g = self.out.backward(grad.reshape(-1, self.output_dim))
        g = self.drop.backward(g)
        if self.kind == "MLP":
            g = self.hidden.backward(self.act.backward(g))
        else:
            g = self.hidden.backward(g)[:, :, 0]
        return g.reshape(*self._lead, self.input_dim)

    def zero_output(self) -> "FeatureNetwork":
        self.out.zero_init()
        return self


class Sequential(Module):
    def __init__(self, *blocks: Module):
        super().__init__()
        self.blocks = [self.add_child(str(i), b) for i, b in enumerate(blocks)]

    def forward(self, x, train=False):
        for b in self.blocks:
            x = b(x, train)
        return x

    def backward(self, grad):
        for b in reversed(self.blocks):
            grad = b.backward(grad)
        return grad


class EncoderDecoder(Module):
    """``n_e`` encoder blocks followed by ``n_d`` decoder blocks, all emitting ``emb`` wide."""

    def __init__(self, n_e: int, n_d: int, input_dim: int, emb: int, hidden_dim: int = 128,
                 rng: np.random.Generator | None = None, dropout: float = 0.0,
                 activation: str = "relu", dtype=np.float64):
        super().__init__()
        if n_e < 1 or n_d < 1:
            raise ValueError("encoder and decoder need at least one block each")
        rng = np.random.default_rng(0) if rng is None else rng
        self.input_dim = input_dim
        self.emb = emb

        def block(n_in):
            return FeatureNetwork("MLP", n_in, emb, hidden_dim, rng, dropout, activation, dtype)

        self.encoder = self.add_child(
            "encoder", Sequential(block(input_dim), *[block(emb) for _ in range(n_e - 1)]))
        self.decoder = self.add_child("decoder", Sequential(*[block(emb) for _ in range(n_d)]))

    @property
    def n_blocks(self) -> int:
        return len(self.encoder.blocks) + len(self.decoder.blocks)

    def forward(self, x, train=False):
        if x.shape[-1] != self.input_dim:
            raise ShapeError(f"encoder-decoder expects input width {self.input_dim}, got {x.shape[-1]}")
        return self.decoder(self.encoder(x, train), train)

    def backward(self, grad):
        return self.encoder.backward(self.decoder.backward(grad))


class Adam:
    def __init__(self, modules: Iterable[Module], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.items = [(name, p, g) for m in modules for name, p, g in m.named_parameters()]
        self.m = [np.zeros_like(p) for _, p, _ in self.items]
        self.v = [np.zeros_like(p) for _, p, _ in self.items]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for (name, p, g), m, v in zip(self.items, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            if not np.all(np.isfinite(p)):
                raise DivergenceError(f"parameter {name} became non-finite", step=self.t)


def mae_loss(pred, actual) -> tuple[float, np.ndarray]:
    """Mean absolute error and its gradient with respect to ``pred``."""
    pred = np.asarray(pred)
    actual = np.asarray(actual)
    if pred.shape != actual.shape:
        raise ShapeError(f"prediction shape {pred.shape} != target shape {actual.shape}")
    diff = pred - actual
    n = diff.size
    return float(np.abs(diff).mean()), np.sign(diff) / n


def save_checkpoint(path, modules: dict[str, Module], meta: dict | None = None) -> None:
    """Write named parameter tensors plus a JSON metadata record to ``.npz``."""
    arrays = {}
    shapes = {}
    for mname, module in modules.items():
        for pname, p, _ in module.named_parameters():
            key = f"{mname}/{pname}"
            arrays[key] = p
            shapes[key] = list(p.shape)
    record = dict(meta or {})
    record["shapes"] = shapes
    arrays["__meta__"] = np.frombuffer(json.dumps(record, sort_keys=True).encode(), dtype=np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def read_checkpoint_meta(path) -> dict:
    with np.load(path) as z:
        return json.loads(bytes(z["__meta__"]).decode())


def load_checkpoint(path, modules: dict[str, Module]) -> dict:
    """Load tensors into ``modules`` after checking every shape; returns the metadata."""
    with np.load(path) as z:
        meta = json.loads(bytes(z["__meta__"]).decode())
        for mname, module in modules.items():
            prefix = mname + "/"
            state = {k[len(prefix):]: z[k] for k in z.files if k.startswith(prefix)}
            if not state:
                raise ShapeError(f"checkpoint {path} has no tensors for {mname!r}")
            module.load_state_dict(state)
    return meta

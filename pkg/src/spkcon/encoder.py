"""TDNN speaker encoder with statistics pooling and an MLP projection head."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import ContractError, Tensor


@dataclass(frozen=True)
class TDNNConfig:
    n_features: int = 30
    channels: tuple = (512, 512, 512, 512, 1500)
    kernels: tuple = (5, 3, 3, 1, 1)
    dilations: tuple = (1, 2, 3, 1, 1)
    embed_dim: int = 512
    proj_dims: tuple = (512, 512)
    pool_eps: float = 1e-10
    bn_momentum: float = 0.1

    @property
    def receptive_field(self):
        return 1 + sum(d * (k - 1) for k, d in zip(self.kernels, self.dilations))

    @property
    def pooled_dim(self):
        return 2 * self.channels[-1]


PRESETS = {
    "tdnn-paper": TDNNConfig(),
    "tdnn-tiny": TDNNConfig(channels=(32, 32, 32, 32, 96), embed_dim=64, proj_dims=(64, 64)),
}


def preset(name: str, **overrides) -> TDNNConfig:
    if name not in PRESETS:
        raise KeyError(f"unknown architecture preset {name!r}; choose from {sorted(PRESETS)}")
    cfg = PRESETS[name]
    return TDNNConfig(**{**cfg.__dict__, **overrides}) if overrides else cfg


class Encoder:
    """Trainable weights live in ``params`` (Tensors); batch-norm running stats in ``buffers``."""

    def __init__(self, cfg: TDNNConfig, rng: np.random.Generator | None = None, dtype=np.float32):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        rng = np.random.default_rng(0) if rng is None else rng

        cin = cfg.n_features
        for i, (cout, k) in enumerate(zip(cfg.channels, cfg.kernels), 1):
            self._add(f"conv{i}.weight", rng.standard_normal((k, cin, cout)) * np.sqrt(2.0 / (k * cin)))
            self._add(f"conv{i}.bias", np.zeros(cout))
            self._add_bn(f"conv{i}.bn", cout)
            cin = cout
        self._add("embed.weight", rng.standard_normal((cfg.pooled_dim, cfg.embed_dim))
                  * np.sqrt(1.0 / cfg.pooled_dim))
        self._add("embed.bias", np.zeros(cfg.embed_dim))
        p1, p2 = cfg.proj_dims
        self._add("head1.weight", rng.standard_normal((cfg.embed_dim, p1)) * np.sqrt(2.0 / cfg.embed_dim))
        self._add("head1.bias", np.zeros(p1))
        self._add_bn("head1.bn", p1)
        self._add("head2.weight", rng.standard_normal((p1, p2)) * np.sqrt(1.0 / p1))
        self._add("head2.bias", np.zeros(p2))

    def _add(self, name, value):
        self.params[name] = Tensor(np.asarray(value, dtype=self.dtype), requires_grad=True, name=name)

    def _add_bn(self, prefix, n):
        self._add(f"{prefix}.gamma", np.ones(n))
        self._add(f"{prefix}.beta", np.zeros(n))
        self.buffers[f"{prefix}.running_mean"] = np.zeros(n, dtype=self.dtype)
        self.buffers[f"{prefix}.running_var"] = np.ones(n, dtype=self.dtype)

    def _bn(self, x, prefix, train):
        p = self.params
        return nx.batch_norm(x, p[f"{prefix}.gamma"], p[f"{prefix}.beta"],
                             self.buffers[f"{prefix}.running_mean"], self.buffers[f"{prefix}.running_var"],
                             training=train, momentum=self.cfg.bn_momentum)

    def forward(self, frames, train=True):
        """Encode a (batch, time, features) array; returns (embedding, unit projection)."""
        x = frames if isinstance(frames, Tensor) else Tensor(np.asarray(frames, dtype=self.dtype))
        if x.ndim == 2:
            x = nx.reshape(x, (1,) + x.shape)
        if x.shape[1] < self.cfg.receptive_field:
            raise ContractError(f"chunk of {x.shape[1]} frames is shorter than the receptive field "
                                f"({self.cfg.receptive_field})")
        if x.shape[2] != self.cfg.n_features:
            raise ContractError(f"expected {self.cfg.n_features} features per frame, got {x.shape[2]}")
        if train and x.shape[0] < 2:
            raise ContractError("train-mode batch norm needs at least two samples per batch")
        p = self.params
        for i, d in enumerate(self.cfg.dilations, 1):
            x = nx.conv1d(x, p[f"conv{i}.weight"], p[f"conv{i}.bias"], dilation=d)
            x = self._bn(nx.relu(x), f"conv{i}.bn", train)
        pooled = stats_pool(x, self.cfg.pool_eps)
        emb = nx.linear(pooled, p["embed.weight"], p["embed.bias"])
        h = nx.linear(emb, p["head1.weight"], p["head1.bias"])
        h = nx.relu(self._bn(h, "head1.bn", train))
        h = nx.linear(h, p["head2.weight"], p["head2.bias"])
        return emb, nx.l2_normalize(h)

    __call__ = forward

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def copy(self, requires_grad=None):
        other = Encoder.__new__(Encoder)
        other.cfg = self.cfg
        other.dtype = self.dtype
        rg = (lambda t: t.requires_grad) if requires_grad is None else (lambda t: requires_grad)
        other.params = {k: Tensor(v.data.copy(), requires_grad=rg(v), name=k) for k, v in self.params.items()}
        other.buffers = {k: v.copy() for k, v in self.buffers.items()}
        return other

    def state(self) -> dict[str, np.ndarray]:
        out = {k: v.data for k, v in self.params.items()}
        out.update(self.buffers)
        return out

    def load_state(self, state: dict[str, np.ndarray]):
        for k, t in self.params.items():
            if state[k].shape != t.shape:
                raise ContractError(f"{k}: checkpoint shape {state[k].shape} != {t.shape}")
            t.data = np.asarray(state[k], dtype=self.dtype).copy()
        for k in self.buffers:
            self.buffers[k] = np.asarray(state[k], dtype=self.dtype).copy()


def stats_pool(x: Tensor, eps=1e-10) -> Tensor:
    """Concatenate the per-channel mean and standard deviation over time."""
    mu = nx.mean(x, axis=1)
    sd = nx.sqrt(nx.add(nx.variance(x, axis=1), eps))
    return nx.concat([mu, sd], axis=-1)


def encode(chunk, encoder: Encoder, mode="eval"):
    """Encode one chunk (or a batch) and return ``(embedding, projection)`` as arrays."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    frames = getattr(chunk, "frames", chunk)
    emb, proj = encoder.forward(frames, train=mode == "train")
    return emb.data, proj.data


def ema_update(key: Encoder, query: Encoder, m: float):
    """theta_k <- m * theta_k + (1 - m) * theta_q; batch-norm running stats are copied."""
    if not 0.0 <= m <= 1.0:
        raise ContractError(f"momentum {m} outside [0, 1]")
    if key.params.keys() != query.params.keys():
        raise ContractError("key and query encoders have different parameter sets")
    for name, pk in key.params.items():
        pq = query.params[name]
        if pk.shape != pq.shape:
            raise ContractError(f"{name}: shape {pk.shape} vs {pq.shape}")
        pk.data = (m * pk.data + (1.0 - m) * pq.data).astype(pk.dtype, copy=False)
    for name, buf in query.buffers.items():
        key.buffers[name] = buf.copy()
    return key

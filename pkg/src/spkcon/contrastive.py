"""SimCLR, momentum-contrast InfoNCE, supervised contrastive and semi-supervised losses.

All losses take unit-norm projections as ``Tensor`` rows and return a scalar
``Tensor``.  Keys and queue entries never carry gradient.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import ContractError, Tensor

log = logging.getLogger(__name__)

UNLABELED = -1


@dataclass
class LossConfig:
    tau: float = 0.1
    semi_weight: float = 9.0     # lambda
    proto_weight: float = 0.25   # alpha

    def __post_init__(self):
        if self.tau <= 0:
            raise ContractError(f"temperature must be positive, got {self.tau}")
        if self.semi_weight < 0 or self.proto_weight < 0:
            raise ContractError("loss weights must be non-negative")


@dataclass
class Batch:
    view_a: Tensor
    view_b: Tensor
    labels: np.ndarray | None = None     # int ids, UNLABELED (-1) where unknown

    def __post_init__(self):
        if self.view_a.shape != self.view_b.shape:
            raise ContractError(f"views differ in shape: {self.view_a.shape} vs {self.view_b.shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.view_a.shape[0],):
                raise ContractError("labels must align with the batch")

    def __len__(self):
        return self.view_a.shape[0]

    def labeled_mask(self):
        if self.labels is None:
            return np.zeros(len(self), dtype=bool)
        return self.labels != UNLABELED


class NegativeQueue:
    """Fixed-capacity FIFO ring of unit-norm key embeddings."""

    def __init__(self, capacity: int, dim: int, dtype=np.float32, tol=1e-5):
        if capacity < 1:
            raise ContractError("queue capacity must be positive")
        self.capacity = capacity
        self.dim = dim
        self.tol = tol
        self.entries = np.zeros((capacity, dim), dtype=dtype)
        self.ptr = 0
        self.fill_count = 0

    def __len__(self):
        return self.fill_count

    def contents(self) -> np.ndarray:
        """Stored keys, oldest first."""
        if self.fill_count < self.capacity:
            return self.entries[:self.fill_count].copy()
        return np.roll(self.entries, -self.ptr, axis=0)

    def push(self, keys):
        keys = np.asarray(keys.data if isinstance(keys, Tensor) else keys)
        if keys.ndim != 2 or keys.shape[1] != self.dim:
            raise ContractError(f"expected keys of shape (n, {self.dim}), got {keys.shape}")
        norms = np.linalg.norm(keys.astype(np.float64), axis=1)
        if np.any(np.abs(norms - 1.0) > self.tol):
            raise ContractError(f"queue keys must be unit-norm (max deviation {np.abs(norms - 1).max():.2e})")
        keys = keys[-self.capacity:]
        n = len(keys)
        idx = (self.ptr + np.arange(n)) % self.capacity
        self.entries[idx] = keys
        self.ptr = int((self.ptr + n) % self.capacity)
        self.fill_count = min(self.capacity, self.fill_count + n)
        return self


def queue_push(queue: NegativeQueue, keys) -> NegativeQueue:
    return queue.push(keys)


def _anchor_logits(batch: Batch, tau: float):
    """Similarities of each view-a anchor against all 2N samples, shape (N, 2N)."""
    everything = nx.concat([batch.view_a, batch.view_b], axis=0)
    return nx.scale(nx.matmul(batch.view_a, nx.transpose(everything)), 1.0 / tau)


def simclr_loss(batch: Batch, tau: float) -> Tensor:
    """In-batch InfoNCE with view-a anchors only (no swapped-pair average)."""
    n = len(batch)
    logits = _anchor_logits(batch, tau)
    not_self = np.ones((n, 2 * n), dtype=bool)
    not_self[np.arange(n), np.arange(n)] = False
    pos = logits[np.arange(n), np.arange(n) + n]
    return nx.mean(nx.sub(nx.logsumexp(logits, axis=1, mask=not_self), pos))


def moco_logits(queries: Tensor, keys, queue, tau: float) -> Tensor:
    """(N, 1 + K) logits: the positive key first, then every queued negative."""
    keys = keys.detach() if isinstance(keys, Tensor) else Tensor(np.asarray(keys, dtype=queries.dtype))
    pos = nx.reshape(nx.dot(queries, keys), (len(keys.data), 1))
    negatives = queue.contents() if isinstance(queue, NegativeQueue) else np.asarray(queue)
    if len(negatives) == 0:
        log.debug("negative queue empty; positive-only denominator")
        return nx.scale(pos, 1.0 / tau)
    neg = nx.matmul(queries, Tensor(negatives.T.astype(queries.dtype)))
    return nx.scale(nx.concat([pos, neg], axis=1), 1.0 / tau)


def moco_loss(queries: Tensor, keys, queue, tau: float) -> Tensor:
    logits = moco_logits(queries, keys, queue, tau)
    return nx.mean(nx.sub(nx.logsumexp(logits, axis=1), logits[:, 0]))


def supcon_loss(batch: Batch, tau: float) -> Tensor:
    """Supervised contrastive loss; every same-label sample in the 2N set is a positive."""
    if batch.labels is None or np.any(batch.labels == UNLABELED):
        raise ContractError("supcon_loss needs a label for every sample")
    n = len(batch)
    labels = batch.labels
    logits = _anchor_logits(batch, tau)
    not_self = np.ones((n, 2 * n), dtype=bool)
    not_self[np.arange(n), np.arange(n)] = False
    positive = (labels[:, None] == np.concatenate([labels, labels])[None, :]) & not_self
    counts = positive.sum(axis=1)                       # 2 * N_y - 1
    weights = positive / counts[:, None]
    lse = nx.logsumexp(logits, axis=1, mask=not_self)
    pos_term = nx.sum_(nx.mul(logits, weights.astype(logits.dtype)), axis=1)
    return nx.mean(nx.sub(lse, pos_term))


def semi_loss(batch: Batch, queue, cfg: LossConfig, return_parts=False):
    """SupCon over the labeled subset plus ``cfg.semi_weight`` times MoCo over the whole batch.

    ``view_a`` plays the query role and ``view_b`` the (detached) key role.
    """
    moco = moco_loss(batch.view_a, batch.view_b, queue, cfg.tau)
    lab = np.flatnonzero(batch.labeled_mask())
    if lab.size == 0:
        log.warning("no labeled samples in batch; supervised term is zero")
        sup = None
        total = nx.scale(moco, cfg.semi_weight)
    else:
        sub = Batch(batch.view_a[lab], batch.view_b.detach()[lab], batch.labels[lab])
        sup = supcon_loss(sub, cfg.tau)
        total = nx.add(sup, nx.scale(moco, cfg.semi_weight))
    if return_parts:
        return total, {"supcon": 0.0 if sup is None else sup.item(), "moco": moco.item()}
    return total

"""Spherical k-means prototype bank, per-cluster concentration and the ProtoNCE term."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .contrastive import moco_loss
from .numerics import ContractError, Tensor

log = logging.getLogger(__name__)


class ClusteringError(RuntimeError):
    pass


@dataclass
class ProtoConfig:
    num_clusters: int = 5000
    num_negatives: int = 10000
    warmup_epochs: int = 60
    alpha: float = 0.25
    eps: float = 1e-2
    max_iter: int = 50
    tol: float = 1e-3            # stop when fewer than this fraction of assignments change
    phi_floor: float = 1e-3      # absolute lower bound when every cluster is collapsed

    def __post_init__(self):
        if self.num_clusters < 2:
            raise ContractError("num_clusters must be at least 2")
        if self.num_negatives < 1 or self.warmup_epochs < 0:
            raise ContractError("num_negatives >= 1 and warmup_epochs >= 0 required")


@dataclass
class PrototypeBank:
    centroids: np.ndarray          # (M, d), unit rows
    concentrations: np.ndarray     # (M,)
    assignments: np.ndarray        # (n,)
    cluster_sizes: np.ndarray      # (M,)
    epoch: int = -1
    inertia_history: list = field(default_factory=list)

    @property
    def num_clusters(self):
        return len(self.centroids)


def _normalize(x):
    return x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-12)


def _kmeanspp(x, k, rng):
    n = len(x)
    centres = [int(rng.integers(n))]
    d2 = np.maximum(2.0 - 2.0 * x @ x[centres[0]], 0.0)
    for _ in range(1, k):
        total = d2.sum()
        idx = int(rng.integers(n)) if total <= 0 else int(rng.choice(n, p=d2 / total))
        centres.append(idx)
        d2 = np.minimum(d2, np.maximum(2.0 - 2.0 * x @ x[idx], 0.0))
    return x[centres].copy()


def inertia(x, centroids, assignments):
    """Sum of cosine distances to the assigned centroid."""
    return float(np.sum(1.0 - np.einsum("ij,ij->i", x, centroids[assignments])))


def _repair_empty(x, centroids, assign, k, max_tries):
    for _ in range(max_tries):
        sizes = np.bincount(assign, minlength=k)
        empty = np.flatnonzero(sizes == 0)
        if empty.size == 0:
            return assign
        for e in empty:
            sizes = np.bincount(assign, minlength=k)
            big = int(np.argmax(sizes))
            if sizes[big] < 2:
                raise ClusteringError("cannot re-seed empty cluster: no cluster has two members")
            members = np.flatnonzero(assign == big)
            far = members[np.argmin(x[members] @ centroids[big])]
            centroids[e] = x[far]
            assign[far] = e
    if np.any(np.bincount(assign, minlength=k) == 0):
        raise ClusteringError("empty clusters persist after re-seeding")
    return assign


def kmeans(embeddings, num_clusters: int, rng: np.random.Generator, cfg: ProtoConfig | None = None,
           eps: float | None = None) -> PrototypeBank:
    """Spherical k-means (cosine metric) with k-means++ seeding.

    Lloyd iterations stop when fewer than ``cfg.tol`` of the assignments change
    or after ``cfg.max_iter`` rounds; centroids are re-normalized each round.
    """
    max_iter = cfg.max_iter if cfg else 50
    tol = cfg.tol if cfg else 1e-3
    eps = eps if eps is not None else (cfg.eps if cfg else 1e-2)
    x = np.asarray(embeddings, dtype=np.float64)
    n = len(x)
    if num_clusters < 1 or n < num_clusters:
        raise ContractError(f"need at least {num_clusters} embeddings, got {n}")
    x = _normalize(x)
    centroids = _kmeanspp(x, num_clusters, rng)
    assign = np.argmax(x @ centroids.T, axis=1)
    assign = _repair_empty(x, centroids, assign, num_clusters, num_clusters)
    history = [inertia(x, centroids, assign)]
    for _ in range(max_iter):
        sums = np.zeros_like(centroids)
        np.add.at(sums, assign, x)
        centroids = _normalize(sums)
        history.append(inertia(x, centroids, assign))
        new = np.argmax(x @ centroids.T, axis=1)
        new = _repair_empty(x, centroids, new, num_clusters, num_clusters)
        changed = np.mean(new != assign)
        assign = new
        history.append(inertia(x, centroids, assign))
        if changed < tol:
            break
    sums = np.zeros_like(centroids)
    np.add.at(sums, assign, x)
    centroids = _normalize(sums)
    history.append(inertia(x, centroids, assign))
    sizes = np.bincount(assign, minlength=num_clusters)
    raw = np.array([raw_concentration(x[assign == s], centroids[s], eps) for s in range(num_clusters)])
    phi = clamp_concentrations(raw, cfg.phi_floor if cfg else 1e-3)
    return PrototypeBank(centroids, phi, assign, sizes, inertia_history=history)


def raw_concentration(members, centroid, eps=1e-2) -> float:
    """Mean distance to the centroid divided by log(Z + eps)."""
    members = np.atleast_2d(np.asarray(members, dtype=np.float64))
    z = len(members)
    if z == 0:
        raise ContractError("concentration of an empty cluster is undefined")
    dist = np.linalg.norm(members - centroid, axis=1).sum()
    return float(dist / (z * np.log(z + eps)))


def clamp_concentrations(raw, floor=1e-3):
    """Clamp to [0.01, 10] times the mean over clusters, never below ``floor``."""
    raw = np.asarray(raw, dtype=np.float64)
    m = raw.mean()
    lo, hi = max(0.01 * m, floor), max(10.0 * m, floor)
    return np.clip(raw, lo, hi)


def concentration(members, centroid, eps=1e-2) -> float:
    """Unclamped concentration of a single cluster (the bank stores clamped values)."""
    return raw_concentration(members, centroid, eps)


def sample_negative_prototypes(labels, num_clusters, num_negatives, rng):
    """Uniform draws with replacement from the clusters other than each sample's own."""
    labels = np.asarray(labels)
    if num_clusters < 2:
        raise ContractError("ProtoNCE needs at least two clusters")
    r = rng.integers(0, num_clusters - 1, size=(len(labels), num_negatives))
    return r + (r >= labels[:, None])


def protonce_term(queries: Tensor, labels, bank: PrototypeBank, num_negatives: int | None = None,
                  rng: np.random.Generator | None = None, negatives=None) -> Tensor:
    """Per-query ProtoNCE values, shape (N,).  Prototypes are constants."""
    if bank.num_clusters < 2:
        raise ContractError("ProtoNCE needs at least two clusters")
    labels = np.asarray(labels, dtype=np.int64)
    if negatives is None:
        negatives = sample_negative_prototypes(labels, bank.num_clusters, num_negatives, rng)
    cols = np.concatenate([labels[:, None], negatives], axis=1)
    centroids = Tensor(bank.centroids.T.astype(queries.dtype))
    inv_phi = (1.0 / bank.concentrations).astype(queries.dtype)
    logits = nx.mul(nx.matmul(queries, centroids), inv_phi)
    picked = logits[np.arange(len(labels))[:, None], cols]
    return nx.sub(nx.logsumexp(picked, axis=1), picked[:, 0])


def joint_loss(queries: Tensor, keys, queue, bank: PrototypeBank, labels, tau: float, alpha: float,
               num_negatives: int | None = None, rng=None, negatives=None, return_parts=False):
    """MoCo InfoNCE plus ``alpha`` times the batch-mean ProtoNCE term."""
    moco = moco_loss(queries, keys, queue, tau)
    if alpha == 0:
        return (moco, {"moco": moco.item(), "proto": 0.0}) if return_parts else moco
    proto = nx.mean(protonce_term(queries, labels, bank, num_negatives, rng, negatives))
    total = nx.add(moco, nx.scale(proto, alpha))
    if return_parts:
        return total, {"moco": moco.item(), "proto": proto.item()}
    return total

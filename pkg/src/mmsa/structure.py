"""Batch hypergraph convolution, memory-anchor alignment and label predictors."""
from __future__ import annotations

from dataclasses import dataclass, field
from types import SimpleNamespace

import numpy as np

from . import tensor as T
from .autoencoder import check_weight
from .nn import Linear, Module, uniform_param
from .tensor import ContractError, DomainError, ShapeError, Tensor

INNER = "inner"
EUCLIDEAN = "euclidean"
COSINE = "cosine"
DOT = "dot"


@dataclass
class Hypergraph:
    """Incidence ``H[v, e]``; hyperedge ``e`` is seeded by node ``e``."""

    H: np.ndarray
    weights: np.ndarray = field(default=None)

    def __post_init__(self):
        self.H = np.asarray(self.H, dtype=bool)
        if self.weights is None:
            self.weights = np.ones(self.H.shape[1])

    @property
    def n_nodes(self) -> int:
        return self.H.shape[0]

    @property
    def node_degree(self) -> np.ndarray:
        return self.H.astype(np.float64) @ self.weights

    @property
    def edge_degree(self) -> np.ndarray:
        return self.H.sum(axis=0).astype(np.float64)

    def propagation(self) -> np.ndarray:
        """Dv^-1/2 H W De^-1 H^T Dv^-1/2."""
        h = self.H.astype(np.float64)
        dv = self.node_degree
        de = self.edge_degree
        if np.any(dv <= 0) or np.any(de <= 0):
            raise DomainError("hypergraph has an isolated node or an empty hyperedge")
        left = h * (self.weights / de)[None, :]
        p = left @ h.T
        s = 1.0 / np.sqrt(dv)
        return s[:, None] * p * s[None, :]

    def adjacency_propagation(self) -> np.ndarray:
        """Clique-expansion graph with self loops, symmetrically normalised."""
        h = self.H.astype(np.float64)
        a = ((h + h.T) > 0).astype(np.float64)
        np.fill_diagonal(a, 1.0)
        s = 1.0 / np.sqrt(a.sum(axis=1))
        return s[:, None] * a * s[None, :]


def build_knn_hypergraph(C, K: int, metric: str = INNER) -> Hypergraph:
    """One hyperedge per node: the node plus its K-1 most similar batch mates.

    Similarity is the inner product (or negative squared distance with
    ``metric="euclidean"``); ties go to the lower index and K is clamped
    to the batch size.
    """
    if K < 1:
        raise DomainError(f"K must be at least 1, got {K}")
    c = C.data if isinstance(C, Tensor) else np.asarray(C, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] < 1:
        raise ShapeError(f"expected a non-empty (b, d) matrix, got {c.shape}")
    b = c.shape[0]
    k = min(K, b)
    if metric == INNER:
        sim = c @ c.T
    elif metric == EUCLIDEAN:
        sq = np.einsum("ij,ij->i", c, c)
        sim = -(sq[:, None] + sq[None, :] - 2.0 * (c @ c.T))
    else:
        raise ValueError(f"unknown similarity {metric!r}")
    np.fill_diagonal(sim, np.inf)
    order = np.argsort(-sim, axis=1, kind="stable")[:, :k]
    H = np.zeros((b, b), dtype=bool)
    H[order, np.arange(b)[:, None]] = True
    return Hypergraph(H)


def hgnn_conv(hg: Hypergraph, C, W, mode: str = "hgnn") -> Tensor:
    """ReLU(P C W) with P the hypergraph (or clique-graph) propagation matrix."""
    C, W = T.as_tensor(C), T.as_tensor(W)
    if C.ndim != 2 or C.shape[0] != hg.n_nodes:
        raise ShapeError(f"embeddings {C.shape} do not match a {hg.n_nodes}-node hypergraph")
    if W.ndim != 2 or W.shape[0] != C.shape[1]:
        raise ShapeError(f"weight {W.shape} does not fit embeddings {C.shape}")
    if mode == "hgnn":
        prop = hg.propagation()
    elif mode == "gcn":
        prop = hg.adjacency_propagation()
    else:
        raise ValueError(f"unknown convolution mode {mode!r}")
    return T.relu(prop @ (C @ W))


class MemoryBank(Module):
    def __init__(self, rng: np.random.Generator, n_anchors: int = 128, d_c: int = 256):
        if n_anchors < 1:
            raise DomainError("memory bank needs at least one anchor")
        self.anchors = uniform_param(rng, (n_anchors, d_c), d_c)


def _anchors(bank) -> Tensor:
    return bank.anchors if isinstance(bank, MemoryBank) else T.as_tensor(bank)


def memory_align(z, bank, metric: str = COSINE) -> tuple[Tensor, Tensor]:
    """Softmax over anchor similarities, then the weighted anchor mix."""
    a = _anchors(bank)
    z = T.as_tensor(z)
    if z.ndim != 1 or z.shape[0] != a.shape[1]:
        raise ShapeError(f"query {z.shape} does not match anchors {a.shape}")
    if metric == COSINE:
        if not np.any(z.data):
            raise DomainError("cosine similarity undefined for a zero embedding")
        s = T.cosine_matrix(T.reshape(z, (1, -1)), a)
    elif metric == DOT:
        s = T.reshape(z, (1, -1)) @ a.T
    else:
        raise ValueError(f"unknown similarity {metric!r}")
    weights = T.softmax(s, axis=1)
    return T.reshape(weights @ a, (a.shape[1],)), T.reshape(weights, (a.shape[0],))


def memory_align_batch(Z, bank, metric: str = COSINE, eps: float = 1e-12) -> tuple[Tensor, Tensor]:
    """Row-wise :func:`memory_align`; zero rows get zero cosine to every anchor."""
    a = _anchors(bank)
    Z = T.as_tensor(Z)
    if metric == COSINE:
        s = T.cosine_matrix(Z, a, eps=eps)
    elif metric == DOT:
        s = Z @ a.T
    else:
        raise ValueError(f"unknown similarity {metric!r}")
    weights = T.softmax(s, axis=1)
    return weights @ a, weights


def memory_loss(zhat, z) -> Tensor:
    """Squared distance, batch-averaged when given (b, d) inputs."""
    zhat, z = T.as_tensor(zhat), T.as_tensor(z)
    if zhat.shape != z.shape:
        raise ShapeError(f"shapes differ: {zhat.shape} vs {z.shape}")
    d = zhat - z
    sq = T.tsum(d * d, axis=-1)
    return T.mean(sq) if sq.ndim else sq


class Predictor(Module):
    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int, hidden: int = 64):
        self.fc1 = Linear(rng, d_in, hidden)
        self.fc2 = Linear(rng, hidden, d_out)

    def __call__(self, x) -> Tensor:
        return self.fc2(T.softplus(self.fc1(x)))


class Predictors(Module):
    def __init__(self, rng: np.random.Generator, d_c: int = 256, geom_dim: int = 3, prop_dim: int = 4):
        self.geom = Predictor(rng, d_c, geom_dim)
        self.prop = Predictor(rng, d_c, prop_dim)


def _labels(y, name: str) -> np.ndarray:
    if y is None:
        raise ContractError(f"{name} labels are missing")
    y = np.asarray(y.data if isinstance(y, Tensor) else y, dtype=np.float64)
    if not np.all(np.isfinite(y)):
        raise ContractError(f"{name} labels contain missing values")
    return y


def prediction_loss(y_geom, y_prop, z, zhat, predictors) -> Tensor:
    """L1 error of both predictors applied to z and to its aligned copy.

    Summed over label components, averaged over the batch for 2-D inputs.
    """
    yg, yp = _labels(y_geom, "geometry"), _labels(y_prop, "property")
    total = None
    for x in (z, zhat):
        for head, y in ((predictors.geom, yg), (predictors.prop, yp)):
            pred = head(x)
            if pred.shape != y.shape:
                raise ShapeError(f"prediction {pred.shape} does not match labels {y.shape}")
            r = T.tsum(T.absolute(pred - y), axis=-1)
            total = r if total is None else total + r
    return T.mean(total) if total.ndim else total


def sa_loss(me, pre, alpha: float = 0.5) -> Tensor:
    alpha = check_weight("alpha", alpha)
    return T.as_tensor(me) * alpha + T.as_tensor(pre) * (1.0 - alpha)


class StructureAwareness(Module):
    """HGNN weight, memory bank and predictors bundled for checkpointing."""

    def __init__(self, rng: np.random.Generator, d_c: int = 256, n_anchors: int = 128,
                 geom_dim: int = 3, prop_dim: int = 4):
        self.W = uniform_param(rng, (d_c, d_c), d_c)
        self.memory = MemoryBank(rng, n_anchors, d_c)
        self.predictors = Predictors(rng, d_c, geom_dim, prop_dim)

    def losses(self, C, y_geom, y_prop, K: int = 10, metric: str = INNER, align: str = COSINE,
               conv: str = "hgnn") -> SimpleNamespace:
        hg = build_knn_hypergraph(C, K, metric)
        Z = hgnn_conv(hg, C, self.W, mode=conv)
        Zhat, weights = memory_align_batch(Z, self.memory, align)
        me = memory_loss(Zhat, Z)
        pre = prediction_loss(y_geom, y_prop, Z, Zhat, self.predictors)
        return SimpleNamespace(hypergraph=hg, Z=Z, Zhat=Zhat, weights=weights, me=me, pre=pre)


"""Modality feature extractors: 2-D graph (GIN), depiction image (CNN), 3-D graph.

All three consume a :class:`GraphBatch`, a block-diagonal union of the
molecules in a mini-batch, and return one ``d_out`` row per molecule.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from . import tensor as T
from .nn import MLP, BatchNorm, LayerNorm, Linear, Module, uniform_param, zero_param
from .tensor import ShapeError, Tensor

RBF_CENTERS = np.linspace(0.0, 4.0, 16)
RBF_GAMMA = 4.0


def rbf_expand(d: np.ndarray) -> np.ndarray:
    return np.exp(-RBF_GAMMA * (np.asarray(d)[:, None] - RBF_CENTERS[None, :]) ** 2)


@dataclass
class GraphBatch:
    x_v: np.ndarray            # (n_nodes, d_v)
    x_e: np.ndarray            # (n_bonds, d_e)
    bond_index: np.ndarray     # (n_bonds, 2) global atom indices
    node_graph: np.ndarray     # (n_nodes,) molecule id of each atom
    n_graphs: int
    images: np.ndarray | None = None   # (B, H, W, 3)
    coords: np.ndarray | None = None   # (n_nodes, 3)

    @property
    def n_nodes(self) -> int:
        return self.x_v.shape[0]

    def adjacency(self) -> sp.csr_matrix:
        n = self.n_nodes
        b = self.bond_index
        rows = np.concatenate([b[:, 0], b[:, 1]])
        cols = np.concatenate([b[:, 1], b[:, 0]])
        return sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))

    def incidence(self) -> sp.csr_matrix:
        """(n_nodes, n_bonds): each bond counted once at both endpoints."""
        n, m = self.n_nodes, len(self.bond_index)
        rows = np.concatenate([self.bond_index[:, 0], self.bond_index[:, 1]])
        cols = np.concatenate([np.arange(m), np.arange(m)])
        return sp.csr_matrix((np.ones(2 * m), (rows, cols)), shape=(n, m))

    def directed_edges(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(source, target, bond id) for both directions of every bond."""
        b = self.bond_index
        m = len(b)
        src = np.concatenate([b[:, 0], b[:, 1]])
        dst = np.concatenate([b[:, 1], b[:, 0]])
        return src, dst, np.concatenate([np.arange(m), np.arange(m)])

    def mean_pool(self) -> sp.csr_matrix:
        counts = np.bincount(self.node_graph, minlength=self.n_graphs).astype(np.float64)
        if np.any(counts == 0):
            raise ShapeError("molecule without atoms in batch")
        vals = 1.0 / counts[self.node_graph]
        return sp.csr_matrix((vals, (self.node_graph, np.arange(self.n_nodes))), shape=(self.n_graphs, self.n_nodes))


def make_batch(x_vs: Sequence[np.ndarray], x_es: Sequence[np.ndarray], bonds: Sequence[np.ndarray],
               images: Sequence[np.ndarray] | None = None, coords: Sequence[np.ndarray] | None = None) -> GraphBatch:
    offset = 0
    bond_rows, node_graph = [], []
    for g, (xv, xe, bi) in enumerate(zip(x_vs, x_es, bonds)):
        n = xv.shape[0]
        bi = np.asarray(bi, dtype=np.int64).reshape(-1, 2)
        if len(bi) != xe.shape[0]:
            raise ShapeError(f"molecule {g}: {len(bi)} bonds but {xe.shape[0]} bond feature rows")
        if len(bi) and (bi.min() < 0 or bi.max() >= n):
            raise IndexError(f"molecule {g}: bond refers to an atom outside 0..{n - 1}")
        bond_rows.append(bi + offset)
        node_graph.append(np.full(n, g))
        offset += n
    d_e = x_es[0].shape[1] if len(x_es) else 0
    return GraphBatch(
        x_v=np.concatenate(x_vs, axis=0),
        x_e=np.concatenate(x_es, axis=0) if sum(len(x) for x in x_es) else np.zeros((0, d_e)),
        bond_index=np.concatenate(bond_rows, axis=0) if bond_rows else np.zeros((0, 2), dtype=np.int64),
        node_graph=np.concatenate(node_graph),
        n_graphs=len(x_vs),
        images=None if images is None else np.stack(images),
        coords=None if coords is None else np.concatenate(coords, axis=0),
    )


def batch_from_molecules(mols, conformer: Sequence[int] | int = 0) -> GraphBatch:
    confs = [conformer] * len(mols) if isinstance(conformer, int) else list(conformer)
    return make_batch(
        [m.x_v for m in mols],
        [m.x_e for m in mols],
        [np.array([[b.begin, b.end] for b in m.graph.bonds], dtype=np.int64).reshape(-1, 2) for m in mols],
        images=[m.image for m in mols],
        coords=[m.coords[c] for m, c in zip(mols, confs)],
    )


class GinEncoder(Module):
    """GIN with edge features: h <- MLP((1 + eps) h + sum_j (h_j + E(e_ij)))."""

    def __init__(self, rng: np.random.Generator, d_v: int, d_e: int, d_hidden: int = 64, d_out: int = 256, n_layers: int = 5):
        self.embed = Linear(rng, d_v, d_hidden)
        self.edge_embeds = [Linear(rng, d_e, d_hidden) for _ in range(n_layers)]
        self.eps = [Tensor(np.zeros(1), requires_grad=True) for _ in range(n_layers)]
        self.mlps = [MLP(rng, d_hidden, d_hidden, d_hidden) for _ in range(n_layers)]
        self.norms = [LayerNorm(d_hidden) for _ in range(n_layers)]
        self.readout = Linear(rng, d_hidden, d_out)
        self.out_norm = BatchNorm(d_out)

    def node_states(self, batch: GraphBatch) -> Tensor:
        adj = batch.adjacency()
        inc = batch.incidence()
        h = self.embed(batch.x_v)
        last = len(self.mlps) - 1
        for k, (mlp, edge, eps, norm) in enumerate(zip(self.mlps, self.edge_embeds, self.eps, self.norms)):
            msg = T.spmm(adj, h)
            if len(batch.x_e):
                msg = msg + T.spmm(inc, edge(batch.x_e))
            h = norm(mlp(h * (1.0 + eps) + msg))
            if k != last:
                h = T.relu(h)
        return h

    def __call__(self, batch: GraphBatch) -> Tensor:
        return self.out_norm(self.readout(T.spmm(batch.mean_pool(), self.node_states(batch))))


class ImageEncoder(Module):
    """Three stride-2 3x3 conv stages (3->8->16->32), global average pool, linear."""

    def __init__(self, rng: np.random.Generator, d_out: int = 256, image_size: int = 64, channels=(3, 8, 16, 32)):
        self.image_size = image_size
        self.kernels = []
        self.biases = []
        for cin, cout in zip(channels[:-1], channels[1:]):
            fan_in = 9 * cin
            self.kernels.append(uniform_param(rng, (3, 3, cin, cout), fan_in))
            self.biases.append(zero_param((cout,)))
        self.norm = LayerNorm(channels[-1])
        self.head = Linear(rng, channels[-1], d_out)
        self.out_norm = BatchNorm(d_out)

    def __call__(self, images) -> Tensor:
        x = images.images if isinstance(images, GraphBatch) else images
        x = T.as_tensor(x)
        if x.ndim != 4 or x.shape[1:] != (self.image_size, self.image_size, 3):
            raise ShapeError(f"expected (B, {self.image_size}, {self.image_size}, 3) images, got {x.shape}")
        for w, b in zip(self.kernels, self.biases):
            x = T.relu(T.conv2d(x, w, b, stride=2, pad=1))
        n, h, wd, c = x.shape
        pooled = T.mean(T.reshape(x, (n, h * wd, c)), axis=1)
        return self.out_norm(self.head(self.norm(pooled)))


class Geo3dEncoder(Module):
    """Distance-aware message passing over bonds.

    message_ij = MLP(h_j | RBF(|r_i - r_j|) | e_ij); h_i <- MLP(h_i | sum_j message_ij).
    Only interatomic distances enter, so the output is invariant to rigid
    motions of the coordinates.
    """

    def __init__(self, rng: np.random.Generator, d_v: int, d_e: int, d_hidden: int = 64, d_out: int = 256, n_layers: int = 4):
        n_rbf = len(RBF_CENTERS)
        self.embed = Linear(rng, d_v, d_hidden)
        self.messages = [MLP(rng, d_hidden + n_rbf + d_e, d_hidden, d_hidden) for _ in range(n_layers)]
        self.updates = [MLP(rng, 2 * d_hidden, d_hidden, d_hidden) for _ in range(n_layers)]
        self.norms = [LayerNorm(d_hidden) for _ in range(n_layers)]
        self.readout = Linear(rng, d_hidden, d_out)
        self.out_norm = BatchNorm(d_out)

    def __call__(self, batch: GraphBatch) -> Tensor:
        if batch.coords is None or batch.coords.shape != (batch.n_nodes, 3):
            got = None if batch.coords is None else batch.coords.shape
            raise ShapeError(f"expected ({batch.n_nodes}, 3) coordinates, got {got}")
        src, dst, bond_id = batch.directed_edges()
        n_dir = len(src)
        scatter = sp.csr_matrix((np.ones(n_dir), (dst, np.arange(n_dir))), shape=(batch.n_nodes, n_dir))
        dist = np.linalg.norm(batch.coords[src] - batch.coords[dst], axis=1)
        edge_static = np.concatenate([rbf_expand(dist), batch.x_e[bond_id]], axis=1) if n_dir else None
        h = self.embed(batch.x_v)
        last = len(self.messages) - 1
        for k, (msg_mlp, upd_mlp, norm) in enumerate(zip(self.messages, self.updates, self.norms)):
            if n_dir:
                m = msg_mlp(T.concat([T.take_rows(h, src), edge_static], axis=1))
                agg = T.spmm(scatter, m)
            else:
                agg = Tensor(np.zeros(h.shape))
            h = norm(upd_mlp(T.concat([h, agg], axis=1)))
            if k != last:
                h = T.relu(h)
        return self.out_norm(self.readout(T.spmm(batch.mean_pool(), h)))


def gin_forward(x_v: np.ndarray, x_e: np.ndarray, bonds, encoder: GinEncoder) -> Tensor:
    """Single-molecule convenience wrapper; returns a (d_out,) vector."""
    return encoder(make_batch([x_v], [x_e], [np.asarray(bonds).reshape(-1, 2)]))[0]


def image_forward(image: np.ndarray, encoder: ImageEncoder) -> Tensor:
    return encoder(np.asarray(image)[None])[0]


def geo3d_forward(x_v: np.ndarray, x_e: np.ndarray, coords: np.ndarray, bonds, encoder: Geo3dEncoder) -> Tensor:
    coords = np.asarray(coords, dtype=np.float64)
    if coords.shape != (x_v.shape[0], 3):
        raise ShapeError(f"coordinates {coords.shape} do not match {x_v.shape[0]} atoms")
    return encoder(make_batch([x_v], [x_e], [np.asarray(bonds).reshape(-1, 2)], coords=[coords]))[0]

"""Per-modality autoencoders, cross-modal contrastive and reconstruction losses."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .nn import MLP, Module
from .tensor import ContractError, DomainError, ShapeError, Tensor

IN_BATCH = "in-batch"
SINGLE_NEGATIVE = "single-negative"


def check_weight(name: str, value: float) -> float:
    if not 0.0 <= value <= 1.0:
        raise DomainError(f"{name} must lie in [0, 1], got {value}")
    return float(value)


class ModalityAutoencoder(Module):
    """phi: d_o -> hidden -> d_c and psi: d_c -> hidden -> d_o, ReLU inside."""

    def __init__(self, rng: np.random.Generator, d_o: int = 256, d_c: int = 256, hidden: int = 256):
        self.d_o, self.d_c = d_o, d_c
        self.phi = MLP(rng, d_o, hidden, d_c)
        self.psi = MLP(rng, d_c, hidden, d_o)

    def encode(self, x) -> Tensor:
        x = T.as_tensor(x)
        if x.shape[-1] != self.d_o:
            raise ShapeError(f"expected features of width {self.d_o}, got {x.shape}")
        return self.phi(x)

    def decode(self, c) -> Tensor:
        return self.psi(c)


@dataclass(frozen=True)
class ContrastiveConfig:
    mode: str = IN_BATCH
    seed: int = 0

    def __post_init__(self):
        if self.mode not in (IN_BATCH, SINGLE_NEGATIVE):
            raise ValueError(f"unknown contrastive mode {self.mode!r}")


def encode_all(xs: Sequence, autoencoders: Sequence[ModalityAutoencoder]) -> list[Tensor]:
    if len(xs) == 0:
        raise ContractError("need at least one modality")
    if len(xs) != len(autoencoders):
        raise ShapeError(f"{len(xs)} modality inputs for {len(autoencoders)} autoencoders")
    return [ae.encode(x) for x, ae in zip(xs, autoencoders)]


def _rowwise_cosine(a, b) -> Tensor:
    return T.tsum(T.row_normalize(a) * T.row_normalize(b), axis=1)


def _negative_mass(sim: Tensor, pick: np.ndarray | None) -> Tensor:
    """exp-similarity of each row to the *other* molecules of the batch.

    ``pick=None`` averages exp(theta) over all other molecules; otherwise row
    n uses the single molecule ``pick[n]``.
    """
    b = sim.shape[0]
    e = T.exp(sim)
    if pick is None:
        off = 1.0 - np.eye(b)
        return T.tsum(e * off, axis=1) / (b - 1)
    mask = np.zeros((b, b))
    mask[np.arange(b), pick] = 1.0
    return T.tsum(e * mask, axis=1)


def draw_negatives(b: int, rng: np.random.Generator) -> np.ndarray:
    """One uniformly drawn other molecule per row."""
    k = rng.integers(0, b - 1, size=b)
    return k + (k >= np.arange(b))


def contrastive_loss(cs: Sequence, config: ContrastiveConfig = ContrastiveConfig(),
                     rng: np.random.Generator | None = None) -> Tensor:
    """Cross-modal InfoNCE-style loss with cosine similarity and unit temperature.

    ``cs`` holds one (b, d_c) matrix per modality; row n of every matrix is
    the same molecule.  Returns the batch mean of the per-molecule loss.
    """
    cs = [T.as_tensor(c) for c in cs]
    m = len(cs)
    if m < 2:
        raise ContractError("contrastive loss needs at least two modalities")
    if cs[0].ndim != 2:
        raise ShapeError(f"expected (batch, d_c) embeddings, got {cs[0].shape}")
    b = cs[0].shape[0]
    if b < 2:
        raise ContractError("contrastive loss needs a batch of at least two molecules")
    pick = None
    if config.mode == SINGLE_NEGATIVE:
        pick = draw_negatives(b, rng if rng is not None else np.random.default_rng(config.seed))
    self_mass = [_negative_mass(T.cosine_matrix(c, c), pick) for c in cs]
    total = None
    for i in range(m):
        for j in range(m):
            if i == j:
                continue
            pos = _rowwise_cosine(cs[i], cs[j])
            cross = _negative_mass(T.cosine_matrix(cs[i], cs[j]), pick)
            term = T.log(T.exp(pos) + self_mass[i] + cross) - pos
            total = term if total is None else total + term
    return T.mean(total) * (2.0 / (m * (m + 1)))


def reconstruction_loss(xs: Sequence, cs: Sequence, decoders: Sequence[Callable], tau: float = 0.5) -> Tensor:
    """Intra- and cross-modal reconstruction with un-squared L2 residuals.

    Inputs may be single vectors or (b, d) batches; batches are averaged.
    """
    tau = check_weight("tau", tau)
    m = len(xs)
    if m < 2:
        raise ContractError("reconstruction loss needs at least two modalities")
    if not (len(cs) == len(decoders) == m):
        raise ShapeError("xs, cs and decoders must have one entry per modality")
    xs = [T.as_tensor(x) for x in xs]
    axis = xs[0].ndim - 1
    intra = [T.norm(x - dec(c), axis=axis) for x, c, dec in zip(xs, cs, decoders)]
    total = None
    for i in range(m):
        for j in range(m):
            if i == j:
                continue
            cross = T.norm(xs[i] - decoders[i](cs[j]), axis=axis)
            term = intra[i] * tau + cross * (1.0 - tau)
            total = term if total is None else total + term
    return T.mean(total) * (1.0 / m)


def ae_loss(cl, rl, lam: float = 0.6) -> Tensor:
    lam = check_weight("lambda", lam)
    return T.as_tensor(cl) * lam + T.as_tensor(rl) * (1.0 - lam)


def aggregate(cs: Sequence) -> Tensor:
    """Unified embedding: elementwise mean of the modality embeddings."""
    if len(cs) == 0:
        raise ContractError("cannot aggregate an empty set of embeddings")
    cs = [T.as_tensor(c) for c in cs]
    shape = cs[0].shape
    if any(c.shape != shape for c in cs):
        raise ShapeError(f"embedding shapes differ: {[c.shape for c in cs]}")
    total = cs[0]
    for c in cs[1:]:
        total = total + c
    return total * (1.0 / len(cs))

"""Evaluation metrics and nearest-neighbour retrieval."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .fingerprint import Fingerprint, tanimoto


def roc_auc(scores, labels) -> float:
    """Mann-Whitney statistic: P(score_pos > score_neg) with ties counted half."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ValueError(f"{len(s)} scores for {len(y)} labels")
    pos = y == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC-AUC needs at least one positive and one negative label")
    ranks = rankdata(s)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def rmse(pred, true) -> float:
    p = np.asarray(pred, dtype=np.float64).ravel()
    t = np.asarray(true, dtype=np.float64).ravel()
    if p.shape != t.shape:
        raise ValueError(f"length mismatch: {len(p)} vs {len(t)}")
    if p.size == 0:
        raise ValueError("RMSE of an empty vector")
    return float(np.sqrt(np.mean((p - t) ** 2)))


def dbi(points, clusters) -> float:
    """Davies-Bouldin index with mean centroid distance as cluster scatter."""
    x = np.asarray(points, dtype=np.float64)
    lab = np.asarray(clusters)
    if x.ndim != 2 or len(x) != len(lab):
        raise ValueError("points must be (n, d) with one cluster label per row")
    ids = np.unique(lab)
    if len(ids) < 2:
        raise ValueError("Davies-Bouldin index needs at least two clusters")
    cent = np.stack([x[lab == c].mean(axis=0) for c in ids])
    scatter = np.array([np.linalg.norm(x[lab == c] - cent[k], axis=1).mean() for k, c in enumerate(ids)])
    sep = np.linalg.norm(cent[:, None, :] - cent[None, :, :], axis=-1)
    if np.any(sep[~np.eye(len(ids), dtype=bool)] == 0):
        raise ValueError("two clusters share a centroid")
    with np.errstate(divide="ignore"):
        ratio = (scatter[:, None] + scatter[None, :]) / sep
    np.fill_diagonal(ratio, -np.inf)
    return float(ratio.max(axis=1).mean())


def _entropy(counts: np.ndarray) -> float:
    # sorted so that relabelled partitions sum in the same order
    p = np.sort(counts[counts > 0].ravel()) / counts.sum()
    return float(-(p * np.log(p)).sum())


def nmi(labels_a, labels_b) -> float:
    """Mutual information over the arithmetic mean of the two entropies."""
    a = np.asarray(labels_a)
    b = np.asarray(labels_b)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {len(a)} vs {len(b)}")
    if a.size == 0:
        raise ValueError("NMI of empty labelings")
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(table, (ai, bi), 1.0)
    ha, hb = _entropy(table.sum(axis=1)), _entropy(table.sum(axis=0))
    mi = ha + hb - _entropy(table)
    denom = 0.5 * (ha + hb)
    if denom == 0.0:
        return 0.0
    return float(min(max(mi / denom, 0.0), 1.0))


@dataclass(frozen=True)
class RetrievalResult:
    query: str
    hits: tuple[tuple[str, float], ...]

    def ids(self) -> list[str]:
        return [h[0] for h in self.hits]

    def to_dict(self) -> dict:
        return {"query": self.query, "hits": [{"id": i, "similarity": s} for i, s in self.hits]}


def _similarities(query, refs, mode: str) -> np.ndarray:
    if mode == "cosine":
        if isinstance(query, Fingerprint) or (len(refs) and isinstance(refs[0], Fingerprint)):
            raise TypeError("cosine retrieval needs embedding vectors, not fingerprints")
        q = np.asarray(query, dtype=np.float64).ravel()
        r = np.asarray(refs, dtype=np.float64)
        if r.ndim != 2 or r.shape[1] != q.shape[0]:
            raise ValueError(f"reference matrix {r.shape} does not match query length {q.shape[0]}")
        qn = np.linalg.norm(q)
        rn = np.linalg.norm(r, axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            sim = (r @ q) / (rn * qn)
        return np.where((rn > 0) & (qn > 0), sim, 0.0)
    if mode == "tanimoto":
        if not isinstance(query, Fingerprint) or not all(isinstance(f, Fingerprint) for f in refs):
            raise TypeError("tanimoto retrieval needs fingerprints")
        return np.array([tanimoto(query, f) for f in refs])
    raise ValueError(f"unknown retrieval mode {mode!r}")


def retrieve(query, refs, k: int, mode: str = "cosine", ref_ids: Sequence[str] | None = None,
             query_id: str = "query") -> RetrievalResult:
    """Exact top-k by similarity; ties go to the lower reference index."""
    n = len(refs)
    if not 1 <= k <= n:
        raise ValueError(f"k must be between 1 and the reference size {n}, got {k}")
    sim = _similarities(query, refs, mode)
    ids = list(ref_ids) if ref_ids is not None else [str(i) for i in range(n)]
    order = np.lexsort((np.arange(n), -sim))[:k]
    return RetrievalResult(query_id, tuple((ids[i], float(sim[i])) for i in order))


@dataclass(frozen=True)
class MetricReport:
    metric: str
    values: tuple[float, ...]
    seeds: tuple[int, ...]
    mean: float
    std: float

    @classmethod
    def from_values(cls, metric: str, values: Sequence[float], seeds: Sequence[int] | None = None) -> "MetricReport":
        v = np.asarray(values, dtype=np.float64)
        if v.size == 0:
            raise ValueError("no values to report")
        seeds = tuple(seeds) if seeds is not None else tuple(range(len(v)))
        return cls(metric, tuple(float(x) for x in v), seeds, float(v.mean()), float(v.std()))

    def to_dict(self) -> dict:
        return {"metric": self.metric, "values": list(self.values), "seeds": list(self.seeds),
                "mean": self.mean, "std": self.std}

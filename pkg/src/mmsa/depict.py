"""2-D layout, raster depiction and 3-D coordinate embedding.

Both layouts minimise the Kamada-Kawai stress against topological
distances using SMACOF (stress majorization); only the target scale,
dimension and post-processing differ.
"""
from __future__ import annotations

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import shortest_path

from .features import FeatureConfig
from .smiles import MolGraph

BOND_LENGTH_3D = 1.5
LAYOUT_ITERS = 200
ATOM_RADIUS_PX = 2.0
BOND_HALF_WIDTH_PX = 0.75
JITTER_SIGMA = 0.1


def graph_distances(mol: MolGraph) -> np.ndarray:
    n = mol.n_atoms
    if not mol.bonds:
        return np.zeros((n, n))
    rows = [b.begin for b in mol.bonds]
    cols = [b.end for b in mol.bonds]
    adj = csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    return shortest_path(adj, directed=False, unweighted=True)


def stress_majorization(target: np.ndarray, dim: int, rng: np.random.Generator, iters: int = LAYOUT_ITERS) -> np.ndarray:
    """SMACOF with weights 1/d^2 from a seeded random start."""
    n = target.shape[0]
    if n == 1:
        return np.zeros((1, dim))
    with np.errstate(divide="ignore"):
        w = np.where(target > 0, 1.0 / target**2, 0.0)
    v = -w.copy()
    v[np.diag_indices(n)] = w.sum(axis=1)
    v_pinv = np.linalg.pinv(v)
    x = rng.normal(scale=target.max() / 2, size=(n, dim))
    for _ in range(iters):
        diff = x[:, None, :] - x[None, :, :]
        dist = np.sqrt(np.sum(diff**2, axis=-1))
        with np.errstate(divide="ignore", invalid="ignore"):
            b = np.where(dist > 1e-12, -w * target / dist, 0.0)
        b[np.diag_indices(n)] = 0.0
        b[np.diag_indices(n)] = -b.sum(axis=1)
        x = v_pinv @ (b @ x)
    return x


def layout_2d(mol: MolGraph, seed: int = 0, extent: float = 0.8) -> np.ndarray:
    """Spring layout in the unit box.

    The rest length is ``extent / (1 + diameter)`` so that a relaxed layout
    spans at most ``extent``; larger layouts are shrunk uniformly.  The
    result is centred on (0.5, 0.5).
    """
    n = mol.n_atoms
    if n == 1:
        return np.full((1, 2), 0.5)
    d = graph_distances(mol)
    rest = extent / (1.0 + d.max())
    x = stress_majorization(rest * d, 2, np.random.default_rng(seed))
    lo, hi = x.min(axis=0), x.max(axis=0)
    span = float((hi - lo).max())
    if span > extent:
        x = x * (extent / span)
        lo, hi = x.min(axis=0), x.max(axis=0)
    return x - (lo + hi) / 2 + 0.5


def rest_length_2d(mol: MolGraph, extent: float = 0.8) -> float:
    return extent / (1.0 + graph_distances(mol).max())


def _segment_distance(px: np.ndarray, py: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    denom = float(ab @ ab)
    if denom == 0.0:
        return np.hypot(px - a[0], py - a[1])
    t = np.clip(((px - a[0]) * ab[0] + (py - a[1]) * ab[1]) / denom, 0.0, 1.0)
    return np.hypot(px - (a[0] + t * ab[0]), py - (a[1] + t * ab[1]))


def _inside_polygon(px: np.ndarray, py: np.ndarray, poly: np.ndarray) -> np.ndarray:
    inside = np.zeros(px.shape, dtype=bool)
    m = len(poly)
    for k in range(m):
        x1, y1 = poly[k]
        x2, y2 = poly[(k + 1) % m]
        crosses = (y1 > py) != (y2 > py)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = x1 + (py - y1) * (x2 - x1) / (y2 - y1)
        inside ^= crosses & (px < xint)
    return inside


def rasterize(mol: MolGraph, coords2d: np.ndarray, config: FeatureConfig = FeatureConfig()) -> np.ndarray:
    """H x W x 3 image: bond skeleton, atom disks (Z/53), aromatic-ring mask."""
    size = config.image_size
    img = np.zeros((size, size, 3))
    centers = np.arange(size) + 0.5
    py, px = np.meshgrid(centers, centers, indexing="ij")
    pts = np.asarray(coords2d, dtype=np.float64) * size
    for b in mol.bonds:
        d = _segment_distance(px, py, pts[b.begin], pts[b.end])
        img[..., 0] = np.maximum(img[..., 0], np.clip(BOND_HALF_WIDTH_PX + 0.5 - d, 0.0, 1.0))
    for a in mol.atoms:
        cx, cy = pts[a.index]
        disk = (px - cx) ** 2 + (py - cy) ** 2 <= ATOM_RADIUS_PX**2
        img[..., 1] = np.where(disk, np.maximum(img[..., 1], min(a.atomic_number / 53.0, 1.0)), img[..., 1])
    for ring in mol.rings:
        if all(mol.atoms[i].aromatic for i in ring):
            img[..., 2] = np.where(_inside_polygon(px, py, pts[ring]), 1.0, img[..., 2])
    return np.clip(img, 0.0, 1.0)


def embed_3d(mol: MolGraph, seed: int = 0, n_conf: int = 1) -> list[np.ndarray]:
    """Conformer stand-ins: 3-D stress layout plus Gaussian jitter, centred."""
    rng = np.random.default_rng(seed)
    target = BOND_LENGTH_3D * graph_distances(mol)
    base = stress_majorization(target, 3, rng)
    confs = []
    for _ in range(n_conf):
        r = base + rng.normal(scale=JITTER_SIGMA, size=base.shape)
        confs.append(r - r.mean(axis=0))
    return confs

"""Atom/bond featurization and the graph-level pre-training labels."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .smiles import ELEMENTS, BondOrder, MolGraph


class FeaturizationError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureConfig:
    elements: tuple[str, ...] = ELEMENTS
    max_degree: int = 5
    charges: tuple[int, ...] = (-2, -1, 0, 1, 2)
    max_h: int = 4
    image_size: int = 64
    n_conf: int = 1

    @property
    def atom_dim(self) -> int:
        return len(self.elements) + (self.max_degree + 1) + 1 + len(self.charges) + (self.max_h + 1)

    @property
    def bond_dim(self) -> int:
        return 4 + 1


def atom_features(mol: MolGraph, config: FeatureConfig = FeatureConfig()) -> np.ndarray:
    n_el = len(config.elements)
    deg_off = n_el
    arom_off = deg_off + config.max_degree + 1
    chg_off = arom_off + 1
    h_off = chg_off + len(config.charges)
    x = np.zeros((mol.n_atoms, config.atom_dim))
    degree = [0] * mol.n_atoms
    for b in mol.bonds:
        degree[b.begin] += 1
        degree[b.end] += 1
    for a in mol.atoms:
        try:
            el = config.elements.index(a.element)
        except ValueError:
            raise FeaturizationError(f"element {a.element} of atom {a.index} is outside the vocabulary") from None
        row = x[a.index]
        row[el] = 1.0
        row[deg_off + min(degree[a.index], config.max_degree)] = 1.0
        row[arom_off] = float(a.aromatic)
        charge = min(max(a.formal_charge, config.charges[0]), config.charges[-1])
        row[chg_off + config.charges.index(charge)] = 1.0
        row[h_off + min(a.total_h, config.max_h)] = 1.0
    return x


def bond_features(mol: MolGraph, config: FeatureConfig = FeatureConfig()) -> np.ndarray:
    x = np.zeros((mol.n_bonds, config.bond_dim))
    for k, b in enumerate(mol.bonds):
        x[k, int(b.order) - 1] = 1.0
        x[k, 4] = float(b.in_ring)
    return x


def featurize(mol: MolGraph, config: FeatureConfig = FeatureConfig()) -> tuple[np.ndarray, np.ndarray]:
    """Atom feature matrix (n_atoms x atom_dim) and bond matrix (n_bonds x bond_dim)."""
    return atom_features(mol, config), bond_features(mol, config)


def geom_labels(coords: np.ndarray) -> np.ndarray:
    """[radius of gyration, mean pairwise distance, max pairwise distance]."""
    r = np.asarray(coords, dtype=np.float64)
    if r.ndim != 2 or r.shape[0] == 0:
        raise ValueError("geom_labels needs a non-empty (n, 3) coordinate matrix")
    n = r.shape[0]
    if n == 1:
        return np.zeros(3)
    centered = r - r.mean(axis=0)
    rg = np.sqrt(np.mean(np.sum(centered**2, axis=1)))
    iu = np.triu_indices(n, 1)
    d = np.linalg.norm(r[:, None, :] - r[None, :, :], axis=-1)[iu]
    return np.array([rg, d.mean(), d.max()])


def prop_labels(mol: MolGraph) -> np.ndarray:
    """[atomic-number sum, heavy-atom count, ring count, heteroatom fraction]."""
    heavy = [a for a in mol.atoms if a.element != "H"]
    if not heavy:
        raise ValueError("prop_labels needs at least one heavy atom")
    z = sum(a.atomic_number for a in heavy)
    hetero = sum(1 for a in heavy if a.element != "C")
    return np.array([float(z), float(len(heavy)), float(len(mol.rings)), hetero / len(heavy)])

"""Morgan/ECFP-style circular fingerprints and Tanimoto similarity."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .smiles import MolGraph


@dataclass(frozen=True)
class Fingerprint:
    bits: np.ndarray  # bool, length nbits
    radius: int = 2

    @property
    def nbits(self) -> int:
        return int(self.bits.shape[0])

    @property
    def on_bits(self) -> list[int]:
        return [int(i) for i in np.flatnonzero(self.bits)]

    def popcount(self) -> int:
        return int(self.bits.sum())

    def __eq__(self, other):
        return isinstance(other, Fingerprint) and self.radius == other.radius and np.array_equal(self.bits, other.bits)

    def __hash__(self):
        return hash((self.radius, self.bits.tobytes()))


def stable_hash(obj) -> int:
    return int.from_bytes(hashlib.blake2b(repr(obj).encode(), digest_size=4).digest(), "little")


def atom_invariants(mol: MolGraph) -> list[int]:
    ring_atoms = mol.ring_atoms()
    degree = [0] * mol.n_atoms
    for b in mol.bonds:
        degree[b.begin] += 1
        degree[b.end] += 1
    return [
        stable_hash((a.element, degree[a.index], a.formal_charge, a.total_h, a.aromatic, a.index in ring_atoms))
        for a in mol.atoms
    ]


def ecfp_identifiers(mol: MolGraph, radius: int = 2) -> list[list[int]]:
    """Per-round lists of atom identifiers (round 0 = atom invariants)."""
    current = atom_invariants(mol)
    rounds = [list(current)]
    nbrs = [[] for _ in mol.atoms]
    for b in mol.bonds:
        nbrs[b.begin].append((int(b.order), b.end))
        nbrs[b.end].append((int(b.order), b.begin))
    for _ in range(radius):
        current = [
            stable_hash((current[i], tuple(sorted((order, current[j]) for order, j in nbrs[i]))))
            for i in range(mol.n_atoms)
        ]
        rounds.append(list(current))
    return rounds


def ecfp(mol: MolGraph, radius: int = 2, nbits: int = 2048) -> Fingerprint:
    bits = np.zeros(nbits, dtype=bool)
    for ids in ecfp_identifiers(mol, radius):
        for h in ids:
            bits[h % nbits] = True
    return Fingerprint(bits, radius)


def tanimoto(f1: Fingerprint, f2: Fingerprint) -> float:
    if f1.nbits != f2.nbits:
        raise ValueError(f"fingerprint lengths differ: {f1.nbits} vs {f2.nbits}")
    union = int(np.count_nonzero(f1.bits | f2.bits))
    if union == 0:
        return 0.0
    return int(np.count_nonzero(f1.bits & f2.bits)) / union

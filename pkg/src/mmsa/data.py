"""Molecule records, datasets, scaffold splitting and corpus I/O."""
from __future__ import annotations

import base64
import csv
import json
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .depict import embed_3d, layout_2d, rasterize
from .features import FeatureConfig, featurize, geom_labels, prop_labels
from .fingerprint import stable_hash
from .smiles import VALENCES, Atom, Bond, BondOrder, MolGraph, SmilesError, ValenceError, assign_valence, read_smiles, to_smiles

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")


@dataclass
class Molecule:
    graph: MolGraph
    x_v: np.ndarray
    x_e: np.ndarray
    image: np.ndarray
    coords: list[np.ndarray]
    y_geom: np.ndarray
    y_prop: np.ndarray
    labels: np.ndarray | None = None
    id: str = ""

    @property
    def smiles(self) -> str:
        return self.graph.smiles


@dataclass(frozen=True)
class Dataset:
    molecules: tuple[Molecule, ...]
    label_names: tuple[str, ...] = ()
    splits: tuple[str, ...] | None = None
    provenance: str = ""
    skipped: int = 0

    def __len__(self):
        return len(self.molecules)

    def __getitem__(self, i) -> Molecule:
        return self.molecules[i]

    def with_splits(self, splits: Sequence[str]) -> "Dataset":
        if len(splits) != len(self.molecules):
            raise ValueError("one split label per molecule required")
        return replace(self, splits=tuple(splits))

    def indices(self, split: str) -> list[int]:
        if self.splits is None:
            raise ValueError("dataset has no split assignment")
        return [i for i, s in enumerate(self.splits) if s == split]

    def label_index(self, name: str | int) -> int:
        if isinstance(name, int):
            return name
        try:
            return self.label_names.index(name)
        except ValueError:
            raise KeyError(f"no label column {name!r}; have {list(self.label_names)}") from None


def molecule_seed(smiles: str) -> int:
    return stable_hash(("mol", smiles))


def build_molecule(graph: MolGraph, config: FeatureConfig = FeatureConfig(), labels=None, mol_id: str = "") -> Molecule:
    """Derive every modality input and pre-training label from a valence-assigned graph.

    Layout and conformer seeds come from the SMILES text, so a molecule
    always receives the same image and coordinates.
    """
    seed = molecule_seed(graph.smiles)
    x_v, x_e = featurize(graph, config)
    img = rasterize(graph, layout_2d(graph, seed), config)
    img = np.round(img * 255.0) / 255.0  # 8-bit grid, loss-free through the JSONL cache
    coords = embed_3d(graph, seed, config.n_conf)
    return Molecule(
        graph=graph,
        x_v=x_v,
        x_e=x_e,
        image=img,
        coords=coords,
        y_geom=geom_labels(coords[0]),
        y_prop=prop_labels(graph),
        labels=None if labels is None else np.asarray(labels, dtype=np.float64),
        id=mol_id,
    )


# ----------------------------------------------------------------------------
# synthetic corpus

_RING_TEMPLATES = {
    # name: (elements, aromatic, ring bonds as (i, j, order))
    "benzene": (["C"] * 6, True, None),
    "pyridine": (["N"] + ["C"] * 5, True, None),
    "thiophene": (["S"] + ["C"] * 4, True, None),
    "cyclohexane": (["C"] * 6, False, None),
    "cyclopentane": (["C"] * 5, False, None),
    "oxolane": (["O"] + ["C"] * 4, False, None),
    "piperidine": (["N"] + ["C"] * 5, False, None),
    "naphthalene": (["C"] * 10, True, [(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (5, 6), (6, 7), (7, 8), (8, 9), (9, 0), (4, 9)]),
}
_CHAIN_HETERO = ("N", "O", "S", "F", "Cl")
_CHAIN_HETERO_P = (0.3, 0.3, 0.1, 0.15, 0.15)


class _Builder:
    def __init__(self):
        self.elements: list[str] = []
        self.aromatic: list[bool] = []
        self.bonds: list[tuple[int, int, BondOrder]] = []
        self.capacity: list[int] = []

    def add_atom(self, element: str, aromatic: bool, capacity: int) -> int:
        self.elements.append(element)
        self.aromatic.append(aromatic)
        self.capacity.append(capacity)
        return len(self.elements) - 1

    def bond(self, i: int, j: int, order: BondOrder):
        self.bonds.append((i, j, order))
        if order != BondOrder.AROMATIC:
            self.capacity[i] -= int(order)
            self.capacity[j] -= int(order)

    def add_ring(self, name: str) -> list[int]:
        elements, aromatic, edges = _RING_TEMPLATES[name]
        n = len(elements)
        edges = edges or [(k, (k + 1) % n) for k in range(n)]
        idx = [self.add_atom(el, aromatic, 0) for el in elements]
        order = BondOrder.AROMATIC if aromatic else BondOrder.SINGLE
        for a, b in edges:
            self.bonds.append((idx[a], idx[b], order))
        deg = defaultdict(int)
        for a, b in edges:
            deg[a] += 1
            deg[b] += 1
        for k, el in enumerate(elements):
            if aromatic:
                # aromatic C with two ring bonds keeps one substitutable H
                self.capacity[idx[k]] = 1 if el == "C" and deg[k] == 2 else 0
            else:
                self.capacity[idx[k]] = VALENCES[el][0] - deg[k]
        return idx

    def graph(self) -> MolGraph:
        atoms = [Atom(el, aromatic=ar, index=i) for i, (el, ar) in enumerate(zip(self.elements, self.aromatic))]
        bonds = [Bond(a, b, o) for a, b, o in self.bonds]
        return MolGraph(atoms=atoms, bonds=bonds)


def _random_graph(rng: np.random.Generator, ring_p: float, hetero_p: float) -> MolGraph:
    target = int(rng.integers(6, 21))
    bld = _Builder()
    if rng.random() < ring_p:
        names = [n for n, t in _RING_TEMPLATES.items() if len(t[0]) <= target]
        first = bld.add_ring(names[int(rng.integers(len(names)))])
        room = target - len(bld.elements)
        if room >= 5 and rng.random() < 0.35:
            fits = [n for n, t in _RING_TEMPLATES.items() if len(t[0]) <= room and n != "naphthalene"]
            name = fits[int(rng.integers(len(fits)))]
            n_link = int(rng.integers(0, min(2, room - len(_RING_TEMPLATES[name][0])) + 1))
            anchor = int(rng.choice([i for i in first if bld.capacity[i] > 0]))
            for _ in range(n_link):
                link = bld.add_atom("C", False, 4)
                bld.bond(anchor, link, BondOrder.SINGLE)
                anchor = link
            second = bld.add_ring(name)
            bld.bond(anchor, int(rng.choice([i for i in second if bld.capacity[i] > 0])), BondOrder.SINGLE)
    else:
        bld.add_atom("C", False, 4)
    while len(bld.elements) < target:
        open_sites = [i for i, c in enumerate(bld.capacity) if c > 0]
        if not open_sites:
            break
        site = int(rng.choice(open_sites))
        if rng.random() < hetero_p:
            el = str(rng.choice(_CHAIN_HETERO, p=_CHAIN_HETERO_P))
        else:
            el = "C"
        new = bld.add_atom(el, False, VALENCES[el][0])
        order = BondOrder.SINGLE
        if (not bld.aromatic[site] and bld.capacity[site] >= 2 and VALENCES[el][0] >= 2
                and rng.random() < 0.1):
            order = BondOrder.DOUBLE
        bld.bond(site, new, order)
    return bld.graph()


def synthetic_labels(graph: MolGraph) -> tuple[float, int]:
    """(binary class, heavy-atom count) for a synthetic molecule."""
    prop = prop_labels(graph)
    active = 1.0 if (prop[2] >= 1 and prop[3] > 0.1) else 0.0
    return active, int(prop[1])


def gen_synthetic(n: int, seed: int = 0, config: FeatureConfig = FeatureConfig(),
                  ring_p: float = 0.6, hetero_p: float = 0.25) -> Dataset:
    """Random valence-respecting molecules with a binary and a regression label.

    class = 1 iff the molecule has a ring and heteroatom fraction > 0.1;
    size = heavy-atom count + N(0, 0.1).
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    mols = []
    for k in range(n):
        raw = _random_graph(rng, ring_p, hetero_p)
        graph = read_smiles(to_smiles(assign_valence(raw)))
        active, heavy = synthetic_labels(graph)
        size = heavy + rng.normal(scale=0.1)
        mols.append(build_molecule(graph, config, labels=[active, size], mol_id=f"syn{k}"))
    return Dataset(tuple(mols), ("label", "size"), None, f"synthetic:n={n}:seed={seed}")


# ----------------------------------------------------------------------------
# scaffold split


def scaffold_atoms(mol: MolGraph) -> set[int]:
    """Atoms left after repeatedly deleting non-ring atoms of degree <= 1."""
    ring = mol.ring_atoms()
    alive = set(range(mol.n_atoms))
    adj = mol.adjacency()
    changed = True
    while changed:
        changed = False
        for i in sorted(alive):
            if i in ring:
                continue
            if sum(1 for j in adj[i] if j in alive) <= 1:
                alive.discard(i)
                changed = True
    return alive


def scaffold_key(mol: MolGraph) -> str:
    keep = scaffold_atoms(mol)
    if not keep:
        return ""
    adj = mol.adjacency()
    multiset = sorted(
        (mol.atoms[i].element, mol.atoms[i].aromatic, sum(1 for j in adj[i] if j in keep)) for i in keep
    )
    ring_sizes = sorted(len(r) for r in mol.rings if set(r) <= keep)
    return f"{stable_hash((multiset, ring_sizes)):08x}"


def scaffold_split(dataset: Dataset, fractions: Sequence[float] = (0.8, 0.1, 0.1), seed: int = 0) -> list[str]:
    """Assign whole scaffold groups to train, then val, then test.

    Groups are ordered by size (largest first, ties by key).  A group goes
    to the first split, in train/val/test order, still below its quota.
    The assignment is fully determined by the corpus; ``seed`` is accepted
    for interface symmetry and does not change the result.
    """
    fr = [float(f) for f in fractions]
    if len(fr) != 3 or any(f < 0 or not math.isfinite(f) for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
        raise ValueError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    groups: dict[str, list[int]] = defaultdict(list)
    for i, m in enumerate(dataset.molecules):
        groups[scaffold_key(m.graph)].append(i)
    ordered = sorted(groups.items(), key=lambda kv: (-len(kv[1]), kv[0]))
    n = len(dataset)
    quota = [f * n for f in fr]
    counts = [0, 0, 0]
    out = [""] * n
    for _, members in ordered:
        target = next((k for k in range(3) if counts[k] < quota[k] - 1e-9), 2)
        for i in members:
            out[i] = SPLITS[target]
        counts[target] += len(members)
    return out


# ----------------------------------------------------------------------------
# CSV ingestion


def _parse_label(cell: str) -> float:
    cell = cell.strip()
    if cell == "":
        return math.nan
    return float(cell)


def load_csv(path: str | Path, smiles_column: str = "smiles", label_columns: Sequence[str] = (),
             config: FeatureConfig = FeatureConfig()) -> Dataset:
    """MoleculeNet-style CSV; unparseable SMILES are skipped and counted."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for col in [smiles_column, *label_columns]:
            if col not in header:
                raise KeyError(f"column {col!r} not found in {path} (have {header})")
        mols = []
        skipped = 0
        for row_no, row in enumerate(reader):
            text = (row[smiles_column] or "").strip()
            try:
                graph = read_smiles(text)
                labels = [_parse_label(row[c] or "") for c in label_columns]
                mols.append(build_molecule(graph, config, labels=labels if label_columns else None, mol_id=f"row{row_no}"))
            except (SmilesError, ValenceError, ValueError) as exc:
                skipped += 1
                log.debug("skipping row %d (%r): %s", row_no, text, exc)
    if skipped:
        log.warning("%s: skipped %d unparseable rows", path, skipped)
    return Dataset(tuple(mols), tuple(label_columns), None, str(path), skipped)


# ----------------------------------------------------------------------------
# JSON-lines cache


def molecule_record(mol: Molecule, label_names: Sequence[str] = (), split: str | None = None) -> dict:
    img = np.round(mol.image * 255.0).astype(np.uint8)
    labels = None
    if mol.labels is not None:
        labels = {name: (None if math.isnan(v) else float(v)) for name, v in zip(label_names, mol.labels)}
    return {
        "id": mol.id,
        "smiles": mol.smiles,
        "atoms": [
            {"element": a.element, "aromatic": a.aromatic, "charge": a.formal_charge, "h": a.total_h}
            for a in mol.graph.atoms
        ],
        "bonds": [[b.begin, b.end, int(b.order)] for b in mol.graph.bonds],
        "image": base64.b64encode(img.tobytes()).decode("ascii"),
        "coords": [r.tolist() for r in mol.coords],
        "y_geom": mol.y_geom.tolist(),
        "y_prop": mol.y_prop.tolist(),
        "labels": labels,
        "split": split,
    }


def save_jsonl(dataset: Dataset, path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for i, mol in enumerate(dataset.molecules):
            split = dataset.splits[i] if dataset.splits is not None else None
            fh.write(json.dumps(molecule_record(mol, dataset.label_names, split)) + "\n")


def molecule_from_record(rec: dict, config: FeatureConfig = FeatureConfig()) -> tuple[Molecule, dict | None, str | None]:
    graph = read_smiles(rec["smiles"])
    if len(rec["atoms"]) != graph.n_atoms or len(rec["bonds"]) != graph.n_bonds:
        raise ValueError(f"record {rec.get('id')!r} disagrees with its SMILES")
    x_v, x_e = featurize(graph, config)
    size = config.image_size
    raw = np.frombuffer(base64.b64decode(rec["image"]), dtype=np.uint8)
    image = raw.reshape(size, size, 3).astype(np.float64) / 255.0
    coords = [np.asarray(r, dtype=np.float64).reshape(graph.n_atoms, 3) for r in rec["coords"]]
    mol = Molecule(graph, x_v, x_e, image, coords, np.asarray(rec["y_geom"], dtype=np.float64),
                   np.asarray(rec["y_prop"], dtype=np.float64), None, rec.get("id", ""))
    return mol, rec.get("labels"), rec.get("split")


def load_jsonl(path: str | Path, config: FeatureConfig = FeatureConfig()) -> Dataset:
    mols, label_dicts, splits = [], [], []
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            mol, labels, split = molecule_from_record(json.loads(line), config)
            mols.append(mol)
            label_dicts.append(labels)
            splits.append(split)
    names: list[str] = []
    for d in label_dicts:
        for k in d or {}:
            if k not in names:
                names.append(k)
    for mol, d in zip(mols, label_dicts):
        if d is not None:
            mol.labels = np.array([math.nan if d.get(k) is None else float(d[k]) for k in names])
    has_splits = all(s is not None for s in splits) and mols
    return Dataset(tuple(mols), tuple(names), tuple(splits) if has_splits else None, str(path))


def iter_smiles(dataset: Dataset) -> Iterable[str]:
    return (m.smiles for m in dataset.molecules)

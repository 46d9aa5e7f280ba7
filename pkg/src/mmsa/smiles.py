"""SMILES subset parser, valence assignment and ring perception.

Supported: organic-subset and bracket atoms over B C N O P S F Cl Br I H,
lowercase aromatic atoms, ``- = # :`` bonds, branches, ring closures by
digit or ``%nn``.  Stereo markers (``/ \\ @``) and isotopes are read and
ignored.  Disconnected input (``.``) is rejected.
"""
from __future__ import annotations

import dataclasses
from collections import deque
from dataclasses import dataclass, field
from enum import IntEnum


class SmilesError(ValueError):
    """Malformed or unsupported SMILES; ``position`` is a byte offset."""

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at offset {position})")
        self.position = position


class ValenceError(ValueError):
    def __init__(self, message: str, atom_index: int):
        super().__init__(f"atom {atom_index}: {message}")
        self.atom_index = atom_index


class BondOrder(IntEnum):
    SINGLE = 1
    DOUBLE = 2
    TRIPLE = 3
    AROMATIC = 4

    @property
    def symbol(self) -> str:
        return {1: "-", 2: "=", 3: "#", 4: ":"}[int(self)]


ELEMENTS = ("B", "C", "N", "O", "P", "S", "F", "Cl", "Br", "I", "H")
ATOMIC_NUMBER = {"H": 1, "B": 5, "C": 6, "N": 7, "O": 8, "F": 9, "P": 15, "S": 16, "Cl": 17, "Br": 35, "I": 53}
AROMATIC_ELEMENTS = {"b": "B", "c": "C", "n": "N", "o": "O", "p": "P", "s": "S"}
VALENCES = {
    "B": (3,), "C": (4,), "N": (3,), "O": (2,), "P": (3, 5), "S": (2, 4, 6),
    "F": (1,), "Cl": (1,), "Br": (1,), "I": (1,), "H": (1,),
}
_ORGANIC = ("Cl", "Br", "B", "C", "N", "O", "P", "S", "F", "I")
_BOND_SYMBOLS = {"-": BondOrder.SINGLE, "=": BondOrder.DOUBLE, "#": BondOrder.TRIPLE, ":": BondOrder.AROMATIC,
                 "/": BondOrder.SINGLE, "\\": BondOrder.SINGLE}


@dataclass
class Atom:
    element: str
    aromatic: bool = False
    formal_charge: int = 0
    explicit_h: int | None = None
    index: int = 0
    implicit_h: int = 0

    @property
    def bracket(self) -> bool:
        return self.explicit_h is not None

    @property
    def total_h(self) -> int:
        return (self.explicit_h or 0) + self.implicit_h

    @property
    def atomic_number(self) -> int:
        return ATOMIC_NUMBER[self.element]


@dataclass
class Bond:
    begin: int
    end: int
    order: BondOrder = BondOrder.SINGLE
    in_ring: bool = False

    @property
    def endpoints(self) -> tuple[int, int]:
        return (self.begin, self.end)

    def other(self, i: int) -> int:
        return self.end if i == self.begin else self.begin


@dataclass
class MolGraph:
    atoms: list[Atom] = field(default_factory=list)
    bonds: list[Bond] = field(default_factory=list)
    rings: list[list[int]] = field(default_factory=list)
    smiles: str = ""

    @property
    def n_atoms(self) -> int:
        return len(self.atoms)

    @property
    def n_bonds(self) -> int:
        return len(self.bonds)

    def neighbors(self, i: int) -> list[tuple[int, Bond]]:
        return [(b.other(i), b) for b in self.bonds if i in (b.begin, b.end)]

    def adjacency(self) -> list[list[int]]:
        adj: list[list[int]] = [[] for _ in self.atoms]
        for b in self.bonds:
            adj[b.begin].append(b.end)
            adj[b.end].append(b.begin)
        return adj

    def degree(self, i: int) -> int:
        return sum(1 for b in self.bonds if i in (b.begin, b.end))

    def ring_atoms(self) -> set[int]:
        return {a for r in self.rings for a in r}

    def copy(self) -> "MolGraph":
        return MolGraph(
            atoms=[dataclasses.replace(a) for a in self.atoms],
            bonds=[dataclasses.replace(b) for b in self.bonds],
            rings=[list(r) for r in self.rings],
            smiles=self.smiles,
        )

    def permuted(self, perm) -> "MolGraph":
        """Copy with atom ``i`` moved to position ``perm[i]``."""
        perm = [int(p) for p in perm]
        atoms: list[Atom | None] = [None] * len(self.atoms)
        for old, a in enumerate(self.atoms):
            atoms[perm[old]] = dataclasses.replace(a, index=perm[old])
        bonds = [dataclasses.replace(b, begin=perm[b.begin], end=perm[b.end]) for b in self.bonds]
        mol = MolGraph(atoms=atoms, bonds=bonds, smiles=self.smiles)
        mol.rings = perceive_rings(mol)
        return mol


# ----------------------------------------------------------------------------
# parsing


def _parse_bracket(text: str, start: int) -> tuple[Atom, int]:
    end = text.find("]", start)
    if end < 0:
        raise SmilesError("unterminated bracket atom", start)
    body = text[start + 1 : end]
    pos = 0
    while pos < len(body) and body[pos].isdigit():
        pos += 1  # isotope, ignored
    symbol = None
    aromatic = False
    for cand in ("Cl", "Br", "B", "C", "N", "O", "P", "S", "F", "I", "H"):
        if body.startswith(cand, pos):
            symbol = cand
            break
    if symbol is None:
        for cand, el in AROMATIC_ELEMENTS.items():
            if body.startswith(cand, pos):
                symbol, aromatic = el, True
                break
    if symbol is None:
        raise SmilesError(f"unknown element in [{body}]", start + 1 + pos)
    pos += 1 if aromatic else len(symbol)
    if pos < len(body) and body[pos] == "@":
        while pos < len(body) and body[pos] == "@":
            pos += 1
        for cls in ("TH", "AL", "SP", "TB", "OH"):
            if body.startswith(cls, pos):
                pos += 2
                while pos < len(body) and body[pos].isdigit():
                    pos += 1
                break
    hcount = 0
    if pos < len(body) and body[pos] == "H":
        pos += 1
        digits = ""
        while pos < len(body) and body[pos].isdigit():
            digits += body[pos]
            pos += 1
        hcount = int(digits) if digits else 1
    charge = 0
    if pos < len(body) and body[pos] in "+-":
        sign = 1 if body[pos] == "+" else -1
        pos += 1
        digits = ""
        while pos < len(body) and body[pos].isdigit():
            digits += body[pos]
            pos += 1
        if digits:
            charge = sign * int(digits)
        else:
            charge = sign
            while pos < len(body) and body[pos] == ("+" if sign > 0 else "-"):
                charge += sign
                pos += 1
    if pos < len(body) and body[pos] == ":":
        pos += 1
        while pos < len(body) and body[pos].isdigit():
            pos += 1  # atom class, ignored
    if pos != len(body):
        raise SmilesError(f"unexpected {body[pos]!r} in bracket atom", start + 1 + pos)
    return Atom(symbol, aromatic=aromatic, formal_charge=charge, explicit_h=hcount), end + 1


def parse_smiles(text: str) -> MolGraph:
    """Parse ``text`` into a connected MolGraph with perceived rings."""
    if not isinstance(text, str) or not text:
        raise SmilesError("empty SMILES", 0)
    if not text.isascii():
        bad = next(i for i, ch in enumerate(text) if ord(ch) > 127)
        raise SmilesError("non-ASCII character", len(text[:bad].encode()))
    atoms: list[Atom] = []
    atom_pos: list[int] = []
    bonds: list[Bond] = []
    pairs: set[frozenset] = set()
    branch_stack: list[tuple[int, int]] = []
    open_rings: dict[int, tuple[int, BondOrder | None, int]] = {}
    prev: int | None = None
    pending: BondOrder | None = None
    pending_pos = -1
    i = 0
    n = len(text)

    def add_bond(a: int, b: int, order: BondOrder | None, pos: int):
        if a == b:
            raise SmilesError("atom bonded to itself", pos)
        key = frozenset((a, b))
        if key in pairs:
            raise SmilesError(f"duplicate bond between atoms {a} and {b}", pos)
        pairs.add(key)
        if order is None:
            order = BondOrder.AROMATIC if atoms[a].aromatic and atoms[b].aromatic else BondOrder.SINGLE
        bonds.append(Bond(a, b, order))

    while i < n:
        ch = text[i]
        if ch == "[" or ch.isalpha() or ch == "*":
            if ch == "[":
                atom, nxt = _parse_bracket(text, i)
            else:
                sym = None
                for cand in _ORGANIC:
                    if text.startswith(cand, i):
                        sym = cand
                        break
                if sym is not None:
                    atom, nxt = Atom(sym), i + len(sym)
                elif ch in AROMATIC_ELEMENTS:
                    atom, nxt = Atom(AROMATIC_ELEMENTS[ch], aromatic=True), i + 1
                else:
                    raise SmilesError(f"unknown element {ch!r}", i)
            atom.index = len(atoms)
            atoms.append(atom)
            atom_pos.append(i)
            if prev is not None:
                add_bond(prev, atom.index, pending, i)
            elif pending is not None:
                raise SmilesError("bond symbol without preceding atom", pending_pos)
            pending = None
            prev = atom.index
            i = nxt
        elif ch in _BOND_SYMBOLS:
            if pending is not None:
                raise SmilesError("two consecutive bond symbols", i)
            if prev is None:
                raise SmilesError("bond symbol without preceding atom", i)
            pending, pending_pos = _BOND_SYMBOLS[ch], i
            i += 1
        elif ch == "(":
            if prev is None:
                raise SmilesError("branch without preceding atom", i)
            if pending is not None:
                raise SmilesError("bond symbol before branch", pending_pos)
            branch_stack.append((prev, i))
            i += 1
        elif ch == ")":
            if not branch_stack:
                raise SmilesError("unbalanced ')'", i)
            if pending is not None:
                raise SmilesError("dangling bond symbol", pending_pos)
            prev, _ = branch_stack.pop()
            if i > 0 and text[i - 1] == "(":
                raise SmilesError("empty branch", i)
            i += 1
        elif ch.isdigit() or ch == "%":
            if prev is None:
                raise SmilesError("ring closure without preceding atom", i)
            if ch == "%":
                digits = text[i + 1 : i + 3]
                if len(digits) != 2 or not digits.isdigit():
                    raise SmilesError("malformed %nn ring closure", i)
                label, width = int(text[i + 1 : i + 3]), 3
            else:
                label, width = int(ch), 1
            if label in open_rings:
                other, order, opos = open_rings.pop(label)
                if order is not None and pending is not None and order != pending:
                    raise SmilesError(f"conflicting bond orders on ring closure {label}", i)
                add_bond(other, prev, pending if pending is not None else order, i)
            else:
                open_rings[label] = (prev, pending, i)
            pending = None
            i += width
        elif ch == ".":
            raise SmilesError("disconnected fragments ('.') are not supported", i)
        elif ch == "@":
            i += 1
        else:
            raise SmilesError(f"unexpected character {ch!r}", i)

    if pending is not None:
        raise SmilesError("dangling bond symbol", pending_pos)
    if branch_stack:
        raise SmilesError("unbalanced '('", branch_stack[-1][1])
    if open_rings:
        label, (_, _, opos) = min(open_rings.items(), key=lambda kv: kv[1][2])
        raise SmilesError(f"unclosed ring closure {label}", opos)
    if not atoms:
        raise SmilesError("no atoms", 0)

    mol = MolGraph(atoms=atoms, bonds=bonds, smiles=text)
    mol.rings = perceive_rings(mol)
    in_ring = mol.ring_atoms()
    for a in atoms:
        if a.aromatic and a.index not in in_ring:
            raise SmilesError(f"aromatic atom {a.index} is not in a ring", atom_pos[a.index])
    for b in bonds:
        if b.order == BondOrder.AROMATIC and not b.in_ring:
            raise SmilesError(f"aromatic bond {b.begin}-{b.end} is not in a ring", atom_pos[b.end])
    return mol


# ----------------------------------------------------------------------------
# valence


def allowed_valences(element: str, charge: int) -> tuple[int, ...]:
    base = VALENCES[element]
    if element == "C":
        vals = tuple(v - abs(charge) for v in base)
    elif element == "B":
        vals = tuple(v - charge for v in base)
    elif element == "H":
        vals = tuple(v - abs(charge) for v in base)
    else:
        vals = tuple(v + charge for v in base)
    return tuple(v for v in vals if v >= 0)


def assign_valence(mol: MolGraph) -> MolGraph:
    """Return a copy with implicit hydrogen counts filled in.

    Aromatic bonds contribute one each plus one extra for the atom's share
    of a ring double bond; the extra is dropped when it cannot fit the
    lowest valence (pyrrole-type ``[nH]``, furan ``o``, thiophene ``s``).
    """
    out = mol.copy()
    for atom in out.atoms:
        plain = 0
        n_arom = 0
        for _, b in out.neighbors(atom.index):
            if b.order == BondOrder.AROMATIC:
                n_arom += 1
            else:
                plain += int(b.order)
        vals = allowed_valences(atom.element, atom.formal_charge)
        if not vals:
            raise ValenceError(f"no valid valence for {atom.element} with charge {atom.formal_charge}", atom.index)
        explicit = atom.explicit_h or 0
        with_pi = plain + n_arom + (1 if n_arom else 0) + explicit
        without_pi = plain + n_arom + explicit
        if atom.bracket:
            used = with_pi if with_pi <= max(vals) and (not n_arom or with_pi <= vals[0]) else without_pi
            if used > max(vals):
                raise ValenceError(f"valence {used} exceeds maximum {max(vals)} for {atom.element}", atom.index)
            atom.implicit_h = 0
            continue
        if n_arom:
            if with_pi <= vals[0]:
                atom.implicit_h = vals[0] - with_pi
                continue
            if without_pi <= vals[0]:
                atom.implicit_h = vals[0] - without_pi
                continue
        used = with_pi
        fit = [v for v in vals if v >= used]
        if not fit:
            raise ValenceError(f"valence {used} exceeds maximum {max(vals)} for {atom.element}", atom.index)
        atom.implicit_h = fit[0] - used
    return out


def read_smiles(text: str) -> MolGraph:
    """Parse and assign valence in one call."""
    return assign_valence(parse_smiles(text))


# ----------------------------------------------------------------------------
# rings


def _bfs_tree(adj: list[list[int]], root: int) -> tuple[list[int], list[int]]:
    parent = [-1] * len(adj)
    dist = [-1] * len(adj)
    dist[root] = 0
    q = deque([root])
    while q:
        u = q.popleft()
        for v in sorted(adj[u]):
            if dist[v] < 0:
                dist[v] = dist[u] + 1
                parent[v] = u
                q.append(v)
    return parent, dist


def _path_to_root(parent: list[int], v: int) -> list[int]:
    path = [v]
    while parent[path[-1]] >= 0:
        path.append(parent[path[-1]])
    return path


def perceive_rings(mol: MolGraph) -> list[list[int]]:
    """Smallest set of smallest rings; also sets ``in_ring`` on bonds.

    Candidates follow Horton: for every root r and edge (x, y) the cycle
    P(r, x) + (x, y) + P(y, r) built from BFS shortest paths.  Candidates
    are taken shortest first and kept when independent over GF(2) of the
    ones already kept, until the cycle rank is reached.
    """
    n = mol.n_atoms
    for b in mol.bonds:
        b.in_ring = False
    if n == 0:
        return []
    adj = mol.adjacency()
    edge_id = {frozenset(b.endpoints): k for k, b in enumerate(mol.bonds)}
    # cycle rank per connected component
    seen = [False] * n
    components = 0
    for s in range(n):
        if not seen[s]:
            components += 1
            stack = [s]
            seen[s] = True
            while stack:
                u = stack.pop()
                for v in adj[u]:
                    if not seen[v]:
                        seen[v] = True
                        stack.append(v)
    rank = mol.n_bonds - n + components
    if rank <= 0:
        return []

    candidates: dict[int, list[int]] = {}
    for root in range(n):
        parent, dist = _bfs_tree(adj, root)
        for b in mol.bonds:
            x, y = b.begin, b.end
            if dist[x] < 0 or dist[y] < 0 or parent[x] == y or parent[y] == x:
                continue
            px = _path_to_root(parent, x)
            py = _path_to_root(parent, y)
            if set(px) & set(py) != {root}:
                continue
            # root .. x then y .. (back to root)
            ring = list(reversed(px)) + py[:-1]
            mask = 0
            for k in range(len(ring)):
                e = edge_id[frozenset((ring[k], ring[(k + 1) % len(ring)]))]
                mask |= 1 << e
            candidates.setdefault(mask, ring)

    ordered = sorted(candidates.items(), key=lambda kv: (len(kv[1]), sorted(kv[1]), kv[0]))
    basis: dict[int, int] = {}  # pivot bit -> reduced vector
    rings: list[list[int]] = []
    for mask, ring in ordered:
        vec = mask
        while vec:
            pivot = vec.bit_length() - 1
            if pivot in basis:
                vec ^= basis[pivot]
            else:
                basis[pivot] = vec
                break
        if vec:
            rings.append(_canonical_ring(ring))
            if len(rings) == rank:
                break
    for ring in rings:
        for k in range(len(ring)):
            mol.bonds[edge_id[frozenset((ring[k], ring[(k + 1) % len(ring)]))]].in_ring = True
    return rings


def _canonical_ring(ring: list[int]) -> list[int]:
    k = ring.index(min(ring))
    r = ring[k:] + ring[:k]
    if len(r) > 2 and r[-1] < r[1]:
        r = [r[0]] + r[:0:-1]
    return r


# ----------------------------------------------------------------------------
# writing


def to_smiles(mol: MolGraph) -> str:
    """Depth-first SMILES for ``mol`` (not canonical)."""
    if mol.n_atoms == 0:
        return ""
    adj = mol.adjacency()
    bond_of = {frozenset(b.endpoints): b for b in mol.bonds}
    visited = [False] * mol.n_atoms
    tree_edges: set[frozenset] = set()
    order: list[int] = []

    def dfs(u: int):
        visited[u] = True
        order.append(u)
        for v in sorted(adj[u]):
            if not visited[v]:
                tree_edges.add(frozenset((u, v)))
                dfs(v)

    dfs(0)
    closures: dict[int, list[tuple[int, Bond]]] = {i: [] for i in range(mol.n_atoms)}
    labels: dict[frozenset, int] = {}
    free = list(range(1, 100))
    pos = {a: k for k, a in enumerate(order)}
    ring_bonds = sorted((b for b in mol.bonds if frozenset(b.endpoints) not in tree_edges),
                        key=lambda b: (min(pos[b.begin], pos[b.end]), max(pos[b.begin], pos[b.end])))

    def atom_str(a: Atom) -> str:
        sym = a.element.lower() if a.aromatic else a.element
        if not a.bracket and a.formal_charge == 0:
            return sym
        h = a.total_h
        hs = "" if h == 0 else ("H" if h == 1 else f"H{h}")
        c = a.formal_charge
        cs = "" if c == 0 else ("+" if c == 1 else "-" if c == -1 else f"{c:+d}")
        return f"[{sym}{hs}{cs}]"

    def bond_str(b: Bond) -> str:
        a1, a2 = mol.atoms[b.begin], mol.atoms[b.end]
        if b.order == BondOrder.AROMATIC:
            return ""
        if b.order == BondOrder.SINGLE:
            return "-" if a1.aromatic and a2.aromatic else ""
        return b.order.symbol

    opened: dict[int, list[tuple[frozenset, Bond]]] = {i: [] for i in range(mol.n_atoms)}
    for b in ring_bonds:
        first = b.begin if pos[b.begin] < pos[b.end] else b.end
        opened[first].append((frozenset(b.endpoints), b))

    out: list[str] = []
    visited2 = [False] * mol.n_atoms

    def emit(u: int):
        visited2[u] = True
        out.append(atom_str(mol.atoms[u]))
        digits = []
        for key, b in opened[u]:
            lab = free.pop(0)
            labels[key] = lab
            digits.append((lab, b, True))
        for v in adj[u]:
            key = frozenset((u, v))
            if key in labels and key not in tree_edges and visited2[v]:
                digits.append((labels[key], bond_of[key], False))
        for lab, b, is_open in digits:
            s = bond_str(b) if is_open else ""
            out.append(s + (str(lab) if lab < 10 else f"%{lab:02d}"))
            if not is_open:
                free.append(lab)
                free.sort()
                del labels[frozenset(b.endpoints)]
        children = [v for v in sorted(adj[u]) if frozenset((u, v)) in tree_edges and not visited2[v]]
        for k, v in enumerate(children):
            last = k == len(children) - 1
            if not last:
                out.append("(")
            out.append(bond_str(bond_of[frozenset((u, v))]))
            emit(v)
            if not last:
                out.append(")")

    emit(0)
    return "".join(out)

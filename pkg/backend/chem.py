"""
Molecular graphs, a SMILES-subset reader/writer with canonical ordering,
feature tensors, Kekulé-aware valence checking and valence repair.
"""

import logging
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple

import networkx as nx
import numpy as np

from .errors import GraphError, SmilesError

log = logging.getLogger(__name__)

MAX_ATOMS = 30
ELEMENTS: Tuple[str, ...] = ("C", "N", "O", "F", "P", "S", "Cl", "Br", "I")
AROMATIC_ELEMENTS = frozenset({"C", "N", "O", "P", "S"})
MAX_VALENCE: Dict[str, int] = {"C": 4, "N": 3, "O": 2, "F": 1, "P": 5, "S": 6, "Cl": 1, "Br": 1, "I": 1}
ATOMIC_MASS: Dict[str, float] = {
    "C": 12.011, "N": 14.007, "O": 15.999, "F": 18.998, "P": 30.974,
    "S": 32.06, "Cl": 35.45, "Br": 79.904, "I": 126.904,
}


class BondType(IntEnum):
    NONE = 0
    SINGLE = 1
    DOUBLE = 2
    TRIPLE = 3
    AROMATIC = 4


NUM_EDGE_CLASSES = len(BondType)

# (element, aromatic) pairs that SMILES can write; halogens are never aromatic.
NODE_CLASSES: Tuple[Tuple[str, bool], ...] = tuple(
    (el, arom) for el in ELEMENTS for arom in (False, True) if not arom or el in AROMATIC_ELEMENTS
)
NODE_INDEX: Dict[Tuple[str, bool], int] = {cls: i for i, cls in enumerate(NODE_CLASSES)}
NUM_NODE_CLASSES = len(NODE_CLASSES)


# ------------------------
# Graph type
# ------------------------
@dataclass(frozen=True, eq=False)
class MolGraph:
    """Heavy-atom graph. `bonds[i, j]` holds a BondType value; implicit hydrogens are not nodes."""

    atoms: Tuple[str, ...]
    aromatic: Tuple[bool, ...]
    bonds: np.ndarray
    notes: Tuple[str, ...] = field(default=())

    def __post_init__(self):
        n = len(self.atoms)
        bonds = np.asarray(self.bonds, dtype=np.int8)
        object.__setattr__(self, "atoms", tuple(self.atoms))
        object.__setattr__(self, "aromatic", tuple(bool(a) for a in self.aromatic))
        if not 1 <= n <= MAX_ATOMS:
            raise GraphError(f"atom count {n} outside 1..{MAX_ATOMS}")
        if len(self.aromatic) != n or bonds.shape != (n, n):
            raise GraphError(f"inconsistent sizes: {n} atoms, {len(self.aromatic)} flags, bonds {bonds.shape}")
        for el, arom in zip(self.atoms, self.aromatic):
            if el not in MAX_VALENCE:
                raise GraphError(f"element '{el}' not in vocabulary")
            if arom and el not in AROMATIC_ELEMENTS:
                raise GraphError(f"element '{el}' cannot be aromatic")
        if not np.array_equal(bonds, bonds.T):
            raise GraphError("bond matrix is not symmetric")
        if np.any(np.diag(bonds) != 0):
            raise GraphError("bond matrix diagonal must be empty")
        if bonds.min() < 0 or bonds.max() > BondType.AROMATIC:
            raise GraphError("bond matrix holds unknown bond types")
        ii, jj = np.nonzero(bonds == BondType.AROMATIC)
        for i, j in zip(ii, jj):
            if not (self.aromatic[i] and self.aromatic[j]):
                raise GraphError(f"aromatic bond {i}-{j} between non-aromatic atoms")
        bonds.setflags(write=False)
        object.__setattr__(self, "bonds", bonds)

    @property
    def n_atoms(self) -> int:
        return len(self.atoms)

    @property
    def n_bonds(self) -> int:
        return int(np.count_nonzero(np.triu(self.bonds)))

    def neighbors(self, i: int) -> List[Tuple[int, BondType]]:
        return [(int(j), BondType(self.bonds[i, j])) for j in np.nonzero(self.bonds[i])[0]]

    def degree(self, i: int) -> int:
        return int(np.count_nonzero(self.bonds[i]))

    def edges(self) -> List[Tuple[int, int, BondType]]:
        ii, jj = np.nonzero(np.triu(self.bonds))
        return [(int(i), int(j), BondType(self.bonds[i, j])) for i, j in zip(ii, jj)]

    def permute(self, order: Sequence[int]) -> "MolGraph":
        """New graph whose atom k is this graph's atom order[k]."""
        idx = np.asarray(order, dtype=np.int64)
        if sorted(idx.tolist()) != list(range(self.n_atoms)):
            raise GraphError("permute needs a permutation of all atoms")
        return MolGraph(
            atoms=tuple(self.atoms[i] for i in idx),
            aromatic=tuple(self.aromatic[i] for i in idx),
            bonds=self.bonds[np.ix_(idx, idx)],
            notes=self.notes,
        )

    def subgraph(self, nodes: Sequence[int]) -> "MolGraph":
        idx = sorted(int(i) for i in nodes)
        return MolGraph(
            atoms=tuple(self.atoms[i] for i in idx),
            aromatic=tuple(self.aromatic[i] for i in idx),
            bonds=self.bonds[np.ix_(idx, idx)],
            notes=self.notes,
        )

    def to_networkx(self) -> nx.Graph:
        graph = nx.Graph()
        for i, (el, arom) in enumerate(zip(self.atoms, self.aromatic)):
            graph.add_node(i, element=el, aromatic=arom)
        for i, j, bond in self.edges():
            graph.add_edge(i, j, bond=int(bond))
        return graph

    def connected_components(self) -> List[List[int]]:
        comps = [sorted(c) for c in nx.connected_components(self.to_networkx())]
        return sorted(comps, key=lambda c: (-len(c), c[0]))

    def is_connected(self) -> bool:
        return len(self.connected_components()) == 1

    def largest_component(self) -> Tuple["MolGraph", bool]:
        """Largest connected component (ties: lowest first atom index) and whether anything was dropped."""
        comps = self.connected_components()
        if len(comps) == 1:
            return self, False
        return self.subgraph(comps[0]), True

    def same_as(self, other: "MolGraph") -> bool:
        """Exact labeled equality (atom order matters)."""
        return (
            self.atoms == other.atoms
            and self.aromatic == other.aromatic
            and np.array_equal(self.bonds, other.bonds)
        )


def is_isomorphic(a: MolGraph, b: MolGraph) -> bool:
    if a.n_atoms != b.n_atoms or a.n_bonds != b.n_bonds:
        return False
    return nx.is_isomorphic(
        a.to_networkx(),
        b.to_networkx(),
        node_match=lambda x, y: x["element"] == y["element"] and x["aromatic"] == y["aromatic"],
        edge_match=lambda x, y: x["bond"] == y["bond"],
    )


# ------------------------
# SMILES reader
# ------------------------
_BOND_SYMBOLS = {"-": BondType.SINGLE, "=": BondType.DOUBLE, "#": BondType.TRIPLE, ":": BondType.AROMATIC}
_AROMATIC_SYMBOLS = {"c": "C", "n": "N", "o": "O", "p": "P", "s": "S"}
_TWO_LETTER = ("Cl", "Br")
_ONE_LETTER = {"C", "N", "O", "F", "P", "S", "I"}


def _read_element(text: str, pos: int, bracket: bool) -> Tuple[str, bool, int]:
    for sym in _TWO_LETTER:
        if text.startswith(sym, pos):
            return sym, False, pos + 2
    ch = text[pos]
    if ch in _ONE_LETTER:
        # inside brackets a trailing lowercase letter would form another element (e.g. [Na])
        if bracket and pos + 1 < len(text) and text[pos + 1].islower():
            raise SmilesError("unknown_atom", f"unknown atom symbol '{text[pos:pos + 2]}'", pos)
        return ch, False, pos + 1
    if ch in _AROMATIC_SYMBOLS:
        if bracket and pos + 1 < len(text) and text[pos + 1].islower():
            raise SmilesError("unknown_atom", f"unknown atom symbol '{text[pos:pos + 2]}'", pos)
        return _AROMATIC_SYMBOLS[ch], True, pos + 1
    if ch.isalpha():
        end = pos + 1
        while bracket and end < len(text) and text[end].islower():
            end += 1
        raise SmilesError("unknown_atom", f"unknown atom symbol '{text[pos:end]}'", pos)
    raise SmilesError("syntax", f"unexpected character '{ch}'", pos)


def _read_bracket(text: str, pos: int, notes: Set[str]) -> Tuple[str, bool, int]:
    """Parse `[...]` starting at `pos` (the '['). Hydrogen counts are read and dropped."""
    i = pos + 1
    if i < len(text) and text[i].isdigit():
        raise SmilesError("unsupported", "isotopes are not supported", i)
    if i >= len(text):
        raise SmilesError("syntax", "unterminated bracket atom", pos)
    element, aromatic, i = _read_element(text, i, bracket=True)
    while i < len(text) and text[i] == "@":
        notes.add("stereo_skipped")
        i += 1
        while i < len(text) and (text[i].isupper() and text[i] != "H" or text[i].isdigit()):
            i += 1
    if i < len(text) and text[i] == "H":
        i += 1
        while i < len(text) and text[i].isdigit():
            i += 1
    if i < len(text) and text[i] in "+-":
        raise SmilesError("unsupported", "charges are not supported", i)
    if i < len(text) and text[i] == ":":
        raise SmilesError("unsupported", "atom classes are not supported", i)
    if i >= len(text) or text[i] != "]":
        raise SmilesError("syntax", "unterminated bracket atom", pos)
    return element, aromatic, i + 1


def parse_smiles(text: str) -> MolGraph:
    """
    Read the SMILES subset: organic and bracket atoms (no charge/isotope), bonds
    - = # :, branches, ring closures (digits and %nn), lowercase aromatics.
    Stereo markers are skipped and noted; '.' separated parts are allowed.
    """
    s = (text or "").strip()
    if not s:
        raise SmilesError("empty", "empty SMILES string", 0)

    atoms: List[str] = []
    aromatic: List[bool] = []
    bonds: Dict[Tuple[int, int], BondType] = {}
    notes: Set[str] = set()
    branch_stack: List[Tuple[int, int]] = []
    rings: Dict[str, Tuple[int, Optional[BondType], int]] = {}
    prev: Optional[int] = None
    pending: Optional[BondType] = None
    pending_pos = 0

    def default_bond(a: int, b: int) -> BondType:
        return BondType.AROMATIC if aromatic[a] and aromatic[b] else BondType.SINGLE

    def connect(a: int, b: int, bond: Optional[BondType], at: int) -> None:
        key = (min(a, b), max(a, b))
        if a == b or key in bonds:
            raise SmilesError("syntax", f"duplicate bond between atoms {a} and {b}", at)
        bond = bond if bond is not None else default_bond(a, b)
        if bond == BondType.AROMATIC and not (aromatic[a] and aromatic[b]):
            raise SmilesError("syntax", "aromatic bond between non-aromatic atoms", at)
        bonds[key] = bond

    i = 0
    while i < len(s):
        ch = s[i]
        if ch == "(":
            if prev is None:
                raise SmilesError("syntax", "branch opened before any atom", i)
            branch_stack.append((prev, i))
            i += 1
        elif ch == ")":
            if not branch_stack:
                raise SmilesError("unmatched_paren", "unexpected ')'", i)
            if pending is not None:
                raise SmilesError("syntax", "bond symbol before ')'", i)
            prev, _ = branch_stack.pop()
            i += 1
        elif ch in _BOND_SYMBOLS:
            if pending is not None:
                raise SmilesError("syntax", "two consecutive bond symbols", i)
            pending, pending_pos = _BOND_SYMBOLS[ch], i
            i += 1
        elif ch in "/\\":
            notes.add("stereo_skipped")
            i += 1
        elif ch == ".":
            if pending is not None or branch_stack:
                raise SmilesError("syntax", "'.' inside a branch or after a bond symbol", i)
            notes.add("disconnected")
            prev = None
            i += 1
        elif ch.isdigit() or ch == "%":
            start = i
            if ch == "%":
                label = s[i + 1:i + 3]
                if len(label) != 2 or not label.isdigit():
                    raise SmilesError("syntax", "'%' must be followed by two digits", i)
                i += 3
            else:
                label = ch
                i += 1
            if prev is None:
                raise SmilesError("syntax", "ring bond before any atom", start)
            if label in rings:
                partner, bond_open, _ = rings.pop(label)
                if bond_open is not None and pending is not None and bond_open != pending:
                    raise SmilesError("syntax", f"conflicting bond symbols on ring bond {label}", start)
                connect(partner, prev, pending if pending is not None else bond_open, start)
            else:
                rings[label] = (prev, pending, start)
            pending = None
        else:
            if ch == "[":
                element, arom, i_next = _read_bracket(s, i, notes)
            else:
                element, arom, i_next = _read_element(s, i, bracket=False)
            idx = len(atoms)
            atoms.append(element)
            aromatic.append(arom)
            if len(atoms) > MAX_ATOMS:
                raise SmilesError("atom_count", f"more than {MAX_ATOMS} heavy atoms", i)
            if prev is not None:
                connect(prev, idx, pending, i)
            elif pending is not None:
                raise SmilesError("syntax", "bond symbol without a preceding atom", pending_pos)
            prev, pending = idx, None
            i = i_next

    if branch_stack:
        raise SmilesError("unmatched_paren", "unclosed '('", branch_stack[-1][1])
    if rings:
        label, (_, _, where) = next(iter(rings.items()))
        raise SmilesError("unclosed_ring", f"ring bond {label} never closed", where)
    if pending is not None:
        raise SmilesError("syntax", "dangling bond symbol", pending_pos)
    if not atoms:
        raise SmilesError("empty", "no atoms", 0)

    n = len(atoms)
    matrix = np.zeros((n, n), dtype=np.int8)
    for (a, b), bond in bonds.items():
        matrix[a, b] = matrix[b, a] = int(bond)
    if "stereo_skipped" in notes:
        log.debug("stereo markers skipped in %s", s)
    return MolGraph(atoms=tuple(atoms), aromatic=tuple(aromatic), bonds=matrix, notes=tuple(sorted(notes)))


# ------------------------
# Canonical writer
# ------------------------
@dataclass(frozen=True)
class CanonicalForm:
    smiles: str
    order: Tuple[int, ...]
    disconnected: bool


LEAF_BUDGET = 4096


def _dense_rank(keys: Sequence) -> List[int]:
    table = {k: r for r, k in enumerate(sorted(set(keys)))}
    return [table[k] for k in keys]


def _initial_ranks(g: MolGraph) -> List[int]:
    keys = []
    for i in range(g.n_atoms):
        bond_multiset = tuple(sorted(int(b) for _, b in g.neighbors(i)))
        keys.append((ELEMENTS.index(g.atoms[i]), g.aromatic[i], g.degree(i), bond_multiset))
    return _dense_rank(keys)


def _refine(g: MolGraph, ranks: Sequence[int], adjacency: List[List[Tuple[int, int]]]) -> List[int]:
    ranks = list(ranks)
    classes = len(set(ranks))
    while True:
        keys = [(ranks[i], tuple(sorted((b, ranks[j]) for j, b in adjacency[i]))) for i in range(g.n_atoms)]
        new = _dense_rank(keys)
        new_classes = len(set(new))
        if new_classes == classes:
            return new
        ranks, classes = new, new_classes


def _twin_representatives(cell: List[int], adjacency: List[List[Tuple[int, int]]]) -> List[int]:
    """Cell members with identical neighbourhoods are interchangeable; keep one of each."""
    reps: List[int] = []
    seen: List[Tuple[int, frozenset]] = []
    for v in cell:
        nbhd = frozenset(adjacency[v])
        twin = False
        for u, u_nbhd in seen:
            if nbhd - {(u, b) for b in range(NUM_EDGE_CLASSES)} == u_nbhd - {(v, b) for b in range(NUM_EDGE_CLASSES)}:
                twin = True
                break
        if not twin:
            reps.append(v)
            seen.append((v, nbhd))
    return reps


def _atom_symbol(g: MolGraph, i: int) -> str:
    return g.atoms[i].lower() if g.aromatic[i] else g.atoms[i]


def _bond_symbol(g: MolGraph, i: int, j: int) -> str:
    bond = g.bonds[i, j]
    if bond == BondType.SINGLE:
        return "-" if g.aromatic[i] and g.aromatic[j] else ""
    if bond == BondType.DOUBLE:
        return "="
    if bond == BondType.TRIPLE:
        return "#"
    return ""


def _ring_label(d: int) -> str:
    return str(d) if d < 10 else f"%{d:02d}"


def _write_from_ranks(g: MolGraph, ranks: Sequence[int]) -> Tuple[str, Tuple[int, ...]]:
    """Depth-first write of a connected graph, lowest rank first, children by rank."""
    n = g.n_atoms
    start = min(range(n), key=lambda i: ranks[i])
    visited = [False] * n
    order: List[int] = []
    children: Dict[int, List[int]] = {i: [] for i in range(n)}
    closures: List[Tuple[int, int]] = []
    tree_edges: Set[frozenset] = set()

    def visit(v: int, parent: int) -> None:
        visited[v] = True
        order.append(v)
        for u, _ in sorted(g.neighbors(v), key=lambda nb: ranks[nb[0]]):
            if u == parent and frozenset((u, v)) in tree_edges:
                continue
            if visited[u]:
                edge = frozenset((u, v))
                if edge not in tree_edges and (u, v) not in closures and (v, u) not in closures:
                    closures.append((u, v))
                continue
            tree_edges.add(frozenset((u, v)))
            children[v].append(u)
            visit(u, v)

    visit(start, -1)

    position = {v: k for k, v in enumerate(order)}
    openings: Dict[int, List[int]] = {i: [] for i in range(n)}
    closings: Dict[int, List[int]] = {i: [] for i in range(n)}
    for u, v in closures:
        first, second = (u, v) if position[u] < position[v] else (v, u)
        openings[first].append(second)
        closings[second].append(first)

    digit_of: Dict[Tuple[int, int], int] = {}
    free: List[int] = list(range(1, 100))
    parts: List[str] = []

    def emit(v: int) -> None:
        parts.append(_atom_symbol(g, v))
        closing_digits = sorted((digit_of.pop((w, v)), w) for w in closings[v])
        for d, w in closing_digits:
            parts.append(_bond_symbol(g, w, v) + _ring_label(d))
            free.append(d)
            free.sort()
        for w in sorted(openings[v], key=lambda x: ranks[x]):
            d = free.pop(0)
            digit_of[(v, w)] = d
            parts.append(_ring_label(d))
        kids = children[v]
        for k, u in enumerate(kids):
            last = k == len(kids) - 1
            if not last:
                parts.append("(")
            parts.append(_bond_symbol(g, v, u))
            emit(u)
            if not last:
                parts.append(")")

    emit(start)
    return "".join(parts), tuple(order)


def _canonical_connected(g: MolGraph) -> Tuple[str, Tuple[int, ...]]:
    adjacency = [[(j, int(b)) for j, b in g.neighbors(i)] for i in range(g.n_atoms)]
    best: List[Optional[Tuple[str, Tuple[int, ...]]]] = [None]
    leaves = [0]

    def search(ranks: List[int]) -> None:
        ranks = _refine(g, ranks, adjacency)
        if len(set(ranks)) == g.n_atoms:
            leaves[0] += 1
            if leaves[0] == LEAF_BUDGET:
                log.warning("canonical search budget reached for %d-atom graph", g.n_atoms)
            candidate = _write_from_ranks(g, ranks)
            if best[0] is None or candidate[0] < best[0][0]:
                best[0] = candidate
            return
        cells: Dict[int, List[int]] = {}
        for i, r in enumerate(ranks):
            cells.setdefault(r, []).append(i)
        target = min(r for r, members in cells.items() if len(members) > 1)
        for v in _twin_representatives(cells[target], adjacency):
            if leaves[0] >= LEAF_BUDGET:
                return
            split = [2 * r for r in ranks]
            split[v] -= 1
            search(split)

    search(_initial_ranks(g))
    assert best[0] is not None
    return best[0]


def canonicalize(g: MolGraph) -> CanonicalForm:
    """
    Canonical SMILES of the largest connected component plus the atom order it
    was written in. Ranks come from iterative neighbourhood refinement; remaining
    ties are individualized and the lexicographically smallest string wins.
    """
    comps = g.connected_components()
    disconnected = len(comps) > 1
    best: Optional[Tuple[str, Tuple[int, ...]]] = None
    for comp in comps:
        if len(comp) < len(comps[0]):
            break
        sub = g.subgraph(comp)
        smiles, order = _canonical_connected(sub)
        if best is None or smiles < best[0]:
            best = (smiles, tuple(comp[k] for k in order))
    assert best is not None
    return CanonicalForm(smiles=best[0], order=best[1], disconnected=disconnected)


def write_canonical_smiles(g: MolGraph) -> str:
    form = canonicalize(g)
    if form.disconnected:
        log.debug("disconnected graph: wrote largest component only")
    return form.smiles


def canonical_smiles(text: str) -> str:
    return write_canonical_smiles(parse_smiles(text))


# ------------------------
# Feature tensors
# ------------------------
@dataclass(frozen=True, eq=False)
class GraphFeatures:
    """X: |V| x NUM_NODE_CLASSES one-hot rows; A: |V| x |V| x NUM_EDGE_CLASSES one-hot fibers."""

    X: np.ndarray
    A: np.ndarray

    @property
    def n_atoms(self) -> int:
        return self.X.shape[0]

    def adjacency_by_type(self) -> np.ndarray:
        """Bond-type slices A[:, :, 1:] moved to the front: (4, |V|, |V|)."""
        return np.moveaxis(self.A[:, :, 1:], -1, 0)


def to_feature_tensors(g: MolGraph) -> GraphFeatures:
    n = g.n_atoms
    X = np.zeros((n, NUM_NODE_CLASSES))
    for i, cls in enumerate(zip(g.atoms, g.aromatic)):
        X[i, NODE_INDEX[cls]] = 1.0
    A = np.zeros((n, n, NUM_EDGE_CLASSES))
    A[np.arange(n)[:, None], np.arange(n)[None, :], g.bonds.astype(np.int64)] = 1.0
    return GraphFeatures(X=X, A=A)


def from_feature_tensors(X: np.ndarray, A: np.ndarray, node_mask: Sequence[bool]) -> MolGraph:
    """
    Realize a graph from (possibly soft) node and edge scores. Padded rows are
    dropped; each pair's fiber is the elementwise max of (i,j) and (j,i) before argmax.
    Aromatic bonds touching a non-aromatic atom become single bonds.
    """
    mask = np.asarray(node_mask, dtype=bool)
    keep = np.nonzero(mask)[0]
    if keep.size == 0:
        raise GraphError("empty node mask")
    X = np.asarray(X, dtype=np.float64)[keep]
    A = np.asarray(A, dtype=np.float64)[np.ix_(keep, keep)]
    classes = np.argmax(X[:, :NUM_NODE_CLASSES], axis=1)
    atoms = tuple(NODE_CLASSES[c][0] for c in classes)
    aromatic = tuple(NODE_CLASSES[c][1] for c in classes)
    fibers = np.maximum(A, np.swapaxes(A, 0, 1))
    bonds = np.argmax(fibers, axis=-1).astype(np.int8)
    np.fill_diagonal(bonds, BondType.NONE)
    arom = np.asarray(aromatic, dtype=bool)
    both = arom[:, None] & arom[None, :]
    bonds[(bonds == BondType.AROMATIC) & ~both] = BondType.SINGLE
    return MolGraph(atoms=atoms, aromatic=aromatic, bonds=bonds)


# ------------------------
# Valence and Kekulé structure
# ------------------------
def _sigma_sums(bonds: np.ndarray) -> np.ndarray:
    """Bond-order sum per atom with aromatic bonds counted as 1."""
    orders = np.where(bonds == BondType.AROMATIC, 1, bonds).astype(np.int64)
    return orders.sum(axis=1)


def _pi_roles(atoms: Sequence[str], aromatic: Sequence[bool], bonds: np.ndarray) -> Tuple[Set[int], Set[int]]:
    """
    Aromatic carbons with room for one more bond must take a double bond in a
    Kekulé structure; other aromatic atoms with room (pyridine- or pyrrole-type N,
    P, S) may. Atoms without room take none.
    """
    base = _sigma_sums(bonds)
    required: Set[int] = set()
    optional: Set[int] = set()
    for i, (el, arom) in enumerate(zip(atoms, aromatic)):
        if not arom or base[i] + 1 > MAX_VALENCE[el]:
            continue
        (required if el == "C" else optional).add(i)
    return required, optional


def _aromatic_components(aromatic: Sequence[bool], bonds: np.ndarray) -> List[List[int]]:
    graph = nx.Graph()
    graph.add_nodes_from(i for i, a in enumerate(aromatic) if a)
    ii, jj = np.nonzero(np.triu(bonds == BondType.AROMATIC))
    graph.add_edges_from(zip(ii.tolist(), jj.tolist()))
    return sorted((sorted(c) for c in nx.connected_components(graph)), key=lambda c: c[0])


def _match_component(
    comp: Sequence[int], bonds: np.ndarray, required: Set[int], optional: Set[int]
) -> Optional[Set[Tuple[int, int]]]:
    """Max-weight matching covering every required atom, or None if impossible."""
    members = set(comp)
    need = members & required
    if not need:
        return set()
    graph = nx.Graph()
    eligible = members & (required | optional)
    for i in sorted(eligible):
        for j in sorted(eligible):
            if i < j and bonds[i, j] == BondType.AROMATIC:
                weight = (i in required) + (j in required)
                if weight:
                    graph.add_edge(i, j, weight=weight)
    matching = nx.max_weight_matching(graph, maxcardinality=False, weight="weight")
    covered = {v for edge in matching for v in edge} & need
    if covered != need:
        return None
    return {(min(a, b), max(a, b)) for a, b in matching}


def kekulize(g: MolGraph) -> Optional[Set[Tuple[int, int]]]:
    """Aromatic bonds that become double in one Kekulé structure; None when none exists."""
    required, optional = _pi_roles(g.atoms, g.aromatic, g.bonds)
    doubles: Set[Tuple[int, int]] = set()
    for comp in _aromatic_components(g.aromatic, g.bonds):
        matched = _match_component(comp, g.bonds, required, optional)
        if matched is None:
            return None
        doubles |= matched
    return doubles


def check_valence(g: MolGraph) -> bool:
    """A Kekulé structure exists and no atom exceeds its maximum valence."""
    if kekulize(g) is None:
        return False
    base = _sigma_sums(g.bonds)
    return all(base[i] <= MAX_VALENCE[el] for i, el in enumerate(g.atoms))


def valence_repair(g: MolGraph) -> MolGraph:
    """
    Force check_valence to hold. Aromatic systems with no Kekulé structure are
    turned into single-bonded rings; then, atom by atom (largest excess first,
    ties by index), multiple bonds are downgraded and finally bonds deleted.
    Atoms are never added or removed.
    """
    if check_valence(g):
        return g
    atoms = g.atoms
    aromatic = list(g.aromatic)
    bonds = np.array(g.bonds, dtype=np.int8)

    def dearomatize(component: Iterable[int]) -> None:
        comp = list(component)
        for i in comp:
            aromatic[i] = False
            for j in comp:
                if bonds[i, j] == BondType.AROMATIC:
                    bonds[i, j] = bonds[j, i] = BondType.SINGLE

    for _ in range(10 * MAX_ATOMS * MAX_ATOMS):
        required, optional = _pi_roles(atoms, aromatic, bonds)
        failed = [
            comp for comp in _aromatic_components(aromatic, bonds)
            if _match_component(comp, bonds, required, optional) is None
        ]
        if failed:
            for comp in failed:
                dearomatize(comp)
            continue

        excess = np.array([s - MAX_VALENCE[el] for s, el in zip(_sigma_sums(bonds), atoms)])
        if excess.max() <= 0:
            break
        v = int(np.argmax(excess))
        nbrs = [int(j) for j in np.nonzero(bonds[v])[0]]
        multiple = [j for j in nbrs if bonds[v, j] in (BondType.DOUBLE, BondType.TRIPLE)]
        singles = [j for j in nbrs if bonds[v, j] == BondType.SINGLE]
        if multiple:
            j = max(multiple, key=lambda u: (int(bonds[v, u]), excess[u], -u))
            bonds[v, j] = bonds[j, v] = bonds[v, j] - 1
        elif singles:
            j = max(singles, key=lambda u: (excess[u], -u))
            bonds[v, j] = bonds[j, v] = BondType.NONE
        else:
            for comp in _aromatic_components(aromatic, bonds):
                if v in comp:
                    dearomatize(comp)
                    break
    repaired = MolGraph(atoms=atoms, aromatic=tuple(aromatic), bonds=bonds, notes=g.notes)
    if not check_valence(repaired):
        raise GraphError("valence repair did not converge")
    return repaired

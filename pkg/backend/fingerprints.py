"""
Hashed-path fingerprints, the structural similarity f(., .) and descriptor vectors.
"""

import hashlib
from dataclasses import dataclass
from functools import lru_cache
from typing import List, Tuple

import networkx as nx
import numpy as np

from .chem import ELEMENTS, ATOMIC_MASS, BondType, MolGraph, parse_smiles

FP_BITS = 2048
MAX_PATH_BONDS = 7

_BOND_CHARS = {BondType.SINGLE: "-", BondType.DOUBLE: "=", BondType.TRIPLE: "#", BondType.AROMATIC: ":"}

DESCRIPTOR_NAMES: Tuple[str, ...] = (
    ("atoms", "bonds", "rings", "aromatic_atoms")
    + tuple(f"n_{el}" for el in ELEMENTS)
    + ("n_single", "n_double", "n_triple", "n_aromatic_bonds", "mol_weight")
)


@dataclass(frozen=True, eq=False)
class Fingerprint:
    bits: np.ndarray

    def on_bits(self) -> List[int]:
        return np.nonzero(self.bits)[0].tolist()

    def __len__(self) -> int:
        return len(self.bits)


def path_label(g: MolGraph, path: List[int]) -> str:
    """Atoms interleaved with bond symbols, read in the lexicographically smaller direction."""

    def spell(p: List[int]) -> str:
        parts = [g.atoms[p[0]].lower() if g.aromatic[p[0]] else g.atoms[p[0]]]
        for a, b in zip(p, p[1:]):
            parts.append(_BOND_CHARS[BondType(g.bonds[a, b])])
            parts.append(g.atoms[b].lower() if g.aromatic[b] else g.atoms[b])
        return "".join(parts)

    forward, backward = spell(path), spell(path[::-1])
    return min(forward, backward)


def label_bit(label: str) -> int:
    digest = hashlib.blake2b(label.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big") % FP_BITS


def enumerate_paths(g: MolGraph, max_bonds: int = MAX_PATH_BONDS) -> List[List[int]]:
    """Every simple path with 0..max_bonds bonds, each listed once (start atom < end atom for length > 0)."""
    paths: List[List[int]] = []
    adjacency = [[j for j, _ in g.neighbors(i)] for i in range(g.n_atoms)]

    def extend(path: List[int]) -> None:
        if len(path) > 1 and path[0] < path[-1]:
            paths.append(list(path))
        if len(path) - 1 == max_bonds:
            return
        for nxt in adjacency[path[-1]]:
            if nxt not in path:
                path.append(nxt)
                extend(path)
                path.pop()

    for start in range(g.n_atoms):
        paths.append([start])
        extend([start])
    return paths


def path_fingerprint(g: MolGraph) -> Fingerprint:
    bits = np.zeros(FP_BITS, dtype=bool)
    for path in enumerate_paths(g):
        bits[label_bit(path_label(g, path))] = True
    bits.setflags(write=False)
    return Fingerprint(bits=bits)


def cosine_bits(a: Fingerprint, b: Fingerprint) -> float:
    na, nb = int(a.bits.sum()), int(b.bits.sum())
    if na == 0 or nb == 0:
        return 0.0
    shared = int(np.count_nonzero(a.bits & b.bits))
    return float(min(1.0, shared / np.sqrt(na * nb)))


def similarity_f(a: MolGraph, b: MolGraph) -> float:
    """Cosine similarity of the two path fingerprints, in [0, 1]."""
    return cosine_bits(path_fingerprint(a), path_fingerprint(b))


@lru_cache(maxsize=65536)
def fingerprint_of_smiles(smiles: str) -> Fingerprint:
    return path_fingerprint(parse_smiles(smiles))


def similarity_smiles(a: str, b: str) -> float:
    return cosine_bits(fingerprint_of_smiles(a), fingerprint_of_smiles(b))


def ring_count(g: MolGraph) -> int:
    """Cycle rank |E| - |V| + components."""
    return g.n_bonds - g.n_atoms + nx.number_connected_components(g.to_networkx())


def descriptors(g: MolGraph) -> np.ndarray:
    """Frozen-order vector; names in DESCRIPTOR_NAMES. Weight counts heavy atoms only."""
    edges = g.edges()
    bond_counts = [sum(1 for _, _, b in edges if b == kind)
                   for kind in (BondType.SINGLE, BondType.DOUBLE, BondType.TRIPLE, BondType.AROMATIC)]
    element_counts = [g.atoms.count(el) for el in ELEMENTS]
    vec = [
        g.n_atoms,
        len(edges),
        ring_count(g),
        sum(g.aromatic),
        *element_counts,
        *bond_counts,
        sum(ATOMIC_MASS[el] for el in g.atoms),
    ]
    return np.asarray(vec, dtype=np.float64)

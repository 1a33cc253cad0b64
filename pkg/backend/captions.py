"""
Synthetic toy corpus: molecules assembled from fragments, captioned from their descriptors.
"""

import logging
from typing import List, Tuple

import numpy as np

from .chem import MolGraph, check_valence, parse_smiles, write_canonical_smiles
from .errors import SmilesError
from .fingerprints import ring_count

log = logging.getLogger(__name__)

RING_PROMPT = "The molecule contains a ring."
NO_RING_PROMPT = "The molecule contains no ring."

RINGS = ("c1ccccc1", "c1ccncc1", "c1ccoc1", "c1ccsc1", "C1CCCCC1", "C1CCOC1", "C1CCNCC1", "C1CC1")
SUBSTITUENTS = ("O", "N", "F", "Cl", "Br", "C(=O)O", "C#N", "OC", "C(=O)N", "S", "C", "=O")
_NAMES = {
    "O": ("oxygen", "oxygens"), "N": ("nitrogen", "nitrogens"), "S": ("sulfur", "sulfurs"),
    "F": ("fluorine", "fluorines"), "Cl": ("chlorine", "chlorines"), "Br": ("bromine", "bromines"),
    "P": ("phosphorus", "phosphorus atoms"), "I": ("iodine", "iodines"),
}
_NUMBERS = ("zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine")


def _count_phrase(n: int, element: str) -> str:
    singular, plural = _NAMES[element]
    if n == 1:
        return f"{'an' if singular[0] in 'aeiou' else 'a'} {singular}"
    word = _NUMBERS[n] if n < len(_NUMBERS) else str(n)
    return f"{word} {plural}"


def caption_for(g: MolGraph) -> str:
    """e.g. 'The molecule contains a ring and two oxygens. It is aromatic. It has several heavy atoms.'"""
    ring = "contains a ring" if ring_count(g) > 0 else "contains no ring"
    hetero = [_count_phrase(g.atoms.count(el), el) for el in _NAMES if g.atoms.count(el)]
    if not hetero:
        tail = " and no heteroatoms"
    elif len(hetero) == 1:
        tail = f" and {hetero[0]}"
    else:
        tail = " and " + ", ".join(hetero[:-1]) + f" and {hetero[-1]}"
    parts = [f"The molecule {ring}{tail}."]
    if any(g.aromatic):
        parts.append("It is aromatic.")
    size = "few" if g.n_atoms <= 5 else "several" if g.n_atoms <= 10 else "many"
    parts.append(f"It has {size} heavy atoms.")
    return " ".join(parts)


def _random_smiles(rng: np.random.Generator) -> str:
    chain_len = int(rng.integers(1, 7))
    tokens: List[str] = []
    for i in range(chain_len):
        atom = "C" if rng.random() < 0.8 else str(rng.choice(["N", "O"]))
        if i > 0 and atom == "C" and tokens and tokens[-1].startswith("C") and rng.random() < 0.15:
            atom = "=C"
        tokens.append(atom)
        if atom.endswith("C") and rng.random() < 0.3:
            tokens.append(f"({rng.choice(SUBSTITUENTS)})")
    smiles = "".join(tokens)
    if rng.random() < 0.5:
        ring = str(rng.choice(RINGS))
        smiles = smiles + ring if rng.random() < 0.7 else ring + smiles
    return smiles


def synthetic_corpus(n: int, seed: int = 0, max_attempts: int = 50) -> List[Tuple[str, str]]:
    """Up to n distinct (canonical SMILES, caption) pairs, all valence-valid and connected."""
    rng = np.random.default_rng(seed)
    seen = set()
    pairs: List[Tuple[str, str]] = []
    for _ in range(n * max_attempts):
        if len(pairs) >= n:
            break
        try:
            g = parse_smiles(_random_smiles(rng))
        except SmilesError:
            continue
        if not check_valence(g) or not g.is_connected():
            continue
        smiles = write_canonical_smiles(g)
        if smiles in seen:
            continue
        seen.add(smiles)
        pairs.append((smiles, caption_for(g)))
    if len(pairs) < n:
        log.warning("synthetic corpus: only %d distinct molecules after %d attempts", len(pairs), n * max_attempts)
    return pairs

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from backend.captions import synthetic_corpus
from backend.chem import (
    MAX_ATOMS,
    NUM_EDGE_CLASSES,
    NUM_NODE_CLASSES,
    BondType,
    MolGraph,
    canonical_smiles,
    canonicalize,
    check_valence,
    from_feature_tensors,
    is_isomorphic,
    kekulize,
    parse_smiles,
    to_feature_tensors,
    valence_repair,
    write_canonical_smiles,
)
from backend.errors import GraphError, SmilesError


# ------------------------
# Reader
# ------------------------
def test_parse_ethanol():
    g = parse_smiles("CCO")
    assert g.atoms == ("C", "C", "O")
    assert g.n_bonds == 2
    assert g.bonds[0, 1] == BondType.SINGLE and g.bonds[1, 2] == BondType.SINGLE


def test_parse_benzene_is_aromatic_ring():
    g = parse_smiles("c1ccccc1")
    assert g.n_atoms == 6 and all(g.aromatic)
    assert g.n_bonds == 6
    assert {b for _, _, b in g.edges()} == {BondType.AROMATIC}


def test_parse_bond_orders_and_branches():
    g = parse_smiles("CC(=O)C#N")
    assert g.bonds[1, 2] == BondType.DOUBLE
    assert g.bonds[3, 4] == BondType.TRIPLE
    assert g.degree(1) == 3


def test_parse_two_letter_halogens():
    g = parse_smiles("ClCBr")
    assert g.atoms == ("Cl", "C", "Br")


def test_percent_ring_label():
    assert parse_smiles("C%10CCC%10").n_bonds == 4


def test_bracket_atom_hydrogens_dropped():
    g = parse_smiles("c1cc[nH]c1")
    assert g.atoms[3] == "N" and g.aromatic[3]


def test_stereo_markers_are_skipped_and_noted():
    g = parse_smiles("F/C=C/F")
    assert "stereo_skipped" in g.notes
    assert g.n_atoms == 4


def test_dot_marks_disconnected():
    g = parse_smiles("CC.O")
    assert "disconnected" in g.notes
    assert not g.is_connected()


@pytest.mark.parametrize("text, reason", [
    ("", "empty"),
    ("   ", "empty"),
    ("CC(C", "unmatched_paren"),
    ("CC)C", "unmatched_paren"),
    ("C1CC", "unclosed_ring"),
    ("CXC", "unknown_atom"),
    ("[13CH4]", "unsupported"),
    ("C[N+](C)C", "unsupported"),
    ("C==C", "syntax"),
    ("C:C", "syntax"),
    ("C" * (MAX_ATOMS + 1), "atom_count"),
])
def test_parse_errors_carry_reason(text, reason):
    with pytest.raises(SmilesError) as info:
        parse_smiles(text)
    assert info.value.reason == reason


def test_parse_error_reports_position():
    with pytest.raises(SmilesError) as info:
        parse_smiles("CC)C")
    assert info.value.position == 2


# ------------------------
# Graph invariants
# ------------------------
def test_graph_rejects_asymmetric_bonds():
    bonds = np.zeros((2, 2), dtype=np.int8)
    bonds[0, 1] = 1
    with pytest.raises(GraphError):
        MolGraph(atoms=("C", "C"), aromatic=(False, False), bonds=bonds)


def test_graph_rejects_aromatic_halogen():
    with pytest.raises(GraphError):
        MolGraph(atoms=("F",), aromatic=(True,), bonds=np.zeros((1, 1)))


def test_graph_rejects_aromatic_bond_on_aliphatic_atom():
    bonds = np.array([[0, 4], [4, 0]])
    with pytest.raises(GraphError):
        MolGraph(atoms=("C", "C"), aromatic=(True, False), bonds=bonds)


def test_graph_rejects_empty():
    with pytest.raises(GraphError):
        MolGraph(atoms=(), aromatic=(), bonds=np.zeros((0, 0)))


def test_largest_component():
    g, dropped = parse_smiles("CCC.O").largest_component()
    assert dropped and g.atoms == ("C", "C", "C")


def test_permute_preserves_isomorphism():
    g = parse_smiles("CC(=O)Nc1ccccc1")
    order = list(reversed(range(g.n_atoms)))
    assert is_isomorphic(g, g.permute(order))
    assert not g.same_as(g.permute(order))


# ------------------------
# Canonical writer
# ------------------------
def test_equivalent_spellings_collapse():
    forms = {canonical_smiles(s) for s in ("CCO", "OCC", "C(O)C")}
    assert forms == {"CCO"}


def test_benzene_canonical_form():
    assert canonical_smiles("c1ccccc1") == "c1ccccc1"


@pytest.mark.parametrize("smiles", [
    "CC(=O)O", "c1ccncc1", "C1CCOC1", "CC(C)(C)C", "N#CC1CC1", "OC(=O)c1ccccc1Cl", "c1ccc2ccccc2c1",
])
def test_canonical_is_idempotent(smiles):
    once = canonical_smiles(smiles)
    assert canonical_smiles(once) == once


@pytest.mark.parametrize("smiles", ["CC(=O)Nc1ccccc1", "C1CC2CCC1C2", "OCC(O)CO", "c1ccc2ccccc2c1"])
def test_canonical_invariant_under_atom_order(smiles):
    g = parse_smiles(smiles)
    rng = np.random.default_rng(7)
    for _ in range(5):
        shuffled = g.permute(rng.permutation(g.n_atoms))
        assert write_canonical_smiles(shuffled) == write_canonical_smiles(g)


@pytest.mark.slow
def test_canonical_invariant_over_corpus():
    rng = np.random.default_rng(11)
    corpus = synthetic_corpus(100, seed=0)
    assert len(corpus) == 100
    for smiles, _ in corpus:
        g = parse_smiles(smiles)
        expected = write_canonical_smiles(g)
        for _ in range(50):
            assert write_canonical_smiles(g.permute(rng.permutation(g.n_atoms))) == expected, smiles


def test_canonical_output_reparses_isomorphic():
    g = parse_smiles("CC(=O)Nc1ccc(O)cc1")
    back = parse_smiles(write_canonical_smiles(g))
    assert is_isomorphic(g, back)


def test_canonical_order_covers_component():
    form = canonicalize(parse_smiles("CCO.C"))
    assert form.disconnected
    assert sorted(form.order) == [0, 1, 2]
    assert form.smiles == "CCO"


# ------------------------
# Feature tensors
# ------------------------
def test_feature_tensor_shapes_and_one_hot():
    g = parse_smiles("c1ccccc1O")
    feats = to_feature_tensors(g)
    assert feats.X.shape == (7, NUM_NODE_CLASSES)
    assert feats.A.shape == (7, 7, NUM_EDGE_CLASSES)
    np.testing.assert_array_equal(feats.X.sum(axis=1), np.ones(7))
    np.testing.assert_array_equal(feats.A.sum(axis=2), np.ones((7, 7)))
    assert feats.adjacency_by_type().shape == (4, 7, 7)


def test_feature_roundtrip_is_exact():
    g = parse_smiles("CC(=O)Nc1ccccc1")
    feats = to_feature_tensors(g)
    assert from_feature_tensors(feats.X, feats.A, np.ones(g.n_atoms, dtype=bool)).same_as(g)


def test_from_features_drops_masked_rows():
    g = parse_smiles("CCO")
    feats = to_feature_tensors(g)
    back = from_feature_tensors(feats.X, feats.A, [True, True, False])
    assert back.atoms == ("C", "C")


def test_from_features_empty_mask():
    feats = to_feature_tensors(parse_smiles("C"))
    with pytest.raises(GraphError):
        from_feature_tensors(feats.X, feats.A, [False])


def test_from_features_symmetrizes_by_max():
    X = np.zeros((2, NUM_NODE_CLASSES))
    X[:, 0] = 1.0
    A = np.zeros((2, 2, NUM_EDGE_CLASSES))
    A[0, 1, BondType.DOUBLE] = 0.9
    A[1, 0, BondType.NONE] = 0.5
    g = from_feature_tensors(X, A, [True, True])
    assert g.bonds[0, 1] == g.bonds[1, 0] == BondType.DOUBLE


# ------------------------
# Valence
# ------------------------
@pytest.mark.parametrize("smiles", ["c1ccccc1", "c1ccncc1", "c1cc[nH]c1", "c1ccoc1", "c1ccsc1", "CC(=O)O", "C#N"])
def test_valid_molecules(smiles):
    assert check_valence(parse_smiles(smiles))


@pytest.mark.parametrize("smiles", ["c1cccc1", "C(C)(C)(C)(C)C", "O=O=O", "FC(F)(F)(F)F"])
def test_invalid_molecules(smiles):
    assert not check_valence(parse_smiles(smiles))


def test_benzene_kekule_has_three_doubles():
    doubles = kekulize(parse_smiles("c1ccccc1"))
    assert doubles is not None and len(doubles) == 3


def test_repair_leaves_valid_graph_untouched():
    g = parse_smiles("CC(=O)O")
    assert valence_repair(g) is g


def test_repair_fixes_overbonded_carbon():
    g = valence_repair(parse_smiles("C(C)(C)(C)(C)C"))
    assert check_valence(g)
    assert g.n_atoms == 6


def test_repair_dearomatizes_odd_ring():
    g = valence_repair(parse_smiles("c1cccc1"))
    assert check_valence(g)
    assert g.n_atoms == 5


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 8), st.data())
def test_repair_fuzz(n, data):
    atoms = tuple(data.draw(st.sampled_from(["C", "N", "O", "F", "S", "Cl"])) for _ in range(n))
    bonds = np.zeros((n, n), dtype=np.int8)
    for i in range(n):
        for j in range(i + 1, n):
            b = data.draw(st.sampled_from([0, 0, 1, 1, 2, 3]))
            bonds[i, j] = bonds[j, i] = b
    g = valence_repair(MolGraph(atoms=atoms, aromatic=(False,) * n, bonds=bonds))
    assert check_valence(g)
    assert g.atoms == atoms


def random_molgraph(rng):
    """Arbitrary bonding over random atoms, aromatic flags and aromatic bonds included."""
    n = int(rng.integers(2, 13))
    atoms = tuple(str(a) for a in rng.choice(["C", "C", "N", "O", "F", "P", "S", "Cl"], size=n))
    aromatic = tuple(bool(el in {"C", "N", "O", "S"} and rng.random() < 0.4) for el in atoms)
    bonds = np.zeros((n, n), dtype=np.int8)
    for i in range(n):
        for j in range(i + 1, n):
            choices = [0, 0, 0, 1, 1, 2, 3]
            if aromatic[i] and aromatic[j]:
                choices += [4, 4]
            bonds[i, j] = bonds[j, i] = rng.choice(choices)
    return MolGraph(atoms=atoms, aromatic=aromatic, bonds=bonds)


@pytest.mark.slow
def test_repair_always_yields_valid_graph():
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        g = random_molgraph(rng)
        repaired = valence_repair(g)
        assert check_valence(repaired)
        assert repaired.atoms == g.atoms

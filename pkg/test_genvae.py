import math

import numpy as np
import pytest

from backend import numcore as nc
from backend.chem import NUM_EDGE_CLASSES, check_valence, is_isomorphic, parse_smiles
from backend.encoders import init_gin
from backend.errors import GraphError, ShapeError
from backend.genvae import (
    NODE_OUT,
    PAD_CLASS,
    VaeConfig,
    decode_batch,
    decode_logits,
    decode_many,
    decoder_shape,
    elbo_loss,
    init_decoder,
    kl_divergence,
    prepare_examples,
    realize,
    recon_target,
    reconstruction_loss,
    reconstruction_similarity,
    reparameterize,
    train_vae,
)


def one_hot_logits(smiles, n_max=6, scale=12.0):
    """Logits that decode exactly to the given molecule."""
    target = recon_target(parse_smiles(smiles), n_max)
    nodes = np.zeros((n_max, NODE_OUT))
    nodes[np.arange(n_max), target.node_classes] = scale
    edges = np.zeros((n_max, n_max, NUM_EDGE_CLASSES))
    edges[:, :, 0] = scale
    n = target.n_atoms
    edges[:n, :n] = 0.0
    edges[np.arange(n)[:, None], np.arange(n)[None, :], target.edge_classes] = scale
    return nodes, edges


# ------------------------
# Decoder
# ------------------------
def test_decoder_output_shapes_and_symmetry():
    params = init_decoder(np.random.default_rng(0), latent_dim=24, n_max=30)
    nodes, edges = decode_batch(np.random.default_rng(1).normal(size=(3, 24)), params)
    assert nodes.shape == (3, 30, 15)
    assert edges.shape == (3, 30, 30, 5)
    np.testing.assert_allclose(edges.data, np.swapaxes(edges.data, 1, 2))
    assert decoder_shape(params) == (30, 32)


def test_decode_logits_single_latent():
    params = init_decoder(np.random.default_rng(0), latent_dim=4, hidden=8, node_dim=3, n_max=5)
    nodes, edges = decode_logits(np.zeros(4), params)
    assert nodes.shape == (5, NODE_OUT) and edges.shape == (5, 5, NUM_EDGE_CLASSES)


def test_decoder_rejects_wrong_latent_width():
    params = init_decoder(np.random.default_rng(0), latent_dim=4, hidden=8, node_dim=3, n_max=5)
    with pytest.raises(ShapeError):
        decode_batch(np.zeros((2, 5)), params)


# ------------------------
# Losses
# ------------------------
def test_recon_target_uses_canonical_order():
    a, b = recon_target(parse_smiles("OCC"), 6), recon_target(parse_smiles("CCO"), 6)
    np.testing.assert_array_equal(a.node_classes, b.node_classes)
    np.testing.assert_array_equal(a.edge_classes, b.edge_classes)
    assert a.node_classes[3:].tolist() == [PAD_CLASS] * 3


def test_uniform_logits_cost_log_classes():
    target = recon_target(parse_smiles("CCO"), 6)
    loss = reconstruction_loss(np.zeros((6, NODE_OUT)), np.zeros((6, 6, NUM_EDGE_CLASSES)), [target])
    assert loss.item() == pytest.approx(math.log(15) + math.log(5))


def test_single_atom_has_no_edge_term():
    target = recon_target(parse_smiles("C"), 4)
    loss = reconstruction_loss(np.zeros((4, NODE_OUT)), np.zeros((4, 4, NUM_EDGE_CLASSES)), [target])
    assert loss.item() == pytest.approx(math.log(15))


def test_confident_correct_logits_cost_little():
    nodes, edges = one_hot_logits("CC(=O)O")
    target = recon_target(parse_smiles("CC(=O)O"), 6)
    assert reconstruction_loss(nodes, edges, [target]).item() < 1e-3


def test_reconstruction_gradient_through_decoder():
    params = init_decoder(np.random.default_rng(0), latent_dim=3, hidden=6, node_dim=3, n_max=4)
    target = recon_target(parse_smiles("CCO"), 4)

    def fn(z):
        nodes, edges = decode_batch(z, params)
        return reconstruction_loss(nodes, edges, [target])

    assert nc.finite_diff_check(fn, np.random.default_rng(2).normal(size=(1, 3))) < 1e-5


@pytest.mark.parametrize("seed", range(10))
def test_decode_logits_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    params = init_decoder(rng, latent_dim=3, hidden=6, node_dim=3, n_max=4)
    w_nodes = rng.normal(size=(4, NODE_OUT))
    w_edges = rng.normal(size=(4, 4, NUM_EDGE_CLASSES))

    def fn(p):
        nodes, edges = decode_logits(p["z"], nc.ParamBundle({k: v for k, v in p.items() if k != "z"}))
        return (nodes * w_nodes).sum() + (edges * w_edges).sum()

    point = {"z": rng.normal(size=3), **params.to_arrays()}
    assert nc.finite_diff_check(fn, point, max_coords=8, seed=seed) < 1e-4


def test_kl_of_standard_normal_is_zero():
    assert kl_divergence(np.zeros((2, 4)), np.ones((2, 4))).item() == pytest.approx(0.0)


def test_kl_unit_mean_is_half_per_dimension():
    assert kl_divergence(np.ones(6), np.ones(6)).item() == pytest.approx(3.0)


def test_kl_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    point = {"mu": rng.normal(size=(2, 3)), "sigma": rng.uniform(0.5, 2.0, size=(2, 3))}
    assert nc.finite_diff_check(lambda p: kl_divergence(p["mu"], p["sigma"]), point) < 1e-5


def test_reparameterize_shapes():
    z = reparameterize(np.zeros(3), np.full(3, 2.0), np.array([1.0, -1.0, 0.5]))
    np.testing.assert_allclose(z.data, [2.0, -2.0, 1.0])
    with pytest.raises(ShapeError):
        reparameterize(np.zeros(3), np.ones(3), np.zeros(2))


def test_reparameterize_moments():
    n = 100_000
    mu = np.broadcast_to(np.array([0.5, -1.0]), (n, 2))
    sigma = np.broadcast_to(np.array([2.0, 0.3]), (n, 2))
    z = reparameterize(mu, sigma, np.random.default_rng(0).standard_normal((n, 2))).data
    np.testing.assert_allclose(z.mean(axis=0), [0.5, -1.0], atol=0.03)
    np.testing.assert_allclose(z.std(axis=0), [2.0, 0.3], rtol=0.02)


def test_elbo_reports_components():
    rng = np.random.default_rng(0)
    examples = prepare_examples([parse_smiles(s) for s in ("CCO", "c1ccccc1")], n_max=8)
    gin = init_gin(rng, hidden=8, layers=1, latent_dim=4)
    dec = init_decoder(rng, latent_dim=4, hidden=8, node_dim=4, n_max=8)
    total, parts = elbo_loss(examples, gin, dec, rng.standard_normal((2, 4)), alpha_kl=0.1)
    assert total.item() == pytest.approx(parts["recon"] + 0.1 * parts["kl"])


@pytest.mark.parametrize("seed", range(10))
def test_elbo_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    examples = prepare_examples([parse_smiles(s) for s in ("CCO", "C1CC1")], n_max=4)
    bundles = {
        "gin": init_gin(rng, hidden=4, layers=1, latent_dim=3),
        "dec": init_decoder(rng, latent_dim=3, hidden=6, node_dim=3, n_max=4),
    }
    eps = rng.standard_normal((2, 3))

    def fn(flat):
        parts = nc.unflatten_bundles(bundles, flat)
        total, _ = elbo_loss(examples, parts["gin"], parts["dec"], eps, alpha_kl=0.5)
        return total

    point = {k: t.data for k, t in nc.flatten_bundles(bundles).items()}
    assert nc.finite_diff_check(fn, point, max_coords=4, seed=seed) < 1e-4


# ------------------------
# Realization
# ------------------------
def test_realize_recovers_molecule():
    nodes, edges = one_hot_logits("CC(=O)Nc1ccccc1", n_max=12)
    g = realize(nodes, edges)
    assert is_isomorphic(g, parse_smiles("CC(=O)Nc1ccccc1"))


def test_realize_all_pad_is_empty_molecule():
    nodes = np.zeros((5, NODE_OUT))
    nodes[:, PAD_CLASS] = 1.0
    with pytest.raises(GraphError, match="empty molecule"):
        realize(nodes, np.zeros((5, 5, NUM_EDGE_CLASSES)))


def test_realize_keeps_largest_component():
    nodes, edges = one_hot_logits("CCC", n_max=5)
    nodes[3, :] = 0.0
    nodes[3, 0] = 12.0  # an extra isolated carbon
    g = realize(nodes, edges)
    assert g.n_atoms == 3


def test_random_latents_decode_to_valid_molecules():
    params = init_decoder(np.random.default_rng(0), latent_dim=8, hidden=16, node_dim=8, n_max=10)
    decoded = decode_many(np.random.default_rng(1).normal(size=(20, 8)), params, repair=True)
    for g in decoded:
        assert g is None or (check_valence(g) and g.is_connected())


@pytest.mark.slow
def test_vae_training_lowers_loss():
    mols = [parse_smiles(s) for s in ("CCO", "CCN", "CC(=O)O", "c1ccccc1", "C1CCCCC1", "CCCl")]
    rng = np.random.default_rng(0)
    gin = init_gin(rng, hidden=16, layers=2, latent_dim=6)
    dec = init_decoder(rng, latent_dim=6, hidden=32, node_dim=8, n_max=8)
    cfg = VaeConfig(alpha_kl=0.1, lr=1e-2, epochs=60, batch_size=6)
    result = train_vae(prepare_examples(mols, n_max=8), gin, dec, cfg, rng)
    assert len(result.losses) == len(result.recon) == len(result.kl) == 60
    assert result.recon[-1] < result.recon[0]
    assert 0.0 <= reconstruction_similarity(mols, result.gin, result.decoder) <= 1.0


@pytest.mark.slow
def test_vae_reconstructs_training_molecules():
    mols = [parse_smiles(s) for s in ("CCO", "CCN", "CC(=O)O", "c1ccccc1", "C1CCCCC1", "CCCl")]
    rng = np.random.default_rng(1)
    gin = init_gin(rng, hidden=32, layers=2, latent_dim=8)
    dec = init_decoder(rng, latent_dim=8, hidden=64, node_dim=8, n_max=8)
    cfg = VaeConfig(alpha_kl=0.01, lr=1e-2, epochs=300, batch_size=6)
    result = train_vae(prepare_examples(mols, n_max=8), gin, dec, cfg, rng)
    assert reconstruction_similarity(mols, result.gin, result.decoder) >= 0.6

"""
Graph VAE stage: reparameterization, one-shot graph decoder, ELBO training and
latent-to-molecule realization. `train_joint` covers the single-stage ablation.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from . import numcore as nc
from .chem import (
    MAX_ATOMS,
    NUM_EDGE_CLASSES,
    NUM_NODE_CLASSES,
    GraphFeatures,
    MolGraph,
    canonicalize,
    from_feature_tensors,
    to_feature_tensors,
    valence_repair,
)
from .encoders import batch_graphs, encode_batch, minibatches
from .errors import ConfigError, DatasetError, GraphError, ShapeError
from .fingerprints import similarity_f
from .latentdiff import NoiseSchedule, diffusion_loss
from .numcore import AdamState, ParamBundle, Tensor

log = logging.getLogger(__name__)

PAD_CLASS = NUM_NODE_CLASSES
NODE_OUT = NUM_NODE_CLASSES + 1


# ------------------------
# Decoder
# ------------------------
def init_decoder(
    rng: np.random.Generator,
    latent_dim: int = 24,
    hidden: int = 128,
    node_dim: int = 32,
    n_max: int = MAX_ATOMS,
) -> ParamBundle:
    tensors = {
        "w1": Tensor(nc.glorot(rng, latent_dim, hidden), requires_grad=True),
        "b1": Tensor(np.zeros(hidden), requires_grad=True),
        "w2": Tensor(nc.glorot(rng, hidden, n_max * node_dim), requires_grad=True),
        "b2": Tensor(np.zeros(n_max * node_dim), requires_grad=True),
        "node_w": Tensor(nc.glorot(rng, node_dim, NODE_OUT), requires_grad=True),
        "node_b": Tensor(np.zeros(NODE_OUT), requires_grad=True),
        "edge_b": Tensor(np.zeros(NUM_EDGE_CLASSES), requires_grad=True),
    }
    for k in range(NUM_EDGE_CLASSES):
        tensors[f"edge_u{k}"] = Tensor(nc.glorot(rng, node_dim, node_dim), requires_grad=True)
    return ParamBundle(tensors)


def decoder_shape(params: ParamBundle) -> Tuple[int, int]:
    """(n_max, node state dim)."""
    node_dim = params["node_w"].shape[0]
    return params["w2"].shape[1] // node_dim, node_dim


def decode_batch(z: Tensor, params: ParamBundle) -> Tuple[Tensor, Tensor]:
    """Node logits (B, n_max, K+1) and symmetric edge logits (B, n_max, n_max, b)."""
    z = nc.as_tensor(z)
    if z.ndim != 2 or z.shape[1] != params["w1"].shape[0]:
        raise ShapeError(f"decode: latent {z.shape} does not match decoder input {params['w1'].shape[0]}")
    batch = z.shape[0]
    n_max, node_dim = decoder_shape(params)
    hidden = nc.linear(z, params["w1"], params["b1"]).relu()
    states = nc.linear(hidden, params["w2"], params["b2"]).tanh().reshape((batch, n_max, node_dim))
    node_logits = nc.linear(states, params["node_w"], params["node_b"])
    slices = []
    for k in range(NUM_EDGE_CLASSES):
        score = (states @ params[f"edge_u{k}"]) @ states.T
        score = (score + score.T) * 0.5
        slices.append(score.reshape((batch, n_max, n_max, 1)))
    edge_logits = nc.concat(slices, axis=3) + params["edge_b"]
    return node_logits, edge_logits


def decode_logits(z, params: ParamBundle) -> Tuple[Tensor, Tensor]:
    """Single latent -> (n_max, K+1) node logits and (n_max, n_max, b) edge logits."""
    z = nc.as_tensor(z)
    nodes, edges = decode_batch(z.reshape((1, z.shape[-1])), params)
    return nodes.reshape(nodes.shape[1:]), edges.reshape(edges.shape[1:])


# ------------------------
# Losses
# ------------------------
@dataclass(frozen=True, eq=False)
class ReconTarget:
    """Class indices in canonical atom order, node slots padded to n_max with PAD_CLASS."""

    node_classes: np.ndarray  # (n_max,)
    edge_classes: np.ndarray  # (n, n)
    n_atoms: int


def recon_target(g: MolGraph, n_max: int = MAX_ATOMS) -> ReconTarget:
    if g.n_atoms > n_max:
        raise ShapeError(f"target has {g.n_atoms} atoms, decoder holds {n_max}")
    ordered = g.permute(canonicalize(g).order) if g.is_connected() else g
    feats = to_feature_tensors(ordered)
    nodes = np.full(n_max, PAD_CLASS, dtype=np.int64)
    nodes[:g.n_atoms] = np.argmax(feats.X, axis=1)
    return ReconTarget(node_classes=nodes, edge_classes=np.argmax(feats.A, axis=2), n_atoms=g.n_atoms)


def reconstruction_loss(node_logits: Tensor, edge_logits: Tensor, targets: Sequence[ReconTarget]) -> Tensor:
    """
    Per graph: node cross-entropy averaged over all n_max slots plus edge
    cross-entropy averaged over real upper-triangle pairs; averaged over graphs.
    """
    node_logits, edge_logits = nc.as_tensor(node_logits), nc.as_tensor(edge_logits)
    if node_logits.ndim == 2:
        node_logits = node_logits.reshape((1,) + node_logits.shape)
        edge_logits = edge_logits.reshape((1,) + edge_logits.shape)
    batch, n_max, n_classes = node_logits.shape
    if len(targets) != batch:
        raise ShapeError(f"reconstruction_loss: {batch} logit rows for {len(targets)} targets")

    node_weight = np.zeros((batch, n_max, n_classes))
    edge_weight = np.zeros(edge_logits.shape)
    for b, target in enumerate(targets):
        if target.n_atoms > n_max or target.node_classes.shape[0] != n_max:
            raise ShapeError(f"target with {target.n_atoms} atoms does not fit {n_max} slots")
        node_weight[b, np.arange(n_max), target.node_classes] = 1.0 / n_max
        n = target.n_atoms
        pairs = n * (n - 1) // 2
        if pairs:
            ii, jj = np.triu_indices(n, k=1)
            edge_weight[b, ii, jj, target.edge_classes[ii, jj]] = 1.0 / pairs

    node_term = (nc.log_softmax(node_logits, axis=-1) * node_weight).sum()
    edge_term = (nc.log_softmax(edge_logits, axis=-1) * edge_weight).sum()
    return -(node_term + edge_term) * (1.0 / batch)


def reparameterize(mu: Tensor, sigma: Tensor, eps: np.ndarray) -> Tensor:
    mu, sigma = nc.as_tensor(mu), nc.as_tensor(sigma)
    eps = np.asarray(eps, dtype=np.float64)
    if mu.shape != sigma.shape or mu.shape != eps.shape:
        raise ShapeError(f"reparameterize: mu {mu.shape}, sigma {sigma.shape}, eps {eps.shape} differ")
    return mu + sigma * eps


def kl_divergence(mu: Tensor, sigma: Tensor) -> Tensor:
    """KL(N(mu, sigma^2) || N(0, I)) summed over latent dims, averaged over rows."""
    mu, sigma = nc.as_tensor(mu), nc.as_tensor(sigma)
    if mu.ndim == 1:
        mu, sigma = mu.reshape((1, -1)), sigma.reshape((1, -1))
    per_dim = (mu * mu + sigma * sigma - 1.0 - sigma.log() * 2.0) * 0.5
    return per_dim.sum(axis=1).mean()


@dataclass
class VaeConfig:
    alpha_kl: float = 0.1
    lr: float = 1e-3
    epochs: int = 50
    batch_size: int = 32

    def __post_init__(self):
        if self.alpha_kl < 0:
            raise ConfigError(f"alpha_kl must be >= 0, got {self.alpha_kl}")


@dataclass(frozen=True, eq=False)
class VaeExample:
    features: GraphFeatures
    target: ReconTarget


def prepare_examples(mols: Sequence[MolGraph], n_max: int = MAX_ATOMS) -> List[VaeExample]:
    return [VaeExample(features=to_feature_tensors(g), target=recon_target(g, n_max)) for g in mols]


def elbo_loss(
    examples: Sequence[VaeExample],
    gin: ParamBundle,
    decoder: ParamBundle,
    eps: np.ndarray,
    alpha_kl: float = 0.1,
) -> Tuple[Tensor, Dict[str, float]]:
    """recon + alpha * KL over a batch; components returned for logging."""
    mu, sigma = encode_batch(batch_graphs([e.features for e in examples]), gin)
    z = reparameterize(mu, sigma, eps)
    nodes, edges = decode_batch(z, decoder)
    recon = reconstruction_loss(nodes, edges, [e.target for e in examples])
    kl = kl_divergence(mu, sigma)
    total = recon + kl * alpha_kl
    return total, {"recon": recon.item(), "kl": kl.item()}


@dataclass
class VaeResult:
    gin: ParamBundle
    decoder: ParamBundle
    losses: List[float] = field(default_factory=list)
    recon: List[float] = field(default_factory=list)
    kl: List[float] = field(default_factory=list)


def train_vae(
    examples: Sequence[VaeExample],
    gin: ParamBundle,
    decoder: ParamBundle,
    cfg: VaeConfig,
    rng: np.random.Generator,
    progress: bool = False,
) -> VaeResult:
    """Minimize the negative ELBO; one fresh eps per example per epoch."""
    if not examples:
        raise DatasetError("train_vae: empty dataset")
    bundles = {"gin": gin.trainable(), "dec": decoder.trainable()}
    params = nc.flatten_bundles(bundles)
    latent_dim = gin["mu_w"].shape[1]
    state = AdamState(lr=cfg.lr)
    result = VaeResult(gin=gin, decoder=decoder)

    for epoch in tqdm(range(cfg.epochs), desc="vae", disable=not progress):
        sums = {"loss": 0.0, "recon": 0.0, "kl": 0.0}
        for idx in minibatches(len(examples), cfg.batch_size, rng):
            batch = [examples[i] for i in idx]
            eps = rng.standard_normal((len(batch), latent_dim))

            def loss_fn(p: Dict[str, Tensor]):
                b = nc.unflatten_bundles(bundles, p)
                return elbo_loss(batch, b["gin"], b["dec"], eps, cfg.alpha_kl)

            loss, params, state, parts = nc.train_step(loss_fn, params, state)
            sums["loss"] += loss * len(idx)
            sums["recon"] += parts["recon"] * len(idx)
            sums["kl"] += parts["kl"] * len(idx)
        result.losses.append(sums["loss"] / len(examples))
        result.recon.append(sums["recon"] / len(examples))
        result.kl.append(sums["kl"] / len(examples))
        log.info(
            "vae epoch %d/%d loss %.5f (recon %.5f, kl %.5f)",
            epoch + 1, cfg.epochs, result.losses[-1], result.recon[-1], result.kl[-1],
        )

    out = nc.unflatten_bundles(bundles, params)
    result.gin, result.decoder = out["gin"].frozen(), out["dec"].frozen()
    return result


# ------------------------
# Decoding
# ------------------------
def realize(node_logits: np.ndarray, edge_logits: np.ndarray, repair: bool = True) -> MolGraph:
    """Argmax nodes, drop PAD slots, argmax symmetrized edges, keep the largest component, optionally repair."""
    classes = np.argmax(node_logits, axis=-1)
    mask = classes != PAD_CLASS
    if not mask.any():
        raise GraphError("empty molecule: every node slot decoded as PAD")
    graph = from_feature_tensors(node_logits[:, :NUM_NODE_CLASSES], edge_logits, mask)
    graph, _ = graph.largest_component()
    if repair:
        graph, _ = valence_repair(graph).largest_component()
    return graph


def sample_decode(z: np.ndarray, decoder: ParamBundle, repair: bool = True) -> MolGraph:
    with nc.no_recording():
        nodes, edges = decode_logits(np.asarray(z, dtype=np.float64), decoder)
    return realize(nodes.data, edges.data, repair)


def decode_many(Z: np.ndarray, decoder: ParamBundle, repair: bool = True) -> List[Optional[MolGraph]]:
    """Decode rows of Z; rows that decode to an empty molecule give None."""
    Z = np.asarray(Z, dtype=np.float64)
    with nc.no_recording():
        nodes, edges = decode_batch(Z, decoder)
    out: List[Optional[MolGraph]] = []
    for b in range(Z.shape[0]):
        try:
            out.append(realize(nodes.data[b], edges.data[b], repair))
        except GraphError as e:
            log.debug("latent row %d not decodable: %s", b, e)
            out.append(None)
    return out


def reconstruction_similarity(
    mols: Sequence[MolGraph],
    gin: ParamBundle,
    decoder: ParamBundle,
    threshold: float = 0.5,
    repair: bool = True,
) -> float:
    """Fraction of molecules whose decode(mu_g) has similarity_f >= threshold to the input."""
    if not mols:
        raise DatasetError("reconstruction_similarity: no molecules")
    with nc.no_recording():
        mu, _ = encode_batch(batch_graphs([to_feature_tensors(g) for g in mols]), gin)
    decoded = decode_many(mu.data, decoder, repair)
    hits = sum(1 for g, d in zip(mols, decoded) if d is not None and similarity_f(g, d) >= threshold)
    return hits / len(mols)


# ------------------------
# Single-stage ablation
# ------------------------
@dataclass
class JointResult:
    gin: ParamBundle
    decoder: ParamBundle
    denoiser: ParamBundle
    losses: List[float] = field(default_factory=list)


def train_joint(
    examples: Sequence[VaeExample],
    conditions: np.ndarray,
    gin: ParamBundle,
    decoder: ParamBundle,
    denoiser: ParamBundle,
    schedule: NoiseSchedule,
    cfg: VaeConfig,
    p_drop: float,
    rng: np.random.Generator,
    progress: bool = False,
) -> JointResult:
    """
    VAE and denoiser optimized together on L_elbo + L_diff. The diffusion target
    is the encoder mean, so encoder gradients flow from both terms.
    """
    if not examples or len(examples) != len(conditions):
        raise DatasetError("train_joint: empty dataset or mismatched condition count")
    conditions = np.asarray(conditions, dtype=np.float64)
    bundles = {"gin": gin.trainable(), "dec": decoder.trainable(), "den": denoiser.trainable()}
    params = nc.flatten_bundles(bundles)
    latent_dim = gin["mu_w"].shape[1]
    state = AdamState(lr=cfg.lr)
    losses: List[float] = []

    for epoch in tqdm(range(cfg.epochs), desc="joint", disable=not progress):
        total = 0.0
        for idx in minibatches(len(examples), cfg.batch_size, rng):
            batch = [examples[i] for i in idx]
            eps = rng.standard_normal((len(batch), latent_dim))

            def loss_fn(p: Dict[str, Tensor]):
                b = nc.unflatten_bundles(bundles, p)
                mu, sigma = encode_batch(batch_graphs([e.features for e in batch]), b["gin"])
                nodes, edges = decode_batch(reparameterize(mu, sigma, eps), b["dec"])
                elbo = reconstruction_loss(nodes, edges, [e.target for e in batch]) + kl_divergence(mu, sigma) * cfg.alpha_kl
                diff = diffusion_loss(mu, conditions[idx], b["den"], schedule, rng, p_drop)
                return elbo + diff, {}

            loss, params, state, _ = nc.train_step(loss_fn, params, state)
            total += loss * len(idx)
        losses.append(total / len(examples))
        log.info("joint epoch %d/%d loss %.5f", epoch + 1, cfg.epochs, losses[-1])

    out = nc.unflatten_bundles(bundles, params)
    return JointResult(
        gin=out["gin"].frozen(), decoder=out["dec"].frozen(), denoiser=out["den"].frozen(), losses=losses
    )

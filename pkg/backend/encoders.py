"""
Text encoder E_t, GIN graph encoder E_g and contrastive alignment pretraining.
"""

import hashlib
import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from . import numcore as nc
from .chem import NUM_EDGE_CLASSES, NUM_NODE_CLASSES, GraphFeatures
from .errors import ConfigError, DatasetError, NonFiniteError, ShapeError
from .numcore import AdamState, ParamBundle, Tensor

log = logging.getLogger(__name__)

PAD_ID = 0
UNK_ID = 1
PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"
_WORD = re.compile(r"[^\W_]+")
N_BOND_TYPES = NUM_EDGE_CLASSES - 1
SIGMA_FLOOR = 1e-6


# ------------------------
# Vocabulary / tokenizer
# ------------------------
@dataclass
class Vocab:
    token_to_id: Dict[str, int]
    max_len: int = 64
    salt: str = "moldiff"

    @property
    def size(self) -> int:
        return len(self.token_to_id)

    def to_dict(self) -> dict:
        tokens = sorted(self.token_to_id, key=self.token_to_id.get)
        return {"tokens": tokens, "max_len": self.max_len, "salt": self.salt}

    @classmethod
    def from_dict(cls, data: dict) -> "Vocab":
        tokens = list(data["tokens"])
        if tokens[:2] != [PAD_TOKEN, UNK_TOKEN]:
            raise ValueError("vocab must start with the pad and unknown tokens")
        return cls({t: i for i, t in enumerate(tokens)}, int(data["max_len"]), str(data["salt"]))


@dataclass(frozen=True)
class TokenSequence:
    ids: Tuple[int, ...]
    length: int
    truncated: bool = False
    empty: bool = False

    def real_ids(self) -> List[int]:
        return [i for i in self.ids if i != PAD_ID]


def words(text: str) -> List[str]:
    """Lowercase, split on whitespace and punctuation."""
    return _WORD.findall((text or "").lower())


def _salted(salt: str, token: str) -> bytes:
    return hashlib.blake2b(f"{salt}:{token}".encode("utf-8"), digest_size=8).digest()


def build_vocab(texts: Iterable[str], max_len: int = 64, min_freq: int = 1, salt: str = "moldiff") -> Vocab:
    """Ids by descending frequency; ties broken by a salted hash so the map is corpus+salt reproducible."""
    counts = Counter(w for text in texts for w in words(text))
    kept = [t for t, n in counts.items() if n >= min_freq]
    kept.sort(key=lambda t: (-counts[t], _salted(salt, t)))
    table = {PAD_TOKEN: PAD_ID, UNK_TOKEN: UNK_ID}
    for token in kept:
        table[token] = len(table)
    return Vocab(table, max_len=max_len, salt=salt)


def tokenize(text: str, vocab: Vocab) -> TokenSequence:
    pieces = words(text)
    empty = not pieces
    ids = [vocab.token_to_id.get(w, UNK_ID) for w in pieces] or [UNK_ID]
    truncated = len(ids) > vocab.max_len
    ids = ids[:vocab.max_len]
    length = len(ids)
    if truncated:
        log.debug("caption truncated to %d tokens", vocab.max_len)
    return TokenSequence(tuple(ids + [PAD_ID] * (vocab.max_len - length)), length, truncated, empty)


# ------------------------
# Text encoder
# ------------------------
def init_text_encoder(rng: np.random.Generator, vocab_size: int, text_dim: int = 32, cond_dim: int = 24) -> ParamBundle:
    d = text_dim
    return ParamBundle({
        "embed": Tensor(rng.normal(0.0, 0.3, size=(vocab_size, d)), requires_grad=True),
        "wq": Tensor(nc.glorot(rng, d, d), requires_grad=True),
        "wk": Tensor(nc.glorot(rng, d, d), requires_grad=True),
        "wv": Tensor(nc.glorot(rng, d, d), requires_grad=True),
        "wo": Tensor(nc.glorot(rng, d, d), requires_grad=True),
        "proj": Tensor(nc.glorot(rng, d, cond_dim), requires_grad=True),
        "proj_b": Tensor(np.zeros(cond_dim), requires_grad=True),
    })


def encode_text(seq: TokenSequence, params: ParamBundle) -> Tensor:
    """Embed, one residual self-attention block over non-pad tokens, mean-pool, project to d_c."""
    ids = seq.real_ids()
    if not ids:
        raise ShapeError("encode_text: sequence has no non-pad tokens")
    emb = nc.gather_rows(params["embed"], ids)
    d = emb.shape[1]
    q = emb @ params["wq"]
    k = emb @ params["wk"]
    v = emb @ params["wv"]
    attn = nc.softmax((q @ k.T) * (1.0 / np.sqrt(d)), axis=-1)
    hidden = emb + (attn @ v) @ params["wo"]
    pooled = hidden.mean(axis=0, keepdims=True)
    out = nc.linear(pooled, params["proj"], params["proj_b"])
    return out.reshape((out.shape[1],))


def encode_texts(seqs: Sequence[TokenSequence], params: ParamBundle) -> Tensor:
    rows = [encode_text(s, params).reshape((1, -1)) for s in seqs]
    return rows[0] if len(rows) == 1 else nc.concat(rows, axis=0)


# ------------------------
# GIN graph encoder
# ------------------------
@dataclass(frozen=True, eq=False)
class GraphBatch:
    """Disjoint union of graphs: node rows, per-bond-type block-diagonal adjacency and a mean-pool matrix."""

    X: np.ndarray          # (N, NUM_NODE_CLASSES)
    adjacency: np.ndarray  # (N_BOND_TYPES, N, N)
    pool: np.ndarray       # (B, N)
    sizes: Tuple[int, ...]

    @property
    def n_graphs(self) -> int:
        return len(self.sizes)


def batch_graphs(graphs: Sequence[GraphFeatures]) -> GraphBatch:
    if not graphs:
        raise ShapeError("batch_graphs: empty batch")
    sizes = tuple(g.n_atoms for g in graphs)
    total = sum(sizes)
    X = np.zeros((total, graphs[0].X.shape[1]))
    adjacency = np.zeros((N_BOND_TYPES, total, total))
    pool = np.zeros((len(graphs), total))
    start = 0
    for b, g in enumerate(graphs):
        n = g.n_atoms
        X[start:start + n] = g.X
        adjacency[:, start:start + n, start:start + n] = g.adjacency_by_type()
        pool[b, start:start + n] = 1.0 / n
        start += n
    return GraphBatch(X=X, adjacency=adjacency, pool=pool, sizes=sizes)


def init_gin(
    rng: np.random.Generator,
    hidden: int = 64,
    layers: int = 3,
    latent_dim: int = 24,
    node_dim: int = NUM_NODE_CLASSES,
) -> ParamBundle:
    tensors: Dict[str, Tensor] = {
        "embed_w": Tensor(nc.glorot(rng, node_dim, hidden), requires_grad=True),
        "embed_b": Tensor(np.zeros(hidden), requires_grad=True),
    }
    for k in range(layers):
        tensors[f"eps{k}"] = Tensor(np.zeros(1), requires_grad=True)
        for t in range(N_BOND_TYPES):
            tensors[f"msg{k}_{t}"] = Tensor(nc.glorot(rng, hidden, hidden), requires_grad=True)
        tensors[f"mlp{k}_w1"] = Tensor(nc.glorot(rng, hidden, hidden), requires_grad=True)
        tensors[f"mlp{k}_b1"] = Tensor(np.zeros(hidden), requires_grad=True)
        tensors[f"mlp{k}_w2"] = Tensor(nc.glorot(rng, hidden, hidden), requires_grad=True)
        tensors[f"mlp{k}_b2"] = Tensor(np.zeros(hidden), requires_grad=True)
    tensors["mu_w"] = Tensor(nc.glorot(rng, hidden, latent_dim), requires_grad=True)
    tensors["mu_b"] = Tensor(np.zeros(latent_dim), requires_grad=True)
    tensors["sigma_w"] = Tensor(nc.glorot(rng, hidden, latent_dim), requires_grad=True)
    tensors["sigma_b"] = Tensor(np.zeros(latent_dim), requires_grad=True)
    return ParamBundle(tensors)


def gin_layers(params: ParamBundle) -> int:
    return sum(1 for name in params.tensors if name.startswith("eps"))


def encode_batch(batch: GraphBatch, params: ParamBundle) -> Tuple[Tensor, Tensor]:
    """(mu, sigma), each (B, latent_dim)."""
    if batch.X.shape[1] != params["embed_w"].shape[0]:
        raise ShapeError(
            f"encode_graph: node features {batch.X.shape} do not match encoder input {params['embed_w'].shape}"
        )
    h = nc.linear(Tensor._wrap(batch.X, False), params["embed_w"], params["embed_b"])
    adjacency = [Tensor._wrap(batch.adjacency[t], False) for t in range(N_BOND_TYPES)]
    for k in range(gin_layers(params)):
        agg = None
        for t in range(N_BOND_TYPES):
            msg = adjacency[t] @ (h @ params[f"msg{k}_{t}"])
            agg = msg if agg is None else agg + msg
        x = h * (1.0 + params[f"eps{k}"]) + agg
        x = nc.linear(x, params[f"mlp{k}_w1"], params[f"mlp{k}_b1"]).relu()
        h = nc.linear(x, params[f"mlp{k}_w2"], params[f"mlp{k}_b2"]).relu()
    pooled = Tensor._wrap(batch.pool, False) @ h
    mu = nc.linear(pooled, params["mu_w"], params["mu_b"])
    sigma = nc.linear(pooled, params["sigma_w"], params["sigma_b"]).softplus() + SIGMA_FLOOR
    return mu, sigma


def encode_graph(X: np.ndarray, A: np.ndarray, params: ParamBundle) -> Tuple[Tensor, Tensor]:
    """mu_g, sigma_g of a single graph given its one-hot tensors."""
    X = np.asarray(X, dtype=np.float64)
    A = np.asarray(A, dtype=np.float64)
    if A.shape[:2] != (X.shape[0], X.shape[0]) or A.shape[2] != NUM_EDGE_CLASSES:
        raise ShapeError(f"encode_graph: edge tensor {A.shape} does not match {X.shape[0]} nodes")
    mu, sigma = encode_batch(batch_graphs([GraphFeatures(X=X, A=A)]), params)
    return mu.reshape((mu.shape[1],)), sigma.reshape((sigma.shape[1],))


def latent_means(graphs: Sequence[GraphFeatures], params: ParamBundle, chunk: int = 256) -> np.ndarray:
    """mu_g for every graph as a plain array (no tape)."""
    rows = []
    with nc.no_recording():
        for start in range(0, len(graphs), chunk):
            mu, _ = encode_batch(batch_graphs(graphs[start:start + chunk]), params)
            rows.append(mu.data)
    return np.concatenate(rows, axis=0)


# ------------------------
# Contrastive alignment
# ------------------------
def _row_normalize(x: Tensor, what: str) -> Tensor:
    norms = np.sqrt(np.sum(x.data * x.data, axis=1))
    if np.any(norms == 0):
        raise NonFiniteError(f"contrastive_loss: zero-norm {what} vector, cosine undefined")
    return x / nc.sqrt((x * x).sum(axis=1, keepdims=True))


def contrastive_loss(z: Tensor, c: Tensor, tau: float = 0.1, symmetric: bool = False) -> Tensor:
    """
    -mean_i log softmax_j(cos(z_i, c_j) / tau)[i]  (graph -> text).
    With `symmetric`, the text -> graph direction is averaged in.
    """
    z, c = nc.as_tensor(z), nc.as_tensor(c)
    if z.ndim != 2 or z.shape != c.shape:
        raise ShapeError(f"contrastive_loss: z {z.shape} and c {c.shape} must be equal (B, d)")
    if z.shape[0] < 1:
        raise ShapeError("contrastive_loss: empty batch")
    if tau <= 0:
        raise ConfigError("contrastive_loss: tau must be positive")
    scores = (_row_normalize(z, "graph") @ _row_normalize(c, "text").T) * (1.0 / tau)
    diag = (scores * np.eye(z.shape[0])).sum(axis=1)
    loss = -(diag - nc.log_sum_exp(scores, axis=1)).mean()
    if symmetric:
        loss = (loss - (diag - nc.log_sum_exp(scores, axis=0)).mean()) * 0.5
    return loss


def retrieval_scores(z: np.ndarray, c: np.ndarray) -> Tuple[float, float]:
    """Mean cosine of matched pairs and of mismatched pairs."""
    zn = z / np.linalg.norm(z, axis=1, keepdims=True)
    cn = c / np.linalg.norm(c, axis=1, keepdims=True)
    cos = zn @ cn.T
    n = cos.shape[0]
    matched = float(np.mean(np.diag(cos)))
    mismatched = float((cos.sum() - np.trace(cos)) / (n * n - n)) if n > 1 else float("nan")
    return matched, mismatched


@dataclass
class ContrastiveConfig:
    tau: float = 0.1
    batch_size: int = 32
    lr: float = 1e-3
    epochs: int = 30
    symmetric: bool = False

    def __post_init__(self):
        if self.tau <= 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")


@dataclass
class AlignResult:
    gin: ParamBundle
    text: ParamBundle
    losses: List[float] = field(default_factory=list)


def minibatches(n: int, batch_size: int, rng: np.random.Generator) -> List[np.ndarray]:
    order = rng.permutation(n)
    batches = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    # a trailing singleton batch has zero contrastive loss; fold it into the previous one
    if len(batches) > 1 and len(batches[-1]) == 1:
        batches[-2] = np.concatenate([batches[-2], batches.pop()])
    return batches


def pretrain_align(
    graphs: Sequence[GraphFeatures],
    texts: Sequence[TokenSequence],
    gin: ParamBundle,
    text: ParamBundle,
    cfg: ContrastiveConfig,
    rng: np.random.Generator,
    progress: bool = False,
) -> AlignResult:
    """Minibatch Adam on the contrastive loss; z is mu_g. Returns params and per-epoch mean losses."""
    if not graphs or len(graphs) != len(texts):
        raise DatasetError("pretrain_align: empty dataset or mismatched graph/text counts")
    bundles = {"gin": gin.trainable(), "text": text.trainable()}
    params = nc.flatten_bundles(bundles)
    state = AdamState(lr=cfg.lr)
    losses: List[float] = []

    for epoch in tqdm(range(cfg.epochs), desc="align", disable=not progress):
        total, count = 0.0, 0
        for idx in minibatches(len(graphs), cfg.batch_size, rng):
            batch = batch_graphs([graphs[i] for i in idx])
            seqs = [texts[i] for i in idx]

            def loss_fn(p: Dict[str, Tensor]):
                b = nc.unflatten_bundles(bundles, p)
                mu, _ = encode_batch(batch, b["gin"])
                c = encode_texts(seqs, b["text"])
                return contrastive_loss(mu, c, cfg.tau, cfg.symmetric), {}

            loss, params, state, _ = nc.train_step(loss_fn, params, state)
            total += loss * len(idx)
            count += len(idx)
        losses.append(total / count)
        log.info("align epoch %d/%d loss %.5f", epoch + 1, cfg.epochs, losses[-1])

    out = nc.unflatten_bundles(bundles, params)
    return AlignResult(gin=out["gin"].frozen(), text=out["text"].frozen(), losses=losses)


def text_embeddings(seqs: Sequence[TokenSequence], params: ParamBundle) -> np.ndarray:
    with nc.no_recording():
        return np.stack([encode_text(s, params).data for s in seqs])

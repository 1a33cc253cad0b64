"""
Dataset ingestion, checkpoints, the three training stages, generation and evaluation.
"""

import csv
import io
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import stats

from config import Config

from . import numcore as nc
from .captions import NO_RING_PROMPT, RING_PROMPT
from .chem import MolGraph, check_valence, parse_smiles, to_feature_tensors, write_canonical_smiles
from .encoders import (
    TokenSequence,
    Vocab,
    build_vocab,
    encode_text,
    init_gin,
    init_text_encoder,
    latent_means,
    pretrain_align,
    text_embeddings,
    tokenize,
)
from .errors import (
    CheckpointError,
    ConfigError,
    DatasetError,
    EvaluationError,
    MolDiffError,
    SmilesError,
    StageOrderError,
)
from .evalmetrics import CondEvalReport, UncondEvalReport, conditional_metrics, select_top_k, unconditional_metrics
from .exports import ReportExporter
from .fingerprints import ring_count
from .genvae import decode_many, init_decoder, prepare_examples, train_joint, train_vae
from .latentdiff import guided_predictor, init_denoiser, make_schedule, respaced_ladder, sample_latent, train_diffusion
from .numcore import ParamBundle, Tensor
from .runconfig import ABLATIONS, RunConfig
from .utils import PathLike, atomic_write_text, chunk_sizes, derive_seed, rng_for

log = logging.getLogger(__name__)

TSV_HEADER = ("smiles", "description")
DROP_REASONS = ("format", "parse", "vocabulary", "atom_count", "disconnected", "valence")
FORMAT_VERSION = 1
STAGE_TITLES = {"align": "Pretraining Stage", "vae": "First Stage", "diffusion": "Second Stage"}
STAGE_COMMANDS = {"align": "pretrain-align", "vae": "train-vae", "diffusion": "train-diffusion"}
STAGES = ("pretrain-align", "train-vae", "train-diffusion", "train-joint")
GENERATION_COLUMNS = ("prompt_id", "prompt", "reference", "smiles", "valid", "seconds")


# ------------------------
# Datasets
# ------------------------
@dataclass(frozen=True, eq=False)
class MoleculePair:
    smiles: str
    description: str
    graph: MolGraph


@dataclass
class IngestReport:
    total: int = 0
    kept: int = 0
    dropped: Dict[str, int] = field(default_factory=lambda: {reason: 0 for reason in DROP_REASONS})

    def drop(self, reason: str) -> None:
        self.dropped[reason] += 1

    def reconciles(self) -> bool:
        return self.total == self.kept + sum(self.dropped.values())

    def to_dict(self) -> dict:
        return {"total": self.total, "kept": self.kept, "dropped": dict(self.dropped)}


def classify_smiles(text: str) -> Tuple[Optional[MolGraph], Optional[str]]:
    """(graph, None) for an acceptable molecule, else (None, drop reason)."""
    try:
        g = parse_smiles(text)
    except SmilesError as e:
        if e.reason == "atom_count":
            return None, "atom_count"
        if e.reason in ("unknown_atom", "unsupported"):
            return None, "vocabulary"
        return None, "parse"
    if "disconnected" in g.notes or not g.is_connected():
        return None, "disconnected"
    if not check_valence(g):
        return None, "valence"
    return g, None


def load_dataset(path: PathLike) -> Tuple[List[MoleculePair], IngestReport]:
    """Read a `smiles<TAB>description` TSV; rows that fail any check are dropped and counted by reason."""
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"dataset not found: {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    if not any(line.strip() for line in lines):
        raise DatasetError(f"empty dataset file: {path}")
    header = tuple(col.strip().lower() for col in lines[0].split("\t"))
    if header != TSV_HEADER:
        raise DatasetError(f"missing header: first line of {path} must be 'smiles<TAB>description'")

    report = IngestReport()
    pairs: List[MoleculePair] = []
    for line in lines[1:]:
        if not line.strip():
            continue
        report.total += 1
        cols = line.split("\t")
        if len(cols) != 2 or not cols[0].strip() or not cols[1].strip():
            report.drop("format")
            continue
        g, reason = classify_smiles(cols[0].strip())
        if g is None:
            report.drop(reason)
            continue
        pairs.append(MoleculePair(write_canonical_smiles(g), cols[1].strip(), g))
        report.kept += 1

    log.info("ingested %s: total=%d kept=%d dropped=%s", path.name, report.total, report.kept, report.dropped)
    return pairs, report


def dataset_tsv(rows: Sequence[Tuple[str, str]]) -> str:
    clean = lambda s: " ".join(str(s).split())
    return "\t".join(TSV_HEADER) + "\n" + "".join(f"{clean(s)}\t{clean(d)}\n" for s, d in rows)


def write_dataset(path: PathLike, pairs: Sequence[Union[MoleculePair, Tuple[str, str]]]) -> Path:
    rows = [(p.smiles, p.description) if isinstance(p, MoleculePair) else p for p in pairs]
    return atomic_write_text(path, dataset_tsv(rows))


@dataclass
class DatasetSplit:
    train: List[MoleculePair]
    val: List[MoleculePair]
    test: List[MoleculePair]


def split_dataset(
    pairs: Sequence[MoleculePair], val_fraction: float = 0.1, test_fraction: float = 0.1, seed: int = 0
) -> DatasetSplit:
    if not pairs:
        raise DatasetError("split_dataset: no pairs")
    order = rng_for(seed, "split").permutation(len(pairs))
    n_test = int(round(len(pairs) * test_fraction))
    n_val = int(round(len(pairs) * val_fraction))
    if n_test + n_val >= len(pairs):
        raise DatasetError(f"split leaves no training pairs ({len(pairs)} pairs)")
    pick = lambda idx: [pairs[i] for i in idx]
    return DatasetSplit(
        train=pick(order[n_test + n_val:]), val=pick(order[n_test:n_test + n_val]), test=pick(order[:n_test])
    )


# ------------------------
# Checkpoints
# ------------------------
@dataclass
class Checkpoint:
    stage: str
    config: RunConfig
    params: Dict[str, ParamBundle]
    vocab: Optional[Vocab] = None
    seeds: Dict[str, int] = field(default_factory=dict)
    losses: Dict[str, List[float]] = field(default_factory=dict)
    ablation: str = "full"
    format_version: int = FORMAT_VERSION

    def to_json(self) -> str:
        doc = {
            "format_version": self.format_version,
            "stage": self.stage,
            "ablation": self.ablation,
            "vocab": self.vocab.to_dict() if self.vocab else None,
            "params": {
                bundle: {name: t.data.tolist() for name, t in b.tensors.items()}
                for bundle, b in self.params.items()
            },
            "config": self.config.to_dict(),
            "seeds": self.seeds,
            "losses": self.losses,
        }
        return json.dumps(doc, sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str, source: str = "<string>") -> "Checkpoint":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as e:
            raise CheckpointError(
                f"corrupt checkpoint {source}: {e.msg} at line {e.lineno} column {e.colno} (char {e.pos})"
            ) from e
        if not isinstance(doc, dict):
            raise CheckpointError(f"corrupt checkpoint {source}: top level is not an object")
        version = doc.get("format_version")
        if version != FORMAT_VERSION:
            raise CheckpointError(
                f"incompatible checkpoint {source}: format_version {version}, this build reads {FORMAT_VERSION}"
            )
        try:
            stage = doc["stage"]
            if stage not in STAGE_TITLES:
                raise ValueError(f"unknown stage '{stage}'")
            params = {
                bundle: ParamBundle({name: Tensor(np.array(values, dtype=np.float64)) for name, values in arrays.items()})
                for bundle, arrays in doc["params"].items()
            }
            return cls(
                stage=stage,
                config=RunConfig.from_dict(doc["config"]),
                params=params,
                vocab=Vocab.from_dict(doc["vocab"]) if doc.get("vocab") else None,
                seeds={k: int(v) for k, v in doc.get("seeds", {}).items()},
                losses={k: [float(x) for x in v] for k, v in doc.get("losses", {}).items()},
                ablation=doc.get("ablation", "full"),
            )
        except (KeyError, TypeError, ValueError, ConfigError) as e:
            raise CheckpointError(f"malformed checkpoint {source}: {e}") from e

    def same_params(self, other: "Checkpoint") -> bool:
        return self.params.keys() == other.params.keys() and all(
            b.same_values(other.params[k]) for k, b in self.params.items()
        )


def save_checkpoint(ckpt: Checkpoint, path: PathLike) -> Path:
    return atomic_write_text(path, ckpt.to_json())


def load_checkpoint(path: PathLike) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    return Checkpoint.from_json(path.read_text(encoding="utf-8"), source=str(path))


def checkpoint_roundtrip(ckpt: Checkpoint, path: PathLike) -> Checkpoint:
    """Save, reload and verify parameters are bit-identical."""
    save_checkpoint(ckpt, path)
    loaded = load_checkpoint(path)
    if not loaded.same_params(ckpt):
        raise CheckpointError(f"checkpoint {path} did not reproduce its parameters")
    return loaded


# ------------------------
# Training stages
# ------------------------
@dataclass
class StageResult:
    checkpoint: Checkpoint
    losses: Dict[str, List[float]]
    checkpoint_path: Optional[Path] = None
    loss_csv_path: Optional[Path] = None


def _require(prior: Optional[Checkpoint], needed: str, accepted: Sequence[str], command: str) -> Checkpoint:
    if prior is None or prior.stage not in accepted:
        title = STAGE_TITLES[needed]
        raise StageOrderError(title, f"{command} requires a {title} ({STAGE_COMMANDS[needed]}) checkpoint")
    return prior


def _texts(pairs: Sequence[MoleculePair], vocab: Vocab) -> List[TokenSequence]:
    return [tokenize(p.description, vocab) for p in pairs]


def _fresh_encoders(config: RunConfig, pairs: Sequence[MoleculePair], seed: int) -> Tuple[Vocab, ParamBundle, ParamBundle]:
    rng = np.random.default_rng(seed)
    vocab = build_vocab((p.description for p in pairs), max_len=config.text_max_len, salt=f"moldiff-{config.seed}")
    gin = init_gin(rng, hidden=config.gin_hidden, layers=config.gin_layers, latent_dim=config.latent_dim)
    text = init_text_encoder(rng, vocab.size, text_dim=config.text_dim, cond_dim=config.latent_dim)
    return vocab, gin.frozen(), text.frozen()


def run_stage(
    stage: str,
    config: RunConfig,
    pairs: Sequence[MoleculePair],
    prior: Optional[Checkpoint] = None,
    ablation: str = "full",
    checkpoint_path: Optional[PathLike] = None,
    progress: bool = False,
) -> StageResult:
    """
    One training stage. Order is enforced: train-vae needs an alignment checkpoint
    (unless the ablation skips alignment), train-diffusion needs a VAE checkpoint,
    train-joint (single-stage ablation) needs an alignment checkpoint unless
    ablation is 'neither'.
    """
    if stage not in STAGES:
        raise ConfigError(f"unknown stage '{stage}' (expected one of {', '.join(STAGES)})")
    if ablation not in ABLATIONS:
        raise ConfigError(f"unknown ablation '{ablation}' (expected one of {', '.join(ABLATIONS)})")
    if not pairs:
        raise DatasetError(f"{stage}: empty dataset")
    seeds = dict(prior.seeds) if prior else {}

    if stage == "pretrain-align":
        seed = seeds["align"] = derive_seed(config.seed, "align")
        vocab, gin, text = _fresh_encoders(config, pairs, seed)
        result = pretrain_align(
            [to_feature_tensors(p.graph) for p in pairs], _texts(pairs, vocab), gin, text,
            config.contrastive(), np.random.default_rng(seed), progress,
        )
        ckpt = Checkpoint("align", config, {"gin": result.gin, "text": result.text}, vocab, seeds,
                          {"align": result.losses}, ablation)

    elif stage == "train-vae":
        seed = seeds["vae"] = derive_seed(config.seed, "vae")
        if ablation in ("no_alignment", "neither"):
            vocab, gin, text = _fresh_encoders(config, pairs, derive_seed(config.seed, "init"))
        else:
            prior = _require(prior, "align", ("align", "vae", "diffusion"), "train-vae")
            vocab, gin, text = prior.vocab, prior.params["gin"], prior.params["text"]
        rng = np.random.default_rng(seed)
        decoder = init_decoder(rng, latent_dim=config.latent_dim, hidden=config.decoder_hidden,
                               node_dim=config.decoder_node_dim)
        result = train_vae(prepare_examples([p.graph for p in pairs]), gin, decoder.frozen(), config.vae(), rng, progress)
        losses = {**(prior.losses if prior else {}), "vae": result.losses, "vae_recon": result.recon, "vae_kl": result.kl}
        ckpt = Checkpoint("vae", config, {"gin": result.gin, "text": text, "dec": result.decoder}, vocab, seeds,
                          losses, ablation)

    elif stage == "train-diffusion":
        prior = _require(prior, "vae", ("vae", "diffusion"), "train-diffusion")
        seed = seeds["diffusion"] = derive_seed(config.seed, "diffusion")
        gin, text = prior.params["gin"], prior.params["text"]
        frozen = {k: {n: a.copy() for n, a in prior.params[k].to_arrays().items()} for k in ("gin", "text")}
        latents = latent_means([to_feature_tensors(p.graph) for p in pairs], gin)
        conditions = text_embeddings(_texts(pairs, prior.vocab), text)
        rng = np.random.default_rng(seed)
        dcfg = config.diffusion()
        denoiser = init_denoiser(rng, latent_dim=config.latent_dim, cond_dim=config.latent_dim,
                                 hidden=config.denoiser_hidden, layers=config.denoiser_layers,
                                 time_dim=config.time_embed_dim)
        result = train_diffusion(latents, conditions, denoiser.frozen(), make_schedule(dcfg.schedule, dcfg.T_train),
                                 dcfg, rng, progress)
        for k, arrays in frozen.items():
            if not all(np.array_equal(arrays[n], prior.params[k][n].data) for n in arrays):
                raise MolDiffError(f"{k} encoder changed during diffusion training")
        ckpt = Checkpoint("diffusion", config, {**prior.params, "den": result.params}, prior.vocab, seeds,
                          {**prior.losses, "diffusion": result.losses}, prior.ablation)

    else:  # train-joint
        seed = seeds["joint"] = derive_seed(config.seed, "joint")
        if ablation in ("neither", "no_alignment"):
            ablation = "neither"
            vocab, gin, text = _fresh_encoders(config, pairs, derive_seed(config.seed, "init"))
        else:
            ablation = "no_two_stage"
            prior = _require(prior, "align", ("align",), "train-joint")
            vocab, gin, text = prior.vocab, prior.params["gin"], prior.params["text"]
        rng = np.random.default_rng(seed)
        dcfg = config.diffusion()
        decoder = init_decoder(rng, latent_dim=config.latent_dim, hidden=config.decoder_hidden,
                               node_dim=config.decoder_node_dim)
        denoiser = init_denoiser(rng, latent_dim=config.latent_dim, cond_dim=config.latent_dim,
                                 hidden=config.denoiser_hidden, layers=config.denoiser_layers,
                                 time_dim=config.time_embed_dim)
        conditions = text_embeddings(_texts(pairs, vocab), text)
        result = train_joint(prepare_examples([p.graph for p in pairs]), conditions, gin, decoder.frozen(),
                             denoiser.frozen(), make_schedule(dcfg.schedule, dcfg.T_train), config.vae(),
                             dcfg.p_drop, rng, progress)
        ckpt = Checkpoint("diffusion", config,
                          {"gin": result.gin, "text": text, "dec": result.decoder, "den": result.denoiser},
                          vocab, seeds, {**(prior.losses if prior else {}), "joint": result.losses}, ablation)

    out = StageResult(checkpoint=ckpt, losses=ckpt.losses)
    if checkpoint_path is not None:
        out.checkpoint_path = save_checkpoint(ckpt, checkpoint_path)
        csv_path = Path(checkpoint_path).with_name(Path(checkpoint_path).stem + "_loss.csv")
        out.loss_csv_path = atomic_write_text(csv_path, ReportExporter().losses_to_csv(ckpt.losses))
        log.info("%s checkpoint written to %s", stage, out.checkpoint_path)
    return out


def run_all_stages(
    config: RunConfig, pairs: Sequence[MoleculePair], ablation: str = "full", progress: bool = False
) -> Checkpoint:
    """Chain the stages an ablation mode needs and return the final diffusion checkpoint."""
    if ablation == "full":
        align = run_stage("pretrain-align", config, pairs, progress=progress).checkpoint
        vae = run_stage("train-vae", config, pairs, align, progress=progress).checkpoint
        return run_stage("train-diffusion", config, pairs, vae, progress=progress).checkpoint
    if ablation == "no_alignment":
        vae = run_stage("train-vae", config, pairs, ablation="no_alignment", progress=progress).checkpoint
        return run_stage("train-diffusion", config, pairs, vae, progress=progress).checkpoint
    if ablation == "no_two_stage":
        align = run_stage("pretrain-align", config, pairs, progress=progress).checkpoint
        return run_stage("train-joint", config, pairs, align, ablation="no_two_stage", progress=progress).checkpoint
    if ablation == "neither":
        return run_stage("train-joint", config, pairs, ablation="neither", progress=progress).checkpoint
    raise ConfigError(f"unknown ablation '{ablation}'")


# ------------------------
# Generation
# ------------------------
@dataclass
class GeneratedMolecule:
    prompt: str
    smiles: Optional[str]
    valid: bool
    seconds: float
    prompt_id: Optional[int] = None
    reference: Optional[str] = None

    def to_row(self) -> Dict[str, object]:
        return {
            "prompt_id": "" if self.prompt_id is None else self.prompt_id,
            "prompt": self.prompt,
            "reference": self.reference or "",
            "smiles": self.smiles or "",
            "valid": str(self.valid).lower(),
            "seconds": f"{self.seconds:.6f}",
        }


def allocate_budget(budget: int, n_prompts: int) -> List[int]:
    """Spread a total sample budget evenly; the first budget % n_prompts prompts get one extra."""
    if n_prompts < 1 or budget < 0:
        raise ConfigError("budget allocation needs at least one prompt and a non-negative budget")
    base, extra = divmod(budget, n_prompts)
    return [base + (1 if i < extra else 0) for i in range(n_prompts)]


class Generator:
    """Samples molecules from a diffusion checkpoint; chains fan out over worker threads in fixed-size chunks."""

    def __init__(self, checkpoint: Checkpoint, concurrency: Optional[int] = None):
        if checkpoint.stage != "diffusion":
            raise StageOrderError("Second Stage", "generation requires a Second Stage (train-diffusion) checkpoint")
        self.ckpt = checkpoint
        self.config = checkpoint.config
        self.schedule = make_schedule(self.config.schedule, self.config.T_train)
        self.max_workers = concurrency or Config.GEN_CONCURRENCY

    def encode_prompt(self, prompt: str) -> np.ndarray:
        if not prompt or not prompt.strip():
            raise DatasetError("empty prompt")
        with nc.no_recording():
            return encode_text(tokenize(prompt, self.ckpt.vocab), self.ckpt.params["text"]).data

    def _run_chunk(self, c: Optional[np.ndarray], size: int, w: float, ladder: List[int], seed: int) -> np.ndarray:
        rng = np.random.default_rng(seed)
        predict = guided_predictor(self.ckpt.params["den"], c, w)
        return sample_latent(predict, self.config.latent_dim, self.schedule, ladder, rng, size)

    def sample_latents(self, c: Optional[np.ndarray], n: int, w: float, ladder: List[int], seed: int) -> np.ndarray:
        sizes = chunk_sizes(n, self.config.chain_chunk)
        if not sizes:
            return np.zeros((0, self.config.latent_dim))
        results: Dict[int, np.ndarray] = {}
        with ThreadPoolExecutor(max_workers=self.max_workers) as pool:
            futures = {
                pool.submit(self._run_chunk, c, size, w, ladder, derive_seed(seed, "chunk", k)): k
                for k, size in enumerate(sizes)
            }
            for fut in as_completed(futures):
                k = futures[fut]
                try:
                    results[k] = fut.result()
                except Exception as e:
                    raise MolDiffError(f"sampling chunk {k} failed: {e}") from e
        return np.concatenate([results[k] for k in range(len(sizes))], axis=0)

    def _decode(self, Z: np.ndarray) -> List[Tuple[Optional[str], bool]]:
        out = []
        for g in decode_many(Z, self.ckpt.params["dec"], self.config.repair):
            if g is None:
                out.append((None, False))
            else:
                out.append((write_canonical_smiles(g), check_valence(g)))
        return out

    def generate(
        self,
        prompt: str,
        n: Optional[int] = None,
        w: Optional[float] = None,
        seed: Optional[int] = None,
        oversample: Optional[int] = None,
        reference: Optional[str] = None,
        prompt_id: Optional[int] = None,
    ) -> List[GeneratedMolecule]:
        """n guided samples for one prompt; with a reference and oversample m, draw m*n and keep the n closest."""
        n = self.config.samples_per_prompt if n is None else n
        w = self.config.w if w is None else w
        seed = self.config.seed if seed is None else seed
        factor = (oversample or self.config.oversample) if reference else 1
        c = self.encode_prompt(prompt)
        started = time.perf_counter()
        Z = self.sample_latents(c, n * factor, w, respaced_ladder(self.config.T_train, self.config.T_sample),
                                derive_seed(seed, "generate", prompt))
        decoded = self._decode(Z)
        if factor > 1:
            kept = select_top_k([s or "" for s, _ in decoded], reference, n)
            lookup = {}
            for s, ok in decoded:
                lookup.setdefault(s or "", ok)
            decoded = [(s or None, lookup[s]) for s in kept]
        per_mol = (time.perf_counter() - started) / max(1, n * factor)
        log.info("generated %d molecules (w=%.2f, %d drawn) in %.3fs each", len(decoded), w, n * factor, per_mol)
        return [GeneratedMolecule(prompt, s, ok, per_mol, prompt_id, reference) for s, ok in decoded]

    def generate_for_pairs(
        self,
        pairs: Sequence[MoleculePair],
        n: Optional[int] = None,
        budget: Optional[int] = None,
        w: Optional[float] = None,
        seed: Optional[int] = None,
        oversample: Optional[int] = None,
    ) -> List[List[GeneratedMolecule]]:
        """Per-prompt generation over a dataset: n per prompt, or a total budget spread evenly."""
        counts = allocate_budget(budget, len(pairs)) if budget is not None else \
            [self.config.samples_per_prompt if n is None else n] * len(pairs)
        seed = self.config.seed if seed is None else seed
        return [
            self.generate(p.description, k, w, derive_seed(seed, "prompt", i), oversample, p.smiles, prompt_id=i)
            for i, (p, k) in enumerate(zip(pairs, counts))
        ]

    def sample_uncond(self, n: int, mode: Optional[str] = None, seed: Optional[int] = None) -> List[GeneratedMolecule]:
        """Unconditional samples from the null-condition diffusion path or straight from the N(0, I) prior."""
        mode = mode or self.config.uncond_mode
        seed = self.config.seed if seed is None else seed
        started = time.perf_counter()
        if mode == "prior":
            Z = rng_for(seed, "prior").standard_normal((n, self.config.latent_dim))
        elif mode == "diffusion":
            ladder = respaced_ladder(self.config.T_train, self.config.T_sample_uncond)
            Z = self.sample_latents(None, n, 1.0, ladder, derive_seed(seed, "uncond"))
        else:
            raise ConfigError(f"unknown unconditional mode '{mode}' (expected diffusion or prior)")
        decoded = self._decode(Z)
        per_mol = (time.perf_counter() - started) / max(1, n)
        log.info("sampled %d unconditional molecules (mode=%s) in %.3fs each", n, mode, per_mol)
        return [GeneratedMolecule("", s, ok, per_mol) for s, ok in decoded]


# ------------------------
# Evaluation
# ------------------------
def generations_csv(generations: Sequence[GeneratedMolecule]) -> str:
    return ReportExporter().rows_to_csv([g.to_row() for g in generations], GENERATION_COLUMNS)


def read_generations(path: PathLike) -> List[Dict[str, str]]:
    path = Path(path)
    if not path.exists():
        raise EvaluationError(f"generations file not found: {path}")
    reader = csv.DictReader(io.StringIO(path.read_text(encoding="utf-8")))
    if reader.fieldnames is None or "smiles" not in reader.fieldnames:
        raise EvaluationError(f"{path} is not a generations CSV (no 'smiles' column)")
    return list(reader)


def evaluate(
    mode: str,
    generations_path: PathLike,
    reference_path: PathLike,
    config: RunConfig,
) -> Union[CondEvalReport, UncondEvalReport]:
    """
    cond: generations carry prompt ids into the reference TSV (same ingestion order);
    uncond: the reference TSV is the training set.
    """
    rows = read_generations(generations_path)
    if not rows:
        raise EvaluationError("generations file has no rows")
    refs, _ = load_dataset(reference_path)
    with_ids = [r for r in rows if (r.get("prompt_id") or "").strip()]

    if mode == "cond":
        if len(with_ids) != len(rows):
            raise EvaluationError("mode/file mismatch: cond evaluation needs a prompt_id on every generation")
        grouped: Dict[int, List[str]] = {}
        for r in rows:
            pid = int(r["prompt_id"])
            if not 0 <= pid < len(refs) or refs[pid].description != r.get("prompt", refs[pid].description):
                raise EvaluationError(f"mode/file mismatch: prompt_id {pid} does not match the reference file")
            grouped.setdefault(pid, []).append(r["smiles"])
        ids = sorted(grouped)
        return conditional_metrics([grouped[i] for i in ids], [refs[i].smiles for i in ids], config.metrics())
    if mode == "uncond":
        if with_ids:
            raise EvaluationError("mode/file mismatch: uncond evaluation got prompt-conditioned generations")
        return unconditional_metrics([r["smiles"] for r in rows], [p.smiles for p in refs])
    raise EvaluationError(f"unknown evaluation mode '{mode}' (expected cond or uncond)")


# ------------------------
# Ablations and conditioning check
# ------------------------
@dataclass
class AblationRow:
    mode: str
    similarity: float
    novelty: Optional[float]
    diversity: Optional[float]
    validity: float
    final_loss: Optional[float]


def run_ablation(
    config: RunConfig,
    train_pairs: Sequence[MoleculePair],
    eval_pairs: Sequence[MoleculePair],
    modes: Sequence[str] = ABLATIONS,
    progress: bool = False,
) -> List[AblationRow]:
    """Train each configuration end-to-end and score conditional generation on eval_pairs."""
    if not eval_pairs:
        raise DatasetError("ablation needs evaluation pairs")
    rows: List[AblationRow] = []
    for mode in modes:
        log.info("ablation: %s", mode)
        ckpt = run_all_stages(config, train_pairs, mode, progress)
        gens = Generator(ckpt).generate_for_pairs(eval_pairs)
        report = conditional_metrics(
            [[g.smiles or "" for g in per_prompt] for per_prompt in gens],
            [p.smiles for p in eval_pairs],
            config.metrics(),
        )
        curve = ckpt.losses.get("diffusion") or ckpt.losses.get("joint") or []
        rows.append(AblationRow(mode, report.similarity, report.novelty, report.diversity, report.validity,
                                curve[-1] if curve else None))
    return rows


@dataclass
class ConditioningReport:
    n: int
    w: float
    ring_rate_cond: float
    ring_rate_uncond: float
    no_ring_rate_cond: float
    no_ring_rate_uncond: float
    ring_p_value: float
    no_ring_p_value: float
    min_margin: float = 0.15
    alpha: float = 0.01

    @property
    def passes(self) -> bool:
        ring = self.ring_rate_cond - self.ring_rate_uncond >= self.min_margin and self.ring_p_value < self.alpha
        no_ring = (self.no_ring_rate_cond - self.no_ring_rate_uncond >= self.min_margin
                   and self.no_ring_p_value < self.alpha)
        return ring and no_ring

    def to_dict(self) -> dict:
        return {**asdict(self), "passes": self.passes}


def _ring_state(g: GeneratedMolecule) -> Optional[bool]:
    """True / False for a valid molecule with / without a ring; None when invalid."""
    if not g.valid or not g.smiles:
        return None
    try:
        return ring_count(parse_smiles(g.smiles)) > 0
    except SmilesError:
        return None


def conditioning_check(
    ckpt: Checkpoint, n: int = 200, w: Optional[float] = None, seed: Optional[int] = None
) -> ConditioningReport:
    """
    Rate of the prompted property (ring / no ring) under guided sampling vs the
    unconditional rate, with a one-sided binomial test against the unconditional rate.
    """
    if n < 1:
        raise ConfigError("conditioning check needs n >= 1")
    gen = Generator(ckpt)
    w = ckpt.config.w if w is None else w
    seed = ckpt.config.seed if seed is None else seed
    uncond = gen.sample_uncond(n, mode="diffusion", seed=derive_seed(seed, "check-uncond"))
    ring = gen.generate(RING_PROMPT, n, w, derive_seed(seed, "check-ring"))
    no_ring = gen.generate(NO_RING_PROMPT, n, w, derive_seed(seed, "check-no-ring"))

    states = [_ring_state(g) for g in uncond]
    base_ring = states.count(True) / n
    base_no_ring = states.count(False) / n
    k_ring = [_ring_state(g) for g in ring].count(True)
    k_no_ring = [_ring_state(g) for g in no_ring].count(False)
    p_ring = stats.binomtest(k_ring, n, base_ring, alternative="greater").pvalue
    p_no_ring = stats.binomtest(k_no_ring, n, base_no_ring, alternative="greater").pvalue
    report = ConditioningReport(
        n=n, w=w,
        ring_rate_cond=k_ring / n, ring_rate_uncond=base_ring,
        no_ring_rate_cond=k_no_ring / n, no_ring_rate_uncond=base_no_ring,
        ring_p_value=float(p_ring), no_ring_p_value=float(p_no_ring),
    )
    log.info("conditioning check: %s", report.to_dict())
    return report

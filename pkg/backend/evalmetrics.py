"""
Evaluation suite: conditional metrics (similarity, novelty, diversity, validity)
and unconditional metrics (uniqueness, novelty, KL score, Fréchet proxy).
All identity logic runs on canonical SMILES.
"""

import itertools
import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple

import numpy as np
from scipy import linalg

from .chem import MolGraph, check_valence, parse_smiles, write_canonical_smiles
from .errors import ConfigError, EvaluationError, SmilesError
from .fingerprints import cosine_bits, descriptors, fingerprint_of_smiles, path_fingerprint

log = logging.getLogger(__name__)

KL_BINS = 20
KL_SMOOTHING = 1e-6
FRECHET_RIDGE = 1e-6
FRECHET_SCALE = 8.0


@dataclass
class MetricConfig:
    qualified_threshold: float = 0.5
    novelty_threshold: float = 0.8
    samples_per_prompt: int = 5
    diversity_pooling: str = "per_prompt"

    def __post_init__(self):
        for name in ("qualified_threshold", "novelty_threshold"):
            value = getattr(self, name)
            if not 0.0 < value < 1.0:
                raise ConfigError(f"{name} must lie in (0, 1), got {value}")
        if self.diversity_pooling not in ("per_prompt", "global"):
            raise ConfigError(f"diversity_pooling must be per_prompt or global, got '{self.diversity_pooling}'")


@dataclass
class PromptRow:
    prompt: int
    reference: str
    generated: int
    valid: int
    qualified: int
    novel: int
    diversity: Optional[float]


@dataclass
class CondEvalReport:
    similarity: float
    novelty: Optional[float]
    diversity: Optional[float]
    validity: float
    total: int
    valid: int
    invalid: int
    qualified: int
    unqualified: int
    novel: int
    rows: List[PromptRow] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        data = asdict(self)
        data.pop("rows")
        return data


@dataclass
class UncondEvalReport:
    uniqueness: float
    novelty: float
    kl_div_score: float
    frechet_score: float
    validity: float
    total: int
    valid: int

    def to_dict(self) -> dict:
        return asdict(self)


def realize_valid(smiles: str) -> Optional[MolGraph]:
    """Parsed graph when the string is a chemically valid molecule, else None."""
    try:
        g = parse_smiles(smiles)
    except SmilesError:
        return None
    return g if check_valence(g) else None


def canonical_or_none(smiles: str) -> Optional[str]:
    g = realize_valid(smiles)
    return None if g is None else write_canonical_smiles(g)


def validity(generations: Sequence[str]) -> float:
    if not generations:
        raise EvaluationError("validity: no generations")
    valid = sum(1 for s in generations if realize_valid(s) is not None)
    return 100.0 * valid / len(generations)


def _pairwise_distance(smiles: Sequence[str]) -> float:
    fps = [fingerprint_of_smiles(s) for s in smiles]
    dists = [1.0 - cosine_bits(a, b) for a, b in itertools.combinations(fps, 2)]
    return float(np.mean(dists))


def conditional_metrics(
    generations: Sequence[Sequence[str]],
    references: Sequence[str],
    cfg: Optional[MetricConfig] = None,
) -> CondEvalReport:
    """
    Validity over all generations; qualified = valid and f(ref, gen) > threshold;
    Similarity = qualified / total; Novelty = qualified with f < novelty threshold
    over qualified; Diversity = mean pairwise 1 - f among qualified molecules.
    """
    cfg = cfg or MetricConfig()
    if len(generations) != len(references) or not references:
        raise EvaluationError(f"{len(generations)} generation lists for {len(references)} references")

    total = valid = qualified = novel = 0
    rows: List[PromptRow] = []
    qualified_sets: List[List[str]] = []
    for p, (cands, ref) in enumerate(zip(generations, references)):
        ref_graph = realize_valid(ref)
        if ref_graph is None:
            raise EvaluationError(f"reference {p} ('{ref}') is not a valid molecule")
        ref_fp = path_fingerprint(ref_graph)
        row_valid = row_qualified = row_novel = 0
        kept: List[str] = []
        for smiles in cands:
            g = realize_valid(smiles)
            if g is None:
                continue
            row_valid += 1
            sim = cosine_bits(ref_fp, path_fingerprint(g))
            if sim > cfg.qualified_threshold:
                row_qualified += 1
                kept.append(write_canonical_smiles(g))
                if sim < cfg.novelty_threshold:
                    row_novel += 1
        total += len(cands)
        valid += row_valid
        qualified += row_qualified
        novel += row_novel
        qualified_sets.append(kept)
        rows.append(PromptRow(
            prompt=p, reference=ref, generated=len(cands), valid=row_valid, qualified=row_qualified,
            novel=row_novel, diversity=100.0 * _pairwise_distance(kept) if len(kept) >= 2 else None,
        ))

    if total == 0:
        raise EvaluationError("conditional_metrics: no generations")

    diversity: Optional[float] = None
    if qualified:
        if cfg.diversity_pooling == "global":
            pooled = [s for kept in qualified_sets for s in kept]
            diversity = 100.0 * _pairwise_distance(pooled) if len(pooled) >= 2 else None
        else:
            per_prompt = [r.diversity for r in rows if r.diversity is not None]
            diversity = float(np.mean(per_prompt)) if per_prompt else None

    return CondEvalReport(
        similarity=100.0 * qualified / total,
        novelty=100.0 * novel / qualified if qualified else None,
        diversity=diversity,
        validity=100.0 * valid / total,
        total=total,
        valid=valid,
        invalid=total - valid,
        qualified=qualified,
        unqualified=valid - qualified,
        novel=novel,
        rows=rows,
    )


def select_top_k(candidates: Sequence[str], reference: str, k: int) -> List[str]:
    """Keep the k candidates most similar to the reference; invalid ones only fill leftover slots."""
    ref = fingerprint_of_smiles(reference)
    scored: List[Tuple[float, int, str]] = []
    invalid: List[str] = []
    for i, smiles in enumerate(candidates):
        if realize_valid(smiles) is None:
            invalid.append(smiles)
            continue
        scored.append((-cosine_bits(ref, fingerprint_of_smiles(smiles)), i, smiles))
    ranked = [s for _, _, s in sorted(scored)] + invalid
    return ranked[:k]


# ------------------------
# Unconditional metrics
# ------------------------
def _canonical_set(smiles: Iterable[str]) -> Set[str]:
    return {c for c in (canonical_or_none(s) for s in smiles) if c is not None}


def uniqueness(generations: Sequence[str]) -> float:
    if not generations:
        raise EvaluationError("uniqueness: no generations")
    canon = [c for c in (canonical_or_none(s) for s in generations) if c is not None]
    return 100.0 * len(set(canon)) / len(canon) if canon else 0.0


def uncond_novelty(generations: Sequence[str], training: Iterable[str]) -> float:
    known = _canonical_set(training)
    canon = [c for c in (canonical_or_none(s) for s in generations) if c is not None]
    if not canon:
        return 0.0
    return 100.0 * sum(1 for c in canon if c not in known) / len(canon)


def histogram_kl(p: np.ndarray, q: np.ndarray) -> float:
    """sum p ln(p/q) over bins with p > 0."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    nz = p > 0
    return float(np.sum(p[nz] * np.log(p[nz] / q[nz])))


def descriptor_kl(train: np.ndarray, generated: np.ndarray, bins: int = KL_BINS) -> np.ndarray:
    """KL(train || generated) per descriptor column, histograms over the pooled range."""
    out = np.zeros(train.shape[1])
    for d in range(train.shape[1]):
        pooled = np.concatenate([train[:, d], generated[:, d]])
        lo, hi = float(pooled.min()), float(pooled.max())
        if hi == lo:
            continue
        edges = np.linspace(lo, hi, bins + 1)
        p = np.histogram(train[:, d], bins=edges)[0] + KL_SMOOTHING
        q = np.histogram(generated[:, d], bins=edges)[0] + KL_SMOOTHING
        out[d] = histogram_kl(p / p.sum(), q / q.sum())
    return out


def _descriptor_matrix(smiles: Iterable[str]) -> np.ndarray:
    rows = [descriptors(g) for g in (realize_valid(s) for s in smiles) if g is not None]
    return np.array(rows)


def kl_div_score(generations: Sequence[str], training: Sequence[str]) -> float:
    """Mean over descriptor dimensions of exp(-KL(train || generated)), in (0, 1]."""
    gen, train = _descriptor_matrix(generations), _descriptor_matrix(training)
    if len(gen) == 0 or len(train) == 0:
        raise EvaluationError("kl_div_score needs at least one valid molecule per set")
    return float(np.mean(np.exp(-descriptor_kl(train, gen))))


def frechet_distance(m1: np.ndarray, c1: np.ndarray, m2: np.ndarray, c2: np.ndarray) -> float:
    covmean = linalg.sqrtm(c1 @ c2)
    if np.iscomplexobj(covmean):
        covmean = covmean.real
    diff = m1 - m2
    return float(diff @ diff + np.trace(c1 + c2 - 2.0 * covmean))


def _gaussian_fit(rows: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    cov = np.cov(rows, rowvar=False) + FRECHET_RIDGE * np.eye(rows.shape[1])
    return rows.mean(axis=0), cov


def frechet_descriptor_score(generations: Sequence[str], training: Sequence[str]) -> float:
    """exp(-d^2 / 8) for the Fréchet distance between descriptor Gaussians; 8 is a fixed normalization."""
    gen, train = _descriptor_matrix(generations), _descriptor_matrix(training)
    if len(gen) < 2 or len(train) < 2:
        raise EvaluationError("frechet_descriptor_score needs at least two valid molecules per set")
    d2 = frechet_distance(*_gaussian_fit(gen), *_gaussian_fit(train))
    return float(np.exp(-max(d2, 0.0) / FRECHET_SCALE))


def unconditional_metrics(generations: Sequence[str], training: Sequence[str]) -> UncondEvalReport:
    if not generations:
        raise EvaluationError("unconditional_metrics: no generations")
    valid = sum(1 for s in generations if realize_valid(s) is not None)
    report = UncondEvalReport(
        uniqueness=uniqueness(generations),
        novelty=uncond_novelty(generations, training),
        kl_div_score=kl_div_score(generations, training),
        frechet_score=frechet_descriptor_score(generations, training),
        validity=100.0 * valid / len(generations),
        total=len(generations),
        valid=valid,
    )
    log.info("uncond eval: %s", report.to_dict())
    return report


def report_rows(report: CondEvalReport) -> List[Dict[str, object]]:
    return [asdict(r) for r in report.rows]

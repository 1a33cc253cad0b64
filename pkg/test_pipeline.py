import json

import numpy as np
import pytest

from backend.captions import NO_RING_PROMPT, RING_PROMPT, caption_for, synthetic_corpus
from backend.chem import check_valence, parse_smiles
from backend.encoders import build_vocab
from backend.errors import CheckpointError, DatasetError, EvaluationError, StageOrderError
from backend.fingerprints import ring_count
from backend.numcore import ParamBundle, Tensor
from backend.pipeline import (
    FORMAT_VERSION,
    Checkpoint,
    ConditioningReport,
    GeneratedMolecule,
    Generator,
    allocate_budget,
    checkpoint_roundtrip,
    conditioning_check,
    evaluate,
    generations_csv,
    load_checkpoint,
    load_dataset,
    run_all_stages,
    run_stage,
    save_checkpoint,
    split_dataset,
    write_dataset,
)
from backend.runconfig import RunConfig
from backend.utils import chunk_sizes, derive_seed
from config import Config

TINY = dict(
    latent_dim=4, denoiser_layers=2, T_train=10, T_sample=5, T_sample_uncond=2,
    epochs_align=2, epochs_vae=2, epochs_diffusion=2, batch_size=8,
    gin_layers=1, gin_hidden=8, text_dim=8, text_max_len=16,
    decoder_hidden=16, decoder_node_dim=4, denoiser_hidden=16, time_embed_dim=4,
    chain_chunk=3, samples_per_prompt=2,
)


def write_tsv(path, rows, header="smiles\tdescription"):
    path.write_text(header + "\n" + "".join(r + "\n" for r in rows), encoding="utf-8")
    return path


# ------------------------
# Ingestion
# ------------------------
def test_ingestion_drops_each_reason(tmp_path):
    path = write_tsv(tmp_path / "data.tsv", [
        "CCO\tethanol",
        "c1ccccc1\tbenzene",
        "C(\tbroken",
        "[Na]\tsodium",
        "C" * 31 + "\ttoo long",
        "CC.O\tmixture",
        "c1cccc1\tbad ring",
        "only one column",
        "CCN\t",
        "",
    ])
    pairs, report = load_dataset(path)
    assert [p.smiles for p in pairs] == ["CCO", "c1ccccc1"]
    assert report.total == 9 and report.kept == 2
    assert report.dropped == {
        "format": 2, "parse": 1, "vocabulary": 1, "atom_count": 1, "disconnected": 1, "valence": 1,
    }
    assert report.reconciles()


def test_ingestion_canonicalizes(tmp_path):
    pairs, _ = load_dataset(write_tsv(tmp_path / "d.tsv", ["OCC\tethanol"]))
    assert pairs[0].smiles == "CCO"


def test_missing_file(tmp_path):
    with pytest.raises(DatasetError):
        load_dataset(tmp_path / "nope.tsv")


def test_empty_file(tmp_path):
    path = tmp_path / "empty.tsv"
    path.write_text("\n\n", encoding="utf-8")
    with pytest.raises(DatasetError):
        load_dataset(path)


def test_bad_header(tmp_path):
    with pytest.raises(DatasetError, match="header"):
        load_dataset(write_tsv(tmp_path / "d.tsv", ["CCO\tethanol"], header="molecule\ttext"))


def test_write_then_load(tmp_path):
    path = write_dataset(tmp_path / "out" / "d.tsv", [("CCO", "two\twords\nhere"), ("CCN", "amine")])
    pairs, report = load_dataset(path)
    assert [p.description for p in pairs] == ["two words here", "amine"]
    assert report.kept == 2


def test_split_is_disjoint_and_reproducible(tmp_path):
    rows = synthetic_corpus(20, seed=1)
    pairs, _ = load_dataset(write_dataset(tmp_path / "d.tsv", rows))
    a = split_dataset(pairs, 0.2, 0.2, seed=3)
    b = split_dataset(pairs, 0.2, 0.2, seed=3)
    assert [p.smiles for p in a.train] == [p.smiles for p in b.train]
    assert len(a.train) + len(a.val) + len(a.test) == len(pairs)
    assert not {p.smiles for p in a.train} & {p.smiles for p in a.test}


def test_split_needs_training_rows(tmp_path):
    pairs, _ = load_dataset(write_tsv(tmp_path / "d.tsv", ["CCO\tethanol", "CCN\tamine"]))
    with pytest.raises(DatasetError):
        split_dataset(pairs, 0.5, 0.5)


# ------------------------
# Synthetic corpus
# ------------------------
def test_synthetic_corpus_is_valid_and_distinct():
    rows = synthetic_corpus(30, seed=0)
    assert len(rows) == 30
    assert len({s for s, _ in rows}) == 30
    for smiles, caption in rows:
        g = parse_smiles(smiles)
        assert check_valence(g) and g.is_connected()
        assert ("contains a ring" in caption) == (ring_count(g) > 0)


def test_synthetic_corpus_is_seeded():
    assert synthetic_corpus(10, seed=4) == synthetic_corpus(10, seed=4)


def test_ring_prompts_match_captions():
    assert caption_for(parse_smiles("c1ccccc1")).startswith(RING_PROMPT[:-1])
    assert caption_for(parse_smiles("CCC")).startswith(NO_RING_PROMPT[:-1])


# ------------------------
# Checkpoints
# ------------------------
def small_checkpoint(stage="align"):
    rng = np.random.default_rng(0)
    return Checkpoint(
        stage=stage,
        config=RunConfig(seed=7),
        params={"gin": ParamBundle({"w": Tensor(rng.normal(size=(2, 3))), "b": Tensor(rng.normal(size=3))})},
        vocab=build_vocab(["a ring", "no ring"]),
        seeds={"align": derive_seed(7, "align")},
        losses={"align": [1.25, 0.5]},
    )


def test_checkpoint_roundtrip_is_bit_exact(tmp_path):
    ckpt = small_checkpoint()
    loaded = checkpoint_roundtrip(ckpt, tmp_path / "c.json")
    assert loaded.same_params(ckpt)
    assert loaded.config == ckpt.config
    assert loaded.vocab.token_to_id == ckpt.vocab.token_to_id
    assert loaded.losses == ckpt.losses and loaded.seeds == ckpt.seeds


def test_checkpoint_json_is_stable(tmp_path):
    ckpt = small_checkpoint()
    assert ckpt.to_json() == Checkpoint.from_json(ckpt.to_json()).to_json()


def test_corrupt_checkpoint_reports_position(tmp_path):
    path = save_checkpoint(small_checkpoint(), tmp_path / "c.json")
    path.write_text(path.read_text(encoding="utf-8")[:-20], encoding="utf-8")
    with pytest.raises(CheckpointError, match="line"):
        load_checkpoint(path)


def test_checkpoint_version_mismatch(tmp_path):
    doc = json.loads(small_checkpoint().to_json())
    doc["format_version"] = FORMAT_VERSION + 1
    path = tmp_path / "c.json"
    path.write_text(json.dumps(doc), encoding="utf-8")
    with pytest.raises(CheckpointError, match="format_version"):
        load_checkpoint(path)


def test_missing_checkpoint(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "none.json")


# ------------------------
# Stage ordering
# ------------------------
@pytest.fixture
def tiny_pairs(tmp_path):
    pairs, _ = load_dataset(write_dataset(tmp_path / "train.tsv", synthetic_corpus(16, seed=0)))
    return pairs


def test_diffusion_needs_first_stage(tiny_pairs):
    with pytest.raises(StageOrderError) as info:
        run_stage("train-diffusion", RunConfig(**TINY), tiny_pairs)
    assert info.value.missing_stage == "First Stage"


def test_vae_needs_pretraining_stage(tiny_pairs):
    with pytest.raises(StageOrderError) as info:
        run_stage("train-vae", RunConfig(**TINY), tiny_pairs)
    assert info.value.missing_stage == "Pretraining Stage"


def test_generation_needs_second_stage():
    with pytest.raises(StageOrderError):
        Generator(small_checkpoint(stage="vae"))


def test_generator_concurrency_defaults_to_config(monkeypatch):
    monkeypatch.setattr(Config, "GEN_CONCURRENCY", 5)
    assert Generator(small_checkpoint(stage="diffusion")).max_workers == 5
    assert Generator(small_checkpoint(stage="diffusion"), concurrency=1).max_workers == 1


def test_budget_allocation():
    assert allocate_budget(10, 3) == [4, 3, 3]
    assert sum(allocate_budget(7, 7)) == 7


def test_chunking_covers_total():
    assert chunk_sizes(7, 3) == [3, 3, 1]
    assert chunk_sizes(0, 3) == []


# ------------------------
# Evaluation files
# ------------------------
def test_conditional_evaluation_from_files(tmp_path):
    ref = write_tsv(tmp_path / "ref.tsv", ["CCO\tethanol", "CCN\tethylamine"])
    gens = [
        GeneratedMolecule("ethanol", "OCC", True, 0.1, prompt_id=0, reference="CCO"),
        GeneratedMolecule("ethanol", "C(", False, 0.1, prompt_id=0, reference="CCO"),
        GeneratedMolecule("ethylamine", "NCC", True, 0.1, prompt_id=1, reference="CCN"),
    ]
    (tmp_path / "gen.csv").write_text(generations_csv(gens), encoding="utf-8")
    report = evaluate("cond", tmp_path / "gen.csv", ref, RunConfig())
    assert report.total == 3 and report.valid == 2 and report.qualified == 2


def test_cond_evaluation_rejects_unconditional_file(tmp_path):
    ref = write_tsv(tmp_path / "ref.tsv", ["CCO\tethanol"])
    (tmp_path / "gen.csv").write_text(generations_csv([GeneratedMolecule("", "CCO", True, 0.1)]), encoding="utf-8")
    with pytest.raises(EvaluationError, match="mismatch"):
        evaluate("cond", tmp_path / "gen.csv", ref, RunConfig())


def test_uncond_evaluation_rejects_conditional_file(tmp_path):
    ref = write_tsv(tmp_path / "ref.tsv", ["CCO\tethanol"])
    gens = [GeneratedMolecule("ethanol", "CCO", True, 0.1, prompt_id=0, reference="CCO")]
    (tmp_path / "gen.csv").write_text(generations_csv(gens), encoding="utf-8")
    with pytest.raises(EvaluationError, match="mismatch"):
        evaluate("uncond", tmp_path / "gen.csv", ref, RunConfig())


def test_unconditional_evaluation_from_files(tmp_path):
    ref = write_tsv(tmp_path / "train.tsv", ["CCO\ta", "CCN\tb", "CC(=O)O\tc", "c1ccccc1\td", "C1CCCCC1\te"])
    gens = [GeneratedMolecule("", s, True, 0.1) for s in ("CCO", "CCCC", "c1ccccc1O")]
    (tmp_path / "gen.csv").write_text(generations_csv(gens), encoding="utf-8")
    report = evaluate("uncond", tmp_path / "gen.csv", ref, RunConfig())
    assert report.total == 3 and report.novelty == pytest.approx(100.0 * 2 / 3)


# ------------------------
# End to end
# ------------------------
@pytest.mark.slow
def test_full_pipeline_generates_reproducibly(tiny_pairs, tmp_path):
    cfg = RunConfig(**TINY)
    align = run_stage("pretrain-align", cfg, tiny_pairs, checkpoint_path=tmp_path / "align.json")
    assert align.loss_csv_path.exists()
    vae = run_stage("train-vae", cfg, tiny_pairs, prior=load_checkpoint(align.checkpoint_path))
    diff = run_stage("train-diffusion", cfg, tiny_pairs, prior=vae.checkpoint)
    ckpt = diff.checkpoint
    assert ckpt.stage == "diffusion"
    assert ckpt.params["gin"].same_values(vae.checkpoint.params["gin"])
    assert set(ckpt.losses) >= {"align", "vae", "diffusion"}

    one = Generator(ckpt, concurrency=1).generate(RING_PROMPT, n=5, seed=11)
    many = Generator(ckpt, concurrency=3).generate(RING_PROMPT, n=5, seed=11)
    assert len(one) == 5
    assert [m.smiles for m in one] == [m.smiles for m in many]
    for m in one:
        assert m.smiles is not None or not m.valid

    prior_samples = Generator(ckpt).sample_uncond(4, mode="prior", seed=2)
    assert len(prior_samples) == 4

    reloaded = checkpoint_roundtrip(ckpt, tmp_path / "diffusion.json")
    again = Generator(reloaded, concurrency=2).generate(RING_PROMPT, n=5, seed=11)
    assert [m.smiles for m in again] == [m.smiles for m in one]

    with pytest.raises(DatasetError):
        Generator(ckpt).generate("   ")


@pytest.mark.slow
@pytest.mark.parametrize("ablation", ["no_alignment", "no_two_stage", "neither"])
def test_ablation_modes_produce_diffusion_checkpoints(tiny_pairs, ablation):
    ckpt = run_all_stages(RunConfig(**TINY), tiny_pairs, ablation)
    assert ckpt.stage == "diffusion"
    assert set(ckpt.params) == {"gin", "text", "dec", "den"}


def test_conditioning_report_needs_margin_and_significance():
    good = ConditioningReport(n=200, w=2.0, ring_rate_cond=0.9, ring_rate_uncond=0.5,
                              no_ring_rate_cond=0.8, no_ring_rate_uncond=0.5,
                              ring_p_value=1e-6, no_ring_p_value=1e-4)
    assert good.passes and good.to_dict()["passes"] is True
    weak = ConditioningReport(n=200, w=2.0, ring_rate_cond=0.6, ring_rate_uncond=0.5,
                              no_ring_rate_cond=0.8, no_ring_rate_uncond=0.5,
                              ring_p_value=1e-3, no_ring_p_value=1e-4)
    assert not weak.passes


@pytest.mark.slow
def test_conditioning_check_report(tiny_pairs):
    ckpt = run_all_stages(RunConfig(**TINY), tiny_pairs)
    report = conditioning_check(ckpt, n=6, seed=1)
    assert report.n == 6
    for rate in (report.ring_rate_cond, report.ring_rate_uncond, report.no_ring_rate_cond, report.no_ring_rate_uncond):
        assert 0.0 <= rate <= 1.0
    assert report.ring_rate_uncond + report.no_ring_rate_uncond <= 1.0
    assert 0.0 <= report.ring_p_value <= 1.0


@pytest.mark.slow
def test_repaired_generations_are_always_valid(tiny_pairs):
    ckpt = run_all_stages(RunConfig(**TINY, repair=True), tiny_pairs)
    gen = Generator(ckpt, concurrency=2)
    cond = gen.generate(RING_PROMPT, n=1000, seed=3)
    uncond = gen.sample_uncond(1000, mode="diffusion", seed=4)
    assert len(cond) == len(uncond) == 1000
    for m in cond + uncond:
        if m.smiles is not None:
            assert m.valid
            assert check_valence(parse_smiles(m.smiles))

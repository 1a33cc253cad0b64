from dotenv import load_dotenv
from pathlib import Path

# Load .env from project root
ROOT = Path(__file__).resolve().parent
load_dotenv(dotenv_path=ROOT / ".env")

import argparse
import json
import logging
import sys
from dataclasses import asdict
from typing import List, Optional

from config import Config
from backend.captions import synthetic_corpus
from backend.errors import MolDiffError
from backend.evalmetrics import CondEvalReport, report_rows
from backend.exports import ReportExporter, report_summary
from backend.pipeline import (
    STAGES,
    evaluate,
    generations_csv,
    load_checkpoint,
    load_dataset,
    run_ablation,
    run_stage,
    split_dataset,
    write_dataset,
    Generator,
    conditioning_check,
)
from backend.runconfig import ABLATIONS, RunConfig
from backend.utils import atomic_write_bytes, atomic_write_text

log = logging.getLogger("moldiff")


def _run_config(args) -> RunConfig:
    path = args.config or Config.MOLDIFF_CONFIG
    cfg = RunConfig.load(path) if path else RunConfig()
    return cfg.with_overrides(seed=args.seed)


def _sibling(out: Optional[str], explicit: Optional[str], suffix: str) -> Optional[Path]:
    if explicit:
        return Path(explicit)
    if not out:
        return None
    derived = Path(out).with_suffix(suffix)
    return derived if derived != Path(out) else derived.with_name(derived.stem + "_rows" + suffix)


def _emit(text: str, out: Optional[str]) -> None:
    if out:
        atomic_write_text(out, text)
        log.info("wrote %s", out)
    else:
        sys.stdout.write(text)


# ------------------------------
# Subcommands
# ------------------------------
def cmd_ingest(args) -> int:
    if args.synthetic:
        cfg = _run_config(args)
        rows = synthetic_corpus(args.synthetic, seed=cfg.seed)
        path = write_dataset(args.data, rows)
        log.info("synthetic corpus: %d pairs written to %s", len(rows), path)
    pairs, report = load_dataset(args.data)
    if args.out:
        write_dataset(args.out, pairs)
    print(json.dumps(report.to_dict(), sort_keys=True))
    return 0


def cmd_stage(args) -> int:
    cfg = _run_config(args)
    pairs, _ = load_dataset(args.data)
    if args.split:
        pairs = split_dataset(pairs, cfg.val_fraction, cfg.test_fraction, cfg.seed).train
    prior = load_checkpoint(args.prior) if args.prior else None
    result = run_stage(args.command, cfg, pairs, prior, args.ablation, args.out, progress=not args.quiet)
    final = {k: v[-1] for k, v in result.losses.items() if v}
    print(json.dumps({"stage": result.checkpoint.stage, "checkpoint": str(result.checkpoint_path),
                      "final_losses": final}, sort_keys=True))
    return 0


def cmd_generate(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    gen = Generator(ckpt, concurrency=args.concurrency or Config.GEN_CONCURRENCY)
    if args.prompts:
        pairs, _ = load_dataset(args.prompts)
        per_prompt = gen.generate_for_pairs(pairs, n=args.n, budget=args.budget, w=args.w,
                                            seed=args.seed, oversample=args.oversample)
        molecules = [m for group in per_prompt for m in group]
    else:
        molecules = gen.generate(args.prompt, args.n, args.w, args.seed, args.oversample, args.reference)
    _emit(generations_csv(molecules), args.out)
    return 0


def cmd_sample_uncond(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    gen = Generator(ckpt, concurrency=args.concurrency or Config.GEN_CONCURRENCY)
    _emit(generations_csv(gen.sample_uncond(args.n, args.mode, args.seed)), args.out)
    return 0


def cmd_evaluate(args) -> int:
    cfg = _run_config(args)
    report = evaluate(args.mode, args.generations, args.reference, cfg)
    exporter = ReportExporter()
    summary = report_summary(report)
    rows = report_rows(report) if isinstance(report, CondEvalReport) else []
    _emit(exporter.to_json(summary), args.out)
    csv_path = _sibling(args.out, args.csv, ".csv")
    if rows and csv_path:
        atomic_write_text(csv_path, exporter.rows_to_csv(rows))
        log.info("wrote %s", csv_path)
    title = f"{args.mode} evaluation"
    if args.docx:
        atomic_write_bytes(args.docx, exporter.to_docx(title, summary, rows))
    if args.pdf:
        atomic_write_bytes(args.pdf, exporter.to_pdf(title, summary, rows))
    return 0


def cmd_ablation(args) -> int:
    cfg = _run_config(args)
    pairs, _ = load_dataset(args.data)
    split = split_dataset(pairs, cfg.val_fraction, cfg.test_fraction, cfg.seed)
    eval_pairs = split.test or split.val
    rows = [asdict(r) for r in run_ablation(cfg, split.train, eval_pairs, args.modes, progress=not args.quiet)]
    exporter = ReportExporter()
    _emit(exporter.rows_to_csv(rows), args.out)
    json_path = _sibling(args.out, args.json, ".json")
    if json_path:
        by_mode = {r["mode"]: {k: v for k, v in r.items() if k != "mode"} for r in rows}
        atomic_write_text(json_path, exporter.to_json({"modes": by_mode}))
        log.info("wrote %s", json_path)
    return 0


def cmd_conditioning_check(args) -> int:
    report = conditioning_check(load_checkpoint(args.checkpoint), n=args.n, w=args.w, seed=args.seed)
    _emit(ReportExporter().to_json(report.to_dict()), args.out)
    return 0 if report.passes else 1


def cmd_show_config(args) -> int:
    _emit(_run_config(args).dumps(), args.out)
    return 0


# ------------------------------
# Parser
# ------------------------------
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="moldiff", description="Text-guided molecule generation in a latent space.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value run config (defaults to $MOLDIFF_CONFIG)")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", help="output file (stdout when omitted)")
    common.add_argument("--quiet", action="store_true", help="no progress bars")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", parents=[common], help="validate a smiles/description TSV")
    p.add_argument("--data", required=True)
    p.add_argument("--synthetic", type=int, default=0, help="first write N synthetic pairs to --data")
    p.set_defaults(func=cmd_ingest)

    for stage in STAGES:
        p = sub.add_parser(stage, parents=[common], help=f"run the {stage} stage")
        p.add_argument("--data", required=True)
        p.add_argument("--prior", help="checkpoint of the preceding stage")
        p.add_argument("--ablation", choices=ABLATIONS, default="full")
        p.add_argument("--split", action="store_true", help="train on the training split only")
        p.set_defaults(func=cmd_stage)

    p = sub.add_parser("generate", parents=[common], help="text-guided generation")
    p.add_argument("--checkpoint", required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--prompt")
    group.add_argument("--prompts", help="TSV whose descriptions are used as prompts")
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--budget", type=int, default=None, help="total samples spread over --prompts")
    p.add_argument("--w", type=float, default=None)
    p.add_argument("--oversample", type=int, default=None)
    p.add_argument("--reference", help="reference SMILES for top-k selection")
    p.add_argument("--concurrency", type=int, default=None)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("sample-uncond", parents=[common], help="unconditional generation")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--mode", choices=("diffusion", "prior"), default=None)
    p.add_argument("--concurrency", type=int, default=None)
    p.set_defaults(func=cmd_sample_uncond)

    p = sub.add_parser("evaluate", parents=[common], help="score a generations CSV")
    p.add_argument("--mode", choices=("cond", "uncond"), required=True)
    p.add_argument("--generations", required=True)
    p.add_argument("--reference", required=True, help="reference TSV (prompts or training set)")
    p.add_argument("--csv", help="per-prompt rows (cond mode; defaults next to --out)")
    p.add_argument("--docx")
    p.add_argument("--pdf")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablation", parents=[common], help="train and score the ablation grid")
    p.add_argument("--data", required=True)
    p.add_argument("--modes", nargs="+", choices=ABLATIONS, default=list(ABLATIONS))
    p.add_argument("--json", help="JSON copy of the comparison (defaults next to --out)")
    p.set_defaults(func=cmd_ablation)

    p = sub.add_parser("conditioning-check", parents=[common], help="ring / no-ring prompt sanity check")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--w", type=float, default=None)
    p.set_defaults(func=cmd_conditioning_check)

    p = sub.add_parser("show-config", parents=[common], help="print the effective run config")
    p.set_defaults(func=cmd_show_config)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    Config.setup_logging()
    args = build_parser().parse_args(argv)
    try:
        Config.validate_config()
        Config.create_directories()
        return args.func(args)
    except MolDiffError as e:
        sys.stderr.write(json.dumps({"error": e.category, "message": str(e)}) + "\n")
        return e.exit_code
    except Exception as e:
        log.exception("unexpected failure")
        sys.stderr.write(json.dumps({"error": "internal", "message": str(e)}) + "\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())

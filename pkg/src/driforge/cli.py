"""``driforge`` command line.

Every pipeline stage is a sub-command. With ``--config run.toml`` it runs as a
pipeline stage (stage directory plus manifest); without it, the module-level
flags run the operation on explicit files.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from datetime import date
from pathlib import Path

import numpy as np

from ._io import read_jsonl, write_json, write_jsonl
from .categorization import AnchorSet, ScoreTable, Selection, embed_anchors, overlap_matrix, score_paragraphs, select_top_k, similarity_histogram
from .config import RunConfig
from .corpus import LEANINGS, KeywordList, LeaningMap, build_paragraphs, ingest, load_paragraphs, paragraph_stats
from .dri import DriResult, SurveyInstrument, dri_delta, export_scatter, load_responses, score_wave
from .embedding import DEFAULT_DIM, EmbeddingCache, HashingEmbedder, HttpEmbedder, ReductionSpec, embed_batch
from .errors import DriforgeError
from .generation import (
    GenerationConfig,
    HttpChatClient,
    MockChatClient,
    TemplateSet,
    dedup_statements,
    load_statements,
    read_review_sheet,
    review_export,
    review_import,
    run_matrix,
)
from .pipeline import STAGES, load_selection_dir, run_all, run_stage
from .validation import MatchMatrix, load_judgments, load_reference, match_matrix, match_rate, write_candidates

logger = logging.getLogger("driforge")


def _embedder_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--embedder", choices=("hashing", "http"), default="hashing")
    p.add_argument("--model", default=None, help="embedding model name")
    p.add_argument("--dim", type=int, default=DEFAULT_DIM)
    p.add_argument("--cache", type=Path, default=None, help="embedding cache file")


def _embed_fn(args):
    if args.embedder == "hashing":
        provider = HashingEmbedder(args.dim, args.model or "hashed-bow-v1")
    else:
        provider = HttpEmbedder.from_env(args.model or "paraphrase-multilingual-MiniLM-L12-v2", args.dim)
    cache = EmbeddingCache.for_provider(provider, args.cache)
    return lambda texts: embed_batch(texts, provider, cache)


def _paragraph_leanings(path: Path | None) -> dict | None:
    return {p.id: p.leaning for p in load_paragraphs(path)} if path else None


def cmd_ingest(args) -> None:
    keywords = KeywordList.load(args.keywords)
    leanings = LeaningMap.load(args.leanings) if args.leanings else None
    window = (date.fromisoformat(args.date_from), date.fromisoformat(args.date_to))
    with open(args.input, encoding="utf-8") as fh:
        articles, report = ingest(fh, window, keywords, strict=args.strict)
    paragraphs = build_paragraphs(articles, keywords, leanings)
    write_jsonl(args.out, (p.to_record() for p in paragraphs))
    summary = {**report.to_dict(), "paragraph_stats": paragraph_stats(paragraphs)}
    write_json(Path(str(args.out) + ".report.json"), summary)
    print(json.dumps({k: v for k, v in summary.items() if k != "errors"}, indent=2))


def cmd_categorize(args) -> None:
    paragraphs = load_paragraphs(args.corpus)
    anchors = AnchorSet.load(args.anchors)
    embed = _embed_fn(args)
    vecs = np.asarray(embed([p.text for p in paragraphs]))
    ids = [p.id for p in paragraphs]
    embedded, reduced = embed_anchors(anchors, ids, vecs, embed, ReductionSpec.parse(args.reduction, args.target_dim))
    table = score_paragraphs(dict(zip(ids, reduced)), embedded, ids, args.aggregate)
    args.out.mkdir(parents=True, exist_ok=True)
    table.to_csv(args.out / "scores.csv")
    print(f"scored {len(table)} paragraphs against {len(anchors.categories)} categories -> {args.out / 'scores.csv'}")


def cmd_select(args) -> None:
    table = ScoreTable.from_csv(args.scores)
    leanings = _paragraph_leanings(args.corpus)
    cats = [args.category] if args.category else table.categories
    rows = []
    for cat in cats:
        rows.extend(select_top_k(table, cat, args.k, args.leaning, leanings).to_records())
    write_jsonl(args.out, rows)
    print(f"{len(rows)} selected rows -> {args.out}")


def cmd_overlap(args) -> None:
    table = ScoreTable.from_csv(args.scores)
    leanings = _paragraph_leanings(args.corpus)
    res = overlap_matrix([select_top_k(table, c, args.k, args.leaning, leanings) for c in table.categories])
    text = res.to_csv(args.out)
    if args.out is None:
        sys.stdout.write(text)
    print(f"mean off-diagonal overlap at k={args.k}: {res.mean_off_diagonal:.4f}", file=sys.stderr)


def cmd_histogram(args) -> None:
    table = ScoreTable.from_csv(args.scores)
    text = similarity_histogram(table, args.category, args.bins).to_csv(args.out)
    if args.out is None:
        sys.stdout.write(text)


def cmd_generate(args) -> None:
    anchors = AnchorSet.load(args.anchors)
    if (args.selections / "index.json").exists():
        found = load_selection_dir(args.selections)
    else:
        found = {}
        for f in sorted(args.selections.glob("*.jsonl")):
            found.update(Selection.load_cells(f))
    selections = {k: v for k, v in found.items() if k[1] is not None}
    texts = {p.id: p.text for p in load_paragraphs(args.corpus)}
    client = MockChatClient() if args.llm == "mock" else HttpChatClient.from_env(args.llm_model, temperature=args.temperature)
    config = GenerationConfig(policy_scope=args.policy_scope, runs=args.runs, strict=args.strict)
    result = run_matrix(anchors, selections, texts, client, config, TemplateSet.load(args.templates))
    write_jsonl(args.out, (s.to_record() for s in result.statements))
    write_jsonl(Path(str(args.out) + ".prompts.jsonl"), result.prompts)
    print(json.dumps({"totals": result.totals(), "failures": result.failures}, indent=2))


def cmd_dedup(args) -> None:
    statements = load_statements(args.statements)
    kept, groups = dedup_statements(statements, _embed_fn(args), args.threshold)
    write_jsonl(args.out, (s.to_record() for s in kept))
    print(json.dumps({"input": len(statements), "kept": len(kept), "groups": groups}, indent=2))


def cmd_review(args) -> None:
    statements = load_statements(args.statements)
    if args.action == "export":
        n = review_export(statements, args.out)
        print(f"{n} statements -> {args.out}")
    else:
        instrument = review_import(read_review_sheet(args.sheet), statements)
        write_json(args.out, instrument)
        print(f"{len(instrument['considerations'])} considerations, {len(instrument['preferences'])} preferences -> {args.out}")


def cmd_score(args) -> None:
    instrument = SurveyInstrument.load(args.instrument)
    responses = load_responses(args.responses, instrument)
    result = score_wave(responses, instrument, args.wave, args.permissive)
    args.out.mkdir(parents=True, exist_ok=True)
    result.save(args.out / f"result_{args.wave}.json")
    export_scatter(result, args.out / f"scatter_{args.wave}.csv")
    print(f"group DRI ({args.wave}): {result.group:.4f}  raw mean distance: {result.raw_mean_distance:.4f}")


def cmd_delta(args) -> None:
    report = dri_delta(DriResult.load(args.pre), DriResult.load(args.post)).to_dict()
    if args.out:
        write_json(args.out, report)
    print(json.dumps(report, indent=2))


def cmd_validate(args) -> None:
    if args.action == "match":
        reference = load_reference(args.reference)
        generated = [(r["id"], r["text"]) for r in read_jsonl(args.generated)]
        matrix = match_matrix([(r.id, r.text) for r in reference], generated, _embed_fn(args))
        matrix.to_csv(args.out)
        print(f"{len(matrix.reference_ids)}x{len(matrix.generated_ids)} matrix -> {args.out}")
    elif args.action == "candidates":
        write_candidates(MatchMatrix.from_csv(args.matrix), args.out, args.n)
        print(f"top-{args.n} candidates -> {args.out}")
    else:
        summary = match_rate(load_judgments(args.judgments), load_reference(args.reference), args.exclude_general, args.kind)
        print(json.dumps(summary.to_dict(), indent=2))


def _stage_parser(sub, name: str, help: str, standalone: bool = True) -> argparse.ArgumentParser:
    p = sub.add_parser(name, help=help)
    p.add_argument("--config", type=Path, required=not standalone, help="run as a pipeline stage")
    p.add_argument("--force", action="store_true", help="skip upstream manifest checks")
    return p


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="driforge", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = _stage_parser(sub, "ingest", "filter, chunk and dedup an article dump")
    p.add_argument("--input", type=Path)
    p.add_argument("--keywords", type=Path)
    p.add_argument("--leanings", type=Path)
    p.add_argument("--from", dest="date_from", default="2018-01-01")
    p.add_argument("--to", dest="date_to", default="2024-08-29")
    p.add_argument("--out", type=Path)
    p.add_argument("--strict", action="store_true")
    p.set_defaults(func=cmd_ingest, needs=("input", "keywords", "out"))

    _stage_parser(sub, "embed", "embed paragraphs and anchors", standalone=False)

    p = _stage_parser(sub, "categorize", "score paragraphs against anchor categories")
    p.add_argument("--corpus", type=Path)
    p.add_argument("--anchors", type=Path)
    p.add_argument("--reduction", default="none", help="none | pca | import:<path>")
    p.add_argument("--target-dim", type=int, default=50)
    p.add_argument("--aggregate", choices=("max", "mean"), default="max")
    p.add_argument("--out", type=Path)
    _embedder_args(p)
    p.set_defaults(func=cmd_categorize, needs=("corpus", "anchors", "out"))

    p = _stage_parser(sub, "select", "top-k paragraphs per category")
    p.add_argument("--scores", type=Path)
    p.add_argument("--corpus", type=Path, help="paragraph corpus, needed with --leaning")
    p.add_argument("--k", type=int, default=500)
    p.add_argument("--leaning", choices=LEANINGS)
    p.add_argument("--category")
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_select, needs=("scores", "out"))

    p = sub.add_parser("overlap", help="category overlap matrix of top-k selections")
    p.add_argument("--scores", type=Path, required=True)
    p.add_argument("--corpus", type=Path)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--leaning", choices=LEANINGS)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_overlap, needs=())

    p = sub.add_parser("histogram", help="similarity score histogram for one category")
    p.add_argument("--scores", type=Path, required=True)
    p.add_argument("--category", required=True)
    p.add_argument("--bins", type=int, default=100)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_histogram, needs=())

    p = _stage_parser(sub, "generate", "generate statements for every category and leaning")
    p.add_argument("--selections", type=Path)
    p.add_argument("--anchors", type=Path)
    p.add_argument("--corpus", type=Path)
    p.add_argument("--templates", type=Path)
    p.add_argument("--out", type=Path)
    p.add_argument("--policy-scope", choices=("general", "all"), default="general")
    p.add_argument("--runs", type=int, default=1)
    p.add_argument("--llm", choices=("mock", "http"), default="mock")
    p.add_argument("--llm-model", default="gpt-4o")
    p.add_argument("--temperature", type=float, default=0.2)
    p.add_argument("--strict", action="store_true")
    p.set_defaults(func=cmd_generate, needs=("selections", "anchors", "corpus", "out"))

    p = sub.add_parser("dedup", help="group near-duplicate statements")
    p.add_argument("--statements", type=Path, required=True)
    p.add_argument("--threshold", type=float, default=0.95)
    p.add_argument("--out", type=Path, required=True)
    _embedder_args(p)
    p.set_defaults(func=cmd_dedup, needs=())

    p = _stage_parser(sub, "review", "export or import the human review sheet")
    p.add_argument("action", nargs="?", choices=("export", "import"))
    p.add_argument("--statements", type=Path)
    p.add_argument("--sheet", type=Path)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_review, needs=("action", "statements", "out"))

    p = _stage_parser(sub, "score", "compute DRI for one survey wave")
    p.add_argument("--instrument", type=Path)
    p.add_argument("--responses", type=Path)
    p.add_argument("--wave", choices=("pre", "mid", "post"), default="pre")
    p.add_argument("--permissive", action="store_true", help="allow incomplete responses")
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_score, needs=("instrument", "responses", "out"))

    p = sub.add_parser("delta", help="compare two scored waves")
    p.add_argument("--pre", type=Path, required=True)
    p.add_argument("--post", type=Path, required=True)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_delta, needs=())

    p = _stage_parser(sub, "validate", "match generated statements against a reference survey")
    p.add_argument("action", nargs="?", choices=("match", "candidates", "rate"))
    p.add_argument("--reference", type=Path)
    p.add_argument("--generated", type=Path)
    p.add_argument("--matrix", type=Path)
    p.add_argument("--judgments", type=Path)
    p.add_argument("--n", type=int, default=5)
    p.add_argument("--exclude-general", action="store_true")
    p.add_argument("--kind", choices=("consideration", "preference"))
    p.add_argument("--out", type=Path)
    _embedder_args(p)
    p.set_defaults(func=cmd_validate, needs=("action",))

    _stage_parser(sub, "report", "histograms, overlap matrices and corpus statistics", standalone=False)

    p = sub.add_parser("pipeline", help="run every stage in order")
    p.add_argument("--config", type=Path, required=True)
    p.add_argument("--force", action="store_true")
    p.add_argument("--stages", nargs="+", choices=STAGES, default=list(STAGES))
    return ap


def _run(args) -> None:
    if args.command == "pipeline":
        config = RunConfig.load(args.config)
        for path in run_all(config, args.stages, args.force):
            print(path)
        return
    if getattr(args, "config", None) is not None:
        print(run_stage(args.command, RunConfig.load(args.config), args.force))
        return
    missing = [n for n in getattr(args, "needs", ()) if getattr(args, n, None) is None]
    if missing:
        raise SystemExit(f"driforge {args.command}: give --config or " + ", ".join(f"--{m}" for m in missing))
    args.func(args)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        _run(args)
    except DriforgeError as exc:
        print(json.dumps(exc.to_report(args.command)), file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        report = {"stage": args.command, "error_kind": type(exc).__name__, "detail": str(exc), "offending_ids": []}
        print(json.dumps(report), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

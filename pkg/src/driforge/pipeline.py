"""Stage runner: every stage reads upstream files, writes its own directory atomically,
and records a manifest with input, config and output hashes."""

from __future__ import annotations

import json
import logging
import os
import shutil
import tempfile
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable

import numpy as np
from filelock import FileLock

from . import __version__
from ._io import canonical_json, read_jsonl, sha256_file, sha256_text, slug, write_json, write_jsonl
from .categorization import AnchorSet, ScoreTable, Selection, embed_anchors, overlap_matrix, score_paragraphs, select_top_k, similarity_histogram
from .config import RunConfig
from .corpus import KeywordList, LeaningMap, build_paragraphs, ingest, load_paragraphs, paragraph_stats
from .dri import WAVES, SurveyInstrument, dri_delta, export_scatter, load_responses, score_wave
from .errors import ConfigError, MissingUpstream, SurveyError, ValidationError
from .generation import TemplateSet, dedup_statements, load_statements, read_review_sheet, review_export, review_import, run_matrix
from .validation import load_judgments, load_reference, match_matrix, match_rate, write_candidates

logger = logging.getLogger(__name__)

STAGES = ("ingest", "embed", "categorize", "select", "generate", "review", "score", "validate", "report")
UPSTREAM = {
    "ingest": (),
    "embed": ("ingest",),
    "categorize": ("ingest", "embed"),
    "select": ("ingest", "categorize"),
    "generate": ("ingest", "select"),
    "review": ("generate",),
    "score": (),
    "validate": ("generate",),
    "report": ("ingest", "categorize"),
}
MANIFEST = "manifest.json"


def stage_dir(config: RunConfig, stage: str) -> Path:
    return config.output / f"{STAGES.index(stage) + 1:02d}_{stage}"


def _timestamp() -> str:
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    t = datetime.fromtimestamp(int(epoch), timezone.utc) if epoch else datetime.now(timezone.utc)
    return t.isoformat(timespec="seconds")


def read_manifest(config: RunConfig, stage: str) -> dict:
    path = stage_dir(config, stage) / MANIFEST
    if not path.exists():
        raise MissingUpstream(
            f"stage needs upstream '{stage}' output; expected manifest {path} "
            f"(run `driforge {stage} --config ...` first)",
            [str(path)],
        )
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _check_upstream(config: RunConfig, stage: str, force: bool) -> dict[str, str]:
    hashes = {}
    for up in UPSTREAM[stage]:
        if force and not (stage_dir(config, up) / MANIFEST).exists():
            continue
        manifest = read_manifest(config, up)
        hashes[f"stage:{up}"] = sha256_text(canonical_json(manifest["outputs"]))
        if not force:
            for rel, digest in manifest["outputs"].items():
                p = stage_dir(config, up) / rel
                if not p.exists() or sha256_file(p) != digest:
                    raise MissingUpstream(f"upstream '{up}' output {rel} is missing or modified; rerun it", [str(p)])
    return hashes


def _hash_tree(root: Path) -> dict[str, str]:
    out = {}
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.name != MANIFEST:
            out[p.relative_to(root).as_posix()] = sha256_file(p)
    return out


def run_stage(stage: str, config: RunConfig, force: bool = False) -> Path:
    """Run one stage into its output directory and return that directory."""
    if stage not in STAGES:
        raise ConfigError(f"unknown stage {stage!r}")
    config.validate()
    config.output.mkdir(parents=True, exist_ok=True)
    with FileLock(str(config.output / ".driforge.lock")):
        started = _timestamp()
        inputs = _check_upstream(config, stage, force)
        final = stage_dir(config, stage)
        tmp = Path(tempfile.mkdtemp(dir=config.output, prefix=f".tmp-{stage}-"))
        try:
            inputs.update(_RUNNERS[stage](config, tmp))
            manifest = {
                "stage": stage,
                "tool_version": __version__,
                "config_hash": config.config_hash,
                "inputs": dict(sorted(inputs.items())),
                "outputs": _hash_tree(tmp),
                "started": started,
                "finished": _timestamp(),
            }
            write_json(tmp / MANIFEST, manifest)
            if final.exists():
                old = final.with_name(f".old-{final.name}-{os.getpid()}")
                os.replace(final, old)
                os.replace(tmp, final)
                shutil.rmtree(old)
            else:
                os.replace(tmp, final)
        except BaseException:
            shutil.rmtree(tmp, ignore_errors=True)
            raise
    logger.info("stage %s done -> %s", stage, final)
    return final


def run_all(config: RunConfig, stages=STAGES, force: bool = False) -> list[Path]:
    return [run_stage(s, config, force) for s in stages]


def _file_inputs(config: RunConfig, *names: str) -> dict[str, str]:
    return {f"file:{n}": sha256_file(config.paths[n]) for n in names if n in config.paths}


def _paragraphs(config: RunConfig):
    return load_paragraphs(stage_dir(config, "ingest") / "paragraphs.jsonl")


def _ingest(config: RunConfig, out: Path) -> dict:
    keywords = KeywordList.load(config.paths["keywords"])
    leanings = LeaningMap.load(config.paths["leanings"])
    with open(config.paths["articles"], encoding="utf-8") as fh:
        articles, report = ingest(fh, config.window, keywords, strict=config.strict)
    paragraphs = build_paragraphs(articles, keywords, leanings)
    write_jsonl(out / "articles.jsonl", (a.to_record() for a in articles))
    write_jsonl(out / "paragraphs.jsonl", (p.to_record() for p in paragraphs))
    stats = paragraph_stats(paragraphs)
    stats["leaning_counts"] = {str(l): sum(p.leaning == l for p in paragraphs) for l in (*config.leanings, None)}
    write_json(out / "ingest_report.json", {**report.to_dict(), "paragraph_stats": stats})
    return _file_inputs(config, "articles", "keywords", "leanings")


def _embed(config: RunConfig, out: Path) -> dict:
    paragraphs = _paragraphs(config)
    anchors = AnchorSet.load(config.paths["anchors"])
    embed = config.embed_fn()
    texts = [p.text for p in paragraphs]
    items = anchors.anchor_items()
    anchor_texts = [anchors[c].variants[l] for _, c, l in items]
    vecs = embed(texts + anchor_texts)
    dim = config.embedding["dim"]
    mat = np.asarray(vecs, dtype=np.float64).reshape(len(vecs), dim)
    np.save(out / "paragraph_vectors.npy", mat[: len(texts)].astype("<f4"))
    np.save(out / "anchor_vectors.npy", mat[len(texts) :].astype("<f4"))
    write_json(out / "ids.json", {"paragraphs": [p.id for p in paragraphs], "anchors": [i for i, _, _ in items]})
    write_json(out / "provider.json", {"provider_id": config.embedder().provider_id, "model_id": config.embedding["model"], "dim": dim})
    return _file_inputs(config, "anchors")


def _categorize(config: RunConfig, out: Path) -> dict:
    src = stage_dir(config, "embed")
    with open(src / "ids.json", encoding="utf-8") as fh:
        ids = json.load(fh)
    para = np.load(src / "paragraph_vectors.npy").astype(np.float64)
    anchor_mat = np.load(src / "anchor_vectors.npy").astype(np.float64)
    anchors = AnchorSet.load(config.paths["anchors"])
    by_text = {}
    for row, (_, c, l) in zip(anchor_mat, anchors.anchor_items()):
        by_text[anchors[c].variants[l]] = row
    embedded, reduced = embed_anchors(
        anchors, ids["paragraphs"], para, lambda texts: [by_text[t] for t in texts], config.reduction
    )
    vectors = dict(zip(ids["paragraphs"], reduced))
    table = score_paragraphs(vectors, embedded, ids["paragraphs"], config.aggregate)
    table.to_csv(out / "scores.csv")
    write_json(out / "reduction.json", {**config.reduction.to_dict(), "aggregate": config.aggregate})
    inputs = _file_inputs(config, "anchors")
    if config.reduction.import_path:
        inputs["file:reduction_import"] = sha256_file(config.reduction.import_path)
    return inputs


def _selection_name(category: str, leaning: str | None) -> str:
    return f"{slug(category)}__{leaning or 'all'}.jsonl"


def _select(config: RunConfig, out: Path) -> dict:
    table = ScoreTable.from_csv(stage_dir(config, "categorize") / "scores.csv")
    leanings = {p.id: p.leaning for p in _paragraphs(config)}
    (out / "selections").mkdir()
    index = []
    for cat in table.categories:
        for leaning in (None, *config.leanings):
            sel = select_top_k(table, cat, config.k, leaning, leanings)
            name = _selection_name(cat, leaning)
            write_jsonl(out / "selections" / name, sel.to_records())
            index.append({"file": name, "category": cat, "leaning": leaning, "k": sel.k, "size": len(sel.paragraph_ids)})
    write_json(out / "index.json", {"k": config.k, "selections": index})
    return {}


def load_selection_dir(directory: Path) -> dict[tuple[str, str | None], Selection]:
    with open(directory / "index.json", encoding="utf-8") as fh:
        index = json.load(fh)
    out = {}
    for entry in index["selections"]:
        rows = list(read_jsonl(directory / "selections" / entry["file"]))
        if rows:
            out[(entry["category"], entry["leaning"])] = Selection.from_records(rows, entry["k"])
    return out


def _read_lines(path: Path | None) -> list[str]:
    if path is None:
        return []
    return [line.strip() for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]


def _generate(config: RunConfig, out: Path) -> dict:
    anchors = AnchorSet.load(config.paths["anchors"])
    selections = {k: v for k, v in load_selection_dir(stage_dir(config, "select")).items() if k[1] is not None}
    texts = {p.id: p.text for p in _paragraphs(config)}
    templates = TemplateSet.load(config.paths.get("templates"))
    banks = {
        "considerations": _read_lines(config.paths.get("exemplars_considerations")),
        "policy": _read_lines(config.paths.get("exemplars_policy")),
    }
    embed = config.embed_fn() if any(banks.values()) else None
    result = run_matrix(anchors, selections, texts, config.chat_client(), config.generation, templates, banks, embed)
    write_jsonl(out / "statements.jsonl", (s.to_record() for s in result.statements))
    write_jsonl(out / "prompts.jsonl", result.prompts)
    write_json(out / "generation_report.json", {"totals": result.totals(), "failures": result.failures})
    return _file_inputs(config, "anchors", "templates", "exemplars_considerations", "exemplars_policy")


def _review(config: RunConfig, out: Path) -> dict:
    statements = load_statements(stage_dir(config, "generate") / "statements.jsonl")
    kept, groups = dedup_statements(statements, config.embed_fn(), config.dedup_threshold)
    duplicates = {d for ds in groups.values() for d in ds}
    write_json(out / "duplicates.json", {"threshold": config.dedup_threshold, "groups": groups})
    # near-duplicates are pre-marked for dropping; reviewers may overrule
    review_export(statements, out / "review.csv", {d: "drop" for d in duplicates})
    decisions = config.paths.get("review_decisions")
    if decisions is not None:
        instrument = review_import(read_review_sheet(decisions), statements)
        write_json(out / "instrument.json", instrument)
    return _file_inputs(config, "review_decisions")


def _score(config: RunConfig, out: Path) -> dict:
    resp_path = config.paths.get("responses")
    if resp_path is None:
        raise SurveyError("no responses file configured (set paths.responses)", ["paths.responses"])
    inst_path = config.paths.get("instrument") or stage_dir(config, "review") / "instrument.json"
    if not inst_path.exists():
        raise SurveyError(f"instrument file not found: {inst_path}", [str(inst_path)])
    instrument = SurveyInstrument.load(inst_path)
    responses = load_responses(resp_path, instrument)
    results = {}
    for wave in WAVES:
        wave_resp = [r for r in responses if r.wave == wave]
        if not wave_resp:
            continue
        res = score_wave(wave_resp, instrument, wave, config.permissive_missing, config.min_shared_items)
        res.save(out / f"result_{wave}.json")
        export_scatter(res, out / f"scatter_{wave}.csv")
        results[wave] = res
    if not results:
        raise SurveyError(f"{resp_path} holds no responses", [str(resp_path)])
    if "pre" in results and "post" in results:
        write_json(out / "delta.json", dri_delta(results["pre"], results["post"]).to_dict())
    return {"file:responses": sha256_file(resp_path), "file:instrument": sha256_file(inst_path)}


def _validate(config: RunConfig, out: Path) -> dict:
    ref_path = config.paths.get("reference")
    if ref_path is None:
        raise ValidationError("no reference survey configured (set paths.reference)", ["paths.reference"])
    reference = load_reference(ref_path)
    statements = load_statements(stage_dir(config, "generate") / "statements.jsonl")
    matrix = match_matrix(
        [(r.id, r.text) for r in reference], [(s.id, s.text) for s in statements], config.embed_fn()
    )
    matrix.to_csv(out / "matrix.csv")
    write_candidates(matrix, out / "candidates.csv", config.candidates)
    judgments_path = config.paths.get("judgments")
    if judgments_path is not None:
        judgments = load_judgments(judgments_path)
        summary = {}
        for kind in ("consideration", "preference"):
            if any(r.kind == kind for r in reference):
                summary[kind] = {
                    "all": match_rate(judgments, reference, False, kind).to_dict(),
                    "excluding_general": match_rate(judgments, reference, True, kind).to_dict(),
                }
        write_json(out / "match_rate.json", summary)
    return _file_inputs(config, "reference", "judgments")


def _report(config: RunConfig, out: Path) -> dict:
    table = ScoreTable.from_csv(stage_dir(config, "categorize") / "scores.csv")
    paragraphs = _paragraphs(config)
    leanings = {p.id: p.leaning for p in paragraphs}
    (out / "histograms").mkdir()
    for cat in table.categories:
        similarity_histogram(table, cat, config.histogram_bins).to_csv(out / "histograms" / f"{slug(cat)}.csv")
    (out / "overlap").mkdir()
    summary = {}
    for k in config.overlap_ks:
        pooled = overlap_matrix([select_top_k(table, c, k) for c in table.categories])
        pooled.to_csv(out / "overlap" / f"k{k}__all.csv")
        per_leaning = {}
        for leaning in config.leanings:
            res = overlap_matrix([select_top_k(table, c, k, leaning, leanings) for c in table.categories])
            res.to_csv(out / "overlap" / f"k{k}__{leaning}.csv")
            per_leaning[leaning] = res.mean_off_diagonal
        summary[str(k)] = {
            "pooled_mean_off_diagonal": pooled.mean_off_diagonal,
            "per_leaning_mean_off_diagonal": per_leaning,
            "mean_over_leanings": float(np.mean(list(per_leaning.values()))) if per_leaning else None,
        }
    write_json(out / "overlap_summary.json", summary)
    with open(stage_dir(config, "ingest") / "ingest_report.json", encoding="utf-8") as fh:
        ingest_report = json.load(fh)
    stats = paragraph_stats(paragraphs)
    stats["articles_kept"] = ingest_report["kept"]
    stats["articles_read"] = ingest_report["read"]
    write_json(out / "stats.json", stats)
    score_dir = stage_dir(config, "score")
    if (score_dir / MANIFEST).exists():
        (out / "dri").mkdir()
        for f in sorted(score_dir.glob("scatter_*")):
            shutil.copyfile(f, out / "dri" / f.name)
    return {}


_RUNNERS: dict[str, Callable[[RunConfig, Path], dict]] = {
    "ingest": _ingest,
    "embed": _embed,
    "categorize": _categorize,
    "select": _select,
    "generate": _generate,
    "review": _review,
    "score": _score,
    "validate": _validate,
    "report": _report,
}

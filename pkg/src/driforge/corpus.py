"""Article ingestion, keyword filtering, paragraph chunking and outlet leaning bins."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import re
import statistics
from dataclasses import asdict, dataclass, field
from datetime import date
from typing import Iterable, Mapping, Sequence

from ._io import read_jsonl
from .errors import ConfigError, IngestError

logger = logging.getLogger(__name__)

LANGUAGES = ("de", "fr", "it")
LEANINGS = ("left", "left_liberal", "centrist", "right_liberal", "right")

_BLANK_LINE = re.compile(r"\n[ \t\r\f\v]*\n")
_WS = re.compile(r"\s+")


@dataclass(frozen=True)
class Article:
    id: str
    outlet: str
    published: date
    language: str
    title: str
    body: str

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "outlet": self.outlet,
            "date": self.published.isoformat(),
            "lang": self.language,
            "title": self.title,
            "body": self.body,
        }


@dataclass(frozen=True)
class Paragraph:
    id: str
    article_id: str
    text: str
    language: str
    leaning: str | None = None
    outlet: str | None = None

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "article_id": self.article_id,
            "text": self.text,
            "lang": self.language,
            "leaning": self.leaning,
        }

    @classmethod
    def from_record(cls, rec: Mapping) -> "Paragraph":
        return cls(
            id=rec["id"],
            article_id=rec["article_id"],
            text=rec["text"],
            language=rec["lang"],
            leaning=rec.get("leaning"),
        )


@dataclass(frozen=True)
class KeywordList:
    entries: tuple[tuple[str, str], ...]

    def __post_init__(self):
        if not self.entries:
            raise ConfigError("keyword list is empty")
        folded = tuple((kw.casefold().strip(), lang) for kw, lang in self.entries)
        if any(not kw for kw, _ in folded):
            raise ConfigError("keyword list contains an empty keyword")
        object.__setattr__(self, "entries", folded)

    @property
    def keywords(self) -> tuple[str, ...]:
        return tuple(dict.fromkeys(kw for kw, _ in self.entries))

    @classmethod
    def from_strings(cls, keywords: Iterable[str], language: str = "de") -> "KeywordList":
        return cls(tuple((k, language) for k in keywords))

    @classmethod
    def load(cls, path) -> "KeywordList":
        with open(path, encoding="utf-8", newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or not {"keyword", "language"} <= set(reader.fieldnames):
                raise ConfigError(f"{path}: keyword CSV needs columns keyword,language")
            rows = [(r["keyword"], r["language"].strip()) for r in reader if r["keyword"].strip()]
        for _, lang in rows:
            if lang not in LANGUAGES:
                raise ConfigError(f"{path}: unknown keyword language {lang!r}")
        return cls(tuple(rows))


@dataclass(frozen=True)
class LeaningMap:
    entries: Mapping[str, float]

    def __post_init__(self):
        bad = [o for o, s in self.entries.items() if not -100.0 <= s <= 100.0]
        if bad:
            raise ConfigError("leaning scores outside [-100, 100]", bad)

    @classmethod
    def load(cls, path) -> "LeaningMap":
        with open(path, encoding="utf-8", newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or not {"outlet", "score"} <= set(reader.fieldnames):
                raise ConfigError(f"{path}: leaning CSV needs columns outlet,score")
            entries = {}
            for row in reader:
                outlet = row["outlet"].strip()
                if outlet in entries:
                    raise ConfigError(f"{path}: outlet {outlet!r} listed twice", [outlet])
                try:
                    entries[outlet] = float(row["score"])
                except ValueError:
                    raise ConfigError(f"{path}: non-numeric score for {outlet!r}", [outlet]) from None
        return cls(entries)


@dataclass
class IngestReport:
    read: int = 0
    kept: int = 0
    dropped_date: int = 0
    dropped_keyword: int = 0
    dropped_duplicate: int = 0
    errors: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def keyword_match(text: str, keywords: KeywordList) -> bool:
    # substring, not token match: "Spital" must hit "Spitalfinanzierung"
    folded = text.casefold()
    return any(kw in folded for kw in keywords.keywords)


def _parse_article(line: str) -> Article:
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ValueError(f"invalid JSON: {exc.msg}") from None
    if not isinstance(rec, dict):
        raise ValueError("record is not a JSON object")
    missing = [k for k in ("id", "outlet", "date", "lang", "title", "body") if k not in rec]
    if missing:
        raise ValueError(f"missing fields: {', '.join(missing)}")
    if rec["lang"] not in LANGUAGES:
        raise ValueError(f"unsupported language {rec['lang']!r}")
    if not isinstance(rec["body"], str) or not rec["body"].strip():
        raise ValueError("empty body")
    try:
        published = date.fromisoformat(rec["date"])
    except (TypeError, ValueError):
        raise ValueError(f"bad date {rec['date']!r}") from None
    return Article(
        id=str(rec["id"]),
        outlet=str(rec["outlet"]),
        published=published,
        language=rec["lang"],
        title=str(rec["title"] or ""),
        body=rec["body"],
    )


def ingest(
    source: Iterable[str],
    window: tuple[date, date],
    keywords: KeywordList,
    strict: bool = False,
) -> tuple[list[Article], IngestReport]:
    """Parse a JSONL article dump and keep in-window, on-topic, unique articles.

    Malformed lines are recorded in ``report.errors`` with their 1-based line
    number; with ``strict=True`` the first one aborts ingestion instead.
    Duplicate ids are resolved first-wins among otherwise retained articles.
    """
    start, end = window
    if start > end:
        raise ConfigError(f"date window is empty: {start} > {end}")
    report = IngestReport()
    seen: set[str] = set()
    articles: list[Article] = []
    for lineno, line in enumerate(source, start=1):
        if not line.strip():
            continue
        report.read += 1
        try:
            art = _parse_article(line)
        except ValueError as exc:
            if strict:
                raise IngestError(f"line {lineno}: {exc}") from None
            report.errors.append({"line": lineno, "error": str(exc)})
            continue
        if not start <= art.published <= end:
            report.dropped_date += 1
            continue
        if not keyword_match(f"{art.title}\n{art.body}", keywords):
            report.dropped_keyword += 1
            continue
        if art.id in seen:
            report.dropped_duplicate += 1
            continue
        seen.add(art.id)
        articles.append(art)
    report.kept = len(articles)
    logger.info("ingested %d of %d articles (%d errors)", report.kept, report.read, len(report.errors))
    return articles, report


def normalize_text(text: str) -> str:
    return _WS.sub(" ", text.casefold()).strip()


def paragraph_id(text: str) -> str:
    return "p" + hashlib.sha256(normalize_text(text).encode("utf-8")).hexdigest()[:16]


def chunk(article: Article) -> list[Paragraph]:
    paragraphs = []
    for block in _BLANK_LINE.split(article.body.replace("\r\n", "\n")):
        text = block.strip()
        if text:
            paragraphs.append(
                Paragraph(
                    id=paragraph_id(text),
                    article_id=article.id,
                    text=text,
                    language=article.language,
                    outlet=article.outlet,
                )
            )
    return paragraphs


def dedup(paragraphs: Iterable[Paragraph]) -> list[Paragraph]:
    seen: set[str] = set()
    out = []
    for p in paragraphs:
        key = paragraph_id(p.text)
        if key not in seen:
            seen.add(key)
            out.append(p)
    return out


def paragraph_stats(paragraphs: Sequence[Paragraph]) -> dict:
    """Paragraph counts per article, over the articles that contribute at least one."""
    per_article: dict[str, int] = {}
    for p in paragraphs:
        per_article[p.article_id] = per_article.get(p.article_id, 0) + 1
    counts = list(per_article.values())
    return {
        "articles": len(counts),
        "paragraphs": len(paragraphs),
        "median_paragraphs_per_article": statistics.median(counts) if counts else 0,
        "mean_paragraphs_per_article": statistics.fmean(counts) if counts else 0.0,
    }


def assign_leaning(outlet: str, leanings: LeaningMap) -> str | None:
    score = leanings.entries.get(outlet)
    if score is None:
        return None
    if not -100.0 <= score <= 100.0:
        raise ConfigError(f"leaning score {score} for {outlet!r} outside [-100, 100]", [outlet])
    if score < -15:
        return "left"
    if score <= -5:
        return "left_liberal"
    if score < 5:
        return "centrist"
    if score <= 15:
        return "right_liberal"
    return "right"


def build_paragraphs(
    articles: Iterable[Article],
    keywords: KeywordList,
    leanings: LeaningMap | None = None,
) -> list[Paragraph]:
    """Chunk, keep keyword-bearing paragraphs, dedup, and attach leaning bins."""
    kept = (p for a in articles for p in chunk(a) if keyword_match(p.text, keywords))
    out = []
    for p in dedup(kept):
        leaning = assign_leaning(p.outlet, leanings) if leanings is not None and p.outlet else None
        out.append(Paragraph(p.id, p.article_id, p.text, p.language, leaning, p.outlet))
    return out


def load_paragraphs(path) -> list[Paragraph]:
    return [Paragraph.from_record(r) for r in read_jsonl(path)]

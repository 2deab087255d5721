"""Anchor-based paragraph categorization, top-k selection, overlap and histograms."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from ._io import read_jsonl
from .corpus import LANGUAGES, LEANINGS
from .embedding import ReductionSpec, cosine_matrix, reduce
from .errors import CategorizationError, ConfigError, EmbeddingError


@dataclass
class Category:
    name: str
    is_general: bool = False
    variants: dict[str, str] = field(default_factory=dict)
    embeddings: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class AnchorSet:
    categories: list[Category]

    def __post_init__(self):
        if not self.categories:
            raise ConfigError("anchor set has no categories")
        names = [c.name for c in self.categories]
        if len(set(names)) != len(names):
            raise ConfigError("duplicate category names", [n for n in names if names.count(n) > 1])
        if sum(c.is_general for c in self.categories) > 1:
            raise ConfigError("at most one general category is permitted")
        for c in self.categories:
            if not c.variants:
                raise ConfigError(f"category {c.name!r} has no language variant", [c.name])
            for lang, text in c.variants.items():
                if lang not in LANGUAGES:
                    raise ConfigError(f"category {c.name!r}: unknown language {lang!r}", [c.name])
                if not text.strip():
                    raise ConfigError(f"category {c.name!r}: empty {lang} anchor", [c.name])

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.categories]

    @property
    def general(self) -> Category | None:
        return next((c for c in self.categories if c.is_general), None)

    def __getitem__(self, name: str) -> Category:
        for c in self.categories:
            if c.name == name:
                return c
        raise CategorizationError(f"unknown category {name!r}", [name])

    def anchor_items(self) -> list[tuple[str, str, str]]:
        """(anchor id, category, language) in category then language order."""
        return [
            (f"anchor:{c.name}:{lang}", c.name, lang)
            for c in self.categories
            for lang in sorted(c.variants)
        ]

    @classmethod
    def load(cls, path) -> "AnchorSet":
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        try:
            cats = [
                Category(name=c["name"], is_general=bool(c.get("general", False)), variants=dict(c["variants"]))
                for c in doc["categories"]
            ]
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"{path}: malformed anchor file ({exc})") from None
        return cls(cats)


def embed_anchors(
    anchors: AnchorSet,
    paragraph_ids: Sequence[str],
    paragraph_vectors: np.ndarray,
    embed: Callable[[list[str]], list[np.ndarray]],
    reduction: ReductionSpec = ReductionSpec(),
) -> tuple[AnchorSet, np.ndarray]:
    """Embed anchor texts and reduce them jointly with the paragraph matrix.

    Returns a new AnchorSet carrying post-reduction vectors, and the reduced
    paragraph matrix (rows aligned with ``paragraph_ids``).
    """
    items = anchors.anchor_items()
    texts = [anchors[cat].variants[lang] for _, cat, lang in items]
    anchor_vecs = np.asarray(embed(texts), dtype=np.float64)
    para = np.asarray(paragraph_vectors, dtype=np.float64)
    if para.size and para.shape[1] != anchor_vecs.shape[1]:
        raise EmbeddingError(f"paragraph dim {para.shape[1]} != anchor dim {anchor_vecs.shape[1]}")
    joint = np.vstack([para.reshape(-1, anchor_vecs.shape[1]), anchor_vecs])
    ids = list(paragraph_ids) + [i for i, _, _ in items]
    reduced = reduce(joint, reduction, ids)
    n = len(paragraph_ids)
    cats = []
    for c in anchors.categories:
        cats.append(replace(c, variants=dict(c.variants), embeddings={}))
    out = AnchorSet(cats)
    for row, (_, cat, lang) in zip(reduced[n:], items):
        out[cat].embeddings[lang] = row
    return out, reduced[:n]


@dataclass
class ScoreTable:
    paragraph_ids: list[str]
    categories: list[str]
    scores: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(len(self.paragraph_ids), len(self.categories))
        self._row = {pid: i for i, pid in enumerate(self.paragraph_ids)}
        if len(self._row) != len(self.paragraph_ids):
            raise CategorizationError("duplicate paragraph ids in score table")

    def __len__(self) -> int:
        return len(self.paragraph_ids)

    def column(self, category: str) -> np.ndarray:
        try:
            j = self.categories.index(category)
        except ValueError:
            raise CategorizationError(f"unknown category {category!r}", [category]) from None
        return self.scores[:, j]

    def row(self, paragraph_id: str) -> np.ndarray:
        return self.scores[self._row[paragraph_id]]

    def argmax_categories(self) -> list[str]:
        return [self.categories[j] for j in np.argmax(self.scores, axis=1)]

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["paragraph_id", *self.categories])
            for pid, row in zip(self.paragraph_ids, self.scores):
                w.writerow([pid, *(repr(float(x)) for x in row)])

    @classmethod
    def from_csv(cls, path) -> "ScoreTable":
        with open(path, encoding="utf-8", newline="") as fh:
            r = csv.reader(fh)
            header = next(r)
            ids, rows = [], []
            for rec in r:
                ids.append(rec[0])
                rows.append([float(x) for x in rec[1:]])
        return cls(ids, header[1:], np.asarray(rows, dtype=np.float64).reshape(len(ids), len(header) - 1))


def score_paragraphs(
    vectors: Mapping[str, np.ndarray],
    anchors: AnchorSet,
    paragraph_ids: Sequence[str] | None = None,
    aggregate: str = "max",
) -> ScoreTable:
    """Cosine similarity of each paragraph to each category.

    A category's score is the max (or mean) over its language-variant anchors.
    """
    if aggregate not in ("max", "mean"):
        raise ConfigError(f"unknown anchor aggregation {aggregate!r}")
    ids = list(paragraph_ids) if paragraph_ids is not None else list(vectors)
    missing = [pid for pid in ids if vectors.get(pid) is None]
    if missing:
        raise CategorizationError(f"{len(missing)} paragraph(s) have no embedding", missing)
    unembedded = [c.name for c in anchors.categories if not c.embeddings]
    if unembedded:
        raise CategorizationError("anchors without embeddings", unembedded)
    if not ids:
        return ScoreTable([], anchors.names, np.zeros((0, len(anchors.categories))))
    matrix = np.vstack([np.asarray(vectors[pid], dtype=np.float64) for pid in ids])
    columns = []
    for c in anchors.categories:
        langs = sorted(c.embeddings)
        sims = cosine_matrix(matrix, np.vstack([c.embeddings[l] for l in langs]), ids, langs)
        columns.append(sims.max(axis=1) if aggregate == "max" else sims.mean(axis=1))
    return ScoreTable(ids, anchors.names, np.column_stack(columns))


@dataclass(frozen=True)
class Selection:
    category: str
    leaning: str | None
    k: int
    paragraph_ids: tuple[str, ...]
    scores: tuple[float, ...]

    def to_records(self) -> list[dict]:
        return [
            {"category": self.category, "leaning": self.leaning, "rank": i + 1, "paragraph_id": pid, "score": s}
            for i, (pid, s) in enumerate(zip(self.paragraph_ids, self.scores))
        ]

    @classmethod
    def from_records(cls, records: Iterable[dict], k: int | None = None) -> "Selection":
        rows = sorted(records, key=lambda r: r["rank"])
        if not rows:
            raise CategorizationError("empty selection file")
        cells = sorted({(r["category"], r["leaning"] or "") for r in rows})
        if len(cells) > 1:
            raise CategorizationError("records span several cells; use Selection.load_cells", [f"{c}/{l}" for c, l in cells])
        return cls(
            category=rows[0]["category"],
            leaning=rows[0]["leaning"],
            k=k if k is not None else len(rows),
            paragraph_ids=tuple(r["paragraph_id"] for r in rows),
            scores=tuple(float(r["score"]) for r in rows),
        )

    @classmethod
    def load(cls, path, k: int | None = None) -> "Selection":
        return cls.from_records(read_jsonl(path), k)

    @classmethod
    def load_cells(cls, path) -> dict[tuple[str, str | None], "Selection"]:
        """Split a file holding rows for any number of (category, leaning) cells."""
        grouped: dict[tuple[str, str | None], list[dict]] = {}
        for r in read_jsonl(path):
            grouped.setdefault((r["category"], r["leaning"]), []).append(r)
        return {cell: cls.from_records(rows) for cell, rows in grouped.items()}


def select_top_k(
    table: ScoreTable,
    category: str,
    k: int,
    leaning: str | None = None,
    leanings: Mapping[str, str | None] | None = None,
) -> Selection:
    """Highest-scoring paragraphs for ``category``; ties go to the smaller id.

    With ``leaning`` set, only paragraphs whose entry in ``leanings`` equals it
    are eligible (paragraphs without a leaning never are).
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if leaning is not None and leaning not in LEANINGS:
        raise ConfigError(f"unknown leaning {leaning!r}")
    col = table.column(category)
    pool = range(len(table))
    if leaning is not None:
        if leanings is None:
            raise ConfigError("leaning-scoped selection needs paragraph leanings")
        pool = [i for i in pool if leanings.get(table.paragraph_ids[i]) == leaning]
    order = sorted(pool, key=lambda i: (-col[i], table.paragraph_ids[i]))[:k]
    return Selection(
        category=category,
        leaning=leaning,
        k=k,
        paragraph_ids=tuple(table.paragraph_ids[i] for i in order),
        scores=tuple(float(col[i]) for i in order),
    )


@dataclass
class OverlapResult:
    categories: list[str]
    k: int
    leaning: str | None
    matrix: np.ndarray
    jaccard: np.ndarray

    @property
    def mean_off_diagonal(self) -> float:
        n = len(self.categories)
        if n < 2:
            return 0.0
        mask = ~np.eye(n, dtype=bool)
        return float(self.matrix[mask].mean())

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["category", *self.categories])
        for name, row in zip(self.categories, self.matrix):
            w.writerow([name, *(repr(float(x)) for x in row)])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
        return text


def overlap_matrix(selections: Sequence[Selection]) -> OverlapResult:
    """Pairwise shared-paragraph fraction |A ∩ B| / k between equal-k selections."""
    if not selections:
        raise CategorizationError("no selections to compare")
    ks = {s.k for s in selections}
    if len(ks) != 1:
        raise CategorizationError(f"selections have mixed k: {sorted(ks)}")
    scopes = {s.leaning for s in selections}
    if len(scopes) != 1:
        raise CategorizationError("selections mix leaning scopes")
    k = ks.pop()
    sets = [set(s.paragraph_ids) for s in selections]
    n = len(sets)
    m = np.zeros((n, n))
    jac = np.zeros((n, n))
    for i in range(n):
        for j in range(i, n):
            inter = len(sets[i] & sets[j])
            union = len(sets[i] | sets[j])
            m[i, j] = m[j, i] = inter / k
            jac[i, j] = jac[j, i] = inter / union if union else 1.0
    return OverlapResult([s.category for s in selections], k, scopes.pop(), m, jac)


@dataclass
class Histogram:
    category: str
    edges: np.ndarray
    counts: np.ndarray

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bin_left", "bin_right", "count"])
        for lo, hi, c in zip(self.edges[:-1], self.edges[1:], self.counts):
            w.writerow([repr(float(lo)), repr(float(hi)), int(c)])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
        return text


def similarity_histogram(table: ScoreTable, category: str, bins: int = 100) -> Histogram:
    if bins < 1:
        raise ValueError("bins must be >= 1")
    col = table.column(category)
    if col.size == 0:
        return Histogram(category, np.zeros(bins + 1), np.zeros(bins, dtype=int))
    lo, hi = float(col.min()), float(col.max())
    if lo == hi:
        # degenerate range: every score lands in the first bin
        edges = np.linspace(lo, lo + 1e-12 * max(1.0, abs(lo)), bins + 1)
        counts = np.zeros(bins, dtype=int)
        counts[0] = col.size
        return Histogram(category, edges, counts)
    counts, edges = np.histogram(col, bins=bins, range=(lo, hi))
    return Histogram(category, edges, counts)

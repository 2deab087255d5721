"""Compare generated statements against a human-made reference survey."""

from __future__ import annotations

import csv
from collections import Counter
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from ._io import read_jsonl
from .embedding import cosine_matrix
from .errors import ValidationError

VERDICTS = ("good", "good_to_okay", "okay", "no_match")
MATCH_VERDICTS = frozenset(VERDICTS[:3])


@dataclass(frozen=True)
class ReferenceItem:
    id: str
    text: str
    kind: str = "consideration"
    general_style: bool = False


def load_reference(path) -> list[ReferenceItem]:
    items = []
    for r in read_jsonl(path):
        kind = r.get("kind", "consideration")
        if kind not in ("consideration", "preference"):
            raise ValidationError(f"reference item {r.get('id')!r} has unknown kind {kind!r}", [str(r.get("id"))])
        items.append(ReferenceItem(str(r["id"]), r["text"], kind, bool(r.get("general_style", False))))
    return items


@dataclass
class MatchMatrix:
    reference_ids: list[str]
    generated_ids: list[str]
    scores: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.shape != (len(self.reference_ids), len(self.generated_ids)):
            raise ValidationError("score matrix shape does not match the id lists")

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["reference_id", *self.generated_ids])
            for rid, row in zip(self.reference_ids, self.scores):
                w.writerow([rid, *(repr(float(x)) for x in row)])

    @classmethod
    def from_csv(cls, path) -> "MatchMatrix":
        with open(path, encoding="utf-8", newline="") as fh:
            r = csv.reader(fh)
            header = next(r)
            ref, rows = [], []
            for rec in r:
                ref.append(rec[0])
                rows.append([float(x) for x in rec[1:]])
        return cls(ref, header[1:], np.asarray(rows).reshape(len(ref), len(header) - 1))


def match_matrix(
    reference: Sequence[tuple[str, str]],
    generated: Sequence[tuple[str, str]],
    embed: Callable[[list[str]], list[np.ndarray]],
) -> MatchMatrix:
    """Cosine similarity for every (reference, generated) pair, one shared embedder."""
    if not reference or not generated:
        raise ValidationError("reference and generated sets must both be non-empty")
    vecs = np.asarray(embed([t for _, t in reference] + [t for _, t in generated]), dtype=np.float64)
    n = len(reference)
    ref_ids = [i for i, _ in reference]
    gen_ids = [i for i, _ in generated]
    return MatchMatrix(ref_ids, gen_ids, cosine_matrix(vecs[:n], vecs[n:], ref_ids, gen_ids))


def top_candidates(matrix: MatchMatrix, reference_id: str, n: int = 5) -> list[tuple[str, float]]:
    if n < 1:
        raise ValueError("n must be >= 1")
    try:
        row = matrix.scores[matrix.reference_ids.index(reference_id)]
    except ValueError:
        raise ValidationError(f"unknown reference id {reference_id!r}", [reference_id]) from None
    order = sorted(range(len(row)), key=lambda j: (-row[j], matrix.generated_ids[j]))[:n]
    return [(matrix.generated_ids[j], float(row[j])) for j in order]


def write_candidates(matrix: MatchMatrix, path, n: int = 5) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["reference_id", "rank", "candidate_id", "similarity"])
        for rid in matrix.reference_ids:
            for rank, (cid, score) in enumerate(top_candidates(matrix, rid, n), start=1):
                w.writerow([rid, rank, cid, repr(score)])


@dataclass(frozen=True)
class MatchJudgment:
    reference_id: str
    candidate_id: str | None
    verdict: str
    reviewer: str = ""

    def __post_init__(self):
        if self.verdict not in VERDICTS:
            raise ValidationError(f"unknown verdict {self.verdict!r}", [self.reference_id])


def load_judgments(path) -> list[MatchJudgment]:
    with open(path, encoding="utf-8", newline="") as fh:
        return [
            MatchJudgment(r["reference_id"], r.get("candidate_id") or None, r["verdict"].strip(), r.get("reviewer", ""))
            for r in csv.DictReader(fh)
        ]


@dataclass(frozen=True)
class MatchSummary:
    total: int
    matches: int
    by_verdict: dict

    @property
    def rate(self) -> float:
        return self.matches / self.total if self.total else 0.0

    def to_dict(self) -> dict:
        return {"total": self.total, "matches": self.matches, "rate": self.rate, "by_verdict": dict(self.by_verdict)}


def match_rate(
    judgments: Iterable[MatchJudgment],
    reference: Sequence[ReferenceItem],
    exclude_general: bool = False,
    kind: str | None = None,
) -> MatchSummary:
    """Share of reference items judged to have a matching generated statement.

    ``exclude_general`` drops reference items flagged as written in a very
    general style; ``kind`` restricts to considerations or preferences.
    """
    items = [r for r in reference if kind is None or r.kind == kind]
    if exclude_general:
        items = [r for r in items if not r.general_style]
    wanted = {r.id for r in items}
    known = {r.id for r in reference}
    verdicts: dict[str, MatchJudgment] = {}
    conflicts = []
    for j in judgments:
        if j.reference_id not in known:
            raise ValidationError(f"judgment for unknown reference item {j.reference_id!r}", [j.reference_id])
        prev = verdicts.get(j.reference_id)
        if prev is not None and prev != j:
            conflicts.append(j.reference_id)
        verdicts[j.reference_id] = j
    if conflicts:
        raise ValidationError("more than one verdict for some reference items", sorted(set(conflicts)))
    missing = sorted(wanted - set(verdicts))
    if missing:
        raise ValidationError(f"{len(missing)} reference item(s) have no verdict", missing)
    counts = Counter(verdicts[i].verdict for i in wanted)
    return MatchSummary(
        total=len(wanted),
        matches=sum(counts[v] for v in MATCH_VERDICTS),
        by_verdict={v: counts.get(v, 0) for v in VERDICTS},
    )

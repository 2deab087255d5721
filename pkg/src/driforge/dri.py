"""Deliberative Reason Index scoring.

For every pair of participants, the agreement on considerations (Spearman rho
over their ratings) and on preferences (Spearman rho over their rankings) forms
one point. Perfect intersubjective consistency puts every point on the line
x = y; a pair's inconsistency is its perpendicular distance to that line.
Individual DRI averages over the pairs a participant belongs to, and the group
DRI averages the individual scores.

Normalisation used here: DRI_i = 1 - mean_distance_i / sqrt(2), which maps the
possible distance range [0, sqrt(2)] onto [1, 0]. The normalisation-free mean
distance is always reported alongside.
"""

from __future__ import annotations

import csv
import itertools
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from ._io import canonical_json, read_jsonl, sha256_text
from .errors import SurveyError

logger = logging.getLogger(__name__)

SQRT2 = math.sqrt(2.0)
WAVES = ("pre", "mid", "post")
RANKING_MODES = ("strict_permutation", "ties_allowed")


class UndefinedCorrelation(ValueError):
    """Raised when a rank vector is constant, so Spearman's rho has no value."""


def average_ranks(values: Sequence[float]) -> np.ndarray:
    """1-based ranks; tied values share the mean of the ranks they occupy."""
    a = np.asarray(values, dtype=np.float64)
    n = a.size
    order = np.argsort(a, kind="mergesort")
    s = a[order]
    ranks = np.empty(n, dtype=np.float64)
    i = 0
    while i < n:
        j = i
        while j + 1 < n and s[j + 1] == s[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman(x: Sequence[float], y: Sequence[float]) -> float:
    """Spearman's rho as the Pearson correlation of average ranks."""
    if len(x) != len(y):
        raise ValueError(f"length mismatch: {len(x)} vs {len(y)}")
    n = len(x)
    if n < 2:
        raise ValueError("spearman needs at least two observations")
    rx = average_ranks(x)
    ry = average_ranks(y)
    mean = (n + 1) / 2.0
    dx = rx - mean
    dy = ry - mean
    sxx = float(np.dot(dx, dx))
    syy = float(np.dot(dy, dy))
    if sxx == 0.0 or syy == 0.0:
        raise UndefinedCorrelation("constant vector: rank correlation undefined")
    rho = float(np.dot(dx, dy)) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, rho))


@dataclass(frozen=True)
class SurveyInstrument:
    considerations: tuple[str, ...]
    preferences: tuple[str, ...]
    scale: tuple[int, int] = (-4, 4)
    ranking_mode: str = "strict_permutation"

    def __post_init__(self):
        if len(self.considerations) < 2 or len(self.preferences) < 2:
            raise SurveyError("an instrument needs at least 2 considerations and 2 preferences")
        if len(set(self.considerations)) != len(self.considerations) or len(set(self.preferences)) != len(
            self.preferences
        ):
            raise SurveyError("instrument item ids must be unique")
        if set(self.considerations) & set(self.preferences):
            raise SurveyError("an item id cannot be both a consideration and a preference")
        if not self.scale[0] < self.scale[1]:
            raise SurveyError(f"rating scale min must be below max, got {self.scale}")
        if self.ranking_mode not in RANKING_MODES:
            raise SurveyError(f"unknown ranking mode {self.ranking_mode!r}")

    @property
    def fingerprint(self) -> str:
        return sha256_text(canonical_json(self.to_dict()))[:16]

    def to_dict(self) -> dict:
        return {
            "considerations": list(self.considerations),
            "preferences": list(self.preferences),
            "scale": {"min": self.scale[0], "max": self.scale[1]},
            "ranking_mode": self.ranking_mode,
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> "SurveyInstrument":
        scale = doc.get("scale", {"min": -4, "max": 4})
        return cls(
            considerations=tuple(doc["considerations"]),
            preferences=tuple(doc["preferences"]),
            scale=(int(scale["min"]), int(scale["max"])),
            ranking_mode=doc.get("ranking_mode", "strict_permutation"),
        )

    @classmethod
    def load(cls, path) -> "SurveyInstrument":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


@dataclass(frozen=True)
class SurveyResponse:
    participant_id: str
    wave: str
    consideration_ratings: Mapping[str, float]
    preference_rankings: Mapping[str, float]


def _as_int(value, what: str, pid: str) -> int:
    if isinstance(value, bool) or not float(value).is_integer():
        raise SurveyError(f"{pid}: {what} must be an integer, got {value!r}", [pid])
    return int(value)


def validate_response(resp: SurveyResponse, instrument: SurveyInstrument, permissive: bool = False) -> None:
    pid = resp.participant_id
    if resp.wave not in WAVES:
        raise SurveyError(f"{pid}: unknown wave {resp.wave!r}", [pid])
    lo, hi = instrument.scale
    extra = (set(resp.consideration_ratings) - set(instrument.considerations)) | (
        set(resp.preference_rankings) - set(instrument.preferences)
    )
    if extra:
        raise SurveyError(f"{pid}: items not in the instrument: {sorted(extra)}", [pid])
    if not permissive:
        missing = [c for c in instrument.considerations if c not in resp.consideration_ratings]
        missing += [p for p in instrument.preferences if p not in resp.preference_rankings]
        if missing:
            raise SurveyError(f"{pid}: incomplete response, missing {missing}", [pid])
    for item, value in resp.consideration_ratings.items():
        v = _as_int(value, f"rating of {item}", pid)
        if not lo <= v <= hi:
            raise SurveyError(f"{pid}: rating {v} for {item} outside scale {lo}..{hi}", [pid])
    m = len(instrument.preferences)
    ranks = [_as_int(v, f"rank of {k}", pid) for k, v in resp.preference_rankings.items()]
    if any(not 1 <= r <= m for r in ranks):
        raise SurveyError(f"{pid}: ranks must lie in 1..{m}", [pid])
    if instrument.ranking_mode == "strict_permutation":
        if len(set(ranks)) != len(ranks):
            raise SurveyError(f"{pid}: tied ranks under strict_permutation", [pid])
        if len(ranks) == m and sorted(ranks) != list(range(1, m + 1)):
            raise SurveyError(f"{pid}: rankings are not a permutation of 1..{m}", [pid])


@dataclass(frozen=True)
class PairPoint:
    a: str
    b: str
    rho_c: float
    rho_p: float

    @property
    def gap(self) -> float:
        return abs(self.rho_c - self.rho_p)

    @property
    def distance(self) -> float:
        """Perpendicular distance of (rho_c, rho_p) to the line x = y."""
        return self.gap / SQRT2

    @property
    def signed_distance(self) -> float:
        """Positive above the line (preferences agree more than considerations)."""
        return (self.rho_p - self.rho_c) / SQRT2

    def to_dict(self) -> dict:
        return {"a": self.a, "b": self.b, "rho_c": self.rho_c, "rho_p": self.rho_p, "distance": self.distance}


@dataclass(frozen=True)
class FlaggedPair:
    a: str
    b: str
    reason: str


def _aligned(x: Mapping, y: Mapping, order: Sequence[str]) -> tuple[list, list]:
    common = [k for k in order if k in x and k in y]
    return [x[k] for k in common], [y[k] for k in common]


def pair_points(
    responses: Sequence[SurveyResponse],
    instrument: SurveyInstrument,
    permissive: bool = False,
    min_shared: int = 4,
) -> tuple[list[PairPoint], list[FlaggedPair]]:
    """Correlate every unordered pair of participants on both survey parts.

    Pairs whose correlation is undefined (constant ratings, or too few shared
    items in permissive mode) are returned separately as flagged, never scored.
    """
    if len(responses) < 2:
        raise SurveyError("need at least two responses to form pairs")
    waves = {r.wave for r in responses}
    if len(waves) > 1:
        raise SurveyError(f"responses mix waves {sorted(waves)}")
    ids = [r.participant_id for r in responses]
    dupes = sorted({i for i in ids if ids.count(i) > 1})
    if dupes:
        raise SurveyError("duplicate participants in one wave", dupes)
    for r in responses:
        validate_response(r, instrument, permissive)

    by_id = sorted(responses, key=lambda r: r.participant_id)
    points, flagged = [], []
    for ra, rb in itertools.combinations(by_id, 2):
        xc, yc = _aligned(ra.consideration_ratings, rb.consideration_ratings, instrument.considerations)
        xp, yp = _aligned(ra.preference_rankings, rb.preference_rankings, instrument.preferences)
        need = min_shared if permissive else 2
        if len(xc) < need or len(xp) < 2:
            flagged.append(FlaggedPair(ra.participant_id, rb.participant_id, "too few shared items"))
            continue
        try:
            rho_c = spearman(xc, yc)
        except UndefinedCorrelation:
            flagged.append(FlaggedPair(ra.participant_id, rb.participant_id, "constant consideration ratings"))
            continue
        try:
            rho_p = spearman(xp, yp)
        except UndefinedCorrelation:
            flagged.append(FlaggedPair(ra.participant_id, rb.participant_id, "constant preference rankings"))
            continue
        points.append(PairPoint(ra.participant_id, rb.participant_id, rho_c, rho_p))
    if flagged:
        logger.warning("%d pair(s) flagged and excluded from aggregation", len(flagged))
    return points, flagged


def individual_dri(points: Iterable[PairPoint], participant: str) -> float:
    gaps = [p.gap for p in points if participant in (p.a, p.b)]
    if not gaps:
        raise SurveyError(f"participant {participant!r} has no scored pair", [participant])
    # mean(distance)/sqrt(2) == mean(gap)/2, computed without the irrational factor
    return 1.0 - math.fsum(gaps) / len(gaps) / 2.0


@dataclass
class DriResult:
    wave: str
    pair_points: list[PairPoint]
    individual: dict[str, float]
    group: float
    raw_mean_distance: float
    flagged: list[FlaggedPair] = field(default_factory=list)
    instrument: str | None = None

    def to_dict(self) -> dict:
        return {
            "wave": self.wave,
            "group": self.group,
            "raw_mean_distance": self.raw_mean_distance,
            "individual": dict(sorted(self.individual.items())),
            "pair_points": [p.to_dict() for p in self.pair_points],
            "flagged": [{"a": f.a, "b": f.b, "reason": f.reason} for f in self.flagged],
            "instrument": self.instrument,
            "normalization": "1 - mean_distance / sqrt(2)",
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> "DriResult":
        return cls(
            wave=doc["wave"],
            pair_points=[PairPoint(p["a"], p["b"], p["rho_c"], p["rho_p"]) for p in doc["pair_points"]],
            individual=dict(doc["individual"]),
            group=doc["group"],
            raw_mean_distance=doc["raw_mean_distance"],
            flagged=[FlaggedPair(f["a"], f["b"], f["reason"]) for f in doc.get("flagged", [])],
            instrument=doc.get("instrument"),
        )

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "DriResult":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def group_dri(
    points: Sequence[PairPoint],
    participants: Iterable[str] | None = None,
    wave: str = "pre",
    flagged: Sequence[FlaggedPair] = (),
    instrument: str | None = None,
) -> DriResult:
    """Unweighted mean of individual DRIs over participants with scored pairs."""
    if not points:
        raise SurveyError("no valid pairs to score")
    if participants is None:
        participants = sorted({p.a for p in points} | {p.b for p in points})
    participants = list(participants)
    individual = {}
    for pid in participants:
        if any(pid in (p.a, p.b) for p in points):
            individual[pid] = individual_dri(points, pid)
    if len(individual) < 2:
        raise SurveyError("need at least two participants with scored pairs")
    group = math.fsum(individual.values()) / len(individual)
    raw = math.fsum(p.distance for p in points) / len(points)
    return DriResult(wave, list(points), individual, group, raw, list(flagged), instrument)


def score_wave(
    responses: Sequence[SurveyResponse],
    instrument: SurveyInstrument,
    wave: str | None = None,
    permissive: bool = False,
    min_shared: int = 4,
) -> DriResult:
    if wave is not None:
        responses = [r for r in responses if r.wave == wave]
        if not responses:
            raise SurveyError(f"no responses for wave {wave!r}")
    wave = responses[0].wave if responses else wave
    points, flagged = pair_points(responses, instrument, permissive, min_shared)
    participants = sorted(r.participant_id for r in responses)
    return group_dri(points, participants, wave, flagged, instrument.fingerprint)


@dataclass
class DeltaReport:
    pre_wave: str
    post_wave: str
    group_delta: float
    raw_mean_distance_delta: float
    individual_delta: dict[str, float]
    pre_only: int
    post_only: int

    def to_dict(self) -> dict:
        return {
            "pre_wave": self.pre_wave,
            "post_wave": self.post_wave,
            "group_delta": self.group_delta,
            "raw_mean_distance_delta": self.raw_mean_distance_delta,
            "individual_delta": dict(sorted(self.individual_delta.items())),
            "pre_only": self.pre_only,
            "post_only": self.post_only,
        }


def dri_delta(pre: DriResult, post: DriResult) -> DeltaReport:
    if pre.instrument and post.instrument and pre.instrument != post.instrument:
        raise SurveyError("waves were scored against different instruments")
    both = sorted(set(pre.individual) & set(post.individual))
    if not both:
        raise SurveyError("pre and post share no participants")
    if len(both) < 2:
        raise SurveyError("pre and post share fewer than two participants", both)
    return DeltaReport(
        pre_wave=pre.wave,
        post_wave=post.wave,
        group_delta=post.group - pre.group,
        raw_mean_distance_delta=post.raw_mean_distance - pre.raw_mean_distance,
        individual_delta={pid: post.individual[pid] - pre.individual[pid] for pid in both},
        pre_only=len(set(pre.individual) - set(post.individual)),
        post_only=len(set(post.individual) - set(pre.individual)),
    )


SCATTER_COLUMNS = ("a", "b", "rho_c", "rho_p", "distance")


def export_scatter(result: DriResult, path) -> Path:
    """Write pair points as CSV plus a ``.meta.json`` sidecar with the x = y reference."""
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SCATTER_COLUMNS)
        for p in result.pair_points:
            w.writerow([p.a, p.b, repr(p.rho_c), repr(p.rho_p), repr(p.distance)])
    if not result.pair_points:
        logger.warning("no valid pairs; %s has a header only", path)
    meta = {
        "wave": result.wave,
        "x": "rho_c (agreement on considerations)",
        "y": "rho_p (agreement on preferences)",
        "reference_line": {"slope": 1.0, "intercept": 0.0},
        "signed_distance": [[p.a, p.b, p.signed_distance] for p in result.pair_points],
        "group_dri": result.group,
        "raw_mean_distance": result.raw_mean_distance,
    }
    with open(path.with_suffix(".meta.json"), "w", encoding="utf-8", newline="\n") as fh:
        json.dump(meta, fh, indent=2)
        fh.write("\n")
    return path


def load_responses(path, instrument: SurveyInstrument) -> list[SurveyResponse]:
    """Read responses from long-format CSV (participant_id,wave,item_id,value) or JSONL."""
    path = Path(path)
    if not path.exists():
        raise SurveyError(f"responses file not found: {path}", [str(path)])
    if path.suffix == ".jsonl":
        return [
            SurveyResponse(
                str(r["participant_id"]), r["wave"],
                dict(r["consideration_ratings"]), dict(r["preference_rankings"]),
            )
            for r in read_jsonl(path)
        ]
    cons, prefs = set(instrument.considerations), set(instrument.preferences)
    grouped: dict[tuple[str, str], tuple[dict, dict]] = {}
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        need = {"participant_id", "wave", "item_id", "value"}
        if reader.fieldnames is None or need - set(reader.fieldnames):
            raise SurveyError(f"{path}: CSV needs columns {','.join(sorted(need))}")
        for lineno, row in enumerate(reader, start=2):
            key = (row["participant_id"], row["wave"])
            ratings, rankings = grouped.setdefault(key, ({}, {}))
            item = row["item_id"]
            try:
                value = float(row["value"])
            except ValueError:
                raise SurveyError(f"{path}:{lineno}: non-numeric value {row['value']!r}") from None
            if item in cons:
                ratings[item] = value
            elif item in prefs:
                rankings[item] = value
            else:
                raise SurveyError(f"{path}:{lineno}: item {item!r} not in the instrument", [row["participant_id"]])
    return [SurveyResponse(pid, wave, r, k) for (pid, wave), (r, k) in grouped.items()]

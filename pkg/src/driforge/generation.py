"""Prompt construction, LLM statement generation, statement dedup and the review round-trip."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Iterable, Mapping, Protocol, Sequence

import httpx
import numpy as np

from ._io import canonical_json, read_jsonl
from .categorization import AnchorSet, Selection
from .corpus import LEANINGS
from .embedding import cosine_matrix
from .errors import ConfigError, GenerationError, ReviewError, TemplateError, TransportError

logger = logging.getLogger(__name__)

ROLES = ("considerations", "policy")
STATEMENT_ROLE = {"considerations": "consideration", "policy": "policy"}
PLACEHOLDERS = ("role_explanation", "leaning", "category", "statement_count", "exemplars")
_PLACEHOLDER = re.compile(r"\{\{\s*([A-Za-z_][A-Za-z0-9_]*)\s*\}\}")
_LIST_MARKUP = re.compile(r"^\s*(?:[-*•]|\d+[.)])\s")
_FENCE = re.compile(r"^```(?:json)?\s*|\s*```$")


def leaning_label(leaning: str) -> str:
    return leaning.replace("_", "-")


def render(template: str, values: Mapping[str, object]) -> str:
    """Substitute ``{{name}}`` placeholders; any left unresolved is an error."""
    unresolved = sorted({m.group(1) for m in _PLACEHOLDER.finditer(template) if m.group(1) not in values})
    if unresolved:
        raise TemplateError(f"unresolved template placeholders: {', '.join(unresolved)}", unresolved)
    return _PLACEHOLDER.sub(lambda m: str(values[m.group(1)]), template)


@dataclass(frozen=True)
class TemplateSet:
    system: Mapping[str, str]
    explanation: Mapping[str, str]

    @classmethod
    def load(cls, directory: str | os.PathLike | None = None) -> "TemplateSet":
        """Read ``<role>.system.txt`` and ``<role>.explanation.txt`` for both roles."""
        system, explanation = {}, {}
        for role in ROLES:
            if directory is None:
                base = resources.files("driforge") / "templates"
                system[role] = (base / f"{role}.system.txt").read_text(encoding="utf-8")
                explanation[role] = (base / f"{role}.explanation.txt").read_text(encoding="utf-8")
            else:
                d = Path(directory)
                try:
                    system[role] = (d / f"{role}.system.txt").read_text(encoding="utf-8")
                    explanation[role] = (d / f"{role}.explanation.txt").read_text(encoding="utf-8")
                except FileNotFoundError as exc:
                    raise ConfigError(f"missing template file: {exc.filename}") from None
        return cls(system, explanation)


@dataclass(frozen=True)
class PromptSpec:
    role: str
    category: str
    leaning: str
    system_prompt: str
    statement_count: int
    attachment: tuple[str, ...]
    exemplars: tuple[str, ...] = ()

    def __post_init__(self):
        if self.role not in ROLES:
            raise ConfigError(f"unknown role {self.role!r}")
        if self.statement_count < 1:
            raise ConfigError("statement_count must be >= 1")
        if not self.attachment:
            raise ConfigError(f"empty attachment for {self.category}/{self.leaning}")

    def user_message(self) -> str:
        kind = "consideration statements" if self.role == "considerations" else "policy options"
        lines = [
            f"Category: {self.category}",
            f"Leaning: {leaning_label(self.leaning)}",
            f"Task: produce exactly {self.statement_count} {kind} as a JSON array of strings.",
            "",
            "Attached source paragraphs, most relevant first:",
        ]
        for i, text in enumerate(self.attachment, start=1):
            lines.append(f"[{i}] {text}")
        return "\n".join(lines)

    def messages(self) -> list[dict]:
        return [
            {"role": "system", "content": self.system_prompt},
            {"role": "user", "content": self.user_message()},
        ]

    @property
    def prompt_hash(self) -> str:
        return hashlib.sha256(canonical_json(self.messages()).encode("utf-8")).hexdigest()

    def to_record(self) -> dict:
        return {
            "prompt_hash": self.prompt_hash,
            "role": self.role,
            "category": self.category,
            "leaning": self.leaning,
            "statement_count": self.statement_count,
            "messages": self.messages(),
        }


def build_prompt(
    role: str,
    category: str,
    leaning: str,
    selection: Selection,
    texts: Mapping[str, str],
    templates: TemplateSet,
    statement_count: int = 5,
    exemplars: Sequence[str] = (),
) -> PromptSpec:
    if (selection.category, selection.leaning) != (category, leaning):
        raise ConfigError(
            f"selection {selection.category}/{selection.leaning} does not match cell {category}/{leaning}"
        )
    missing = [pid for pid in selection.paragraph_ids if pid not in texts]
    if missing:
        raise ConfigError("selection references unknown paragraphs", missing)
    if role not in ROLES:
        raise ConfigError(f"unknown role {role!r}")
    system = render(
        templates.system[role],
        {
            "role_explanation": templates.explanation[role].strip(),
            "leaning": leaning_label(leaning),
            "category": category,
            "statement_count": statement_count,
            "exemplars": "\n".join(f"- {e}" for e in exemplars) if exemplars else "(none)",
        },
    )
    return PromptSpec(
        role=role,
        category=category,
        leaning=leaning,
        system_prompt=system,
        statement_count=statement_count,
        attachment=tuple(texts[pid] for pid in selection.paragraph_ids),
        exemplars=tuple(exemplars),
    )


def select_exemplars(
    bank: Sequence[str],
    anchor_texts: Sequence[str],
    embed: Callable[[list[str]], list[np.ndarray]] | None,
    m: int = 25,
) -> list[str]:
    """Top-``m`` bank entries by best cosine to any of the category's anchor texts."""
    if not bank or m < 1:
        return []
    if embed is None or len(bank) <= m:
        return list(bank[:m])
    vecs = np.asarray(embed(list(anchor_texts) + list(bank)))
    sims = cosine_matrix(vecs[len(anchor_texts) :], vecs[: len(anchor_texts)]).max(axis=1)
    order = sorted(range(len(bank)), key=lambda i: (-sims[i], i))[:m]
    return [bank[i] for i in order]


class ChatClient(Protocol):
    def complete(self, messages: list[dict]) -> str: ...


class HttpChatClient:
    """Client for an OpenAI-compatible ``/chat/completions`` endpoint."""

    def __init__(
        self,
        base_url: str,
        model: str,
        api_key: str | None = None,
        temperature: float = 0.2,
        timeout: float = 120.0,
        client: httpx.Client | None = None,
    ):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.temperature = temperature
        self._headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self._client = client or httpx.Client(timeout=timeout)

    @classmethod
    def from_env(cls, model: str, **kw) -> "HttpChatClient":
        url = os.environ.get("DRIFORGE_LLM_URL")
        if not url:
            raise ConfigError("DRIFORGE_LLM_URL is not set")
        return cls(url, model, api_key=os.environ.get("DRIFORGE_LLM_KEY"), **kw)

    def complete(self, messages: list[dict]) -> str:
        payload = {"model": self.model, "messages": messages, "temperature": self.temperature}
        try:
            resp = self._client.post(f"{self.base_url}/chat/completions", json=payload, headers=self._headers)
        except httpx.HTTPError as exc:
            raise TransportError(f"chat request failed: {exc}") from exc
        if resp.status_code != 200:
            raise TransportError(f"chat endpoint returned {resp.status_code}: {resp.text[:200]}")
        try:
            return resp.json()["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError, ValueError) as exc:
            raise TransportError(f"unexpected chat response shape: {exc}") from exc


class ScriptedChatClient:
    """Replays a fixed transcript. Exceptions in the script are raised instead of returned."""

    def __init__(self, responses: Iterable[str | Exception]):
        self._responses = list(responses)
        self.calls: list[list[dict]] = []

    def complete(self, messages: list[dict]) -> str:
        self.calls.append([dict(m) for m in messages])
        if not self._responses:
            raise TransportError("scripted client ran out of responses")
        nxt = self._responses.pop(0)
        if isinstance(nxt, Exception):
            raise nxt
        return nxt


class MockChatClient:
    """Deterministic offline generator that honours the requested statement count.

    Statements are stitched from the attached paragraphs, so different cells
    yield different text and identical prompts yield identical text.
    """

    def __init__(self):
        self.calls = 0

    def complete(self, messages: list[dict]) -> str:
        self.calls += 1
        user = messages[-1]["content"] if messages[-1]["role"] == "user" else messages[1]["content"]
        n = int(re.search(r"exactly (\d+)", user).group(1))
        category = re.search(r"^Category: (.*)$", user, re.M).group(1)
        leaning = re.search(r"^Leaning: (.*)$", user, re.M).group(1)
        kind = "policy" if "policy options" in user else "consideration"
        paragraphs = re.findall(r"^\[\d+\] (.*)$", user, re.M) or [category]
        out = []
        for i in range(n):
            words = paragraphs[i % len(paragraphs)].split()[:10]
            out.append(f"{kind.capitalize()} {i + 1} ({category}, {leaning}): {' '.join(words)}")
        return json.dumps(out, ensure_ascii=False)


@dataclass(frozen=True)
class GeneratedStatement:
    id: str
    role: str
    text: str
    category: str
    leaning: str
    run_id: str
    prompt_hash: str

    def to_record(self) -> dict:
        return asdict(self)

    @classmethod
    def from_record(cls, rec: Mapping) -> "GeneratedStatement":
        return cls(**{k: rec[k] for k in ("id", "role", "text", "category", "leaning", "run_id", "prompt_hash")})


def parse_statements(raw: str, expected: int) -> list[str]:
    """Parse a flat JSON array of exactly ``expected`` single-statement strings."""
    text = _FENCE.sub("", raw.strip())
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValueError(f"response is not valid JSON ({exc.msg})") from None
    if not isinstance(data, list):
        raise ValueError("response is not a JSON array")
    if len(data) != expected:
        raise ValueError(f"expected {expected} statements, got {len(data)}")
    out = []
    for i, item in enumerate(data):
        if not isinstance(item, str) or not item.strip():
            raise ValueError(f"element {i} is not a non-empty string")
        item = item.strip()
        if "\n" in item or _LIST_MARKUP.match(item):
            raise ValueError(f"element {i} contains list markup or several lines")
        out.append(item)
    return out


def _statement_id(run_id: str, prompt_hash: str, index: int) -> str:
    return "s" + hashlib.sha256(f"{run_id}|{prompt_hash}|{index}".encode()).hexdigest()[:12]


def generate(
    prompt: PromptSpec,
    client: ChatClient,
    run_id: str = "run-1",
    max_attempts: int = 3,
    transport_attempts: int = 3,
    backoff: float = 1.0,
    sleep: Callable[[float], None] = time.sleep,
) -> list[GeneratedStatement]:
    """Ask ``client`` for the prompt's statements, re-asking on schema violations.

    After a malformed reply the conversation continues with the bad reply and a
    correction instruction. ``max_attempts`` bounds the total number of replies.
    """
    messages = prompt.messages()
    transcripts: list[str] = []
    for attempt in range(1, max_attempts + 1):
        for t in range(1, transport_attempts + 1):
            try:
                raw = client.complete(messages)
                break
            except TransportError as exc:
                if t == transport_attempts:
                    raise
                logger.warning("chat transport attempt %d failed: %s", t, exc)
                sleep(backoff * 2 ** (t - 1))
        transcripts.append(raw)
        try:
            texts = parse_statements(raw, prompt.statement_count)
        except ValueError as exc:
            logger.info("malformed reply for %s/%s (attempt %d): %s", prompt.category, prompt.leaning, attempt, exc)
            messages = messages + [
                {"role": "assistant", "content": raw},
                {
                    "role": "user",
                    "content": f"That reply was invalid: {exc}. Answer again with only a JSON array "
                    f"of exactly {prompt.statement_count} strings.",
                },
            ]
            continue
        h = prompt.prompt_hash
        return [
            GeneratedStatement(
                id=_statement_id(run_id, h, i),
                role=STATEMENT_ROLE[prompt.role],
                text=text,
                category=prompt.category,
                leaning=prompt.leaning,
                run_id=run_id,
                prompt_hash=h,
            )
            for i, text in enumerate(texts)
        ]
    raise GenerationError(
        f"no valid reply for {prompt.role}/{prompt.category}/{prompt.leaning} after {max_attempts} attempts",
        [f"{prompt.category}/{prompt.leaning}"],
        transcripts,
    )


@dataclass
class GenerationConfig:
    statement_count: int = 5
    leanings: tuple[str, ...] = LEANINGS
    policy_scope: str = "general"
    runs: int = 1
    max_attempts: int = 3
    parallelism: int = 1
    strict: bool = False
    exemplar_m: int = 25

    def __post_init__(self):
        if self.policy_scope not in ("general", "all"):
            raise ConfigError(f"policy_scope must be 'general' or 'all', not {self.policy_scope!r}")
        if self.runs < 1 or self.statement_count < 1:
            raise ConfigError("runs and statement_count must be >= 1")
        unknown = [l for l in self.leanings if l not in LEANINGS]
        if unknown:
            raise ConfigError("unknown leanings", unknown)


@dataclass
class MatrixResult:
    statements: list[GeneratedStatement]
    prompts: list[dict]
    failures: list[dict] = field(default_factory=list)

    def totals(self) -> dict:
        counts = {r: 0 for r in STATEMENT_ROLE.values()}
        for s in self.statements:
            counts[s.role] += 1
        return {
            "considerations": counts["consideration"],
            "policies": counts["policy"],
            "prompts": len(self.prompts),
            "failed_cells": len(self.failures),
        }


def matrix_cells(anchors: AnchorSet, config: GenerationConfig) -> list[tuple[str, str, str]]:
    """(role, category, leaning) cells in output order."""
    if config.policy_scope == "general":
        general = anchors.general
        if general is None:
            raise ConfigError("policy scope 'general' needs a general category in the anchor set")
        policy_cats = [general.name]
    else:
        policy_cats = anchors.names
    cells = []
    for cat in anchors.names:
        for leaning in config.leanings:
            cells.append(("considerations", cat, leaning))
            if cat in policy_cats:
                cells.append(("policy", cat, leaning))
    return cells


def run_matrix(
    anchors: AnchorSet,
    selections: Mapping[tuple[str, str], Selection],
    texts: Mapping[str, str],
    client: ChatClient,
    config: GenerationConfig = GenerationConfig(),
    templates: TemplateSet | None = None,
    exemplar_banks: Mapping[str, Sequence[str]] | None = None,
    embed: Callable[[list[str]], list[np.ndarray]] | None = None,
) -> MatrixResult:
    """Generate statements for every (role, category, leaning) cell and every run."""
    templates = templates or TemplateSet.load()
    cells = matrix_cells(anchors, config)
    missing = [f"{c}/{l}" for _, c, l in cells if (c, l) not in selections]
    if missing and config.strict:
        raise GenerationError("selections missing for some cells", sorted(set(missing)))

    exemplars: dict[tuple[str, str], list[str]] = {}
    for role, cat, _ in cells:
        if (role, cat) not in exemplars:
            bank = (exemplar_banks or {}).get(role, ())
            exemplars[(role, cat)] = select_exemplars(
                bank, list(anchors[cat].variants.values()), embed, config.exemplar_m
            )

    jobs = []
    for run in range(1, config.runs + 1):
        for role, cat, leaning in cells:
            if (cat, leaning) in selections:
                jobs.append((f"run-{run}", role, cat, leaning))

    def work(job):
        run_id, role, cat, leaning = job
        prompt = build_prompt(
            role, cat, leaning, selections[(cat, leaning)], texts, templates,
            config.statement_count, exemplars[(role, cat)],
        )
        try:
            return prompt, generate(prompt, client, run_id, config.max_attempts), None
        except (GenerationError, TransportError) as exc:
            return prompt, [], exc

    if config.parallelism > 1:
        with ThreadPoolExecutor(max_workers=config.parallelism) as pool:
            outcomes = list(pool.map(work, jobs))
    else:
        outcomes = [work(j) for j in jobs]

    statements: list[GeneratedStatement] = []
    prompts: dict[str, dict] = {}
    failures = [{"cell": m, "run_id": None, "error": "no selection"} for m in missing]
    for job, (prompt, stmts, exc) in zip(jobs, outcomes):
        prompts.setdefault(prompt.prompt_hash, prompt.to_record())
        if exc is not None:
            if config.strict:
                raise exc
            failures.append({"cell": f"{job[2]}/{job[3]}", "role": job[1], "run_id": job[0], "error": str(exc)})
        statements.extend(stmts)
    return MatrixResult(statements, list(prompts.values()), failures)


def dedup_statements(
    statements: Sequence[GeneratedStatement],
    embed: Callable[[list[str]], list[np.ndarray]],
    threshold: float = 0.95,
) -> tuple[list[GeneratedStatement], dict[str, list[str]]]:
    """Greedy near-duplicate grouping in generation order.

    A statement within ``threshold`` cosine of an already kept statement joins
    the group of the most similar such statement instead of being kept.
    """
    if not 0.0 < threshold <= 1.0:
        raise ValueError("threshold must be in (0, 1]")
    if not statements:
        return [], {}
    vecs = np.asarray(embed([s.text for s in statements]), dtype=np.float64)
    sims = cosine_matrix(vecs, vecs)
    kept: list[int] = []
    groups: dict[str, list[str]] = {}
    for i, s in enumerate(statements):
        if kept:
            row = sims[i, kept]
            j = int(np.argmax(row))
            # tolerance so identical texts still group at threshold 1.0 despite rounding
            if row[j] >= threshold - 1e-12:
                groups[statements[kept[j]].id].append(s.id)
                continue
        kept.append(i)
        groups[s.id] = []
    return [statements[i] for i in kept], {k: v for k, v in groups.items() if v}


REVIEW_COLUMNS = ("statement_id", "text", "category", "leaning", "decision", "edited_text")
DECISIONS = ("keep", "drop", "edit")


@dataclass(frozen=True)
class ReviewRow:
    statement_id: str
    text: str
    category: str
    leaning: str
    decision: str = "keep"
    edited_text: str | None = None


def review_export(
    statements: Sequence[GeneratedStatement], path, decisions: Mapping[str, str] | None = None
) -> int:
    """Write the review sheet; every statement defaults to ``keep``."""
    decisions = decisions or {}
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REVIEW_COLUMNS)
        for s in statements:
            w.writerow([s.id, s.text, s.category, s.leaning, decisions.get(s.id, "keep"), ""])
    return len(statements)


def read_review_sheet(path) -> list[ReviewRow]:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or set(REVIEW_COLUMNS) - set(reader.fieldnames):
            raise ReviewError(f"{path}: review sheet needs columns {','.join(REVIEW_COLUMNS)}")
        return [
            ReviewRow(
                r["statement_id"], r["text"], r["category"], r["leaning"],
                r["decision"].strip().lower(), r["edited_text"] or None,
            )
            for r in reader
        ]


def review_import(
    rows: Sequence[ReviewRow],
    statements: Sequence[GeneratedStatement],
    scale: tuple[int, int] = (-4, 4),
    ranking_mode: str = "strict_permutation",
) -> dict:
    """Apply review decisions and produce the final survey instrument.

    Every generated statement must appear exactly once. Kept and edited
    statements get ordinal ids (C01.., P01..) in sheet order.
    """
    by_id = {s.id: s for s in statements}
    seen: dict[str, int] = {}
    problems: list[str] = []
    for row in rows:
        seen[row.statement_id] = seen.get(row.statement_id, 0) + 1
        if row.statement_id not in by_id:
            problems.append(f"unknown:{row.statement_id}")
        if row.decision not in DECISIONS:
            problems.append(f"bad_decision:{row.statement_id}")
        elif row.decision == "edit" and not (row.edited_text or "").strip():
            problems.append(f"edit_without_text:{row.statement_id}")
    problems += [f"duplicate:{sid}" for sid, n in seen.items() if n > 1]
    problems += [f"missing:{sid}" for sid in by_id if sid not in seen]
    if problems:
        raise ReviewError(f"review sheet has {len(problems)} discrepancies", problems)

    considerations, policies = [], []
    for row in rows:
        if row.decision == "drop":
            continue
        s = by_id[row.statement_id]
        target = considerations if s.role == "consideration" else policies
        prefix = "C" if s.role == "consideration" else "P"
        target.append(
            {
                "id": f"{prefix}{len(target) + 1:02d}",
                "statement_id": s.id,
                "text": row.edited_text.strip() if row.decision == "edit" else s.text,
                "category": s.category,
                "leaning": s.leaning,
                "edited": row.decision == "edit",
            }
        )
    return {
        "considerations": [c["id"] for c in considerations],
        "preferences": [p["id"] for p in policies],
        "scale": {"min": scale[0], "max": scale[1]},
        "ranking_mode": ranking_mode,
        "items": {"considerations": considerations, "preferences": policies},
    }


def load_statements(path) -> list[GeneratedStatement]:
    return [GeneratedStatement.from_record(r) for r in read_jsonl(path)]

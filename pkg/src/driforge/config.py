"""Declarative run configuration loaded from TOML.

Relative paths resolve against the directory holding the config file. Only
secrets come from the environment (``DRIFORGE_EMBED_KEY``, ``DRIFORGE_LLM_KEY``)
along with endpoint URLs when not given in the file.
"""

from __future__ import annotations

import os
import sys
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from ._io import canonical_json, sha256_text, slug
from .corpus import LEANINGS
from .embedding import DEFAULT_DIM, UMAP_PROVENANCE, EmbeddingCache, HashingEmbedder, HttpEmbedder, ReductionSpec, embed_batch
from .errors import ConfigError
from .generation import GenerationConfig, HttpChatClient, MockChatClient

REQUIRED_PATHS = ("articles", "keywords", "leanings", "anchors")
OPTIONAL_PATHS = (
    "templates", "instrument", "responses", "reference", "judgments",
    "review_decisions", "exemplars_considerations", "exemplars_policy",
)


def _section(doc: dict, name: str) -> dict:
    sec = doc.get(name, {})
    if not isinstance(sec, dict):
        raise ConfigError(f"[{name}] must be a table")
    return sec


def _date(value, key: str) -> date:
    if isinstance(value, date):
        return value
    try:
        return date.fromisoformat(str(value))
    except ValueError:
        raise ConfigError(f"{key} is not a YYYY-MM-DD date: {value!r}") from None


@dataclass
class RunConfig:
    base_dir: Path
    output: Path
    paths: dict[str, Path]
    window: tuple[date, date] = (date(2018, 1, 1), date(2024, 8, 29))
    strict: bool = False
    embedding: dict = field(default_factory=dict)
    reduction: ReductionSpec = field(default_factory=ReductionSpec)
    aggregate: str = "max"
    k: int = 500
    leanings: tuple[str, ...] = LEANINGS
    overlap_ks: tuple[int, ...] = (10, 100, 500)
    generation: GenerationConfig = field(default_factory=GenerationConfig)
    llm: dict = field(default_factory=dict)
    dedup_threshold: float = 0.95
    permissive_missing: bool = False
    min_shared_items: int = 4
    candidates: int = 5
    histogram_bins: int = 100
    raw: dict = field(default_factory=dict)

    @property
    def config_hash(self) -> str:
        """Hash of the declared settings; the output location is not part of it."""
        doc = {k: v for k, v in self.raw.items()}
        paths = dict(doc.get("paths", {}))
        paths.pop("output", None)
        doc["paths"] = paths
        return sha256_text(canonical_json(doc))

    def path(self, name: str) -> Path | None:
        return self.paths.get(name)

    def validate(self) -> None:
        missing = [f"{k}={p}" for k, p in self.paths.items() if not p.exists()]
        if missing:
            raise ConfigError("configured paths do not exist", missing)
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if not 0.0 < self.dedup_threshold <= 1.0:
            raise ConfigError("dedup threshold must lie in (0, 1]")
        bad = [l for l in self.leanings if l not in LEANINGS]
        if bad:
            raise ConfigError("unknown leanings", bad)

    @classmethod
    def from_dict(cls, doc: dict, base_dir: Path) -> "RunConfig":
        base_dir = Path(base_dir)
        p = _section(doc, "paths")
        missing = [k for k in REQUIRED_PATHS if not p.get(k)]
        if missing:
            raise ConfigError("missing required [paths] entries", missing)
        paths = {k: (base_dir / p[k]).resolve() for k in REQUIRED_PATHS + OPTIONAL_PATHS if p.get(k)}
        output = (base_dir / p.get("output", "out")).resolve()
        cache = p.get("embedding_cache")
        if cache:
            paths["embedding_cache"] = (base_dir / cache).resolve()

        ing = _section(doc, "ingest")
        window = (_date(ing.get("from", "2018-01-01"), "ingest.from"), _date(ing.get("to", "2024-08-29"), "ingest.to"))

        emb = _section(doc, "embedding")
        embedding = {
            "provider": emb.get("provider", "hashing"),
            "model": emb.get("model", "hashed-bow-v1"),
            "dim": int(emb.get("dim", DEFAULT_DIM)),
            "batch_size": int(emb.get("batch_size", 64)),
            "max_attempts": int(emb.get("max_attempts", 3)),
            "parallelism": int(emb.get("parallelism", 1)),
            "url": emb.get("url"),
        }
        if embedding["provider"] not in ("hashing", "http"):
            raise ConfigError(f"embedding.provider must be 'hashing' or 'http', not {embedding['provider']!r}")

        red = _section(doc, "reduction")
        method = red.get("method", "none")
        import_path = red.get("import_path")
        params = dict(red.get("params", UMAP_PROVENANCE if method == "external_import" else {}))
        reduction = ReductionSpec(
            method=method,
            target_dim=int(red.get("target_dim", 50)),
            params=params,
            import_path=str((base_dir / import_path).resolve()) if import_path else None,
        )

        sel = _section(doc, "select")
        k = int(sel.get("k", 500))
        leanings = tuple(sel.get("leanings", LEANINGS))

        gen = _section(doc, "generation")
        generation = GenerationConfig(
            statement_count=int(gen.get("statement_count", 5)),
            leanings=leanings,
            policy_scope=gen.get("policy_scope", "general"),
            runs=int(gen.get("runs", 1)),
            max_attempts=int(gen.get("max_attempts", 3)),
            parallelism=int(gen.get("parallelism", 1)),
            strict=bool(doc.get("strict", False)),
            exemplar_m=int(gen.get("exemplar_m", 25)),
        )
        llm = {
            "provider": gen.get("provider", "mock"),
            "model": gen.get("model", "mock"),
            "temperature": float(gen.get("temperature", 0.2)),
            "url": gen.get("url"),
        }
        if llm["provider"] not in ("mock", "http"):
            raise ConfigError(f"generation.provider must be 'mock' or 'http', not {llm['provider']!r}")

        score = _section(doc, "score")
        return cls(
            base_dir=base_dir,
            output=output,
            paths=paths,
            window=window,
            strict=bool(doc.get("strict", False)) or bool(ing.get("strict", False)),
            embedding=embedding,
            reduction=reduction,
            aggregate=_section(doc, "categorize").get("aggregate", "max"),
            k=k,
            leanings=leanings,
            overlap_ks=tuple(int(x) for x in sel.get("overlap_ks", (10, 100, k))),
            generation=generation,
            llm=llm,
            dedup_threshold=float(gen.get("dedup_threshold", 0.95)),
            permissive_missing=bool(score.get("permissive_missing", False)),
            min_shared_items=int(score.get("min_shared_items", 4)),
            candidates=int(_section(doc, "validate").get("candidates", 5)),
            histogram_bins=int(_section(doc, "report").get("histogram_bins", 100)),
            raw=_jsonable(doc),
        )

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            with open(path, "rb") as fh:
                doc = tomllib.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}", [str(path)]) from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        return cls.from_dict(doc, path.parent)

    def embedder(self):
        e = self.embedding
        if e["provider"] == "hashing":
            return HashingEmbedder(e["dim"], e["model"])
        url = e["url"] or os.environ.get("DRIFORGE_EMBED_URL")
        if not url:
            raise ConfigError("http embedding needs embedding.url or DRIFORGE_EMBED_URL")
        return HttpEmbedder(url, e["model"], e["dim"], api_key=os.environ.get("DRIFORGE_EMBED_KEY"))

    def embed_fn(self):
        """A ``texts -> vectors`` callable bound to the configured provider and cache."""
        provider = self.embedder()
        cache_path = self.paths.get("embedding_cache")
        if cache_path is not None:
            cache_path = cache_path.with_name(
                f"{cache_path.stem}.{provider.provider_id}.{slug(provider.model_id)}{cache_path.suffix or '.bin'}"
            )
        cache = EmbeddingCache.for_provider(provider, cache_path)
        e = self.embedding

        def embed(texts):
            return embed_batch(
                texts, provider, cache,
                batch_size=e["batch_size"], max_attempts=e["max_attempts"], parallelism=e["parallelism"],
            )

        return embed

    def chat_client(self):
        if self.llm["provider"] == "mock":
            return MockChatClient()
        url = self.llm["url"] or os.environ.get("DRIFORGE_LLM_URL")
        if not url:
            raise ConfigError("http generation needs generation.url or DRIFORGE_LLM_URL")
        return HttpChatClient(
            url, self.llm["model"], api_key=os.environ.get("DRIFORGE_LLM_KEY"), temperature=self.llm["temperature"]
        )


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, date):
        return obj.isoformat()
    return obj

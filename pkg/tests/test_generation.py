import json

import httpx
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from driforge.categorization import AnchorSet, Category, Selection
from driforge.corpus import LEANINGS
from driforge.embedding import EmbeddingCache, HashingEmbedder, cosine, embed_batch
from driforge.errors import ConfigError, GenerationError, ReviewError, TemplateError, TransportError
from driforge.generation import (
    GeneratedStatement,
    GenerationConfig,
    HttpChatClient,
    MockChatClient,
    ReviewRow,
    ScriptedChatClient,
    TemplateSet,
    build_prompt,
    dedup_statements,
    generate,
    parse_statements,
    read_review_sheet,
    render,
    review_export,
    review_import,
    run_matrix,
    select_exemplars,
)

TEMPLATES = TemplateSet.load()


def _embed():
    p = HashingEmbedder(384)
    cache = EmbeddingCache.for_provider(p)
    return lambda texts: embed_batch(texts, p, cache)


def _selection(cat="general", leaning="centrist", n=3):
    ids = tuple(f"p{i}" for i in range(n))
    return Selection(cat, leaning, n, ids, tuple(1.0 - i / 10 for i in range(n)))


TEXTS = {f"p{i}": f"Paragraph {i} about hospital costs and premiums" for i in range(600)}


def _prompt(role="considerations", cat="general", leaning="centrist", n=3):
    return build_prompt(role, cat, leaning, _selection(cat, leaning, n), TEXTS, TEMPLATES)


def _anchors(n_cats=8):
    return AnchorSet(
        [Category(f"cat{i}", is_general=i == n_cats - 1, variants={"de": f"anker {i}"}) for i in range(n_cats)]
    )


def _selections(anchors, leanings=LEANINGS, n=4):
    return {(c, l): _selection(c, l, n) for c in anchors.names for l in leanings}


def _valid(n=5, tag="s"):
    return json.dumps([f"{tag} statement {i}" for i in range(n)])


class TestTemplates:
    def test_render(self):
        assert render("a {{x}} b {{ y }}", {"x": 1, "y": "z"}) == "a 1 b z"

    def test_unresolved(self):
        with pytest.raises(TemplateError) as info:
            render("{{x}} {{missing}}", {"x": 1})
        assert info.value.offending_ids == ["missing"]

    def test_shipped_templates_have_all_placeholders(self):
        for role in ("considerations", "policy"):
            for name in ("role_explanation", "leaning", "category", "statement_count", "exemplars"):
                assert "{{" + name + "}}" in TEMPLATES.system[role]

    def test_custom_template_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            TemplateSet.load(tmp_path)

    def test_custom_template_unknown_placeholder(self, tmp_path):
        for role in ("considerations", "policy"):
            (tmp_path / f"{role}.system.txt").write_text("{{category}} {{mystery}}")
            (tmp_path / f"{role}.explanation.txt").write_text("x")
        with pytest.raises(TemplateError):
            _prompt_with(TemplateSet.load(tmp_path))


def _prompt_with(templates):
    return build_prompt("considerations", "general", "centrist", _selection(), TEXTS, templates)


class TestBuildPrompt:
    def test_considerations_five_json(self):
        p = build_prompt("considerations", "general", "centrist", _selection(n=500), TEXTS, TEMPLATES)
        user = p.user_message()
        assert "exactly 5 consideration statements" in user and "JSON" in user
        assert len(p.attachment) == 500
        assert "centrist" in p.system_prompt and "{{" not in p.system_prompt

    def test_policy_five_options(self):
        p = _prompt("policy", leaning="left")
        assert "exactly 5 policy options" in p.user_message()
        assert "Leaning: left" in p.user_message()

    def test_hash_deterministic_and_sensitive(self):
        assert _prompt().prompt_hash == _prompt().prompt_hash
        assert _prompt().prompt_hash != _prompt(leaning="left").prompt_hash
        assert _prompt(n=3).prompt_hash != _prompt(n=4).prompt_hash

    def test_attachment_in_rank_order(self):
        sel = Selection("general", "centrist", 2, ("p5", "p1"), (0.9, 0.8))
        p = build_prompt("considerations", "general", "centrist", sel, TEXTS, TEMPLATES)
        assert p.attachment == (TEXTS["p5"], TEXTS["p1"])

    def test_mismatched_selection(self):
        with pytest.raises(ConfigError):
            build_prompt("considerations", "general", "left", _selection(), TEXTS, TEMPLATES)

    def test_exemplars_rendered(self):
        p = build_prompt("considerations", "general", "centrist", _selection(), TEXTS, TEMPLATES, exemplars=["Ex one"])
        assert "- Ex one" in p.system_prompt


class TestParse:
    def test_ok_and_fenced(self):
        assert parse_statements('```json\n["a", "b"]\n```', 2) == ["a", "b"]

    @pytest.mark.parametrize(
        "raw", ["Here you go: a, b", '{"a": 1}', '["a"]', '["a", 3]', '["a", "- b"]', '["a", "x\\ny"]', '["a", "  "]']
    )
    def test_rejects(self, raw):
        with pytest.raises(ValueError):
            parse_statements(raw, 2)


class TestGenerate:
    def test_happy_path(self):
        client = ScriptedChatClient([_valid()])
        out = generate(_prompt(), client)
        assert [s.text for s in out] == [f"s statement {i}" for i in range(5)]
        assert all(s.prompt_hash == _prompt().prompt_hash and s.role == "consideration" for s in out)
        assert len({s.id for s in out}) == 5

    def test_four_then_five(self):
        client = ScriptedChatClient([_valid(4), _valid(5)])
        out = generate(_prompt(), client)
        assert len(out) == 5 and len(client.calls) == 2
        correction = client.calls[1][-1]
        assert correction["role"] == "user" and "exactly 5" in correction["content"]
        assert client.calls[1][-2] == {"role": "assistant", "content": _valid(4)}

    def test_prose_three_times(self):
        client = ScriptedChatClient(["Sure! Here are some thoughts."] * 3)
        with pytest.raises(GenerationError) as info:
            generate(_prompt(), client)
        assert info.value.transcripts == ["Sure! Here are some thoughts."] * 3
        assert len(client.calls) == 3

    def test_transport_retry(self):
        sleeps = []
        client = ScriptedChatClient([TransportError("503"), _valid()])
        assert len(generate(_prompt(), client, sleep=sleeps.append)) == 5
        assert sleeps == [1.0]

    def test_transport_exhausted(self):
        client = ScriptedChatClient([TransportError("x")] * 3)
        with pytest.raises(TransportError):
            generate(_prompt(), client, sleep=lambda _: None)

    def test_http_client_wire(self):
        seen = {}

        def handler(request):
            seen.update(json.loads(request.content))
            seen["path"] = request.url.path
            return httpx.Response(200, json={"choices": [{"message": {"content": _valid()}}]})

        client = HttpChatClient("http://llm/v1", "gpt-x", client=httpx.Client(transport=httpx.MockTransport(handler)))
        assert len(generate(_prompt(), client)) == 5
        assert seen["path"] == "/v1/chat/completions" and seen["model"] == "gpt-x" and seen["temperature"] == 0.2
        assert [m["role"] for m in seen["messages"]] == ["system", "user"]

    def test_http_error_status(self):
        client = HttpChatClient("http://llm", "m", client=httpx.Client(transport=httpx.MockTransport(lambda r: httpx.Response(500))))
        with pytest.raises(TransportError):
            client.complete([{"role": "user", "content": "x"}])


class TestRunMatrix:
    def test_full_matrix_totals(self):
        anchors = _anchors()
        res = run_matrix(anchors, _selections(anchors), TEXTS, MockChatClient(), templates=TEMPLATES)
        assert res.totals() == {"considerations": 200, "policies": 25, "prompts": 45, "failed_cells": 0}
        assert {s.category for s in res.statements if s.role == "policy"} == {"cat7"}

    def test_minimal_matrix(self):
        anchors = AnchorSet([Category("g", is_general=True, variants={"de": "x"})])
        cfg = GenerationConfig(leanings=("centrist",))
        res = run_matrix(anchors, {("g", "centrist"): _selection("g")}, TEXTS, MockChatClient(), cfg, TEMPLATES)
        assert res.totals()["considerations"] == 5 and res.totals()["policies"] == 5

    def test_policy_scope_all_and_runs(self):
        anchors = _anchors(2)
        cfg = GenerationConfig(policy_scope="all", runs=2, leanings=("left", "right"))
        res = run_matrix(anchors, _selections(anchors, ("left", "right")), TEXTS, MockChatClient(), cfg, TEMPLATES)
        assert res.totals()["considerations"] == 2 * 2 * 5 * 2
        assert res.totals()["policies"] == 2 * 2 * 5 * 2
        assert {s.run_id for s in res.statements} == {"run-1", "run-2"}
        assert len({s.id for s in res.statements}) == len(res.statements)

    def test_missing_cell_listed(self):
        anchors = _anchors(2)
        sels = _selections(anchors)
        del sels[("cat0", "left")]
        res = run_matrix(anchors, sels, TEXTS, MockChatClient(), templates=TEMPLATES)
        assert res.totals()["considerations"] == 45
        assert res.failures[0]["cell"] == "cat0/left"
        with pytest.raises(GenerationError):
            run_matrix(anchors, sels, TEXTS, MockChatClient(), GenerationConfig(strict=True), TEMPLATES)

    def test_failed_cell_itemized(self):
        anchors = AnchorSet([Category("g", is_general=True, variants={"de": "x"})])
        cfg = GenerationConfig(leanings=("centrist",))
        client = ScriptedChatClient([_valid(), "nope", "nope", "nope"])
        res = run_matrix(anchors, {("g", "centrist"): _selection("g")}, TEXTS, client, cfg, TEMPLATES)
        assert res.totals() == {"considerations": 5, "policies": 0, "prompts": 2, "failed_cells": 1}
        assert res.failures[0]["role"] == "policy"

    def test_order_and_provenance(self):
        anchors = _anchors(3)
        res = run_matrix(anchors, _selections(anchors), TEXTS, MockChatClient(), GenerationConfig(parallelism=4), TEMPLATES)
        serial = run_matrix(anchors, _selections(anchors), TEXTS, MockChatClient(), templates=TEMPLATES)
        assert res.statements == serial.statements
        hashes = {p["prompt_hash"] for p in res.prompts}
        assert all(s.prompt_hash in hashes for s in res.statements)
        keys = [(s.category, s.leaning) for s in res.statements]
        assert keys == sorted(keys, key=lambda k: (anchors.names.index(k[0]), LEANINGS.index(k[1])))

    def test_general_scope_needs_general(self):
        anchors = AnchorSet([Category("a", variants={"de": "x"})])
        with pytest.raises(ConfigError):
            run_matrix(anchors, {}, TEXTS, MockChatClient(), templates=TEMPLATES)


class TestExemplars:
    def test_top_m_by_similarity(self):
        bank = ["hospital beds shortage", "football results", "hospital staff hospital beds", "weather"]
        out = select_exemplars(bank, ["hospital beds"], _embed(), m=2)
        # (2*1 + 1*1) / (sqrt(6) * sqrt(2)) = 0.866 beats 2 / (sqrt(3) * sqrt(2)) = 0.816
        assert out == ["hospital staff hospital beds", "hospital beds shortage"]

    def test_small_bank_passthrough(self):
        assert select_exemplars(["a", "b"], ["x"], None, m=25) == ["a", "b"]


def _stmts(texts, role="consideration"):
    return [GeneratedStatement(f"s{i:03d}", role, t, "c", "centrist", "run-1", "h") for i, t in enumerate(texts)]


class TestDedup:
    def test_identical(self):
        kept, groups = dedup_statements(_stmts(["same words here", "same words here"]), _embed())
        assert [s.id for s in kept] == ["s000"] and groups == {"s000": ["s001"]}

    def test_distinct_nothing_dropped(self):
        texts = ["alpha beta gamma", "delta epsilon zeta", "eta theta iota", "kappa lambda mu"]
        embed = _embed()
        vecs = embed(texts)
        assert max(cosine(vecs[i], vecs[j]) for i in range(4) for j in range(i + 1, 4)) < 0.5
        kept, groups = dedup_statements(_stmts(texts), embed)
        assert len(kept) == 4 and groups == {}

    def test_planted_paraphrase(self):
        embed = _embed()
        # keep only tokens landing in distinct hash buckets so the count-vector oracle is exact
        tokens, used = [], set()
        for i in range(200):
            bucket = int(np.argmax(embed([f"w{i}"])[0]))
            if bucket not in used:
                used.add(bucket)
                tokens.append(f"w{i}")
        words, spare = tokens[:33], tokens[33]
        a = " ".join(words)
        b = " ".join(words[:-1] + [spare])
        sim = cosine(*embed([a, b]))
        # 32 shared of 33 distinct tokens each: 32/33
        assert sim == pytest.approx(32 / 33, abs=1e-9) and round(sim, 2) == 0.97
        kept, groups = dedup_statements(_stmts([a, b]), embed, 0.95)
        assert len(kept) == 1 and groups == {"s000": ["s001"]}

    def test_bad_threshold(self):
        with pytest.raises(ValueError):
            dedup_statements(_stmts(["a"]), _embed(), 0.0)

    @settings(max_examples=25, deadline=None)
    @given(st.lists(st.lists(st.sampled_from("abcdefg"), min_size=1, max_size=5), min_size=1, max_size=8), st.floats(0.3, 0.99), st.floats(0.3, 0.99))
    def test_threshold_monotone(self, token_lists, t1, t2):
        lo, hi = sorted((t1, t2))
        stmts = _stmts([" ".join(t) for t in token_lists])
        embed = _embed()
        assert len(dedup_statements(stmts, embed, lo)[0]) <= len(dedup_statements(stmts, embed, hi)[0])

    @settings(max_examples=25, deadline=None)
    @given(st.lists(st.lists(st.sampled_from("abcdefgh"), min_size=1, max_size=6), min_size=1, max_size=8))
    def test_threshold_one_keeps_distinct(self, token_lists):
        # distinct token multisets still coincide in direction when their counts are proportional
        texts = [" ".join(t) for t in token_lists]
        stmts = _stmts(texts)
        embed = _embed()
        vecs = np.asarray(embed(texts))
        unit = vecs / np.linalg.norm(vecs, axis=1, keepdims=True)
        distinct = len({tuple(np.round(u, 12)) for u in unit})
        assert len(dedup_statements(stmts, embed, 1.0)[0]) == distinct


class TestReview:
    def _corpus(self):
        anchors = _anchors()
        return run_matrix(anchors, _selections(anchors), TEXTS, MockChatClient(), templates=TEMPLATES).statements

    def test_all_keep_identity(self, tmp_path):
        stmts = self._corpus()
        review_export(stmts, tmp_path / "r.csv")
        inst = review_import(read_review_sheet(tmp_path / "r.csv"), stmts)
        items = inst["items"]["considerations"] + inst["items"]["preferences"]
        assert sorted(i["statement_id"] for i in items) == sorted(s.id for s in stmts)
        by_id = {s.id: s.text for s in stmts}
        assert all(i["text"] == by_id[i["statement_id"]] for i in items)

    def test_final_selection_shape(self, tmp_path):
        stmts = self._corpus()
        review_export(stmts, tmp_path / "r.csv")
        rows = read_review_sheet(tmp_path / "r.csv")
        cons = [r for r, s in zip(rows, stmts) if s.role == "consideration"]
        pols = [r for r, s in zip(rows, stmts) if s.role == "policy"]
        keep = {r.statement_id for r in cons[::7][:28]} | {r.statement_id for r in pols[::3][:8]}
        edited = next(iter(sorted(keep)))
        decided = [
            ReviewRow(r.statement_id, r.text, r.category, r.leaning,
                      "edit" if r.statement_id == edited else ("keep" if r.statement_id in keep else "drop"),
                      "Reworded statement" if r.statement_id == edited else None)
            for r in rows
        ]
        inst = review_import(decided, stmts)
        assert len(inst["considerations"]) == 28 and len(inst["preferences"]) == 8
        assert inst["considerations"][:2] == ["C01", "C02"] and inst["preferences"][-1] == "P08"
        texts = [i["text"] for i in inst["items"]["considerations"] + inst["items"]["preferences"]]
        assert "Reworded statement" in texts

    def test_edit_without_text(self):
        stmts = _stmts(["a"])
        with pytest.raises(ReviewError) as info:
            review_import([ReviewRow("s000", "a", "c", "centrist", "edit")], stmts)
        assert info.value.offending_ids == ["edit_without_text:s000"]

    def test_unknown_and_missing(self):
        stmts = _stmts(["a", "b"])
        with pytest.raises(ReviewError) as info:
            review_import([ReviewRow("s000", "a", "c", "x"), ReviewRow("zzz", "?", "c", "x")], stmts)
        assert set(info.value.offending_ids) == {"unknown:zzz", "missing:s001"}

    def test_duplicate_row(self):
        stmts = _stmts(["a"])
        with pytest.raises(ReviewError, match="discrepanc"):
            review_import([ReviewRow("s000", "a", "c", "x")] * 2, stmts)
